"""Pure renderers: persisted JSON reports in, text tables (and plots) out.

No science is recomputed here; rendering the same JSON twice yields
byte-identical text (timestamps never enter the renderers).
"""

import json
from pathlib import Path


def _pct(x):
    return "-" if x is None else f"{100.0 * x:6.2f}"


def _fmt_row(label, cells, width=10):
    return label.ljust(24) + "".join(str(c).rjust(width) for c in cells)


def render_eval_report(doc: dict) -> str:
    """Accuracy row plus one attack-success row per attack, models as columns."""
    models = sorted(doc["models"])
    lines = [f"# {doc['config'].get('attack', 'attack run')} "
             f"(config {doc['config_fingerprint']})"]
    lines.append(_fmt_row("Model", models))
    lines.append("-" * len(lines[-1]))
    lines.append(_fmt_row("Accuracy %", [_pct(doc["models"][m]["clean_accuracy"]) for m in models]))
    attack_names = sorted({a for m in models for a in doc["models"][m]["attacks"]})
    for attack in attack_names:
        cells = []
        for m in models:
            entry = doc["models"][m]["attacks"].get(attack)
            cells.append(_pct(entry["success_rate"]) if entry else "-")
        lines.append(_fmt_row(f"Attack success {attack} %", cells))
    for m in models:
        for attack, entry in sorted(doc["models"][m]["attacks"].items()):
            lines.append(f"  [{m}/{attack}] {entry['numerator']}/{entry['denominator']} "
                         f"eligible of {doc['config'].get('eval_size', '?')} attacked")
    return "\n".join(lines) + "\n"


def render_summary(doc: dict) -> str:
    """Clean accuracy and PGD success per model (the generalization/robustness
    summary table)."""
    models = sorted(doc)
    lines = [_fmt_row("Model", models)]
    lines.append("-" * len(lines[0]))
    lines.append(_fmt_row("Accuracy %", [_pct(doc[m]["clean_accuracy"]) for m in models]))
    lines.append(_fmt_row("Attack success pgd %", [_pct(doc[m]["pgd_success"]) for m in models]))
    flags = [m for m in models if doc[m].get("zero_denominator")]
    if flags:
        lines.append(f"zero-denominator models: {', '.join(flags)}")
    return "\n".join(lines) + "\n"


def render_judgment_table(doc: dict, class_names=None) -> str:
    names = class_names or [str(i) for i in range(10)]
    models = doc["model_names"]
    counts = doc["counts"]
    shown = [c for c in range(10) if any(row[c] for row in counts)]
    lines = [_fmt_row("Class", models)]
    lines.append("-" * len(lines[0]))
    for c in shown:
        lines.append(_fmt_row(names[c], [counts[m][c] for m in range(len(models))]))
    lines.append(f"(probe size {doc['probe_size']})")
    return "\n".join(lines) + "\n"


def render_weight_sweep(doc: dict) -> str:
    lines = [f"# style-weight sweep vs {doc['model']}"]
    lines.append(_fmt_row("style weight", ["success %"]))
    lines.append("-" * len(lines[-1]))
    for w in doc["weights"]:
        entry = doc["success"][str(w)] if str(w) in doc["success"] else doc["success"][w]
        lines.append(_fmt_row(f"{w:g}", [_pct(entry["success_rate"])]))
    return "\n".join(lines) + "\n"


def render_rnr_sweep(doc: dict, class_names=None) -> str:
    names = class_names or [str(i) for i in range(10)]
    lines = ["# non-robust:robust proportion sweep (targeted success %)"]
    cols = []
    table = doc["table"]
    targets = sorted(table, key=int) if isinstance(table, dict) else []
    for t in targets:
        for m in sorted(table[t]):
            cols.append((t, m))
    lines.append(_fmt_row("proportion", [f"{names[int(t)]}|{m}" for t, m in cols], width=14))
    lines.append("-" * len(lines[-1]))
    for ratio in doc["ratios"]:
        cells = []
        for t, m in cols:
            entry = table[t][m][ratio]
            cells.append(_pct(entry["success_rate"]))
        lines.append(_fmt_row(ratio, cells, width=14))
    return "\n".join(lines) + "\n"


def render_defense(doc: dict) -> str:
    models = sorted(doc["accuracy"])
    lines = [_fmt_row("Model", models)]
    lines.append("-" * len(lines[0]))
    lines.append(_fmt_row("Accuracy %", [_pct(doc["accuracy"][m]) for m in models]))
    for attack, row in sorted(doc["attacks"].items()):
        lines.append(_fmt_row(f"Attack success {attack} %",
                              [_pct(row[m]["success_rate"]) for m in models]))
    return "\n".join(lines) + "\n"


def render_transfer_matrix(doc: dict) -> str:
    gens = sorted(doc)
    victims = sorted({v for g in gens for v in doc[g]})
    lines = [_fmt_row("generator \\ victim", victims)]
    lines.append("-" * len(lines[0]))
    for g in gens:
        lines.append(_fmt_row(g, [_pct(doc[g].get(v, {}).get("success_rate")) for v in victims]))
    return "\n".join(lines) + "\n"


RENDERERS = {
    "eval": render_eval_report,
    "summary": render_summary,
    "judgments": render_judgment_table,
    "weight_sweep": render_weight_sweep,
    "rnr_sweep": render_rnr_sweep,
    "defense": render_defense,
    "transfer": render_transfer_matrix,
}


def render_report_file(path) -> str:
    """Dispatch on the report's declared kind."""
    doc = json.loads(Path(path).read_text())
    kind = doc.get("report_kind")
    if kind is None and "models" in doc:
        kind = "eval"
    renderer = RENDERERS.get(kind)
    if renderer is None:
        raise ValueError(f"{path}: unknown report kind {kind!r}")
    payload = doc.get("payload", doc)
    return renderer(payload)


def plot_weight_sweep(doc: dict, path):
    """Success-vs-weight curve; optional (matplotlib only imported here)."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    weights = doc["weights"]
    rates = []
    for w in weights:
        entry = doc["success"][str(w)] if str(w) in doc["success"] else doc["success"][w]
        rates.append(100.0 * (entry["success_rate"] or 0.0))
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(weights, rates, marker="o")
    ax.set_xlabel("style weight")
    ax.set_ylabel("untargeted success (%)")
    ax.set_title(f"style-weight sweep vs {doc['model']}")
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
