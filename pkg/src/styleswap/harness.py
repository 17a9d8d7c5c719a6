"""Attack orchestration and the evaluation matrix.

Crafting a style adversarial never touches the victim model: a style source
is chosen per target class (selection models only), its statistics are
transplanted onto the attacked image under the content budget, and the
result is quantized to the 8-bit pixel grid before any model sees it. All
success rates are recomputable from the persisted per-example records.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import selection as sel
from . import transfer
from .pgd import pgd_perturb
from .utils import FORMAT_VERSION, derive_seed, fingerprint_json, quantize_pixels, \
    to_uint8, torch_generator
from .zoo import evaluate_accuracy, predict

NUM_CLASSES = 10


@dataclass
class EngineConfig:
    """Stylization settings shared by every attack in a run."""
    alpha: float = 1.0
    beta: float = 80000.0
    content_mode: str = "feature"
    budget_multiplier: float = 0.9
    max_iters: int = 60
    step_size: float = 0.05
    adam_eps: float = 1500.0  # pixel-gradient scale; see transfer.stylize_batch
    patience: int = 25
    plateau_rel: float = 1e-4
    probe_iters: int = sel.PROBE_ITERS
    probe_step_size: float = sel.PROBE_STEP_SIZE

    def to_json(self):
        return dict(self.__dict__)


@dataclass
class AttackRecord:
    example_id: str
    true_label: int
    pred_before: int
    pred_after: int
    target: int | None = None
    style_source_id: str | None = None
    final_lc: float | None = None
    final_ls: float | None = None
    iterations: int | None = None
    stop_reason: str | None = None
    failed: bool = False

    @property
    def untargeted_success(self):
        return (self.pred_before == self.true_label) and (self.pred_after != self.true_label)

    @property
    def targeted_success(self):
        return self.target is not None and self.pred_after == self.target

    def success(self, targeted: bool):
        return self.targeted_success if targeted else self.untargeted_success

    def to_json(self):
        return dict(self.__dict__)


def aggregate(records, targeted: bool):
    """Success rate with the declared denominator discipline: untargeted
    counts only initially-correct examples; targeted excludes examples whose
    true label is the target."""
    if targeted:
        eligible = [r for r in records if r.true_label != r.target]
        num = sum(1 for r in eligible if r.targeted_success)
    else:
        eligible = [r for r in records if r.pred_before == r.true_label]
        num = sum(1 for r in eligible if r.untargeted_success)
    den = len(eligible)
    return {"numerator": num, "denominator": den,
            "success_rate": (num / den) if den else None}


def per_class_breakdown(records, targeted: bool):
    out = {}
    for c in range(NUM_CLASSES):
        rows = [r for r in records if r.true_label == c]
        if rows:
            out[c] = aggregate(rows, targeted)
    return out


@dataclass
class EvalReport:
    config: dict
    models: dict = field(default_factory=dict)  # name -> {clean_accuracy, attacks}
    notes: dict = field(default_factory=dict)

    def fingerprint(self):
        return fingerprint_json(self.config)

    def add_model(self, name, clean_accuracy):
        self.models.setdefault(name, {"clean_accuracy": clean_accuracy, "attacks": {}})

    def add_attack(self, model_name, attack_name, records, targeted, records_file=None):
        entry = aggregate(records, targeted)
        entry["targeted"] = targeted
        entry["per_class"] = per_class_breakdown(records, targeted)
        if records_file:
            entry["records_file"] = str(records_file)
        self.models[model_name]["attacks"][attack_name] = entry

    def to_json(self):
        return {"format_version": FORMAT_VERSION, "config_fingerprint": self.fingerprint(),
                "config": self.config, "models": self.models, "notes": self.notes}

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_json(), indent=2, sort_keys=True))
        return path


def verify_report(report: EvalReport, records_by_attack: dict):
    """Every aggregate must equal a recomputation from its records (exact)."""
    for model_name, model_entry in report.models.items():
        for attack_name, entry in model_entry["attacks"].items():
            rows = records_by_attack[(model_name, attack_name)]
            fresh = aggregate(rows, entry["targeted"])
            if (fresh["numerator"] != entry["numerator"]
                    or fresh["denominator"] != entry["denominator"]
                    or fresh["success_rate"] != entry["success_rate"]):
                raise AssertionError(
                    f"aggregate mismatch for {model_name}/{attack_name}: "
                    f"report {entry} vs recomputed {fresh}")
            if per_class_breakdown(rows, entry["targeted"]) != entry["per_class"]:
                raise AssertionError(f"per-class mismatch for {model_name}/{attack_name}")
    return True


def save_records(records, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for r in records:
            f.write(json.dumps(r.to_json(), sort_keys=True) + "\n")
    return path


def load_records(path):
    rows = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            rows.append(AttackRecord(**json.loads(line)))
    return rows


def stratified_subset(ds, n, seed=0):
    """n examples spread as evenly as possible over the classes, seeded."""
    if n > len(ds):
        raise ValueError(f"requested {n} from dataset of {len(ds)}")
    rng = np.random.default_rng(derive_seed("stratified", seed))
    per, extra = divmod(n, NUM_CLASSES)
    picks = []
    for c in range(NUM_CLASSES):
        pool = np.flatnonzero(ds.labels == c)
        take = per + (1 if c < extra else 0)
        if take > len(pool):
            raise ValueError(f"class {c} has only {len(pool)} examples, need {take}")
        picks.append(rng.choice(pool, size=take, replace=False))
    idx = np.sort(np.concatenate(picks))
    return ds.subset(idx, note=f"stratified-{n}-seed{seed}")


class AttackRun:
    """Crafted adversarial images plus per-example engine info."""

    def __init__(self, clean_images, adv_images, ids, true_labels, targets, info,
                 style_ids=None):
        self.clean_images = clean_images
        self.adv_images = adv_images
        self.ids = list(ids)
        self.true_labels = np.asarray(true_labels)
        self.targets = None if targets is None else np.asarray(targets)
        self.info = info
        self.style_ids = style_ids

    def records_for(self, model, targeted=False):
        pred_before = predict(model, self.clean_images)
        pred_after = predict(model, self.adv_images)
        rows = []
        for i in range(len(self.ids)):
            extra = self.info[i] if self.info else {}
            rows.append(AttackRecord(
                example_id=self.ids[i], true_label=int(self.true_labels[i]),
                pred_before=int(pred_before[i]), pred_after=int(pred_after[i]),
                target=None if self.targets is None else int(self.targets[i]),
                style_source_id=None if self.style_ids is None else self.style_ids[i],
                **extra))
        return rows


def pgd_attack(model, ds, epsilon, steps, step_size, targeted=None, seed=0,
               batch_size=128):
    """The perturbation baseline. targeted is None (untargeted) or a class."""
    adv_parts = []
    labels = ds.labels if targeted is None else np.full(len(ds), int(targeted))
    for lo in range(0, len(ds), batch_size):
        hi = min(lo + batch_size, len(ds))
        x = torch.from_numpy(np.array(ds.images[lo:hi]))
        y = torch.from_numpy(np.array(labels[lo:hi], dtype=np.int64))
        adv = pgd_perturb(model.module, x, y, epsilon, steps, step_size,
                          targeted=targeted is not None, random_start=epsilon > 0,
                          generator=torch_generator(derive_seed("pgd-attack", seed, lo)))
        adv_parts.append(adv.numpy())
    adv_images = quantize_pixels(np.concatenate(adv_parts)) if adv_parts \
        else np.empty((0, 3, 32, 32), np.float32)
    targets = None if targeted is None else np.full(len(ds), int(targeted))
    run = AttackRun(np.array(ds.images), adv_images, ds.ids, ds.labels, targets,
                    info=None)
    return run, run.records_for(model, targeted=targeted is not None)


def ensure_probe_images(style_records, extractor, engine: EngineConfig, seed=0):
    """Style-only probes of the selected sources, used as the content-budget
    reference (and cached on the records)."""
    missing = [c for c, r in style_records.items() if getattr(r, "probe_image", None) is None]
    if missing:
        imgs = np.stack([style_records[c].image for c in missing])
        seeds = [derive_seed("budget-probe", seed, style_records[c].source_id)
                 for c in missing]
        probes, _ = sel.synthesize_style_probe(extractor, imgs, seeds,
                                               iters=engine.probe_iters,
                                               step_size=engine.probe_step_size)
        if probes.ndim == 3:
            probes = probes[None]
        for c, p in zip(missing, probes):
            style_records[c].probe_image = p
    return {c: style_records[c].probe_image for c in style_records}


def craft_style_adversarials(contents, ids, true_labels, targets, style_records,
                             engine: EngineConfig, extractor, seed=0,
                             batch_size=64):
    """Stylize each content image with its target class's style source.

    The per-image content budget is engine.budget_multiplier times the
    content loss between the image and the style source's style-only probe
    (the loss one would suffer by ignoring content entirely).
    """
    contents = np.array(contents, dtype=np.float32)
    n = len(contents)
    probes = ensure_probe_images(style_records, extractor, engine, seed)
    styles = np.stack([style_records[int(t)].image for t in targets])
    budgets = np.empty(n)
    for i in range(n):
        ref = transfer.content_loss(probes[int(targets[i])], contents[i],
                                    engine.content_mode, extractor)
        budgets[i] = engine.budget_multiplier * ref
    seeds = [derive_seed("stylize", seed, ids[i]) for i in range(n)]

    adv = np.empty_like(contents)
    info = []
    for lo in range(0, n, batch_size):
        hi = min(lo + batch_size, n)
        results = transfer.stylize_batch(
            extractor, contents[lo:hi], styles[lo:hi], alpha=engine.alpha,
            beta=engine.beta, content_mode=engine.content_mode,
            content_budgets=budgets[lo:hi], patience=engine.patience,
            plateau_rel=engine.plateau_rel, max_iters=engine.max_iters,
            step_size=engine.step_size, adam_eps=engine.adam_eps,
            seeds=seeds[lo:hi], keep_traces=False)
        for j, r in enumerate(results):
            adv[lo + j] = r.image
            info.append({"final_lc": r.final[0], "final_ls": r.final[1],
                         "iterations": r.iterations, "stop_reason": r.stop_reason,
                         "failed": False})
    adv = quantize_pixels(adv)
    style_ids = [style_records[int(t)].source_id for t in targets]
    return AttackRun(contents, adv, ids, true_labels, targets, info, style_ids)


def select_styles_per_class(style_pool, strategy, seed, r_model=None, nr_model=None,
                            extractor=None, classes=None, probe_iters=None):
    """Top-1 style source for each target class, reused across a whole run."""
    classes = list(range(NUM_CLASSES)) if classes is None else list(classes)
    records = {}
    for c in classes:
        kwargs = {} if probe_iters is None else {"probe_iters": probe_iters}
        recs = sel.select_style_sources(style_pool, c, strategy, k=1, seed=seed,
                                        r_model=r_model, nr_model=nr_model,
                                        extractor=extractor, **kwargs)
        rec = recs[0]
        rec.probe_image = None
        records[c] = rec
    return records


def choose_untargeted_targets(true_labels, style_records, seed=0):
    """Per image: the target class with the highest selection score among
    classes != the true label (seeded uniform when the strategy is unscored)."""
    scores = {c: r.score for c, r in style_records.items()}
    targets = np.empty(len(true_labels), dtype=np.int64)
    rng = np.random.default_rng(derive_seed("untargeted-target", seed))
    classes = sorted(style_records)
    for i, y in enumerate(true_labels):
        options = [c for c in classes if c != int(y)]
        if any(scores[c] is None for c in options):
            targets[i] = rng.choice(options)
        else:
            targets[i] = max(options, key=lambda c: (scores[c], -c))
    return targets


def run_untargeted_style_attack(models, ds, strategy, engine: EngineConfig,
                                extractor, style_pool, r_model=None, nr_model=None,
                                seed=0, out_dir=None, crafted=None):
    """Craft once (victim-independent), evaluate on every model.

    Returns (report, records_by_attack, AttackRun)."""
    if crafted is None:
        style_records = select_styles_per_class(style_pool, strategy, seed,
                                                r_model, nr_model, extractor,
                                                probe_iters=engine.probe_iters)
        targets = choose_untargeted_targets(ds.labels, style_records, seed)
        crafted = craft_style_adversarials(ds.images, ds.ids, ds.labels, targets,
                                           style_records, engine, extractor, seed)
    config = {"attack": "style-untargeted", "strategy": strategy.to_json(),
              "engine": engine.to_json(), "seed": seed, "eval_size": len(ds),
              "dataset": ds.fingerprint(), "extractor": extractor.fingerprint()}
    report = EvalReport(config)
    records_by_attack = {}
    for name, handle in (models.items() if isinstance(models, dict) else models):
        report.add_model(name, evaluate_accuracy(handle, ds))
        rows = crafted.records_for(handle, targeted=False)
        records_file = None
        if out_dir:
            records_file = save_records(rows, Path(out_dir) / f"{name}-style-untargeted.jsonl")
        report.add_attack(name, "style_transfer", rows, targeted=False,
                          records_file=records_file)
        records_by_attack[(name, "style_transfer")] = rows
    return report, records_by_attack, crafted


def run_targeted_style_attack(models, ds, target, strategy, engine, extractor,
                              style_pool, r_model=None, nr_model=None, seed=0,
                              out_dir=None, style_records=None):
    """Targeted variant: eval set excludes the target class; success is
    landing exactly on the target."""
    keep = np.flatnonzero(ds.labels != target)
    eval_ds = ds.subset(keep, note=f"exclude-class-{target}")
    if style_records is None:
        style_records = select_styles_per_class(style_pool, strategy, seed,
                                                r_model, nr_model, extractor,
                                                classes=[target],
                                                probe_iters=engine.probe_iters)
    targets = np.full(len(eval_ds), int(target))
    crafted = craft_style_adversarials(eval_ds.images, eval_ds.ids, eval_ds.labels,
                                       targets, style_records, engine, extractor, seed)
    config = {"attack": "style-targeted", "target": int(target),
              "strategy": strategy.to_json(), "engine": engine.to_json(),
              "seed": seed, "eval_size": len(eval_ds), "dataset": ds.fingerprint(),
              "extractor": extractor.fingerprint()}
    report = EvalReport(config)
    records_by_attack = {}
    for name, handle in (models.items() if isinstance(models, dict) else models):
        report.add_model(name, evaluate_accuracy(handle, eval_ds))
        rows = crafted.records_for(handle, targeted=True)
        records_file = None
        if out_dir:
            records_file = save_records(rows, Path(out_dir) / f"{name}-style-target{target}.jsonl")
        report.add_attack(name, f"style_transfer_target_{target}", rows, targeted=True,
                          records_file=records_file)
        records_by_attack[(name, f"style_transfer_target_{target}")] = rows
    return report, records_by_attack, crafted


def sweep_style_weight(model, model_name, ds, weights, strategy, engine,
                       extractor, style_pool, r_model=None, nr_model=None,
                       seed=0, out_dir=None):
    """One untargeted run per style weight, shared seeds and selections."""
    if list(weights) != sorted(weights) or any(w <= 0 for w in weights):
        raise ValueError("weights must be positive and ascending")
    style_records = select_styles_per_class(style_pool, strategy, seed,
                                            r_model, nr_model, extractor,
                                            probe_iters=engine.probe_iters)
    targets = choose_untargeted_targets(ds.labels, style_records, seed)
    table = {}
    runs = {}
    for w in weights:
        cfg = EngineConfig(**{**engine.to_json(), "beta": float(w)})
        crafted = craft_style_adversarials(ds.images, ds.ids, ds.labels, targets,
                                           style_records, cfg, extractor, seed)
        rows = crafted.records_for(model, targeted=False)
        table[float(w)] = aggregate(rows, targeted=False)
        runs[float(w)] = crafted
        if out_dir:
            save_records(rows, Path(out_dir) / f"{model_name}-sweep-w{w:g}.jsonl")
    return {"model": model_name, "weights": [float(w) for w in weights],
            "success": table}, runs


def sweep_rnr_proportion(models, ds, ratios, targets, engine, extractor,
                         style_pool, r_model, nr_model, seed=0, probe_mode="style_synthesis",
                         out_dir=None):
    """Targeted success per (target class, model, non-robust:robust ratio).

    Selection manifests are returned so a style switch across ratios is
    visible; crafting is cached per selected style source."""
    results = {}
    manifests = {}
    craft_cache = {}
    for ratio in ratios:
        strategy = sel.SelectionStrategy.confidence(ratio, probe_mode=probe_mode)
        for target in targets:
            style_records = select_styles_per_class(
                style_pool, strategy, seed, r_model, nr_model, extractor,
                classes=[target], probe_iters=engine.probe_iters)
            rec = style_records[target]
            manifests[(ratio, target)] = rec.to_json()
            cache_key = (target, rec.source_id)
            if cache_key not in craft_cache:
                keep = np.flatnonzero(ds.labels != target)
                eval_ds = ds.subset(keep, note=f"exclude-class-{target}")
                craft_cache[cache_key] = craft_style_adversarials(
                    eval_ds.images, eval_ds.ids, eval_ds.labels,
                    np.full(len(eval_ds), int(target)), style_records,
                    engine, extractor, seed)
            crafted = craft_cache[cache_key]
            for name, handle in (models.items() if isinstance(models, dict) else models):
                rows = crafted.records_for(handle, targeted=True)
                results.setdefault(target, {}).setdefault(name, {})[ratio] = \
                    aggregate(rows, targeted=True)
    return {"ratios": list(ratios), "targets": list(targets),
            "table": results, "selections": {f"{r}|{t}": m for (r, t), m in manifests.items()}}


def run_defense_eval(defenses, ds, engine, extractor, style_pool, strategy,
                     r_model=None, nr_model=None, attacks=("pgd", "style"),
                     pgd_epsilon=8 / 255, pgd_steps=20, pgd_step_size=2 / 255,
                     seed=0, out_dir=None):
    """Defense comparison: success of each attack against each defense model."""
    table = {"accuracy": {}, "attacks": {a: {} for a in attacks}}
    crafted = None
    records = {}
    for name, handle in defenses.items():
        table["accuracy"][name] = evaluate_accuracy(handle, ds)
        for attack in attacks:
            if attack == "pgd":
                _, rows = pgd_attack(handle, ds, pgd_epsilon, pgd_steps,
                                     pgd_step_size, seed=seed)
            elif attack == "style":
                if crafted is None:
                    _, _, crafted = run_untargeted_style_attack(
                        {}, ds, strategy, engine, extractor, style_pool,
                        r_model, nr_model, seed=seed)
                rows = crafted.records_for(handle, targeted=False)
            else:
                raise ValueError(f"unknown attack {attack!r}")
            table["attacks"][attack][name] = aggregate(rows, targeted=False)
            records[(name, attack)] = rows
            if out_dir:
                save_records(rows, Path(out_dir) / f"defense-{name}-{attack}.jsonl")
    return table, records


def transferability_matrix(generators, victims, ds, strategy, engine, extractor,
                           style_pool, seed=0, out_dir=None):
    """Success rate per (generator, victim) cell.

    generators: name -> (r_model, nr_model) selection pair; adversarials are
    crafted once per generator and reused across every victim."""
    matrix = {}
    records = {}
    for gen_name, (r_model, nr_model) in generators.items():
        _, _, crafted = run_untargeted_style_attack(
            {}, ds, strategy, engine, extractor, style_pool, r_model, nr_model,
            seed=seed)
        matrix[gen_name] = {}
        for vic_name, handle in victims.items():
            rows = crafted.records_for(handle, targeted=False)
            matrix[gen_name][vic_name] = aggregate(rows, targeted=False)
            records[(gen_name, vic_name)] = rows
            if out_dir:
                save_records(rows, Path(out_dir) / f"transfer-{gen_name}-to-{vic_name}.jsonl")
    return matrix, records


def render_adversarial_grid(clean_images, adv_rows, path, scale=1, pad=2):
    """PNG grid: one clean row on top, one row per target class below,
    column-aligned by source example. Lossless: each cell holds the exact
    8-bit quantized tensor."""
    from PIL import Image

    clean = np.asarray(clean_images)
    n_cols = len(clean)
    for t, row in adv_rows.items():
        if len(row) != n_cols:
            raise ValueError(f"row for target {t} has {len(row)} cells, expected {n_cols}")
    rows = [clean] + [np.asarray(adv_rows[t]) for t in sorted(adv_rows)]
    cell = 32 * scale
    height = len(rows) * cell + (len(rows) + 1) * pad
    width = n_cols * cell + (n_cols + 1) * pad
    canvas = np.full((height, width, 3), 255, dtype=np.uint8)
    for r, row in enumerate(rows):
        for c in range(n_cols):
            img = to_uint8(np.asarray(row[c])).transpose(1, 2, 0)
            if scale != 1:
                img = np.repeat(np.repeat(img, scale, 0), scale, 1)
            y0 = pad + r * (cell + pad)
            x0 = pad + c * (cell + pad)
            canvas[y0:y0 + cell, x0:x0 + cell] = img
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(canvas).save(path, format="PNG")
    return path


def read_grid_cell(path, row, col, scale=1, pad=2):
    """Decode one cell back to a [0,1] float tensor (inverse of the writer)."""
    from PIL import Image

    arr = np.asarray(Image.open(path))
    cell = 32 * scale
    y0 = pad + row * (cell + pad)
    x0 = pad + col * (cell + pad)
    img = arr[y0:y0 + cell, x0:x0 + cell][::scale, ::scale]
    return img.transpose(2, 0, 1).astype(np.float32) / 255.0
