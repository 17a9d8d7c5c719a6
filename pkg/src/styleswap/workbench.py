"""Command-line workbench: the only human-facing surface.

Canonical order for a fresh cache:

    styleswap prepare-data
    styleswap train --models RNB,VGGB,PGDAT,IAT
    styleswap prepare-data --derived
    styleswap train --models RB,NRB
    styleswap probe-features / select-styles / attack / sweep / transfer-matrix
    styleswap report <run_dir>

Exit codes: 0 success, 1 configuration validation failure, 2 runtime failure.
"""

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import harness as H
from . import pipeline as P
from . import reports as R
from . import selection as sel
from .config import ConfigError, RunManifest, load_config
from .datasets import channel_stats
from .probe import mine_disagreements, robustness_generalization_summary, tabulate_judgments
from .synthetic import CLASS_NAMES
from .utils import FORMAT_VERSION, strict_determinism


def _save_report(run_dir, name, kind, payload, manifest=None, fingerprint=""):
    doc = {"format_version": FORMAT_VERSION, "report_kind": kind,
           "config_fingerprint": fingerprint,
           "created": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
           "payload": payload}
    path = Path(run_dir) / "reports" / f"{name}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=float))
    if manifest:
        manifest.record_output(path)
    return path


def _engine(cfg):
    e = cfg["engine"]
    return H.EngineConfig(alpha=e["alpha"], beta=e["beta"],
                          content_mode=e["content_mode"],
                          budget_multiplier=e["budget_multiplier"],
                          max_iters=e["max_iters"], step_size=e["step_size"],
                          adam_eps=e["adam_eps"], patience=e["patience"],
                          plateau_rel=e["plateau_rel"],
                          probe_iters=cfg["selector"]["probe_iters"])


def _strategy(cfg, ratio=None):
    s = cfg["selector"]
    if s["strategy"] == "confidence_weighted":
        return sel.SelectionStrategy.confidence(ratio or s["ratio"],
                                                probe_mode=s["probe_mode"],
                                                pool_size=s["pool_size"])
    return sel.SelectionStrategy(s["strategy"], probe_mode="raw_image",
                                 pool_size=s["pool_size"])


def _selection_models(cfg):
    missing = [n for n in ("RB", "NRB") if not P.has_model(cfg, n)]
    if missing and cfg["selector"]["strategy"] == "confidence_weighted":
        raise P.MissingPrerequisite(
            f"confidence-weighted selection needs the RB and NRB models; run: "
            f"styleswap prepare-data --derived && styleswap train --models {','.join(missing)}")
    r = P.get_model(cfg, "RB") if P.has_model(cfg, "RB") else None
    nr = P.get_model(cfg, "NRB") if P.has_model(cfg, "NRB") else None
    return r, nr


def _models_arg(cfg, arg, default):
    if arg:
        names = [m.strip() for m in arg.split(",") if m.strip()]
    else:
        names = [n for n in default if P.has_model(cfg, n)]
        if not names:
            raise P.MissingPrerequisite(
                "no trained models found; run: styleswap train")
    return {n: P.get_model(cfg, n) for n in names}


def cmd_prepare_data(cfg, args):
    run_dir = Path(cfg["run"]["out_dir"])
    manifest = RunManifest(run_dir, cfg, "prepare-data")
    train = P.base_dataset(cfg, "train")
    test = P.base_dataset(cfg, "test")
    manifest.record_input("train", train.fingerprint())
    manifest.record_input("test", test.fingerprint())
    built = {"train": len(train), "test": len(test),
             "channel_stats": channel_stats(train)}
    if args.derived:
        nr = P.nonrobust_dataset(cfg)
        rb = P.robust_dataset(cfg)
        manifest.record_input("nonrobust", nr.fingerprint())
        manifest.record_input("robust", rb.fingerprint())
        built["nonrobust"] = len(nr)
        built["robust"] = len(rb)
    _save_report(run_dir, "prepare-data", "summary_note", built, manifest)
    manifest.complete()
    print(json.dumps(built, default=float))
    return 0


def cmd_train(cfg, args):
    run_dir = Path(cfg["run"]["out_dir"])
    manifest = RunManifest(run_dir, cfg, "train")
    names = [m.strip() for m in (args.models or ",".join(P.DESK_DEFAULT_MODELS)).split(",")
             if m.strip()]
    summary = {}
    for name in names:
        handle = P.train_entry(cfg, name)
        manifest.record_input(name, handle.fingerprint())
        summary[name] = {"clean_test_accuracy": handle.metadata.get("clean_test_accuracy"),
                         "dir": str(P.model_dir(cfg, name))}
        print(f"{name}: acc={handle.metadata.get('clean_test_accuracy')}")
    _save_report(run_dir, "train", "summary_note", summary, manifest)
    manifest.complete()
    return 0


def cmd_probe_features(cfg, args):
    run_dir = Path(cfg["run"]["out_dir"])
    manifest = RunManifest(run_dir, cfg, "probe-features")
    pc = cfg["probe"]
    needed = ["RB", "NRB", "RNB", "IAT", "PGDAT"]
    models = {n: P.get_model(cfg, n) for n in needed}
    test = P.base_dataset(cfg, "test")
    mined = mine_disagreements(models["RB"], models["NRB"], test, pc["epsilon"],
                               pc["steps"], pc["probe_size"], pc["r_target"],
                               pc["nr_target"], seed=cfg["run"]["seed"])
    judged = tabulate_judgments(mined.examples,
                                [(n, models[n]) for n in needed]) if mined.examples else None
    summary = robustness_generalization_summary(
        {n: models[n] for n in needed}, test,
        {"epsilon": cfg["attack"]["pgd_epsilon"], "steps": cfg["attack"]["pgd_steps"],
         "step_size": cfg["attack"]["pgd_step_size"], "seed": cfg["run"]["seed"]})
    payload = {"mined": len(mined.examples), "want": mined.want,
               "shortfall": mined.shortfall, "searched": mined.searched}
    _save_report(run_dir, "feature-probe-mining", "summary_note", payload, manifest)
    if judged:
        _save_report(run_dir, "feature-probe-judgments", "judgments",
                     judged.to_json(), manifest)
    _save_report(run_dir, "robustness-summary", "summary", summary, manifest)
    manifest.complete()
    if judged:
        print(judged.render_text(class_names=list(CLASS_NAMES)))
    print(R.render_summary(summary))
    return 0


def cmd_select_styles(cfg, args):
    run_dir = Path(cfg["run"]["out_dir"])
    manifest = RunManifest(run_dir, cfg, "select-styles")
    strategy = _strategy(cfg, ratio=args.ratio)
    r_model, nr_model = _selection_models(cfg)
    pool = P.base_dataset(cfg, "train")
    extractor = P.build_extractor(cfg)
    seed = cfg["run"]["seed"]
    out = {}
    for target in range(10):
        records = sel.select_style_sources(pool, target, strategy, k=args.k,
                                           seed=seed, r_model=r_model,
                                           nr_model=nr_model, extractor=extractor,
                                           probe_iters=cfg["selector"]["probe_iters"])
        path = Path(run_dir) / "selections" / f"target-{target}.json"
        sel.save_selection_manifest(path, strategy, target, args.k, seed, records)
        manifest.record_output(path)
        out[target] = [r.to_json() for r in records]
    _save_report(run_dir, "selections", "summary_note", out, manifest)
    manifest.complete()
    print(f"wrote selection manifests for 10 classes under {run_dir}/selections")
    return 0


def cmd_attack(cfg, args):
    run_dir = Path(cfg["run"]["out_dir"])
    manifest = RunManifest(run_dir, cfg, "attack")
    models = _models_arg(cfg, args.models, P.ENTRY_SPECS.keys())
    test = P.base_dataset(cfg, "test")
    eval_ds = H.stratified_subset(test, cfg["data"]["eval_subset"], cfg["run"]["seed"])
    extractor = P.build_extractor(cfg)
    strategy = _strategy(cfg)
    engine = _engine(cfg)
    r_model, nr_model = _selection_models(cfg)
    pool = P.base_dataset(cfg, "train")
    records_dir = run_dir / "records"
    seed = cfg["run"]["seed"]

    if args.targeted is not None:
        report, records, crafted = H.run_targeted_style_attack(
            models, eval_ds, args.targeted, strategy, engine, extractor, pool,
            r_model, nr_model, seed=seed, out_dir=records_dir)
        H.verify_report(report, records)
        path = _save_report(run_dir, f"targeted-{args.targeted}", "eval",
                            report.to_json(), manifest, report.fingerprint())
    else:
        report, records, crafted = H.run_untargeted_style_attack(
            models, eval_ds, strategy, engine, extractor, pool, r_model,
            nr_model, seed=seed, out_dir=records_dir)
        ac = cfg["attack"]
        for name, handle in models.items():
            _, rows = H.pgd_attack(handle, eval_ds, ac["pgd_epsilon"],
                                   ac["pgd_steps"], ac["pgd_step_size"], seed=seed)
            f = H.save_records(rows, records_dir / f"{name}-pgd.jsonl")
            report.add_attack(name, "pgd", rows, targeted=False, records_file=f)
            records[(name, "pgd")] = rows
        H.verify_report(report, records)
        path = _save_report(run_dir, "untargeted", "eval", report.to_json(),
                            manifest, report.fingerprint())
    adv_path = run_dir / "records" / "adversarial.npz"
    np.savez(adv_path, images=crafted.adv_images, ids=np.asarray(crafted.ids, object),
             targets=crafted.targets)
    manifest.record_output(adv_path)
    manifest.complete()
    print(R.render_report_file(path))
    return 0


def cmd_sweep(cfg, args):
    run_dir = Path(cfg["run"]["out_dir"])
    manifest = RunManifest(run_dir, cfg, f"sweep-{args.kind}")
    test = P.base_dataset(cfg, "test")
    eval_ds = H.stratified_subset(test, cfg["data"]["eval_subset"], cfg["run"]["seed"])
    extractor = P.build_extractor(cfg)
    engine = _engine(cfg)
    strategy = _strategy(cfg)
    r_model, nr_model = _selection_models(cfg)
    pool = P.base_dataset(cfg, "train")
    seed = cfg["run"]["seed"]
    if args.kind == "weight":
        name = args.models.split(",")[0] if args.models else "RNB"
        model = P.get_model(cfg, name)
        table, runs = H.sweep_style_weight(
            model, name, eval_ds, cfg["attack"]["sweep_weights"], strategy,
            engine, extractor, pool, r_model, nr_model, seed=seed,
            out_dir=run_dir / "records")
        path = _save_report(run_dir, "sweep-weight", "weight_sweep", table, manifest)
        for w, crafted in runs.items():
            grid = H.render_adversarial_grid(
                crafted.clean_images[:10], {0: crafted.adv_images[:10]},
                run_dir / "grids" / f"sweep-w{w:g}.png")
            manifest.record_output(grid)
        try:
            R.plot_weight_sweep(table, run_dir / "reports" / "sweep-weight.png")
        except ImportError:
            pass
    elif args.kind == "rnr":
        models = _models_arg(cfg, args.models or "RNB,PGDAT", ("RNB", "PGDAT"))
        table = H.sweep_rnr_proportion(
            models, eval_ds, cfg["attack"]["rnr_ratios"], cfg["attack"]["rnr_targets"],
            engine, extractor, pool, r_model, nr_model, seed=seed,
            probe_mode=cfg["selector"]["probe_mode"])
        path = _save_report(run_dir, "sweep-rnr", "rnr_sweep", table, manifest)
    else:
        raise ConfigError(f"unknown sweep kind {args.kind!r}")
    manifest.complete()
    print(R.render_report_file(path))
    return 0


def cmd_transfer_matrix(cfg, args):
    run_dir = Path(cfg["run"]["out_dir"])
    manifest = RunManifest(run_dir, cfg, "transfer-matrix")
    test = P.base_dataset(cfg, "test")
    eval_ds = H.stratified_subset(test, cfg["data"]["eval_subset"], cfg["run"]["seed"])
    extractor = P.build_extractor(cfg)
    engine = _engine(cfg)
    strategy = _strategy(cfg)
    pool = P.base_dataset(cfg, "train")
    pairs = {"ResNet18": ("RB", "NRB"), "VGG19": ("VGGR", "VGGNR"),
             "DenseNet121": ("D121R", "D121NR"), "GoogLeNet": ("GNR", "GNNR")}
    generators = {}
    for gen, (r, nr) in pairs.items():
        if P.has_model(cfg, r) and P.has_model(cfg, nr):
            generators[gen] = (P.get_model(cfg, r), P.get_model(cfg, nr))
    if not generators:
        raise P.MissingPrerequisite(
            "no (R, NR) selection pairs trained; run: styleswap train --models RB,NRB")
    victims = _models_arg(cfg, args.models, ("RNB", "VGGB", "D121B", "GNB"))
    matrix, _ = H.transferability_matrix(generators, victims, eval_ds, strategy,
                                         engine, extractor, pool,
                                         seed=cfg["run"]["seed"],
                                         out_dir=run_dir / "records")
    path = _save_report(run_dir, "transfer-matrix", "transfer", matrix, manifest)
    manifest.complete()
    print(R.render_report_file(path))
    return 0


def cmd_report(cfg, args):
    run_dir = Path(args.run_dir or cfg["run"]["out_dir"])
    reports = sorted((run_dir / "reports").glob("*.json")) if (run_dir / "reports").is_dir() else []
    reports = [p for p in reports if json.loads(p.read_text()).get("report_kind") in R.RENDERERS]
    if not reports:
        print(f"no reports found under {run_dir}", file=sys.stderr)
        return 2
    out_dir = run_dir / "reports" / "rendered"
    out_dir.mkdir(parents=True, exist_ok=True)
    for p in reports:
        text = R.render_report_file(p)
        (out_dir / (p.stem + ".txt")).write_text(text)
        print(f"== {p.name} ==")
        print(text)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="styleswap", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--config", help="YAML/JSON config document")
    parser.add_argument("--set", action="append", default=[], metavar="PATH=VALUE",
                        help="dotted-path config override, e.g. --set engine.beta=40000")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("prepare-data", help="build and cache datasets")
    p.add_argument("--derived", action="store_true",
                   help="also construct the robust/non-robust derivatives")
    p = sub.add_parser("train", help="train zoo entries")
    p.add_argument("--models", help="comma list, e.g. RNB,PGDAT (default desk set)")
    sub.add_parser("probe-features", help="disagreement mining and judgment tables")
    p = sub.add_parser("select-styles", help="write style-selection manifests")
    p.add_argument("--ratio", default=None, help="non-robust:robust ratio, e.g. 5:5")
    p.add_argument("--k", type=int, default=3)
    p = sub.add_parser("attack", help="style attack (+ PGD baseline) evaluation")
    p.add_argument("--models", help="comma list of victim models")
    p.add_argument("--targeted", type=int, default=None, metavar="CLASS")
    p = sub.add_parser("sweep", help="style-weight or feature-proportion sweep")
    p.add_argument("--kind", choices=("weight", "rnr"), default="weight")
    p.add_argument("--models", help="model (weight sweep) or comma list (rnr)")
    p = sub.add_parser("transfer-matrix", help="generator x victim success matrix")
    p.add_argument("--models", help="comma list of victim models")
    p = sub.add_parser("report", help="render persisted reports (no recompute)")
    p.add_argument("run_dir", nargs="?", help="run directory (default: config out_dir)")
    return parser


COMMANDS = {
    "prepare-data": cmd_prepare_data,
    "train": cmd_train,
    "probe-features": cmd_probe_features,
    "select-styles": cmd_select_styles,
    "attack": cmd_attack,
    "sweep": cmd_sweep,
    "transfer-matrix": cmd_transfer_matrix,
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.set)
    except ConfigError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return 1
    except FileNotFoundError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return 1
    try:
        with strict_determinism(cfg["run"]["determinism"]):
            return COMMANDS[args.command](cfg, args)
    except ConfigError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return 1
    except P.MissingPrerequisite as e:
        print(f"missing prerequisite: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # runtime failure
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
