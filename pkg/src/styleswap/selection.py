"""Style-source selection: who donates the style features for an attack.

Three strategies: a uniform draw over the whole pool, a uniform draw within
the target class, and the confidence-weighted strategy that scores each
candidate by how confidently the robust-feature and non-robust-feature
models judge its style as the target class.
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import transfer
from .utils import FORMAT_VERSION, derive_seed
from .zoo import classify

PROBE_MODES = ("style_synthesis", "raw_image")
STRATEGY_KINDS = ("random", "random_from_target_class", "confidence_weighted")
PROBE_ITERS = 500
PROBE_STEP_SIZE = 0.02


@dataclass
class StyleSourceRecord:
    source_id: str
    label: int
    probe_mode: str
    conf_r: float | None
    conf_nr: float | None
    w_r: float
    w_nr: float
    score: float | None
    image: np.ndarray = None  # carried for attack use, not serialized

    def to_json(self):
        return {"source_id": self.source_id, "label": self.label,
                "probe_mode": self.probe_mode, "conf_r": self.conf_r,
                "conf_nr": self.conf_nr, "w_r": self.w_r, "w_nr": self.w_nr,
                "score": self.score}


@dataclass(frozen=True)
class SelectionStrategy:
    kind: str = "confidence_weighted"
    w_r: float = 0.5
    w_nr: float = 0.5
    probe_mode: str = "style_synthesis"
    pool_size: int | None = None

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise ValueError(f"unknown strategy kind {self.kind!r}")
        if self.probe_mode not in PROBE_MODES:
            raise ValueError(f"unknown probe mode {self.probe_mode!r}")
        if self.w_r < 0 or self.w_nr < 0 or self.w_r + self.w_nr <= 0:
            raise ValueError("weights must be non-negative and not both zero")
        total = self.w_r + self.w_nr
        object.__setattr__(self, "w_r", self.w_r / total)
        object.__setattr__(self, "w_nr", self.w_nr / total)

    @classmethod
    def confidence(cls, ratio="5:5", probe_mode="style_synthesis", pool_size=None):
        """ratio is written non-robust-first, e.g. '3:7' means w_NR=0.3, w_R=0.7."""
        nr, r = (float(p) for p in str(ratio).split(":"))
        return cls("confidence_weighted", w_r=r, w_nr=nr,
                   probe_mode=probe_mode, pool_size=pool_size)

    def to_json(self):
        return {"kind": self.kind, "w_r": self.w_r, "w_nr": self.w_nr,
                "probe_mode": self.probe_mode, "pool_size": self.pool_size}


def synthesize_style_probe(extractor, style_images, seeds, iters=PROBE_ITERS,
                           step_size=PROBE_STEP_SIZE):
    """Style-only reconstruction from seeded noise (content weight 0), so the
    confidence models judge the candidate's style rather than its content.

    Accepts one image + one seed, or a batch + seed list. Returns the probe
    image(s) and a per-probe dict with the start/final style losses.
    """
    arr = np.array(style_images, dtype=np.float32)
    single = arr.ndim == 3
    if single:
        arr = arr[None]
        seeds = [seeds]
    results = transfer.stylize_batch(
        extractor, arr, arr, alpha=0.0, beta=1.0, content_mode="feature",
        max_iters=iters, patience=iters, step_size=step_size,
        seeds=list(seeds), init="noise", keep_traces=False)
    probes = np.stack([r.image for r in results])
    info = [{"style_loss_start": r.initial[1], "style_loss_final": r.final[1],
             "iterations": r.iterations} for r in results]
    return (probes[0], info[0]) if single else (probes, info)


def score_style_candidate(image, source_id, label, target, r_model, nr_model,
                          w_r, w_nr, probe_mode="style_synthesis",
                          extractor=None, probe_image=None,
                          seed=0) -> StyleSourceRecord:
    """Confidence-weighted score of one candidate for one target class."""
    if w_r < 0 or w_nr < 0:
        raise ValueError("weights must be non-negative")
    if abs(w_r + w_nr - 1.0) > 1e-9:
        raise ValueError("weights must be normalized to sum 1")
    if probe_mode == "style_synthesis":
        if probe_image is None:
            if extractor is None:
                raise ValueError("style_synthesis probing requires an extractor")
            probe_image, _ = synthesize_style_probe(extractor, image, seed)
        judged = probe_image
    elif probe_mode == "raw_image":
        judged = image
    else:
        raise ValueError(f"unknown probe mode {probe_mode!r}")
    conf_r = float(classify(r_model, judged)[target])
    conf_nr = float(classify(nr_model, judged)[target])
    return StyleSourceRecord(source_id, int(label), probe_mode, conf_r, conf_nr,
                             float(w_r), float(w_nr),
                             float(w_r * conf_r + w_nr * conf_nr), image=np.array(image))


def select_style_sources(pool, target, strategy: SelectionStrategy, k, seed=0,
                         r_model=None, nr_model=None, extractor=None,
                         probe_iters=PROBE_ITERS) -> list:
    """Ranked style sources for one target class under the given strategy.

    confidence_weighted scores target-class candidates and returns the top k
    by score (id tie-break); random strategies are seeded draws without
    replacement. Deterministic given (pool, strategy, seed).
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(pool) == 0:
        raise ValueError("pool is empty")
    rng = np.random.default_rng(derive_seed("select", strategy.kind, seed, target))

    if strategy.kind == "random":
        if k > len(pool):
            raise ValueError(f"k={k} exceeds pool size {len(pool)}")
        idx = rng.choice(len(pool), size=k, replace=False)
        return [StyleSourceRecord(pool.ids[i], int(pool.labels[i]), "raw_image",
                                  None, None, strategy.w_r, strategy.w_nr, None,
                                  image=np.array(pool.images[i])) for i in idx]

    candidates = np.flatnonzero(pool.labels == target)
    if len(candidates) == 0:
        raise ValueError(f"pool contains no examples of target class {target}")

    if strategy.kind == "random_from_target_class":
        if k > len(candidates):
            raise ValueError(f"k={k} exceeds target-class pool size {len(candidates)}")
        idx = rng.choice(candidates, size=k, replace=False)
        return [StyleSourceRecord(pool.ids[i], int(pool.labels[i]), "raw_image",
                                  None, None, strategy.w_r, strategy.w_nr, None,
                                  image=np.array(pool.images[i])) for i in idx]

    # confidence_weighted
    if r_model is None or nr_model is None:
        raise ValueError("confidence_weighted selection requires r_model and nr_model")
    if strategy.pool_size is not None and strategy.pool_size < len(candidates):
        candidates = rng.choice(candidates, size=strategy.pool_size, replace=False)
    if k > len(candidates):
        raise ValueError(f"k={k} exceeds candidate pool size {len(candidates)}")

    probes = None
    if strategy.probe_mode == "style_synthesis":
        if extractor is None:
            raise ValueError("style_synthesis probing requires an extractor")
        probe_seeds = [derive_seed("probe", seed, pool.ids[i]) for i in candidates]
        probes, _ = synthesize_style_probe(
            extractor, pool.images[candidates], probe_seeds, iters=probe_iters)
        if probes.ndim == 3:
            probes = probes[None]
    records = []
    for j, i in enumerate(candidates):
        records.append(score_style_candidate(
            np.array(pool.images[i]), pool.ids[i], int(pool.labels[i]), target,
            r_model, nr_model, strategy.w_r, strategy.w_nr,
            probe_mode=strategy.probe_mode,
            probe_image=None if probes is None else probes[j]))
    records.sort(key=lambda r: (-r.score, r.source_id))
    return records[:k]


def save_selection_manifest(path, strategy, target, k, seed, records):
    """Persist a selection so attack runs are replayable."""
    doc = {"format_version": FORMAT_VERSION, "strategy": strategy.to_json(),
           "target": int(target), "k": int(k), "seed": int(seed),
           "records": [r.to_json() for r in records]}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True))
    return path


def load_selection_manifest(path):
    return json.loads(Path(path).read_text())
