"""Feature-level analysis: mine inputs the robust-only and non-robust-only
models disagree on, then tabulate how the other models judge them."""

from dataclasses import dataclass, field

import numpy as np
import torch

from .pgd import pgd_perturb
from .utils import derive_seed, torch_generator
from .zoo import evaluate_accuracy, predict

NUM_CLASSES = 10


@dataclass
class DisagreementExample:
    image: np.ndarray
    source_id: str
    r_label: int
    nr_label: int
    perturbation_norm: float

    def __post_init__(self):
        if self.r_label == self.nr_label:
            raise ValueError("disagreement requires r_label != nr_label")


@dataclass
class MiningResult:
    examples: list
    want: int
    searched: int
    shortfall: bool = field(init=False)

    def __post_init__(self):
        self.shortfall = len(self.examples) < self.want


def mine_disagreements(r_model, nr_model, seed_ds, epsilon, steps, want,
                       r_target, nr_target, seed=0, step_size=None,
                       batch_size=128) -> MiningResult:
    """Find images judged r_target by the robust-feature model and nr_target
    by the non-robust-feature model.

    Starts from clean seed images of class r_target and runs a targeted PGD
    toward nr_target under the non-robust model, keeping candidates whose
    robust-model label stays at r_target. Returns what was found (the
    shortfall flag is set if the seed pool ran out before `want`).
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be > 0")
    if r_target == nr_target:
        raise ValueError("r_target and nr_target must differ")
    if want == 0:
        return MiningResult([], 0, 0)
    step = step_size if step_size is not None else max(epsilon / 8.0, 1e-8)
    pool = np.flatnonzero(seed_ds.labels == r_target)
    rng = np.random.default_rng(derive_seed("mine", seed))
    pool = rng.permutation(pool)

    found, searched = [], 0
    for lo in range(0, len(pool), batch_size):
        idx = pool[lo:lo + batch_size]
        searched += len(idx)
        x = torch.from_numpy(np.array(seed_ds.images[idx]))
        tgt = torch.full((len(idx),), nr_target, dtype=torch.long)
        adv = pgd_perturb(nr_model.module, x, tgt, epsilon, steps, step,
                          targeted=True, random_start=True,
                          generator=torch_generator(derive_seed("mine-pgd", seed, lo)))
        adv_np = adv.numpy()
        r_pred = predict(r_model, adv_np)
        nr_pred = predict(nr_model, adv_np)
        keep = (r_pred == r_target) & (nr_pred == nr_target)
        norms = np.abs(adv_np - np.array(seed_ds.images[idx])).max(axis=(1, 2, 3))
        for j in np.flatnonzero(keep):
            found.append(DisagreementExample(adv_np[j], seed_ds.ids[idx[j]],
                                             int(r_pred[j]), int(nr_pred[j]),
                                             float(norms[j])))
            if len(found) == want:
                return MiningResult(found, want, searched)
    return MiningResult(found, want, searched)


@dataclass
class JudgmentTable:
    model_names: list
    counts: np.ndarray  # (n_models, 10) integer class counts
    probe_size: int

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.shape != (len(self.model_names), NUM_CLASSES):
            raise ValueError("counts must be (n_models, 10)")
        if not (self.counts.sum(axis=1) == self.probe_size).all():
            raise ValueError("every row must sum to the probe size")

    def fraction(self, model_name, cls):
        row = self.counts[self.model_names.index(model_name)]
        return row[cls] / self.probe_size

    def to_json(self):
        return {"probe_size": self.probe_size, "model_names": list(self.model_names),
                "counts": self.counts.tolist()}

    def render_text(self, class_names=None):
        """Text table shaped like the judged-category tables: one row per
        class that received votes, one column per model."""
        names = class_names or [str(c) for c in range(NUM_CLASSES)]
        shown = [c for c in range(NUM_CLASSES) if self.counts[:, c].any()]
        width = max([len(n) for n in self.model_names] + [8])
        header = "Class".ljust(12) + "".join(m.rjust(width + 2) for m in self.model_names)
        lines = [header, "-" * len(header)]
        for c in shown:
            row = names[c].ljust(12) + "".join(
                str(int(self.counts[m, c])).rjust(width + 2)
                for m in range(len(self.model_names)))
            lines.append(row)
        lines.append(f"(probe size {self.probe_size})")
        return "\n".join(lines)


def tabulate_judgments(probe_examples, models) -> JudgmentTable:
    """Class-vote counts over the mined probe set, one row per model.

    models: list of (name, handle) pairs or dict name -> handle.
    """
    if len(probe_examples) == 0:
        raise ValueError("probe set is empty")
    items = list(models.items()) if isinstance(models, dict) else list(models)
    images = np.stack([e.image for e in probe_examples])
    counts = []
    for _, handle in items:
        preds = predict(handle, images)
        counts.append(np.bincount(preds, minlength=NUM_CLASSES))
    return JudgmentTable([n for n, _ in items], np.stack(counts), len(probe_examples))


def robustness_generalization_summary(models, clean_ds, pgd_config=None) -> dict:
    """Per-model clean accuracy and PGD attack success rate.

    Success is measured on initially-correctly-classified examples; a model
    with an empty success denominator gets success None plus a flag.
    """
    cfg = {"epsilon": 8 / 255, "steps": 20, "step_size": 2 / 255, "seed": 0}
    cfg.update(pgd_config or {})
    items = list(models.items()) if isinstance(models, dict) else list(models)
    out = {}
    for name, handle in items:
        acc = evaluate_accuracy(handle, clean_ds)
        preds = predict(handle, clean_ds.images)
        correct = preds == clean_ds.labels
        entry = {"clean_accuracy": acc, "n_initially_correct": int(correct.sum()),
                 "zero_denominator": not bool(correct.any())}
        if entry["zero_denominator"]:
            entry["pgd_success"] = None
        else:
            x = torch.from_numpy(np.array(clean_ds.images[correct]))
            y = torch.from_numpy(np.array(clean_ds.labels[correct]))
            adv = pgd_perturb(handle.module, x, y, cfg["epsilon"], cfg["steps"],
                              cfg["step_size"], random_start=True,
                              generator=torch_generator(derive_seed("summary", cfg["seed"], name)))
            adv_pred = predict(handle, adv.numpy())
            entry["pgd_success"] = float((adv_pred != y.numpy()).mean())
        out[name] = entry
    return out
