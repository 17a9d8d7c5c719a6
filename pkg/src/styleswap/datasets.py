"""Dataset ingestion, derivative-feature dataset construction, and caching.

Three dataset kinds flow through here: the base 10-class corpus, its
robust-feature-only derivative (representation distillation under an
adversarially trained model), and its non-robust-feature-only derivative
(large-epsilon targeted relabeling attack under a standard model).
"""

import hashlib
import io
import json
import os
import pickle
import tarfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import synthetic
from .pgd import pgd_perturb
from .utils import FORMAT_VERSION, derive_seed, fingerprint_array, torch_generator

CIFAR10_ARCHIVE = "cifar-10-python.tar.gz"
CIFAR10_MD5 = "c58f30108f718f92721af3b95e74349a"
KINDS = ("CIFAR10", "CIFAR10R", "CIFAR10NR")
NUM_CLASSES = 10


class IngestionError(RuntimeError):
    """Raised when the source archive is missing or fails its checksum."""


class DatasetFormatError(RuntimeError):
    """Raised when an on-disk dataset cache cannot be read back."""


@dataclass(frozen=True)
class LabeledExample:
    image: np.ndarray  # (3, 32, 32) float32 in [0, 1]
    label: int
    id: str


class DatasetHandle:
    """Immutable ordered collection of labeled 3x32x32 images plus provenance."""

    def __init__(self, kind, split, images, labels, ids, provenance):
        if kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {kind!r}")
        if split not in ("train", "test"):
            raise ValueError(f"split must be 'train' or 'test', got {split!r}")
        images = np.asarray(images, dtype=np.float32)
        labels = np.asarray(labels, dtype=np.int64)
        ids = list(ids)
        if images.ndim != 4 or images.shape[1:] != (3, 32, 32):
            raise ValueError(f"images must be (N,3,32,32), got {images.shape}")
        if not (len(images) == len(labels) == len(ids)):
            raise ValueError("images, labels, ids must have equal length")
        if len(images) and (images.min() < 0.0 or images.max() > 1.0):
            raise ValueError("pixel values must lie in [0,1]")
        if len(labels) and (labels.min() < 0 or labels.max() >= NUM_CLASSES):
            raise ValueError("labels must lie in 0..9")
        if len(set(ids)) != len(ids):
            raise ValueError("example ids must be unique")
        self.kind = kind
        self.split = split
        self.images = images
        self.labels = labels
        self.ids = ids
        self.provenance = dict(provenance)
        self.images.setflags(write=False)
        self.labels.setflags(write=False)

    def __len__(self):
        return len(self.images)

    def __getitem__(self, i) -> LabeledExample:
        return LabeledExample(self.images[i], int(self.labels[i]), self.ids[i])

    @property
    def examples(self):
        return [self[i] for i in range(len(self))]

    def fingerprint(self) -> str:
        return fingerprint_array(self.images) + "-" + fingerprint_array(self.labels)

    def class_counts(self):
        return np.bincount(self.labels, minlength=NUM_CLASSES)

    def subset(self, indices, note=None):
        indices = np.asarray(indices, dtype=np.int64)
        prov = dict(self.provenance)
        prov["subset_of"] = self.fingerprint()
        if note:
            prov["subset_note"] = note
        return DatasetHandle(self.kind, self.split, self.images[indices],
                             self.labels[indices], [self.ids[i] for i in indices], prov)

    def tensors(self):
        return torch.from_numpy(np.array(self.images)), torch.from_numpy(np.array(self.labels))


def channel_stats(ds: DatasetHandle):
    """Per-channel mean/std over the dataset, for classifier input normalization."""
    if len(ds) == 0:
        raise ValueError("empty dataset")
    mean = ds.images.mean(axis=(0, 2, 3))
    std = ds.images.std(axis=(0, 2, 3))
    return mean.astype(np.float64).tolist(), std.astype(np.float64).tolist()


def _apply_subset(images, labels, ids, subset_size, split, seed):
    if subset_size is None:
        return images, labels, ids
    if subset_size > len(images):
        raise ValueError(f"subset_size {subset_size} exceeds split size {len(images)}")
    rng = np.random.default_rng(derive_seed("subset", split, seed))
    idx = rng.choice(len(images), size=subset_size, replace=False)
    return images[idx], labels[idx], [ids[i] for i in idx]


def _md5(path: Path) -> str:
    h = hashlib.md5()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def load_cifar10(split, subset_size=None, seed=0, root=None) -> DatasetHandle:
    """Ingest the official archive (cifar-10-python.tar.gz) from a local root.

    Looks under `root` (or $STYLESWAP_DATA) for the archive or the already
    extracted cifar-10-batches-py directory; verifies the archive checksum
    before trusting it. Subset selection is a seeded draw without
    replacement, so two calls with the same arguments pick the same ids.
    """
    root = Path(root or os.environ.get("STYLESWAP_DATA", "data"))
    batches_dir = root / "cifar-10-batches-py"
    archive = root / CIFAR10_ARCHIVE

    def parse(raw):
        d = pickle.loads(raw, encoding="latin1")
        imgs = np.asarray(d["data"], dtype=np.uint8).reshape(-1, 3, 32, 32)
        return imgs, np.asarray(d["labels"], dtype=np.int64)

    batch_names = [f"data_batch_{i}" for i in range(1, 6)] if split == "train" else ["test_batch"]
    chunks = []
    if batches_dir.is_dir():
        for name in batch_names:
            p = batches_dir / name
            if not p.exists():
                raise IngestionError(f"extracted dataset at {batches_dir} is missing {name}")
            chunks.append(parse(p.read_bytes()))
        origin = str(batches_dir)
    elif archive.exists():
        got = _md5(archive)
        if got != CIFAR10_MD5:
            raise IngestionError(
                f"checksum mismatch for {archive}: md5 {got} != expected {CIFAR10_MD5}; "
                "re-download the archive")
        with tarfile.open(archive, "r:gz") as tf:
            for name in batch_names:
                member = tf.extractfile(f"cifar-10-batches-py/{name}")
                if member is None:
                    raise IngestionError(f"{archive} does not contain {name}")
                chunks.append(parse(member.read()))
        origin = str(archive)
    else:
        raise IngestionError(
            f"no dataset found under {root}: expected {CIFAR10_ARCHIVE} "
            f"(md5 {CIFAR10_MD5}, from https://www.cs.toronto.edu/~kriz/cifar-10-python.tar.gz) "
            "or the extracted cifar-10-batches-py directory")

    images = np.concatenate([c[0] for c in chunks]).astype(np.float32) / 255.0
    labels = np.concatenate([c[1] for c in chunks])
    ids = [f"cifar10-{split}-{i:05d}" for i in range(len(images))]
    images, labels, ids = _apply_subset(images, labels, ids, subset_size, split, seed)
    prov = {"origin": "cifar10-archive", "source": origin, "split": split,
            "size": len(images), "subset_size": subset_size, "seed": seed}
    return DatasetHandle("CIFAR10", split, images, labels, ids, prov)


def load_procedural(split, size, seed=0, subset_size=None) -> DatasetHandle:
    """Procedural stand-in corpus (see styleswap.synthetic) as the base dataset."""
    images, labels, ids = synthetic.generate(split, size, seed)
    images, labels, ids = _apply_subset(images, labels, ids, subset_size, split, seed)
    prov = {"origin": "procedural-v1", "split": split, "size": len(images),
            "corpus_size": size, "subset_size": subset_size, "seed": seed}
    return DatasetHandle("CIFAR10", split, images, labels, ids, prov)


def load_base_dataset(source, split, size=None, subset_size=None, seed=0, root=None):
    if source == "cifar10":
        return load_cifar10(split, subset_size=subset_size, seed=seed, root=root)
    if source == "procedural":
        if size is None:
            raise ValueError("procedural source requires a size")
        return load_procedural(split, size, seed=seed, subset_size=subset_size)
    raise ValueError(f"unknown dataset source {source!r}")


def _model_fingerprint(model):
    fp = getattr(model, "fingerprint", None)
    return fp() if callable(fp) else "unknown"


def construct_robust_dataset(base, robust_model, steps=300, step_size=0.1, seed=0,
                             init="train_image", batch_size=128) -> DatasetHandle:
    """Distill robust features: optimize a start image until its penultimate
    representation under `robust_model` matches each source example's.

    Output labels equal source labels. Initialization is a different randomly
    drawn example from `base` (or seeded noise with init="noise"). steps=0 is
    the documented no-op diagnostic: outputs equal the initialization.
    """
    if steps < 0:
        raise ValueError("steps must be >= 0")
    module = robust_model.module
    module.eval()
    n = len(base)
    rng = np.random.default_rng(derive_seed("robust-init", seed))
    if init == "train_image":
        donor = rng.integers(0, n, size=n)
        clash = donor == np.arange(n)
        donor[clash] = (donor[clash] + 1) % n
        starts = base.images[donor]
    elif init == "noise":
        starts = rng.uniform(0.2, 0.8, size=base.images.shape).astype(np.float32)
    elif init == "self":  # diagnostic fixed point: start at the source itself
        starts = np.array(base.images)
    else:
        raise ValueError(f"unknown init {init!r}")

    out = np.empty_like(base.images)
    init_d = np.empty(n, dtype=np.float64)
    final_d = np.empty(n, dtype=np.float64)
    for lo in range(0, n, batch_size):
        hi = min(lo + batch_size, n)
        src = torch.from_numpy(np.array(base.images[lo:hi]))
        with torch.no_grad():
            target = module.forward_features(src)
        x = torch.from_numpy(np.array(starts[lo:hi])).clone().requires_grad_(True)
        opt = torch.optim.Adam([x], lr=step_size)
        with torch.no_grad():
            init_d[lo:hi] = (module.forward_features(x) - target).norm(dim=1).numpy()
        for _ in range(steps):
            opt.zero_grad()
            diff = module.forward_features(x) - target
            loss = (diff ** 2).sum()
            loss.backward()
            opt.step()
            with torch.no_grad():
                x.clamp_(0.0, 1.0)
        with torch.no_grad():
            final_d[lo:hi] = (module.forward_features(x) - target).norm(dim=1).numpy()
            out[lo:hi] = x.numpy()

    prov = {"origin": "constructed", "construction": "robust-distillation",
            "base": base.fingerprint(), "model": _model_fingerprint(robust_model),
            "steps": steps, "step_size": step_size, "seed": seed, "init": init,
            "mean_init_distance": float(init_d.mean()) if n else 0.0,
            "mean_final_distance": float(final_d.mean()) if n else 0.0,
            "frac_distance_decreased": float((final_d < init_d).mean()) if n and steps else 0.0}
    if getattr(robust_model, "regime", None) == "standard":
        prov["warning"] = ("source model was trained with the standard regime; "
                           "output is not robust-features-only")
    ids = [f"r-{e}" for e in base.ids]
    return DatasetHandle("CIFAR10R", base.split, out, base.labels, ids, prov)


def _resolve_targets(labels, target_rule, seed):
    if target_rule == "rotation":
        return (labels + 1) % NUM_CLASSES
    if target_rule == "uniform":
        rng = np.random.default_rng(derive_seed("nr-targets", seed))
        return rng.integers(0, NUM_CLASSES, size=len(labels))
    if isinstance(target_rule, (int, np.integer)):
        return np.full(len(labels), int(target_rule), dtype=np.int64)
    raise ValueError(f"unknown target rule {target_rule!r}")


def construct_nonrobust_dataset(base, standard_model, epsilon=4.0, steps=100, seed=0,
                                step_size=None, target_rule="rotation", norm="l2",
                                batch_size=256) -> DatasetHandle:
    """Relabeling attack: perturb each example toward a chosen target class
    under `standard_model`, keep it only if the attack lands, and label the
    result with the target class (not the source label).

    The default is an L2-ball attack with normalized-gradient steps: a sign
    attack at large budget writes saturated model-specific patterns, while the
    L2 attack spends its budget on the features that actually predict the
    target class, which is what makes the relabeled set train a usable model.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be > 0: epsilon=0 would relabel unperturbed images")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if step_size is None:
        step_size = 2.5 * epsilon / steps
    module = standard_model.module
    module.eval()
    labels = np.asarray(base.labels)
    targets = _resolve_targets(labels, target_rule, seed)

    kept_img, kept_lab, kept_ids = [], [], []
    dropped = 0
    for lo in range(0, len(base), batch_size):
        hi = min(lo + batch_size, len(base))
        x = torch.from_numpy(np.array(base.images[lo:hi]))
        t = torch.from_numpy(targets[lo:hi])
        adv = pgd_perturb(module, x, t, epsilon, steps, step_size, targeted=True,
                          norm=norm,
                          generator=torch_generator(derive_seed("nr-pgd", seed, lo)))
        with torch.no_grad():
            pred = module(adv).argmax(dim=1).numpy()
        adv = adv.numpy()
        for j in range(hi - lo):
            if pred[j] == targets[lo + j]:
                kept_img.append(adv[j])
                kept_lab.append(targets[lo + j])
                kept_ids.append(f"nr-{base.ids[lo + j]}")
            else:
                dropped += 1

    images = np.stack(kept_img) if kept_img else np.empty((0, 3, 32, 32), np.float32)
    prov = {"origin": "constructed", "construction": "nonrobust-relabel",
            "base": base.fingerprint(), "model": _model_fingerprint(standard_model),
            "epsilon": float(epsilon), "steps": steps, "step_size": float(step_size),
            "norm": norm, "seed": seed, "target_rule": str(target_rule),
            "dropped": dropped, "kept": len(kept_img)}
    return DatasetHandle("CIFAR10NR", base.split, images,
                         np.asarray(kept_lab, dtype=np.int64), kept_ids, prov)


def save_dataset(ds: DatasetHandle, path):
    """Write one tensor blob (data.npz) plus a metadata sidecar (meta.json)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    np.savez(path / "data.npz", images=ds.images, labels=ds.labels,
             ids=np.asarray(ds.ids, dtype=object))
    meta = {"format_version": FORMAT_VERSION, "kind": ds.kind, "split": ds.split,
            "size": len(ds), "provenance": ds.provenance, "fingerprint": ds.fingerprint()}
    (path / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return path


def load_dataset(path) -> DatasetHandle:
    path = Path(path)
    meta_path, data_path = path / "meta.json", path / "data.npz"
    if not meta_path.exists() or not data_path.exists():
        raise DatasetFormatError(f"{path} is not a dataset cache (missing meta.json/data.npz)")
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as e:
        raise DatasetFormatError(f"corrupt metadata in {meta_path}: {e}") from e
    version = meta.get("format_version")
    if version != FORMAT_VERSION:
        raise DatasetFormatError(
            f"dataset format version {version} != supported {FORMAT_VERSION}")
    try:
        with np.load(data_path, allow_pickle=True) as z:
            images, labels, ids = z["images"], z["labels"], list(z["ids"])
    except Exception as e:
        raise DatasetFormatError(f"corrupt tensor blob {data_path}: {e}") from e
    ds = DatasetHandle(meta["kind"], meta["split"], images, labels, ids,
                       meta["provenance"])
    if ds.fingerprint() != meta["fingerprint"]:
        raise DatasetFormatError(f"fingerprint mismatch in {path}: data does not match sidecar")
    return ds
