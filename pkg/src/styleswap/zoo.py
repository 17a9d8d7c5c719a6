"""Classifier zoo: builds, trains, persists, and serves the evaluation models.

The zoo grid is four architectures x three training sets (base, robust-only,
non-robust-only), plus the two adversarially trained defense models on the
base set. Handles are immutable after training and safe for concurrent
read-only inference; batch inference is the parallelization mechanism.
"""

import copy
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .architectures import SUPPORTED_ARCHS, make_arch
from .pgd import pgd_perturb
from .utils import FORMAT_VERSION, derive_seed, fingerprint_state_dict, torch_generator

CIFAR10_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR10_STD = (0.2470, 0.2435, 0.2616)
REGIMES = ("untrained", "standard", "pgd_at", "iat")


class CheckpointFormatError(RuntimeError):
    pass


class NormalizedClassifier(nn.Module):
    """Wraps a backbone with its fixed input normalization, so every caller
    feeds raw [0,1] pixels and attacks operate in pixel space."""

    def __init__(self, net, mean, std):
        super().__init__()
        self.net = net
        self.register_buffer("mean", torch.tensor(mean, dtype=torch.float32).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(std, dtype=torch.float32).view(1, 3, 1, 1))

    def normalize(self, x):
        return (x - self.mean) / self.std

    def forward(self, x):
        return self.net(self.normalize(x))

    def forward_features(self, x):
        return self.net.forward_features(self.normalize(x))


@dataclass
class ClassifierHandle:
    arch: str
    regime: str
    train_set_kind: str | None
    module: NormalizedClassifier
    metadata: dict = field(default_factory=dict)
    weights_ref: str | None = None

    def fingerprint(self) -> str:
        return fingerprint_state_dict(self.module.state_dict())

    def name(self) -> str:
        return f"{self.arch}-{self.regime}-{self.train_set_kind or 'none'}"


def build_model(arch, seed=0, normalization=None) -> ClassifierHandle:
    """Untrained handle for one of the supported architectures."""
    net = make_arch(arch, num_classes=10, seed=seed)
    mean, std = normalization or (CIFAR10_MEAN, CIFAR10_STD)
    module = NormalizedClassifier(net, mean, std)
    module.eval()
    return ClassifierHandle(arch, "untrained", None, module,
                            metadata={"seed": seed, "normalization": [list(mean), list(std)]})


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 128
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_decay_gamma: float = 0.1
    seed: int = 0
    augment: bool = False

    def milestones(self):
        return [max(1, int(self.epochs * 0.5)), max(1, int(self.epochs * 0.75))]


def _augment_batch(x, gen):
    # pad-4 random crop + horizontal flip
    n = x.shape[0]
    padded = F.pad(x, (4, 4, 4, 4), mode="reflect")
    dx = torch.randint(0, 9, (n,), generator=gen)
    dy = torch.randint(0, 9, (n,), generator=gen)
    out = torch.stack([padded[i, :, dy[i]:dy[i] + 32, dx[i]:dx[i] + 32] for i in range(n)])
    flip = torch.rand(n, generator=gen) < 0.5
    out[flip] = torch.flip(out[flip], dims=(3,))
    return out


def _train_loop(handle, ds, hparams, batch_hook, regime, eval_ds=None):
    """Shared epoch loop. batch_hook(module, x, y, gen) -> loss tensor."""
    if ds.split != "train":
        raise ValueError("training requires a train split")
    module = copy.deepcopy(handle.module)
    module.train()
    opt = torch.optim.SGD(module.parameters(), lr=hparams.lr,
                          momentum=hparams.momentum, weight_decay=hparams.weight_decay)
    sched = torch.optim.lr_scheduler.MultiStepLR(opt, hparams.milestones(),
                                                 gamma=hparams.lr_decay_gamma)
    images, labels = ds.tensors()
    curve = []
    for epoch in range(hparams.epochs):
        gen = torch_generator(derive_seed("train", hparams.seed, epoch))
        perm = torch.randperm(len(images), generator=gen)
        total, correct, loss_sum = 0, 0, 0.0
        for lo in range(0, len(perm), hparams.batch_size):
            idx = perm[lo:lo + hparams.batch_size]
            x, y = images[idx], labels[idx]
            if hparams.augment:
                x = _augment_batch(x, gen)
            opt.zero_grad()
            loss, logits = batch_hook(module, x, y, gen)
            if not math.isfinite(loss.item()):
                raise RuntimeError(
                    f"training diverged: non-finite loss {loss.item()} at epoch "
                    f"{epoch} batch {lo // hparams.batch_size} (lr={sched.get_last_lr()})")
            loss.backward()
            opt.step()
            loss_sum += loss.item() * len(idx)
            correct += (logits.argmax(dim=1) == y).sum().item()
            total += len(idx)
        sched.step()
        curve.append({"epoch": epoch, "loss": loss_sum / max(total, 1),
                      "train_acc": correct / max(total, 1)})
    module.eval()
    meta = dict(handle.metadata)
    meta.update({"epochs": hparams.epochs, "train_seed": hparams.seed,
                 "curve": curve, "train_size": len(ds), "format_version": FORMAT_VERSION})
    out = ClassifierHandle(handle.arch, regime, ds.kind, module, meta)
    if eval_ds is not None and len(eval_ds):
        meta["clean_test_accuracy"] = evaluate_accuracy(out, eval_ds)
    return out


def train_standard(handle, ds, hparams=None, eval_ds=None) -> ClassifierHandle:
    """Plain cross-entropy training; records the curve and clean accuracy."""
    hparams = hparams or TrainConfig()
    if hparams.epochs == 0:
        out = ClassifierHandle(handle.arch, "standard", ds.kind,
                               copy.deepcopy(handle.module), dict(handle.metadata))
        out.module.eval()
        return out

    def hook(module, x, y, gen):
        logits = module(x)
        return F.cross_entropy(logits, y), logits

    return _train_loop(handle, ds, hparams, hook, "standard", eval_ds)


def train_pgd_adversarial(handle, ds, epsilon, attack_steps, hparams=None,
                          step_size=None, eval_ds=None) -> ClassifierHandle:
    """Adversarial training on PGD examples generated per batch."""
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    hparams = hparams or TrainConfig()
    step = step_size if step_size is not None else max(epsilon / 4.0, 1e-8)

    def hook(module, x, y, gen):
        adv = pgd_perturb(module, x, y, epsilon, attack_steps, step,
                          random_start=True, generator=gen)
        module.train()
        logits = module(adv)
        return F.cross_entropy(logits, y), logits

    out = _train_loop(handle, ds, hparams, hook, "pgd_at", eval_ds)
    out.metadata["at_epsilon"] = float(epsilon)
    out.metadata["at_steps"] = int(attack_steps)
    if eval_ds is not None and len(eval_ds):
        out.metadata["pgd_probe"] = pgd_probe_success(out, eval_ds, epsilon)
    return out


def mixup_batch(x, y, alpha, gen, force_lambda=None):
    """Pairwise convex combination of a batch with itself (shuffled).

    Returns (x_mix, y_a, y_b, lam). force_lambda=1 makes this the identity,
    which reduces the interpolated regime to plain PGD-AT batch construction.
    """
    if force_lambda is not None:
        lam = float(force_lambda)
    else:
        lam_seed = int(torch.randint(0, 2 ** 31 - 1, (1,), generator=gen).item())
        lam = float(np.random.default_rng(lam_seed).beta(alpha, alpha))
    perm = torch.randperm(x.shape[0], generator=gen)
    x_mix = lam * x + (1.0 - lam) * x[perm]
    return x_mix, y, y[perm], lam


def train_interpolated_adversarial(handle, ds, epsilon, attack_steps, mix_params=None,
                                   hparams=None, step_size=None,
                                   eval_ds=None) -> ClassifierHandle:
    """Interpolated adversarial training: mixup on clean and on adversarial
    batches, averaged."""
    mix_params = mix_params or {"alpha": 1.0}
    alpha = float(mix_params.get("alpha", 1.0))
    force_lambda = mix_params.get("force_lambda")
    if alpha <= 0:
        raise ValueError("mix_params alpha must be > 0")
    hparams = hparams or TrainConfig()
    step = step_size if step_size is not None else max(epsilon / 4.0, 1e-8)

    def mixed_loss(module, x, y, gen):
        x_mix, y_a, y_b, lam = mixup_batch(x, y, alpha, gen, force_lambda)
        logits = module(x_mix)
        return lam * F.cross_entropy(logits, y_a) + (1 - lam) * F.cross_entropy(logits, y_b), logits

    def hook(module, x, y, gen):
        adv = pgd_perturb(module, x, y, epsilon, attack_steps, step,
                          random_start=True, generator=gen)
        module.train()
        clean_loss, logits = mixed_loss(module, x, y, gen)
        adv_loss, _ = mixed_loss(module, adv, y, gen)
        return 0.5 * (clean_loss + adv_loss), logits

    out = _train_loop(handle, ds, hparams, hook, "iat", eval_ds)
    out.metadata["at_epsilon"] = float(epsilon)
    out.metadata["at_steps"] = int(attack_steps)
    out.metadata["mix_alpha"] = alpha
    if eval_ds is not None and len(eval_ds):
        out.metadata["pgd_probe"] = pgd_probe_success(out, eval_ds, epsilon)
    return out


def _as_batch(images):
    arr = np.array(images, dtype=np.float32)  # copy: sources may be read-only views
    single = arr.ndim == 3
    if single:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[1:] != (3, 32, 32):
        raise ValueError(f"expected (3,32,32) or (N,3,32,32) in [0,1], got {arr.shape}")
    return arr, single


def classify(handle, images, batch_size=256) -> np.ndarray:
    """Probability vectors (softmax) for a single image or a batch."""
    arr, single = _as_batch(images)
    handle.module.eval()
    outs = []
    with torch.no_grad():
        for lo in range(0, len(arr), batch_size):
            logits = handle.module(torch.from_numpy(arr[lo:lo + batch_size]))
            outs.append(torch.softmax(logits, dim=1).numpy())
    probs = np.concatenate(outs) if outs else np.empty((0, 10), np.float32)
    return probs[0] if single else probs


def predict(handle, images, batch_size=256) -> np.ndarray:
    """Argmax class per image; ties break to the lowest class index."""
    probs = classify(handle, images, batch_size)
    if probs.ndim == 1:
        return int(np.argmax(probs))
    return np.argmax(probs, axis=1)


def evaluate_accuracy(handle, ds, batch_size=256) -> float:
    if len(ds) == 0:
        raise ValueError("cannot evaluate accuracy on an empty dataset")
    preds = predict(handle, ds.images, batch_size)
    return float((preds == ds.labels).mean())


def pgd_probe_success(handle, ds, epsilon, steps=10, step_size=None, max_examples=200):
    """Quick robustness probe: PGD success rate on initially-correct examples."""
    sub = ds if len(ds) <= max_examples else ds.subset(np.arange(max_examples))
    preds = predict(handle, sub.images)
    correct = preds == sub.labels
    if not correct.any():
        return None
    x = torch.from_numpy(np.array(sub.images[correct]))
    y = torch.from_numpy(np.array(sub.labels[correct]))
    adv = pgd_perturb(handle.module, x, y, epsilon, steps,
                      step_size if step_size is not None else max(epsilon / 4.0, 1e-8),
                      random_start=True, generator=torch_generator(derive_seed("probe", 0)))
    adv_pred = predict(handle, adv.numpy())
    return float((adv_pred != y.numpy()).mean())


def save_model(handle: ClassifierHandle, path) -> Path:
    """Checkpoint directory: opaque weights blob + sidecar metadata."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    torch.save(handle.module.state_dict(), path / "weights.pt")
    meta = {"format_version": FORMAT_VERSION, "arch": handle.arch,
            "regime": handle.regime, "train_set_kind": handle.train_set_kind,
            "metadata": handle.metadata, "fingerprint": handle.fingerprint()}
    (path / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True, default=float))
    return path


def load_model(path) -> ClassifierHandle:
    path = Path(path)
    meta_path = path / "meta.json"
    if not meta_path.exists():
        raise CheckpointFormatError(f"{path} has no meta.json sidecar")
    meta = json.loads(meta_path.read_text())
    if meta.get("format_version") != FORMAT_VERSION:
        raise CheckpointFormatError(
            f"checkpoint format version {meta.get('format_version')} != {FORMAT_VERSION}")
    norm = meta["metadata"].get("normalization") or [list(CIFAR10_MEAN), list(CIFAR10_STD)]
    handle = build_model(meta["arch"], seed=meta["metadata"].get("seed", 0),
                         normalization=(norm[0], norm[1]))
    state = torch.load(path / "weights.pt", map_location="cpu", weights_only=True)
    handle.module.load_state_dict(state)
    handle.module.eval()
    out = ClassifierHandle(meta["arch"], meta["regime"], meta["train_set_kind"],
                           handle.module, meta["metadata"], weights_ref=str(path))
    if out.fingerprint() != meta["fingerprint"]:
        raise CheckpointFormatError(f"fingerprint mismatch loading {path}")
    return out


def write_zoo_manifest(zoo_dir) -> Path:
    """Scan a checkpoint directory and write manifest.json listing entries."""
    zoo_dir = Path(zoo_dir)
    entries = []
    for meta_path in sorted(zoo_dir.glob("*/meta.json")):
        meta = json.loads(meta_path.read_text())
        entries.append({
            "name": meta_path.parent.name, "arch": meta["arch"],
            "regime": meta["regime"], "train_set_kind": meta["train_set_kind"],
            "seed": meta["metadata"].get("seed"),
            "clean_test_accuracy": meta["metadata"].get("clean_test_accuracy"),
            "fingerprint": meta["fingerprint"]})
    manifest = {"format_version": FORMAT_VERSION, "entries": entries,
                "grid": {"archs": list(SUPPORTED_ARCHS),
                         "train_sets": ["CIFAR10", "CIFAR10R", "CIFAR10NR"],
                         "defense_regimes": ["pgd_at", "iat"]}}
    out = zoo_dir / "manifest.json"
    out.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return out
