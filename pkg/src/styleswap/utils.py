"""Shared plumbing: seeding, determinism, fingerprints, pixel quantization."""

import contextlib
import hashlib
import json

import numpy as np
import torch

FORMAT_VERSION = 1


def derive_seed(*parts) -> int:
    """Stable 32-bit seed derived from a tuple of ints/strings.

    Used to give every example / job an independent stream from a single
    run seed, so batched and per-example execution agree.
    """
    h = hashlib.sha256()
    for p in parts:
        h.update(str(p).encode())
        h.update(b"\x1f")
    return int.from_bytes(h.digest()[:4], "little")


def torch_generator(seed: int) -> torch.Generator:
    g = torch.Generator(device="cpu")
    g.manual_seed(int(seed) & 0x7FFFFFFFFFFFFFFF)
    return g


@contextlib.contextmanager
def strict_determinism(enabled: bool = True):
    """Force deterministic kernels and single-threaded execution.

    Slower, but two runs from one manifest then produce byte-identical
    records. All tests that assert reproducibility run under this.
    """
    if not enabled:
        yield
        return
    prev_threads = torch.get_num_threads()
    prev_det = torch.are_deterministic_algorithms_enabled()
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)
    try:
        yield
    finally:
        torch.set_num_threads(prev_threads)
        torch.use_deterministic_algorithms(prev_det)


def fingerprint_json(obj) -> str:
    """Short hex fingerprint of any JSON-serializable object."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def fingerprint_array(arr: np.ndarray) -> str:
    h = hashlib.sha256()
    h.update(str(arr.dtype).encode())
    h.update(str(arr.shape).encode())
    h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()[:16]


def fingerprint_state_dict(state_dict) -> str:
    h = hashlib.sha256()
    for key in sorted(state_dict.keys()):
        t = state_dict[key]
        h.update(key.encode())
        h.update(t.detach().cpu().numpy().tobytes())
    return h.hexdigest()[:16]


def quantize_pixels(img: np.ndarray) -> np.ndarray:
    """Snap [0,1] pixels to the 256-level grid (round-trips through 8-bit PNG).

    Attack outputs are quantized before evaluation and storage so that the
    delivered artifact is an ordinary image file, and success rates are
    measured on exactly what gets stored.
    """
    arr = np.clip(np.asarray(img, dtype=np.float32), 0.0, 1.0)
    return np.round(arr * 255.0).astype(np.float32) / np.float32(255.0)


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def from_uint8(img: np.ndarray) -> np.ndarray:
    return img.astype(np.float32) / np.float32(255.0)
