"""Procedural 10-class 32x32 corpus, used where the real archive is unavailable.

Each class is keyed by three cues so the robust/non-robust feature machinery
has something real to bite on:

  * a palette (background + object color)   -- low-frequency, survives small
    perturbations, what an adversarially trained model leans on;
  * an object shape (drawn mask)            -- the "semantic" content a human
    would recognize;
  * an oriented sinusoidal micro-texture    -- high-frequency, low-amplitude,
    the cue a standard classifier overfits to and small perturbations flip.

Class indices reuse the CIFAR-10 label order so downstream defaults
(ship/airplane/deer probes) read the same either way.
"""

import numpy as np

from .utils import derive_seed

CLASS_NAMES = (
    "airplane", "automobile", "bird", "cat", "deer",
    "dog", "frog", "horse", "ship", "truck",
)

SIDE = 32

# background / object colors per class, spread over hue space
_BG = np.array([
    [0.55, 0.70, 0.85],  # airplane: pale sky
    [0.35, 0.35, 0.38],  # automobile: asphalt
    [0.60, 0.80, 0.55],  # bird: leafy green
    [0.75, 0.60, 0.45],  # cat: warm tan
    [0.30, 0.50, 0.25],  # deer: forest
    [0.80, 0.75, 0.60],  # dog: sand
    [0.20, 0.45, 0.40],  # frog: pond
    [0.65, 0.55, 0.35],  # horse: field
    [0.25, 0.35, 0.60],  # ship: sea
    [0.55, 0.55, 0.50],  # truck: concrete
], dtype=np.float32)

_FG = np.array([
    [0.90, 0.90, 0.95],
    [0.85, 0.15, 0.15],
    [0.95, 0.80, 0.20],
    [0.45, 0.30, 0.25],
    [0.70, 0.50, 0.30],
    [0.35, 0.25, 0.20],
    [0.45, 0.85, 0.35],
    [0.50, 0.35, 0.20],
    [0.85, 0.85, 0.90],
    [0.90, 0.60, 0.10],
], dtype=np.float32)

# texture keys: cycles per image, orientation (rad), per-channel carrier weights;
# cat and dog are deliberately close in style space (confusable pair)
_FREQ = np.array([3.0, 4.0, 5.0, 6.0, 7.0, 6.4, 3.5, 4.5, 5.5, 8.0])
_THETA = np.deg2rad([9.0, 27.0, 45.0, 63.0, 81.0, 75.0, 117.0, 135.0, 153.0, 171.0])
_CHAN_W = np.array([
    [1.0, 0.2, 0.6], [0.2, 1.0, 0.4], [0.7, 0.7, 0.1], [0.1, 0.6, 1.0],
    [1.0, 0.5, 0.0], [0.15, 0.65, 0.95], [0.6, 0.1, 0.9], [0.9, 0.9, 0.9],
    [0.3, 1.0, 0.7], [1.0, 0.0, 0.3],
], dtype=np.float32)

TEXTURE_AMP = 0.16
NOISE_STD = 0.03

_YY, _XX = np.meshgrid(np.arange(SIDE, dtype=np.float64),
                       np.arange(SIDE, dtype=np.float64), indexing="ij")


def _rot(y, x, angle):
    c, s = np.cos(angle), np.sin(angle)
    return c * y - s * x, s * y + c * x


def _shape_mask(label: int, rng: np.random.Generator) -> np.ndarray:
    """Class-keyed filled object mask with randomized pose."""
    cy = 16.0 + rng.uniform(-4, 4)
    cx = 16.0 + rng.uniform(-4, 4)
    r = rng.uniform(7.0, 10.5)
    ang = rng.uniform(0, 2 * np.pi)
    y, x = _rot(_YY - cy, _XX - cx, ang)
    if label == 0:    # thin horizontal lens (fuselage)
        m = (x / (1.55 * r)) ** 2 + (y / (0.45 * r)) ** 2 <= 1.0
    elif label == 1:  # squat rectangle
        m = (np.abs(x) <= 1.2 * r) & (np.abs(y) <= 0.6 * r)
    elif label == 2:  # triangle
        m = (y >= -0.7 * r) & (y + 2.2 * np.abs(x) <= 0.9 * r)
    elif label == 3:  # two stacked disks
        m = (x ** 2 + (y - 0.35 * r) ** 2 <= (0.62 * r) ** 2) | (
            x ** 2 + (y + 0.45 * r) ** 2 <= (0.45 * r) ** 2)
    elif label == 4:  # diamond
        m = np.abs(x) / (1.0 * r) + np.abs(y) / (1.3 * r) <= 1.0
    elif label == 5:  # cross
        m = (np.abs(x) <= 0.38 * r) | (np.abs(y) <= 0.38 * r)
        m &= (np.abs(x) <= 1.1 * r) & (np.abs(y) <= 1.1 * r)
    elif label == 6:  # disk
        m = x ** 2 + y ** 2 <= r ** 2
    elif label == 7:  # ring
        d = x ** 2 + y ** 2
        m = (d <= r ** 2) & (d >= (0.55 * r) ** 2)
    elif label == 8:  # hull: rectangle + keel triangle
        m = ((np.abs(x) <= 1.25 * r) & (y >= -0.15 * r) & (y <= 0.45 * r)) | (
            (y < -0.15 * r) & (y >= -0.75 * r) & (np.abs(x) <= 0.35 * r))
    else:             # L-bracket
        m = ((np.abs(x) <= 0.45 * r) & (np.abs(y) <= 1.2 * r)) | (
            (np.abs(y + 0.85 * r) <= 0.35 * r) & (x >= -0.45 * r) & (x <= 1.1 * r))
    return m


def _texture(label: int, rng: np.random.Generator) -> np.ndarray:
    """Oriented grating, shape (3, SIDE, SIDE), zero-mean."""
    phase = rng.uniform(0, 2 * np.pi)
    u = (_XX * np.cos(_THETA[label]) + _YY * np.sin(_THETA[label])) / SIDE
    carrier = np.sin(2 * np.pi * _FREQ[label] * u + phase)
    return (TEXTURE_AMP * _CHAN_W[label][:, None, None] * carrier).astype(np.float32)


def render_example(label: int, rng: np.random.Generator) -> np.ndarray:
    """One (3, 32, 32) float32 image in [0,1] for the given class."""
    bg = _BG[label] * rng.uniform(0.82, 1.18)
    fg = _FG[label] * rng.uniform(0.82, 1.18)
    img = np.empty((3, SIDE, SIDE), dtype=np.float32)
    img[:] = bg[:, None, None]
    mask = _shape_mask(label, rng)
    img = np.where(mask[None], fg[:, None, None].astype(np.float32), img)
    img += _texture(label, rng)
    img += rng.normal(0.0, NOISE_STD, size=img.shape).astype(np.float32)
    return np.clip(img, 0.0, 1.0, out=img)


def generate(split: str, size: int, seed: int):
    """Balanced corpus: returns (images [N,3,32,32] float32, labels [N] int64, ids).

    Example streams are keyed by (seed, split, index) so any subset is
    reproducible independently of the rest.
    """
    if size % 10 != 0:
        raise ValueError("size must be a multiple of 10 for a balanced corpus")
    labels = np.tile(np.arange(10, dtype=np.int64), size // 10)
    images = np.empty((size, 3, SIDE, SIDE), dtype=np.float32)
    ids = []
    for i in range(size):
        rng = np.random.default_rng(derive_seed("procedural-v1", seed, split, i))
        images[i] = render_example(int(labels[i]), rng)
        ids.append(f"proc-{split}-{seed}-{i:05d}")
    return images, labels, ids
