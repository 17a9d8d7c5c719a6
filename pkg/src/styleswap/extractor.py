"""Style feature extraction: per-layer channel mean/std of a fixed VGG19 slice.

The extractor is frozen; it is never trained here. Two weight backends:

  * "imagenet"      -- the torchvision VGG19 checkpoint, loaded from a local
                       file (this host may not be able to download it);
  * "seeded_random" -- deterministic random filters. Random shallow conv
                       features still carry color/orientation/frequency
                       statistics, which is what the mean/std matching needs;
                       this is the fallback for air-gapped environments.

Layer codes follow the usual shorthand: R11, R12, R21, R22, R31 are the
outputs of relu1_1 .. relu3_1. R22 doubles as the content layer.
"""

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torchvision

from .utils import fingerprint_state_dict

STYLE_LAYERS = ("R11", "R12", "R21", "R22", "R31")
CONTENT_LAYER = "R22"
# indices into torchvision vgg19().features of each relu output
_LAYER_INDEX = {"R11": 1, "R12": 3, "R21": 6, "R22": 8, "R31": 11}
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
SIGMA_GRAD_EPS = 1e-8  # variance regularizer inside the differentiable path only


class ExtractorWeightsError(RuntimeError):
    pass


@dataclass(frozen=True)
class FeatureStats:
    """Per-layer channel means and standard deviations (population convention)."""

    layers: tuple
    mu: dict     # layer -> (C,) float64
    sigma: dict  # layer -> (C,) float64

    def __post_init__(self):
        for layer in self.layers:
            if self.mu[layer].shape != self.sigma[layer].shape:
                raise ValueError(f"mu/sigma length mismatch at {layer}")
            if np.any(self.sigma[layer] < 0):
                raise ValueError(f"negative sigma at {layer}")

    def allclose(self, other, rtol=1e-6, atol=1e-9):
        return self.layers == other.layers and all(
            np.allclose(self.mu[l], other.mu[l], rtol=rtol, atol=atol)
            and np.allclose(self.sigma[l], other.sigma[l], rtol=rtol, atol=atol)
            for l in self.layers)


def spatial_stats(fmap: torch.Tensor, grad_safe: bool = False):
    """Channel mean and population std over spatial positions.

    fmap: (N, C, H, W). grad_safe adds a small variance floor so gradients
    stay finite on constant channels; reported statistics never use it.
    """
    mu = fmap.mean(dim=(2, 3))
    var = fmap.var(dim=(2, 3), unbiased=False)
    if grad_safe:
        var = var + SIGMA_GRAD_EPS
    return mu, torch.sqrt(var)


def default_weights_path():
    return os.environ.get("STYLESWAP_VGG19_WEIGHTS", "")


class StyleExtractor:
    """Frozen VGG19 slice through relu3_1 with fixed input normalization."""

    def __init__(self, backend="seeded_random", weights_path=None, seed=0,
                 style_layers=STYLE_LAYERS, content_layer=CONTENT_LAYER,
                 upsample_to=None, input_norm=None, dtype=torch.float32):
        unknown = [l for l in tuple(style_layers) + (content_layer,) if l not in _LAYER_INDEX]
        if unknown:
            raise ValueError(f"unknown layer codes {unknown}; known: {sorted(_LAYER_INDEX)}")
        self.style_layers = tuple(style_layers)
        self.content_layer = content_layer
        self.backend = backend
        self.seed = seed
        self.upsample_to = upsample_to
        max_index = max(_LAYER_INDEX[l] for l in self.style_layers + (content_layer,))
        # the normalization belongs to the weights: identity for random filters
        if input_norm is None:
            input_norm = "imagenet" if backend == "imagenet" else "identity"
        self.input_norm = input_norm

        if backend == "seeded_random":
            torch.manual_seed(seed)
            features = torchvision.models.vgg19(weights=None).features
        elif backend == "imagenet":
            path = weights_path or default_weights_path()
            if not path or not Path(path).exists():
                raise ExtractorWeightsError(
                    "pretrained VGG19 weights not found. Download "
                    "https://download.pytorch.org/models/vgg19-dcbb9e9d.pth on a "
                    "networked machine and point STYLESWAP_VGG19_WEIGHTS (or "
                    f"weights_path) at it; got {path!r}")
            features = torchvision.models.vgg19(weights=None).features
            state = torch.load(path, map_location="cpu", weights_only=True)
            state = {k[len("features."):]: v for k, v in state.items()
                     if k.startswith("features.")}
            features.load_state_dict(state, strict=False)
        else:
            raise ValueError(f"unknown backend {backend!r}")

        self.slice = features[: max_index + 1].to(dtype)
        self.slice.eval()
        for p in self.slice.parameters():
            p.requires_grad_(False)
        if input_norm == "imagenet":
            mean, std = IMAGENET_MEAN, IMAGENET_STD
        elif input_norm == "identity":
            mean, std = (0.0, 0.0, 0.0), (1.0, 1.0, 1.0)
        else:
            raise ValueError(f"unknown input_norm {input_norm!r}")
        self._mean = torch.tensor(mean, dtype=dtype).view(1, 3, 1, 1)
        self._std = torch.tensor(std, dtype=dtype).view(1, 3, 1, 1)
        self.dtype = dtype

    def fingerprint(self):
        return fingerprint_state_dict(self.slice.state_dict())

    def to_double(self):
        """Float64 twin (used by the finite-difference gradient check)."""
        import copy
        twin = StyleExtractor.__new__(StyleExtractor)
        twin.__dict__.update(self.__dict__)
        twin.slice = copy.deepcopy(self.slice).double()
        twin._mean = self._mean.double()
        twin._std = self._std.double()
        twin.dtype = torch.float64
        return twin

    def feature_maps(self, images: torch.Tensor) -> dict:
        """All tapped relu outputs for a [0,1] image batch (N,3,H,W)."""
        x = images.to(self.dtype)
        if self.upsample_to:
            x = torch.nn.functional.interpolate(
                x, size=(self.upsample_to, self.upsample_to),
                mode="bilinear", align_corners=False)
        x = (x - self._mean) / self._std
        taps = {}
        wanted = {_LAYER_INDEX[l]: l for l in set(self.style_layers) | {self.content_layer}}
        for i, layer in enumerate(self.slice):
            x = layer(x)
            if i in wanted:
                taps[wanted[i]] = x
        return taps

    def content_map(self, images: torch.Tensor) -> torch.Tensor:
        return self.feature_maps(images)[self.content_layer]

    def style_stats_tensors(self, images: torch.Tensor, grad_safe=False):
        """Per-layer (mu, sigma) torch tensors, differentiable."""
        maps = self.feature_maps(images)
        return {l: spatial_stats(maps[l], grad_safe=grad_safe) for l in self.style_layers}

    def extract(self, images, with_content=False):
        """FeatureStats for one image or a batch (the public statistics op).

        Returns a single FeatureStats (or list for a batch); with_content=True
        also returns the content-layer activation map(s) as numpy.
        """
        arr = np.array(images, dtype=np.float32)
        single = arr.ndim == 3
        if single:
            arr = arr[None]
        if arr.ndim != 4 or arr.shape[1] != 3:
            raise ValueError(f"expected (3,H,W) or (N,3,H,W), got {arr.shape}")
        with torch.no_grad():
            maps = self.feature_maps(torch.from_numpy(arr))
            stats = []
            for n in range(arr.shape[0]):
                mu, sigma = {}, {}
                for l in self.style_layers:
                    m, s = spatial_stats(maps[l][n:n + 1])
                    mu[l] = m[0].double().numpy()
                    sigma[l] = s[0].double().numpy()
                stats.append(FeatureStats(self.style_layers, mu, sigma))
            content = maps[self.content_layer].double().numpy()
        if single:
            return (stats[0], content[0]) if with_content else stats[0]
        return (stats, content) if with_content else stats


def extract_style_features(extractor: StyleExtractor, images, with_content=False):
    return extractor.extract(images, with_content=with_content)
