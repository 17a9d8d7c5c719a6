"""Statistics-matching style transfer by gradient descent on pixels.

The objective is alpha * L_content + beta * L_style where L_content is the
L2 distance in pixel space or at the content layer, and L_style sums, over
the style layers, the L2 distances between channel-mean vectors and between
channel-std vectors. Optimization starts at the content image and stops on
one of three conditions: the content budget is exceeded (return the last
iterate still inside it), the style loss plateaus, or the iteration cap.
"""

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .extractor import FeatureStats, StyleExtractor, spatial_stats
from .utils import derive_seed, torch_generator

NORM_GRAD_EPS = 1e-12  # inside sqrt so the norm gradient is finite at zero
CONTENT_MODES = ("pixel", "feature")
STOP_REASONS = ("content_budget", "style_plateau", "max_iters")


class StylizationDivergence(RuntimeError):
    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


def content_loss(i_gen, i_c, mode="pixel", extractor: StyleExtractor = None) -> float:
    """L2 distance between generated and content image, in pixel space or at
    the extractor's content layer."""
    a = np.asarray(i_gen, dtype=np.float64)
    b = np.asarray(i_c, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if mode == "pixel":
        return float(np.linalg.norm(a - b))
    if mode == "feature":
        if extractor is None:
            raise ValueError("feature mode requires an extractor")
        fa = extractor.extract(a.astype(np.float32), with_content=True)[1]
        fb = extractor.extract(b.astype(np.float32), with_content=True)[1]
        return float(np.linalg.norm(fa - fb))
    raise ValueError(f"unknown content mode {mode!r}")


def style_loss(stats_gen: FeatureStats, stats_style: FeatureStats) -> float:
    """Sum over layers of mean-vector L2 distance plus std-vector L2 distance."""
    if stats_gen.layers != stats_style.layers:
        raise ValueError(f"layer mismatch {stats_gen.layers} vs {stats_style.layers}")
    total = 0.0
    for l in stats_gen.layers:
        if stats_gen.mu[l].shape != stats_style.mu[l].shape:
            raise ValueError(f"channel count mismatch at {l}")
        total += float(np.linalg.norm(stats_gen.mu[l] - stats_style.mu[l]))
        total += float(np.linalg.norm(stats_gen.sigma[l] - stats_style.sigma[l]))
    return total


def total_loss(l_c, l_s, alpha, beta) -> float:
    if l_c < 0 or l_s < 0:
        raise ValueError("losses must be non-negative")
    return alpha * l_c + beta * l_s


@dataclass
class StylizationProblem:
    content: np.ndarray
    style: np.ndarray
    alpha: float = 1.0
    beta: float = 10000.0
    content_mode: str = "feature"
    content_budget: float = math.inf
    patience: int = 25
    plateau_rel: float = 1e-4
    max_iters: int = 300
    step_size: float = 0.05
    adam_eps: float = 1e-8
    seed: int = 0
    init: str = "content"  # or "noise"
    style_layers: tuple = None   # None: the extractor's configuration
    content_layer: str = None

    def __post_init__(self):
        self.content = np.asarray(self.content, dtype=np.float32)
        self.style = np.asarray(self.style, dtype=np.float32)
        if self.content.ndim != 3 or self.content.shape[0] != 3:
            raise ValueError(f"content must be (3,H,W), got {self.content.shape}")
        if self.style.ndim != 3 or self.style.shape[0] != 3:
            raise ValueError(f"style must be (3,H,W), got {self.style.shape}")
        if self.alpha < 0 or self.beta < 0 or self.alpha + self.beta <= 0:
            raise ValueError("need alpha, beta >= 0 and alpha + beta > 0")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.content_budget > 0:
            raise ValueError("content_budget must be > 0")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.content_mode not in CONTENT_MODES:
            raise ValueError(f"content_mode must be one of {CONTENT_MODES}")
        if self.init not in ("content", "noise"):
            raise ValueError(f"init must be 'content' or 'noise', got {self.init!r}")


@dataclass
class StylizationResult:
    image: np.ndarray
    trace: list                     # (L_C, L_S, L_total) per iteration
    stop_reason: str
    iterations: int
    initial: tuple = None           # losses at the start iterate
    final: tuple = None             # losses recomputed at the returned image

    def min_total(self):
        vals = [t[2] for t in self.trace]
        if self.initial is not None:
            vals.append(self.initial[2])
        return min(vals)


def _safe_norm(diff, dim):
    return torch.sqrt((diff ** 2).sum(dim=dim) + NORM_GRAD_EPS)


class _Objective:
    """Differentiable batched loss for a fixed (content, style) pairing."""

    def __init__(self, extractor, contents, styles, alpha, beta, content_mode):
        self.ex = extractor
        self.alpha = alpha
        self.beta = beta
        self.mode = content_mode
        with torch.no_grad():
            self.style_stats = extractor.style_stats_tensors(styles, grad_safe=True)
            if content_mode == "feature":
                self.content_target = extractor.content_map(contents)
            else:
                self.content_target = contents.clone()

    def __call__(self, x):
        """Returns per-image (L_C, L_S, L_total) tensors of shape (N,)."""
        n = x.shape[0]
        maps = self.ex.feature_maps(x)
        l_s = x.new_zeros(n)
        for l in self.ex.style_layers:
            mu, sigma = spatial_stats(maps[l], grad_safe=True)
            t_mu, t_sigma = self.style_stats[l]
            l_s = l_s + _safe_norm(mu - t_mu, dim=1) + _safe_norm(sigma - t_sigma, dim=1)
        if self.mode == "feature":
            diff = maps[self.ex.content_layer] - self.content_target
        else:
            diff = x - self.content_target
        l_c = _safe_norm(diff.reshape(n, -1), dim=1)
        return l_c, l_s, self.alpha * l_c + self.beta * l_s


def _init_images(contents, seeds, init):
    if init == "content":
        return contents.clone()
    noise = torch.empty_like(contents)
    for i, s in enumerate(seeds):
        gen = torch_generator(derive_seed("stylize-noise", s))
        noise[i].uniform_(0.0, 1.0, generator=gen)
    return noise


def stylize_batch(extractor, contents, styles, alpha=1.0, beta=10000.0,
                  content_mode="feature", content_budgets=None, patience=25,
                  plateau_rel=1e-4, max_iters=300, step_size=0.05, adam_eps=1e-8,
                  seeds=None, init="content", keep_traces=True):
    """Vectorized stylization of N independent problems sharing one config.

    Per-image stopping: an image whose content loss exceeds its budget keeps
    its last in-budget iterate; a plateaued image keeps its current one. The
    optimizer is elementwise, so each image's trajectory is identical to a
    single-image run (batching is the concurrency mechanism).

    adam_eps is a real dial, not a numerical formality: with eps comparable
    to the per-pixel gradient scale, a small style weight runs damped and
    races the iteration cap while a large one moves at full speed and runs
    into the content budget, which is what makes the style-weight sweep bite.
    """
    contents = torch.as_tensor(np.array(contents, dtype=np.float32))
    styles = torch.as_tensor(np.array(styles, dtype=np.float32))
    n = contents.shape[0]
    seeds = list(seeds) if seeds is not None else [0] * n
    budgets = torch.as_tensor(
        np.full(n, math.inf, np.float64) if content_budgets is None
        else np.asarray(content_budgets, np.float64), dtype=contents.dtype)
    if (budgets <= 0).any():
        raise ValueError("content budgets must be > 0")

    objective = _Objective(extractor, contents, styles, alpha, beta, content_mode)
    x = _init_images(contents, seeds, init).requires_grad_(True)
    opt = torch.optim.Adam([x], lr=step_size, eps=adam_eps)

    snapshot = contents.clone()          # fallback: the content image itself
    have_snapshot = torch.zeros(n, dtype=torch.bool)
    stopped = torch.zeros(n, dtype=torch.bool)
    reasons = [None] * n
    iters = torch.zeros(n, dtype=torch.long)
    best_ls = torch.full((n,), math.inf)
    stale = torch.zeros(n, dtype=torch.long)
    traces = [[] for _ in range(n)] if keep_traces else None
    initials = [None] * n

    for it in range(max_iters + 1):
        l_c, l_s, l_t = objective(x)
        vals = torch.stack([l_c, l_s, l_t]).detach().T  # (n, 3)
        if not torch.isfinite(vals).all():
            raise StylizationDivergence(
                f"non-finite loss at iteration {it}",
                traces if keep_traces else None)
        active = ~stopped
        if it == 0:
            for i in range(n):
                initials[i] = tuple(float(v) for v in vals[i])
            best_ls = l_s.detach().clone()
            within = l_c.detach() <= budgets
            snapshot[within] = x.detach()[within]
            have_snapshot |= within
            # a start iterate already out of budget can never be improved on
            over = ~within
            stopped |= over
            for i in torch.nonzero(over).flatten().tolist():
                reasons[i] = "content_budget"
        else:
            if keep_traces:
                for i in torch.nonzero(active).flatten().tolist():
                    traces[i].append(tuple(float(v) for v in vals[i]))
            iters[active] += 1
            over = active & (l_c.detach() > budgets)
            stopped |= over
            for i in torch.nonzero(over).flatten().tolist():
                reasons[i] = "content_budget"
            still = active & ~over
            snapshot[still] = x.detach()[still]
            have_snapshot |= still
            improved = l_s.detach() < best_ls * (1.0 - plateau_rel)
            best_ls = torch.minimum(best_ls, l_s.detach())
            stale = torch.where(improved, torch.zeros_like(stale), stale + 1)
            plateau = still & (stale >= patience)
            stopped |= plateau
            for i in torch.nonzero(plateau).flatten().tolist():
                reasons[i] = "style_plateau"
        if stopped.all() or it == max_iters:
            break
        opt.zero_grad()
        l_t.sum().backward()
        opt.step()
        with torch.no_grad():
            x.clamp_(0.0, 1.0)

    for i in range(n):
        if reasons[i] is None:
            reasons[i] = "max_iters"

    final_imgs = snapshot.detach()
    with torch.no_grad():
        f_c, f_s, f_t = objective(final_imgs)
    results = []
    for i in range(n):
        results.append(StylizationResult(
            image=final_imgs[i].numpy().copy(),
            trace=traces[i] if keep_traces else [],
            stop_reason=reasons[i],
            iterations=int(iters[i]),
            initial=initials[i],
            final=(float(f_c[i]), float(f_s[i]), float(f_t[i]))))
    return results


def stylize(problem: StylizationProblem, extractor: StyleExtractor) -> StylizationResult:
    """Solve one stylization problem (batch-of-one of stylize_batch)."""
    if problem.style_layers is not None and tuple(problem.style_layers) != extractor.style_layers:
        raise ValueError("problem style_layers do not match the extractor configuration")
    if problem.content_layer is not None and problem.content_layer != extractor.content_layer:
        raise ValueError("problem content_layer does not match the extractor configuration")
    res = stylize_batch(
        extractor, problem.content[None], problem.style[None],
        alpha=problem.alpha, beta=problem.beta, content_mode=problem.content_mode,
        content_budgets=[problem.content_budget], patience=problem.patience,
        plateau_rel=problem.plateau_rel, max_iters=problem.max_iters,
        step_size=problem.step_size, adam_eps=problem.adam_eps,
        seeds=[problem.seed], init=problem.init)[0]
    return res


def engine_losses(extractor, image, content, style, alpha, beta, content_mode="feature"):
    """The engine's own differentiable loss at a point, as floats (for tests
    and for recomputing reported trace entries)."""
    obj = _Objective(extractor, torch.as_tensor(np.array(content, np.float32))[None],
                     torch.as_tensor(np.array(style, np.float32))[None], alpha, beta,
                     content_mode)
    with torch.no_grad():
        l_c, l_s, l_t = obj(torch.as_tensor(np.array(image, np.float32))[None])
    return float(l_c[0]), float(l_s[0]), float(l_t[0])


def gradient_check(problem: StylizationProblem, extractor: StyleExtractor,
                   image_point=None, epsilon_fd=1e-5, num_coords=64, seed=0) -> float:
    """Max relative error between the analytic pixel gradient of the engine
    objective and central finite differences, in double precision."""
    ex64 = extractor.to_double()
    contents = torch.as_tensor(np.array(problem.content, np.float64))[None]
    styles = torch.as_tensor(np.array(problem.style, np.float64))[None]
    obj = _Objective(ex64, contents, styles, problem.alpha, problem.beta,
                     problem.content_mode)
    point = problem.content if image_point is None else image_point
    x = torch.as_tensor(np.array(point, np.float64))[None].requires_grad_(True)
    _, _, l_t = obj(x)
    analytic = torch.autograd.grad(l_t.sum(), x)[0][0].numpy()

    rng = np.random.default_rng(derive_seed("gradcheck", seed))
    flat_idx = rng.choice(analytic.size, size=min(num_coords, analytic.size), replace=False)
    base = np.array(point, np.float64)
    max_rel = 0.0
    for fi in flat_idx:
        c, h, w = np.unravel_index(fi, analytic.shape)
        for sign in (+1, -1):
            pert = base.copy()
            pert[c, h, w] += sign * epsilon_fd
            with torch.no_grad():
                _, _, lt = obj(torch.as_tensor(pert)[None])
            if sign > 0:
                f_plus = float(lt[0])
            else:
                f_minus = float(lt[0])
        fd = (f_plus - f_minus) / (2 * epsilon_fd)
        an = float(analytic[c, h, w])
        rel = abs(fd - an) / max(abs(fd), abs(an), 1e-8)
        max_rel = max(max_rel, rel)
    return max_rel
