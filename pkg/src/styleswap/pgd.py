"""Projected gradient descent on pixels, L-infinity or L2 ball.

One primitive serves four callers: adversarial training batches, the
non-robust dataset construction, disagreement mining, and the evaluation
baseline attack. Batched and deterministic given the generator.

The L-inf variant takes sign steps (the usual evaluation attack). The L2
variant takes normalized-gradient steps and projects onto the L2 ball; the
relabeling construction uses it because a tight L2 budget concentrates the
perturbation on the most predictive feature directions instead of saturated
sign patterns.
"""

import torch
import torch.nn.functional as F


def _project_l2(delta, epsilon):
    flat = delta.flatten(1)
    norms = flat.norm(dim=1, keepdim=True).clamp_min(1e-12)
    factor = (epsilon / norms).clamp(max=1.0)
    return (flat * factor).view_as(delta)


def pgd_perturb(module, images, labels, epsilon, steps, step_size,
                targeted=False, random_start=False, norm="linf", generator=None):
    """Perturb `images` within an epsilon ball (of the given norm) of themselves.

    Untargeted: ascend cross-entropy on `labels` (the true labels).
    Targeted:   descend cross-entropy on `labels` (the target labels).
    Pixels stay clamped to [0,1]. Returns a detached tensor.
    """
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    if norm not in ("linf", "l2"):
        raise ValueError(f"norm must be 'linf' or 'l2', got {norm!r}")
    module.eval()
    x0 = images.detach()
    if epsilon == 0 or steps == 0:
        return x0.clone()
    if random_start:
        noise = torch.empty_like(x0)
        if norm == "linf":
            noise.uniform_(-epsilon, epsilon, generator=generator)
        else:
            noise.normal_(0.0, epsilon / noise[0].numel() ** 0.5, generator=generator)
            noise = _project_l2(noise, epsilon)
        x = torch.clamp(x0 + noise, 0.0, 1.0)
    else:
        x = x0.clone()
    sign = -1.0 if targeted else 1.0
    for _ in range(int(steps)):
        x = x.detach().requires_grad_(True)
        loss = F.cross_entropy(module(x), labels)
        grad = torch.autograd.grad(loss, x)[0]
        with torch.no_grad():
            if norm == "linf":
                x = x + sign * step_size * grad.sign()
                x = torch.min(torch.max(x, x0 - epsilon), x0 + epsilon)
            else:
                g_norm = grad.flatten(1).norm(dim=1).clamp_min(1e-12)
                x = x + sign * step_size * grad / g_norm.view(-1, 1, 1, 1)
                x = x0 + _project_l2(x - x0, epsilon)
            x = torch.clamp(x, 0.0, 1.0)
    return x.detach()
