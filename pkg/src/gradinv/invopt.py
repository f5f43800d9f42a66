"""Optimization primitives for gradient inversion.

Gradient-matching distance, image fidelity regularization, the spherical
latent step, Euclidean projection onto an l1 ball, and the warmup/cosine
learning-rate schedule.
"""

import math
from dataclasses import dataclass

import torch

from .defense import TransformEstimate, apply_transform
from .models import GradientReport, compute_batch_gradients

_EPS = 1e-12


@dataclass
class LossConfig:
    metric: str = "negative-cosine"    # or "squared-l2"
    per_layer: bool = False            # average per-layer cosine instead of global
    alpha_tv: float = 1e-4
    alpha_l2: float = 1e-6

    def __post_init__(self):
        if self.metric not in ("negative-cosine", "squared-l2"):
            raise ValueError(f"unknown distance metric {self.metric!r}")
        if self.alpha_tv < 0 or self.alpha_l2 < 0:
            raise ValueError("regularization weights must be >= 0")


@dataclass
class LRSchedule:
    peak: float = 0.1
    total_steps: int = 1000
    warmup_fraction: float = 1.0 / 20.0
    decay_fraction: float = 3.0 / 4.0  # cosine-to-zero span at the end


def lr_at(schedule: LRSchedule, step: int) -> float:
    """Linear warmup to peak, flat plateau, cosine decay to zero.

    Warmup covers the first warmup_fraction of steps, the decay the last
    decay_fraction; the bridge in between stays at the peak rate.
    """
    t = schedule.total_steps
    if not 0 <= step <= t:
        raise ValueError(f"step {step} outside [0, {t}]")
    warm_end = schedule.warmup_fraction * t
    decay_start = (1.0 - schedule.decay_fraction) * t
    if step <= warm_end:
        return schedule.peak * step / warm_end if warm_end > 0 else schedule.peak
    if step <= decay_start:
        return schedule.peak
    frac = (step - decay_start) / (t - decay_start)
    return schedule.peak * 0.5 * (1.0 + math.cos(math.pi * frac))


def _cosine_distance(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    na, nb = a.norm(), b.norm()
    if float(na.detach()) == 0.0 and float(nb.detach()) == 0.0:
        return torch.full((), 2.0, dtype=a.dtype)   # maximal mismatch, not NaN
    return 1.0 - (a * b).sum() / torch.clamp(na * nb, min=_EPS)


def gradient_match_distance(a: GradientReport, b: GradientReport,
                            metric: str = "negative-cosine",
                            per_layer: bool = False) -> torch.Tensor:
    """Distance between two gradient reports over all layers.

    negative-cosine: 1 - <a, b> / (|a||b|) on the flattened concatenation
    (or the per-layer average when per_layer is set), in [0, 2].
    squared-l2: total squared difference.
    """
    if a.names() != b.names():
        raise ValueError("gradient reports have different layer censuses")
    if metric == "squared-l2":
        return sum(((ga - gb) ** 2).sum()
                   for (_, ga), (_, gb) in zip(a.entries, b.entries))
    if metric != "negative-cosine":
        raise ValueError(f"unknown distance metric {metric!r}")
    if per_layer:
        dists = [_cosine_distance(ga.reshape(-1), gb.reshape(-1))
                 for (_, ga), (_, gb) in zip(a.entries, b.entries)]
        return sum(dists) / len(dists)
    return _cosine_distance(a.flat(), b.flat())


def total_variation(images: torch.Tensor) -> torch.Tensor:
    """Anisotropic TV: summed absolute horizontal plus vertical differences."""
    dh = (images[..., :, 1:] - images[..., :, :-1]).abs().sum()
    dv = (images[..., 1:, :] - images[..., :-1, :]).abs().sum()
    return dh + dv


def fidelity_regularizer(images: torch.Tensor, alpha_l2: float,
                         alpha_tv: float) -> torch.Tensor:
    """alpha_l2 * ||x||_2 + alpha_tv * TV(x). Zero iff the image is zero."""
    return alpha_l2 * images.norm() + alpha_tv * total_variation(images)


def total_attack_loss(images01: torch.Tensor, labels: torch.Tensor, classifier,
                      shared: GradientReport, transform: TransformEstimate,
                      loss_config: LossConfig):
    """Gradient-matching distance of the transformed dummy gradients plus
    fidelity regularization. Returns (total, distance); both differentiable
    w.r.t. images01, hence w.r.t. whatever generated them.
    """
    dummy = compute_batch_gradients(classifier, images01, labels, create_graph=True)
    dummy = apply_transform(transform, dummy)
    dist = gradient_match_distance(dummy, shared, loss_config.metric,
                                   loss_config.per_layer)
    total = dist + fidelity_regularizer(images01, loss_config.alpha_l2,
                                        loss_config.alpha_tv)
    return total, dist


def radialize(z: torch.Tensor, generator: torch.Generator = None) -> torch.Tensor:
    """Rescale each sample's latent to l2 norm sqrt(k)."""
    k = z.shape[-1]
    norms = z.norm(dim=-1, keepdim=True)
    if (norms == 0).any():             # re-randomize degenerate samples
        gen = generator or torch.Generator().manual_seed(0)
        fresh = torch.randn(z.shape, generator=gen, dtype=z.dtype)
        z = torch.where(norms > 0, z, fresh)
        norms = z.norm(dim=-1, keepdim=True)
    return z * (math.sqrt(k) / norms)


def spherical_step(z: torch.Tensor, gradient: torch.Tensor,
                   lr: float) -> torch.Tensor:
    """Descend then rescale each sample back onto the sqrt(k) sphere."""
    return radialize(z - lr * gradient)


def _project_simplex(v: torch.Tensor, radius: float) -> torch.Tensor:
    """Euclidean projection of a non-negative vector onto {u >= 0, sum u = radius}.

    Sort-based O(n log n) algorithm (Duchi et al. style thresholding).
    """
    sorted_v, _ = torch.sort(v, descending=True)
    cumsum = torch.cumsum(sorted_v, dim=0)
    ks = torch.arange(1, len(v) + 1, dtype=v.dtype)
    cond = sorted_v - (cumsum - radius) / ks > 0
    rho = int(cond.nonzero().max())
    theta = (cumsum[rho] - radius) / (rho + 1)
    return torch.clamp(v - theta, min=0.0)


def project_l1_ball(v: torch.Tensor, center: torch.Tensor,
                    radius: float) -> torch.Tensor:
    """Euclidean projection of v onto {u : ||u - center||_1 <= radius}.

    Projects |v - center| onto the simplex and restores signs; v is returned
    unchanged when already inside the ball.
    """
    if radius <= 0:
        raise ValueError("radius must be > 0")
    if v.shape != center.shape:
        raise ValueError("shape mismatch between point and center")
    d = (v - center).reshape(-1)
    if d.abs().sum() <= radius:
        return v.clone()
    w = _project_simplex(d.abs(), radius) * d.sign()
    return (center.reshape(-1) + w).reshape(v.shape)


def project_l1_ball_batch(v: torch.Tensor, center: torch.Tensor,
                          radius: float) -> torch.Tensor:
    """Per-sample l1-ball projection over the leading batch dimension."""
    return torch.stack([project_l1_ball(v[i], center[i], radius)
                        for i in range(v.shape[0])])
