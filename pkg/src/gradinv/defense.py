"""Client-side gradient defenses and the attacker's adaptive transformation.

The defense *type* is declared to the attacker; its parameters are inferred
from the received report alone (clip bounds from observed norms, masks from
observed zeros). Gaussian noise admits no inverse, so its transform is the
identity and the attack simply proceeds against the noisy report.
"""

import math
from dataclasses import dataclass, field

import torch

from .models import GradientReport

DEFENSE_VARIANTS = ("none", "gaussian_noise", "clipping", "sparsification", "soteria")

# A layer is considered Soteria-defended if more than this fraction of its
# entries are exactly zero (and no other layer is).
SOTERIA_ZERO_THRESHOLD = 0.5


@dataclass
class DefenseConfig:
    variant: str = "none"
    sigma: float = 0.1                 # gaussian_noise
    clip_bound: float = 4.0            # clipping, per-layer l2 bound
    prune_rate: float = 0.9            # sparsification / soteria, fraction zeroed
    defended_layer: str = "fc.weight"  # soteria

    def __post_init__(self):
        if self.variant not in DEFENSE_VARIANTS:
            raise ValueError(f"unknown defense variant {self.variant!r}")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if self.clip_bound <= 0:
            raise ValueError("clip bound must be > 0")
        if not 0.0 < self.prune_rate < 1.0:
            raise ValueError("prune rate must be in (0, 1)")

    def to_dict(self):
        return {"variant": self.variant, "sigma": self.sigma,
                "clip_bound": self.clip_bound, "prune_rate": self.prune_rate,
                "defended_layer": self.defended_layer}


@dataclass
class TransformEstimate:
    variant: str = "none"
    clip_bounds: dict = field(default_factory=dict)   # layer -> estimated bound
    masks: dict = field(default_factory=dict)         # layer -> bool keep-mask
    sparsity: float = 0.0                             # observed zero fraction


def gaussian_noise_defense(report: GradientReport, sigma: float,
                           seed: int = 0) -> GradientReport:
    """g' = g + eps, eps ~ N(0, sigma^2) i.i.d. per entry, seeded."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    gen = torch.Generator().manual_seed(seed)
    out = []
    for name, g in report.entries:
        noise = torch.randn(g.shape, generator=gen, dtype=g.dtype) * sigma
        out.append((name, g + noise))
    return GradientReport(out, report.input_shape)


def _clip_tensor(g: torch.Tensor, bound: float) -> torch.Tensor:
    norm = g.norm()
    if norm == 0:
        return g                       # scale factor defined as 1 at zero norm
    return g * torch.clamp(bound / norm, max=1.0)


def clip_defense(report: GradientReport, bound: float) -> GradientReport:
    """Layer-wise l2 clipping: g * min(c / ||g||_2, 1)."""
    if bound <= 0:
        raise ValueError("clip bound must be > 0")
    return GradientReport([(n, _clip_tensor(g, bound)) for n, g in report.entries],
                          report.input_shape)


def _topk_mask(g: torch.Tensor, keep: int) -> torch.Tensor:
    flat = g.abs().reshape(-1)
    idx = torch.topk(flat, keep).indices
    mask = torch.zeros_like(flat, dtype=torch.bool)
    mask[idx] = True
    return mask.reshape(g.shape)


def sparsify_defense(report: GradientReport, prune_rate: float) -> GradientReport:
    """Keep the ceil((1-p)*n) largest-magnitude entries per layer, zero the rest."""
    if not 0.0 < prune_rate < 1.0:
        raise ValueError("prune rate must be in (0, 1)")
    out = []
    for name, g in report.entries:
        keep = max(1, math.ceil((1.0 - prune_rate) * g.numel()))
        out.append((name, g * _topk_mask(g, keep)))
    return GradientReport(out, report.input_shape)


def soteria_defense(report: GradientReport, prune_rate: float,
                    defended_layer: str) -> GradientReport:
    """Zero the floor(p * n_rows) smallest-l2-norm rows of one layer's gradient."""
    if defended_layer not in report.names():
        raise ValueError(f"layer {defended_layer!r} not in report")
    out = []
    for name, g in report.entries:
        if name != defended_layer:
            out.append((name, g))
            continue
        rows = g.reshape(g.shape[0], -1)
        n_zero = int(prune_rate * g.shape[0])
        drop = torch.argsort(rows.norm(dim=1))[:n_zero]
        masked = g.clone()
        masked[drop] = 0.0
        out.append((name, masked))
    return GradientReport(out, report.input_shape)


def apply_defense(report: GradientReport, config: DefenseConfig,
                  seed: int = 0) -> GradientReport:
    if config.variant == "none":
        return GradientReport(list(report.entries), report.input_shape)
    if config.variant == "gaussian_noise":
        return gaussian_noise_defense(report, config.sigma, seed)
    if config.variant == "clipping":
        return clip_defense(report, config.clip_bound)
    if config.variant == "sparsification":
        return sparsify_defense(report, config.prune_rate)
    if config.variant == "soteria":
        return soteria_defense(report, config.prune_rate, config.defended_layer)
    raise ValueError(config.variant)


def infer_transform(report: GradientReport,
                    declared_variant: str) -> TransformEstimate:
    """Estimate defense parameters from the received report alone."""
    if declared_variant in ("none", "gaussian_noise"):
        return TransformEstimate(variant="none")
    if declared_variant == "clipping":
        bounds = {n: float(g.norm()) for n, g in report.entries}
        return TransformEstimate(variant="clipping", clip_bounds=bounds)
    if declared_variant == "sparsification":
        masks = {n: g != 0 for n, g in report.entries}
        total = sum(g.numel() for _, g in report.entries)
        zeros = sum(int((g == 0).sum()) for _, g in report.entries)
        return TransformEstimate(variant="sparsification", masks=masks,
                                 sparsity=zeros / total)
    if declared_variant == "soteria":
        candidates = [(n, float((g == 0).float().mean())) for n, g in report.entries
                      if float((g == 0).float().mean()) > SOTERIA_ZERO_THRESHOLD]
        if not candidates:
            raise ValueError("soteria declared but no layer has a dominant "
                             "zero fraction")
        name = max(candidates, key=lambda c: c[1])[0]
        g = dict(report.entries)[name]
        return TransformEstimate(variant="soteria", masks={name: g != 0},
                                 sparsity=float((g == 0).float().mean()))
    raise ValueError(f"unknown defense variant {declared_variant!r}")


def apply_transform(estimate: TransformEstimate,
                    dummy: GradientReport) -> GradientReport:
    """Degrade dummy gradients the way the client's defense degraded g.

    Differentiable w.r.t. the dummy tensors (masks and bounds are constants).
    """
    if estimate.variant == "none":
        return dummy
    out = []
    for name, g in dummy.entries:
        if estimate.variant == "clipping":
            out.append((name, _clip_tensor(g, estimate.clip_bounds[name])))
        else:
            mask = estimate.masks.get(name)
            out.append((name, g * mask if mask is not None else g))
    return GradientReport(out, dummy.input_shape)
