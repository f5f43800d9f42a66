"""Reconstruction-quality metrics on [0,1] images.

The perceptual distance uses frozen early-conv features of the toy
classifier, not the official LPIPS network, and is reported as "perceptual".
"""

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

PSNR_CAP_DB = 100.0
_SSIM_C1 = 0.01**2
_SSIM_C2 = 0.03**2


@dataclass
class MetricsRecord:
    psnr: list
    ssim: list
    mse: list
    perceptual: list

    @property
    def mean(self):
        return {k: sum(v) / len(v) for k, v in
                (("psnr", self.psnr), ("ssim", self.ssim),
                 ("mse", self.mse), ("perceptual", self.perceptual))}


def _as_batch(x):
    t = torch.as_tensor(x, dtype=torch.float32)
    if t.ndim == 3:
        t = t[None]
    return t


def mse(x, y) -> float:
    x, y = _as_batch(x), _as_batch(y)
    if x.shape != y.shape:
        raise ValueError("shape mismatch")
    return float(((x - y) ** 2).mean())


def psnr(x, y) -> float:
    """10*log10(1/mse) for [0,1] images, capped at 100 dB near-identity."""
    err = mse(x, y)
    if err < 1e-10:
        return PSNR_CAP_DB
    return min(10.0 * math.log10(1.0 / err), PSNR_CAP_DB)


def _gaussian_window(size=11, sigma=1.5):
    coords = torch.arange(size, dtype=torch.float32) - (size - 1) / 2.0
    g = torch.exp(-(coords**2) / (2 * sigma**2))
    g = g / g.sum()
    return torch.outer(g, g)


def ssim(x, y, window_size=11, sigma=1.5) -> float:
    """Mean local SSIM, 11x11 Gaussian window sigma=1.5, standard constants."""
    x, y = _as_batch(x), _as_batch(y)
    if x.shape != y.shape:
        raise ValueError("shape mismatch")
    if min(x.shape[-2:]) < window_size:
        raise ValueError(f"image smaller than the {window_size}x{window_size} window")
    c = x.shape[1]
    win = _gaussian_window(window_size, sigma).expand(c, 1, window_size, window_size)

    def blur(t):
        return F.conv2d(t, win, groups=c)

    mu_x, mu_y = blur(x), blur(y)
    var_x = blur(x * x) - mu_x**2
    var_y = blur(y * y) - mu_y**2
    cov = blur(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + _SSIM_C1) * (2 * cov + _SSIM_C2)
    den = (mu_x**2 + mu_y**2 + _SSIM_C1) * (var_x + var_y + _SSIM_C2)
    return float((num / den).mean())


class PerceptualFeatures(torch.nn.Module):
    """Frozen feature extractor: the classifier's first two conv layers."""

    def __init__(self, classifier):
        super().__init__()
        self.conv1 = classifier.conv1
        self.conv2 = classifier.conv2
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, x):
        f1 = F.relu(self.conv1(x))
        f2 = F.relu(self.conv2(f1))
        return [f1, f2]


def perceptual_distance(x, y, feature_extractor) -> float:
    """Mean l2 distance between per-sample unit-normalized feature maps."""
    x, y = _as_batch(x), _as_batch(y)
    if x.shape != y.shape:
        raise ValueError("shape mismatch")
    with torch.no_grad():
        fx, fy = feature_extractor(x), feature_extractor(y)
    dists = []
    for a, b in zip(fx, fy):
        a = a.flatten(1)
        b = b.flatten(1)
        a = a / a.norm(dim=1, keepdim=True).clamp(min=1e-12)
        b = b / b.norm(dim=1, keepdim=True).clamp(min=1e-12)
        dists.append((a - b).norm(dim=1))
    return float(torch.stack(dists).mean())


def compute_metrics(recon, target, feature_extractor=None) -> MetricsRecord:
    """Per-image metrics between a reconstructed batch and its target batch."""
    recon, target = _as_batch(recon), _as_batch(target)
    rec = MetricsRecord([], [], [], [])
    for i in range(len(recon)):
        rec.psnr.append(psnr(recon[i], target[i]))
        rec.ssim.append(ssim(recon[i], target[i]))
        rec.mse.append(mse(recon[i], target[i]))
        if feature_extractor is not None:
            rec.perceptual.append(
                perceptual_distance(recon[i], target[i], feature_extractor))
        else:
            rec.perceptual.append(float("nan"))
    return rec
