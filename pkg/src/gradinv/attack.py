"""The staged gradient-inversion attack (GIFD), its ablation variants,
label extraction from the final-FC gradient, and pixel-space baselines.

The full attack first searches the generator's latent space with a spherical
optimizer, then walks the intermediate feature domains in order: the optimum
of each stage seeds the next stage's search, which is confined to an l1 ball
around that seed by projected gradient descent. The output is taken from the
stage with the smallest gradient-matching loss.
"""

import math
import time
from dataclasses import dataclass, field, replace

import torch

from .defense import infer_transform
from .invopt import (LossConfig, LRSchedule, lr_at, project_l1_ball_batch,
                     radialize, total_attack_loss)
from .models import GradientReport

VARIANTS = ("gifd", "gifd-z", "gifd-f", "gifd-e", "direct-pixel", "latent-l2")


@dataclass
class AttackConfig:
    variant: str = "gifd"
    k: int = None                      # last feature domain to search; None -> N-1
    radius_scale: float = 0.05         # r[i] = scale * dim(h_i) unless radii given
    radii: list = None
    steps: int = 1000                  # iterations per stage
    peak_lr: float = 0.1
    trials: int = 4
    batch_size: int = 1
    loss: LossConfig = field(default_factory=LossConfig)
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown attack variant {self.variant!r}")
        if self.trials < 1:
            raise ValueError("need at least one trial")


@dataclass
class AttackResult:
    images: torch.Tensor               # best reconstruction, [0, 1]
    chosen_stage: int                  # 0 = latent stage, i = feature domain i
    stage_losses: list                 # winning trial's end-of-stage match losses
    final_loss: float
    trial_losses: list                 # one final loss per successful trial
    trial_index: int
    labels: list
    seconds: float
    variant: str = "gifd"


class TrialFailed(RuntimeError):
    """No finite loss was ever observed during a trial."""


# ---------------------------------------------------------------------------
# Label extraction


def _fc_weight_grad(report: GradientReport, classifier) -> torch.Tensor:
    names = report.names()
    fc_name = None
    for name in names:
        if name.endswith("fc.weight") or name == "fc.weight":
            fc_name = name
    if fc_name is None:
        raise ValueError("report has no final fully-connected weight gradient")
    return dict(report.entries)[fc_name]


def extract_label_single(report: GradientReport, classifier) -> int:
    """Single-sample label from the sign structure of the FC weight gradient.

    With non-negative pre-FC features and cross-entropy, the true class's
    gradient row is the unique row with non-positive inner product against
    every other row. Falls back to the most-negative row sum if the pairwise
    test is not uniquely satisfied.
    """
    g = _fc_weight_grad(report, classifier)
    if torch.count_nonzero(g) == 0:
        raise ValueError("all-zero FC gradient, cannot extract label")
    gram = g @ g.T
    gram.fill_diagonal_(0.0)
    qualifies = (gram <= 0).all(dim=1)
    if int(qualifies.sum()) == 1:
        return int(qualifies.nonzero()[0])
    return int(g.sum(dim=1).argmin())


def extract_labels_batch(report: GradientReport, classifier, batch_size: int):
    """The batch_size classes with the most negative column-wise minima of the
    FC weight gradient, sorted. Assumes non-repeating labels in the batch.
    """
    g = _fc_weight_grad(report, classifier)
    num_classes = g.shape[0]
    if batch_size > num_classes:
        raise ValueError(f"batch size {batch_size} exceeds {num_classes} classes")
    if batch_size == 1:
        return [extract_label_single(report, classifier)]
    mins = g.min(dim=1).values
    picked = torch.argsort(mins)[:batch_size]
    return sorted(int(i) for i in picked)


# ---------------------------------------------------------------------------
# Stage optimization


def _stage_radii(generator, k: int, config: AttackConfig):
    if config.radii is not None:
        if len(config.radii) != k:
            raise ValueError(f"need {k} radii, got {len(config.radii)}")
        return list(config.radii)
    dims = [int(torch.tensor(generator.cut_shapes[i]).prod())
            for i in range(1, k + 1)]
    return [config.radius_scale * d for d in dims]


def _optimize_stage(make_images, var0, config, *, sphere=False, center=None,
                    radius=None, rng=None):
    """Adam descent on the attack loss with per-step warmup/cosine lr.

    After each step the iterate is re-projected: onto the sqrt(k) sphere for
    the latent stage, or onto the l1 ball around the stage seed when a radius
    is given. Returns (best loss seen, best iterate, distance at best iterate).
    """
    var = var0.detach().clone().requires_grad_(True)
    opt = torch.optim.Adam([var], lr=config.peak_lr)
    sched = LRSchedule(peak=config.peak_lr, total_steps=config.steps)
    best_total = math.inf
    best_var = var0.detach().clone()
    for step in range(config.steps):
        for group in opt.param_groups:
            group["lr"] = lr_at(sched, step + 1)
        total, _ = make_images(var)
        if torch.isfinite(total) and total.item() < best_total:
            best_total = total.item()
            best_var = var.detach().clone()
        opt.zero_grad()
        total.backward()
        opt.step()
        with torch.no_grad():
            if sphere:
                var.copy_(radialize(var, rng))
            elif radius is not None:
                var.copy_(project_l1_ball_batch(var, center, radius))
    if not math.isfinite(best_total):
        raise TrialFailed("no finite loss observed in stage")
    _, best_dist = make_images(best_var)
    return best_total, best_var, float(best_dist.detach())


def _gifd_trial(generator, classifier, shared, transform, labels, config,
                trial_seed, k, radii, project):
    """One seeded trial of the staged search. Returns per-stage records."""
    rng = torch.Generator().manual_seed(trial_seed)
    batch = len(labels)

    def stage_loss(stage_idx):
        def closure(var):
            if stage_idx == 0:
                x = generator(var, labels if generator.num_classes else None)
            else:
                x = generator.forward_from(stage_idx, var)
            x01 = (x + 1.0) / 2.0
            return total_attack_loss(x01, labels, classifier, shared,
                                     transform, config.loss)
        return closure

    def render(stage_idx, var):
        with torch.no_grad():
            if stage_idx == 0:
                x = generator(var, labels if generator.num_classes else None)
            else:
                x = generator.forward_from(stage_idx, var)
        return (x + 1.0) / 2.0

    z0 = radialize(torch.randn(batch, generator.latent_dim, generator=rng))
    _, z_star, dist0 = _optimize_stage(stage_loss(0), z0, config,
                                       sphere=True, rng=rng)
    stage_losses = [dist0]
    stage_images = [render(0, z_star)]

    with torch.no_grad():
        h = generator.blocks[0](generator.condition(z_star, labels)
                                if generator.num_classes else z_star)
    for i in range(1, k + 1):
        center = h.detach().clone()
        _, h_star, dist_i = _optimize_stage(
            stage_loss(i), center, config,
            center=center if project else None,
            radius=radii[i - 1] if project else None)
        stage_losses.append(dist_i)
        stage_images.append(render(i, h_star))
        if i < k:
            with torch.no_grad():
                h = generator.blocks[i](h_star)
    return stage_losses, stage_images


def select_best_trial(results):
    """Least final matching loss wins; ties go to the lowest trial index."""
    if not results:
        raise ValueError("no successful trials to select from")
    best = min(range(len(results)), key=lambda i: results[i]["final_loss"])
    return results[best]


def run_gifd(generator, classifier, shared: GradientReport,
             config: AttackConfig, labels=None,
             declared_defense: str = "none") -> AttackResult:
    """Full multi-trial attack against a public gradient report.

    Consumes only the report (and the declared defense type); labels are
    extracted from the report unless provided.
    """
    t0 = time.time()
    variant = config.variant
    if variant == "direct-pixel":
        return run_direct_pixel(classifier, shared, config, labels,
                                declared_defense)
    if variant == "latent-l2":
        config = replace(config, loss=replace(config.loss, metric="squared-l2"))

    n = generator.num_cuts
    k = config.k if config.k is not None else n - 1
    if variant in ("gifd-z", "latent-l2"):
        k = 0
    if not 0 <= k <= n:
        raise ValueError(f"K={k} outside the generator's cut range [0, {n}]")
    radii = _stage_radii(generator, k, config)
    project = variant == "gifd"

    transform = infer_transform(shared, declared_defense)
    if labels is None:
        labels = extract_labels_batch(shared, classifier, config.batch_size)
    labels_t = torch.as_tensor(labels, dtype=torch.long)

    trial_records = []
    for trial in range(config.trials):
        try:
            stage_losses, stage_images = _gifd_trial(
                generator, classifier, shared, transform, labels_t, config,
                config.seed + trial, k, radii, project)
        except TrialFailed:
            continue
        if variant == "gifd-f":
            chosen = len(stage_losses) - 1     # always the last searched layer
        else:
            chosen = min(range(len(stage_losses)), key=lambda i: stage_losses[i])
        trial_records.append({
            "trial": trial,
            "stage_losses": stage_losses,
            "chosen_stage": chosen,
            "final_loss": stage_losses[chosen],
            "images": stage_images[chosen],
        })
    if not trial_records:
        raise RuntimeError("all attack trials failed with non-finite losses")
    best = select_best_trial(trial_records)
    return AttackResult(
        images=best["images"],
        chosen_stage=best["chosen_stage"],
        stage_losses=best["stage_losses"],
        final_loss=best["final_loss"],
        trial_losses=[r["final_loss"] for r in trial_records],
        trial_index=best["trial"],
        labels=[int(v) for v in labels],
        seconds=time.time() - t0,
        variant=variant,
    )


run_variant = run_gifd


def run_direct_pixel(classifier, shared: GradientReport, config: AttackConfig,
                     labels=None, declared_defense: str = "none") -> AttackResult:
    """Pixel-space baseline: optimize the image batch directly, clamped to
    [0,1] after every step. Metric comes from the loss config (negative
    cosine for an IG-style run, squared-l2 for a GI-style one).
    """
    t0 = time.time()
    transform = infer_transform(shared, declared_defense)
    if labels is None:
        labels = extract_labels_batch(shared, classifier, config.batch_size)
    labels_t = torch.as_tensor(labels, dtype=torch.long)
    shape = (len(labels_t),) + tuple(shared.input_shape)

    def closure(var):
        return total_attack_loss(var.clamp(0.0, 1.0), labels_t, classifier,
                                 shared, transform, config.loss)

    trial_records = []
    for trial in range(config.trials):
        rng = torch.Generator().manual_seed(config.seed + trial)
        x0 = torch.rand(shape, generator=rng)
        try:
            var = x0.clone().requires_grad_(True)
            opt = torch.optim.Adam([var], lr=config.peak_lr)
            sched = LRSchedule(peak=config.peak_lr, total_steps=config.steps)
            best_total, best_x = math.inf, x0.clone()
            for step in range(config.steps):
                for group in opt.param_groups:
                    group["lr"] = lr_at(sched, step + 1)
                total, _ = closure(var)
                if torch.isfinite(total) and total.item() < best_total:
                    best_total = total.item()
                    best_x = var.detach().clamp(0.0, 1.0).clone()
                opt.zero_grad()
                total.backward()
                opt.step()
                with torch.no_grad():
                    var.clamp_(0.0, 1.0)
            if not math.isfinite(best_total):
                raise TrialFailed("non-finite losses throughout")
            _, dist = closure(best_x)
            dist = dist.detach()
        except TrialFailed:
            continue
        trial_records.append({
            "trial": trial,
            "stage_losses": [float(dist)],
            "chosen_stage": 0,
            "final_loss": float(dist),
            "images": best_x,
        })
    if not trial_records:
        raise RuntimeError("all attack trials failed with non-finite losses")
    best = select_best_trial(trial_records)
    return AttackResult(
        images=best["images"],
        chosen_stage=0,
        stage_losses=best["stage_losses"],
        final_loss=best["final_loss"],
        trial_losses=[r["final_loss"] for r in trial_records],
        trial_index=best["trial"],
        labels=[int(v) for v in labels_t],
        seconds=time.time() - t0,
        variant="direct-pixel",
    )
