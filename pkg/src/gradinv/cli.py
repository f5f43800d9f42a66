"""Experiment harness: train the toy GAN, run attacks, sweep K / defenses /
batch sizes, and emit CSV tables plus plots.

Every run directory is self-describing (config echo + seeds + package
version); reruns with the same config and seed reproduce outputs bit-exactly.
"""

import argparse
import dataclasses
import json
import os
import sys
from dataclasses import dataclass, field, replace

import numpy as np
import torch
import yaml

from . import __version__
from .attack import AttackConfig, run_gifd
from .data import DatasetSpec, StyleTransform, apply_style, load_dataset, save_images
from .defense import DefenseConfig
from .flsim import load_public_report, load_truth, produce_exchange, save_exchange
from .invopt import LossConfig
from .metrics import PerceptualFeatures, compute_metrics
from .models import (ClientBatch, GanTrainConfig, SmallConvNet, checkpoint_digest,
                     load_checkpoint, save_checkpoint, train_classifier,
                     train_toy_gan)


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    name: str = "run"
    out_dir: str = "runs"
    seed: int = 0
    classifier_seed: int = 0
    classifier_width: int = 16
    classifier_pretrain_epochs: int = 0
    generator_checkpoint: str = "runs/gan-ckpt"
    num_targets: int = 10
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    gan: GanTrainConfig = field(default_factory=GanTrainConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    defense: DefenseConfig = field(default_factory=lambda: DefenseConfig("none"))
    style: StyleTransform = field(default_factory=StyleTransform)


_SECTIONS = {"dataset": DatasetSpec, "gan": GanTrainConfig, "attack": AttackConfig,
             "defense": DefenseConfig, "style": StyleTransform}


def _build(cls, payload: dict):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(payload) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    if cls is AttackConfig and "loss" in payload and isinstance(payload["loss"], dict):
        payload = dict(payload, loss=_build(LossConfig, payload["loss"]))
    try:
        return cls(**payload)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str) -> ExperimentConfig:
    if not os.path.isfile(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path) as f:
        raw = yaml.safe_load(f) or {}
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    payload = {}
    for key, value in raw.items():
        if key in _SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"section {key!r} must be a mapping")
            payload[key] = _build(_SECTIONS[key], value)
        else:
            payload[key] = value
    return _build(ExperimentConfig, payload)


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return dataclasses.asdict(cfg)


def _run_dir(cfg: ExperimentConfig, suffix: str = "") -> str:
    path = os.path.join(cfg.out_dir, cfg.name + suffix)
    os.makedirs(path, exist_ok=True)
    return path


def _write_run_manifest(cfg: ExperimentConfig, run_dir: str):
    echo = config_to_dict(cfg)
    echo["_version"] = __version__
    with open(os.path.join(run_dir, "config.yaml"), "w") as f:
        yaml.safe_dump(echo, f, sort_keys=True)


def _load_models(cfg: ExperimentConfig):
    generator = load_checkpoint(cfg.generator_checkpoint)
    torch.manual_seed(cfg.classifier_seed)
    classifier = SmallConvNet(num_classes=cfg.dataset.num_classes,
                              in_channels=cfg.dataset.channels,
                              width=cfg.classifier_width,
                              resolution=cfg.dataset.resolution)
    if cfg.classifier_pretrain_epochs > 0:
        train = load_dataset(replace(cfg.dataset, split="gan-train"))
        classifier = train_classifier(train, epochs=cfg.classifier_pretrain_epochs,
                                      seed=cfg.classifier_seed,
                                      width=cfg.classifier_width)
    classifier.eval()
    return generator, classifier


def _perceptual_extractor(cfg: ExperimentConfig):
    metrics_ckpt = os.path.join(cfg.generator_checkpoint, "metrics_classifier")
    if os.path.isfile(os.path.join(metrics_ckpt, "manifest.json")):
        return PerceptualFeatures(load_checkpoint(metrics_ckpt))
    return None


def select_targets(cfg: ExperimentConfig, batch_size: int, num_targets: int):
    """Seeded uniform batches from the fl-eval split with non-repeating
    labels inside each batch; the style transform is applied afterwards."""
    store = load_dataset(replace(cfg.dataset, split="fl-eval"))
    num_classes = int(store.labels.max()) + 1
    if batch_size > num_classes:
        raise ConfigError(f"batch size {batch_size} exceeds {num_classes} classes")
    rng = np.random.default_rng(cfg.seed)
    by_class = {c: np.flatnonzero(store.labels == c) for c in range(num_classes)}
    batches = []
    for _ in range(num_targets):
        classes = rng.choice(num_classes, size=batch_size, replace=False)
        idx = [rng.choice(by_class[c]) for c in classes]
        images = apply_style(store.images[idx], cfg.style)
        batches.append(ClientBatch(torch.as_tensor(images),
                                   torch.as_tensor(store.labels[idx])))
    return batches


def _attack_one(generator, classifier, cfg, batch, target_idx, run_dir,
                attack_cfg):
    """Exchange -> files -> attack on the public file -> metrics from truth."""
    stem = os.path.join(run_dir, "exchanges", f"target_{target_idx:03d}")
    os.makedirs(os.path.dirname(stem), exist_ok=True)
    record = produce_exchange(classifier, batch, cfg.defense,
                              seed=cfg.seed * 1000 + target_idx)
    grad_path, truth_path = save_exchange(record, stem)

    shared = load_public_report(grad_path)
    acfg = replace(attack_cfg, batch_size=len(batch.labels),
                   seed=cfg.seed * 100000 + target_idx * 100)
    result = run_gifd(generator, classifier, shared, acfg,
                      declared_defense=cfg.defense.variant)

    truth_batch, _ = load_truth(truth_path)
    metrics = compute_metrics(result.images, truth_batch.images,
                              _perceptual_extractor(cfg))
    return result, metrics


def cmd_train_gan(cfg: ExperimentConfig) -> str:
    train = load_dataset(replace(cfg.dataset, split="gan-train"))
    gan_cfg = replace(cfg.gan, seed=cfg.seed)
    generator = train_toy_gan(train, gan_cfg)
    ckpt = cfg.generator_checkpoint
    save_checkpoint(generator, ckpt, "generator", seed=cfg.seed)

    metrics_clf = train_classifier(train, seed=cfg.seed,
                                   width=cfg.classifier_width)
    save_checkpoint(metrics_clf, os.path.join(ckpt, "metrics_classifier"),
                    "classifier", seed=cfg.seed)

    with torch.no_grad():
        z = torch.randn(64, generator.latent_dim,
                        generator=torch.Generator().manual_seed(cfg.seed))
        samples = ((generator(z) + 1.0) / 2.0).numpy()
    res = samples.shape[-1]
    grid = samples.reshape(8, 8, -1, res, res).transpose(2, 0, 3, 1, 4)
    grid = grid.reshape(-1, 8 * res, 8 * res)
    save_images(grid[None] if grid.ndim == 3 else grid, ckpt, prefix="samples")
    return ckpt


def _write_metrics_csv(path, rows):
    with open(path, "w") as f:
        f.write("run,target,image,psnr,ssim,mse,perceptual\n")
        for r in rows:
            f.write("{run},{target},{image},{psnr!r},{ssim!r},{mse!r},"
                    "{perceptual!r}\n".format(**r))


def cmd_attack(cfg: ExperimentConfig) -> str:
    generator, classifier = _load_models(cfg)
    run_dir = _run_dir(cfg)
    _write_run_manifest(cfg, run_dir)
    batches = select_targets(cfg, cfg.attack.batch_size, cfg.num_targets)

    metric_rows, loss_rows, results = [], [], []
    for t, batch in enumerate(batches):
        result, metrics = _attack_one(generator, classifier, cfg, batch, t,
                                      run_dir, cfg.attack)
        save_images(result.images.numpy(), os.path.join(run_dir, "images"),
                    prefix=f"recon_{t:03d}")
        for i in range(len(batch.labels)):
            metric_rows.append({"run": cfg.name, "target": t, "image": i,
                                "psnr": metrics.psnr[i], "ssim": metrics.ssim[i],
                                "mse": metrics.mse[i],
                                "perceptual": metrics.perceptual[i]})
        for stage, loss in enumerate(result.stage_losses):
            loss_rows.append((t, stage, loss))
        results.append({
            "target": t,
            "variant": result.variant,
            "chosen_stage": result.chosen_stage,
            "stage_losses": result.stage_losses,
            "final_loss": result.final_loss,
            "trial_losses": result.trial_losses,
            "trial_index": result.trial_index,
            "labels": result.labels,
            "true_labels": [int(v) for v in batch.labels],
            "seconds": result.seconds,
        })

    _write_metrics_csv(os.path.join(run_dir, "metrics.csv"), metric_rows)
    with open(os.path.join(run_dir, "losses.csv"), "w") as f:
        f.write("target,stage,loss\n")
        for t, stage, loss in loss_rows:
            f.write(f"{t},{stage},{loss!r}\n")
    with open(os.path.join(run_dir, "result.json"), "w") as f:
        json.dump({"run": cfg.name, "seed": cfg.seed, "version": __version__,
                   "targets": results}, f, indent=1)
    return run_dir


def _mean_psnr_for(cfg, generator, classifier, attack_cfg, run_dir, tag,
                   batch_size=None, num_targets=None):
    batch_size = batch_size or attack_cfg.batch_size
    batches = select_targets(cfg, batch_size, num_targets or cfg.num_targets)
    values = []
    for t, batch in enumerate(batches):
        result, metrics = _attack_one(generator, classifier, cfg, batch,
                                      t, os.path.join(run_dir, tag), attack_cfg)
        values.extend(metrics.psnr)
    return sum(values) / len(values)


def _write_report(run_dir, name, header_lines, columns, rows, plot=None):
    path = os.path.join(run_dir, name + ".csv")
    with open(path, "w") as f:
        for line in header_lines:
            f.write(f"# {line}\n")
        f.write(",".join(columns) + "\n")
        for row in rows:
            f.write(",".join(repr(v) if isinstance(v, float) else str(v)
                             for v in row) + "\n")
    if plot is not None:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(5, 3.5))
        plot(ax)
        fig.tight_layout()
        fig.savefig(os.path.join(run_dir, name + ".png"), dpi=120)
        plt.close(fig)
    return path


def cmd_ablate_k(cfg: ExperimentConfig, k_values) -> str:
    """PSNR mean as a function of the last searched feature domain K."""
    if len(k_values) < 2:
        raise ConfigError("ablate-k needs at least two K values")
    generator, classifier = _load_models(cfg)
    run_dir = _run_dir(cfg, "-ablate-k")
    _write_run_manifest(cfg, run_dir)
    rows = []
    for k in k_values:
        if not 0 <= k <= generator.num_cuts:
            raise ConfigError(f"K={k} outside [0, {generator.num_cuts}]")
        acfg = replace(cfg.attack, variant="gifd", k=k)
        mean = _mean_psnr_for(cfg, generator, classifier, acfg, run_dir, f"k{k}")
        rows.append((k, mean))

    def plot(ax):
        ax.plot([r[0] for r in rows], [r[1] for r in rows], marker="o")
        ax.set_xlabel("K (last feature domain searched)")
        ax.set_ylabel("PSNR mean (dB)")

    _write_report(run_dir, "ablate_k",
                  [f"seed={cfg.seed}", f"targets={cfg.num_targets}"],
                  ["k", "psnr_mean"], rows, plot)
    return run_dir


DEFENSE_BENCH_SET = (
    DefenseConfig("none"),
    DefenseConfig("gaussian_noise", sigma=0.1),
    DefenseConfig("clipping", clip_bound=4.0),
    DefenseConfig("sparsification", prune_rate=0.9),
    DefenseConfig("soteria", prune_rate=0.8),
)


def cmd_defense_bench(cfg: ExperimentConfig, variants=None) -> str:
    """PSNR mean per (attack variant x defense)."""
    variants = variants or [cfg.attack.variant]
    generator, classifier = _load_models(cfg)
    run_dir = _run_dir(cfg, "-defense-bench")
    _write_run_manifest(cfg, run_dir)
    columns = ["variant"] + [d.variant for d in DEFENSE_BENCH_SET]
    rows = []
    for variant in variants:
        row = [variant]
        for defense in DEFENSE_BENCH_SET:
            dcfg = replace(cfg, defense=defense)
            acfg = replace(cfg.attack, variant=variant)
            row.append(_mean_psnr_for(dcfg, generator, classifier, acfg,
                                      run_dir, f"{variant}-{defense.variant}"))
        rows.append(tuple(row))

    def plot(ax):
        x = np.arange(len(DEFENSE_BENCH_SET))
        for row in rows:
            ax.bar(x + 0.8 * rows.index(row) / max(len(rows), 1), row[1:],
                   width=0.8 / max(len(rows), 1), label=row[0])
        ax.set_xticks(x + 0.4, columns[1:], rotation=20)
        ax.set_ylabel("PSNR mean (dB)")
        ax.legend()

    _write_report(run_dir, "defense_bench",
                  [f"seed={cfg.seed}", f"targets={cfg.num_targets}",
                   f"variants={variants}"],
                  columns, rows, plot)
    return run_dir


def cmd_batch_sweep(cfg: ExperimentConfig, batch_sizes) -> str:
    """PSNR mean per (attack variant x batch size)."""
    if max(batch_sizes) > cfg.dataset.num_classes:
        raise ConfigError("batch size exceeds class count "
                          "(non-repeating labels required)")
    generator, classifier = _load_models(cfg)
    run_dir = _run_dir(cfg, "-batch-sweep")
    _write_run_manifest(cfg, run_dir)
    rows = []
    for b in batch_sizes:
        acfg = replace(cfg.attack, batch_size=b)
        mean = _mean_psnr_for(cfg, generator, classifier, acfg, run_dir,
                              f"b{b}", batch_size=b)
        rows.append((b, mean))

    def plot(ax):
        ax.plot([r[0] for r in rows], [r[1] for r in rows], marker="s")
        ax.set_xlabel("batch size")
        ax.set_ylabel("PSNR mean (dB)")

    _write_report(run_dir, "batch_sweep",
                  [f"seed={cfg.seed}", f"targets={cfg.num_targets}",
                   f"variant={cfg.attack.variant}"],
                  ["batch_size", "psnr_mean"], rows, plot)
    return run_dir


# ---------------------------------------------------------------------------


def _parse_int_list(text):
    return [int(v) for v in str(text).split(",") if v != ""]


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = replace(cfg, out_dir=args.out)
    if getattr(args, "variant", None):
        cfg = replace(cfg, attack=replace(cfg.attack, variant=args.variant))
    if getattr(args, "defense", None):
        cfg = replace(cfg, defense=DefenseConfig(args.defense))
    if getattr(args, "style", None):
        cfg = replace(cfg, style=StyleTransform(args.style))
    if getattr(args, "k", None) is not None and args.cmd == "attack":
        cfg = replace(cfg, attack=replace(cfg.attack, k=int(args.k)))
    if getattr(args, "batch_size", None) is not None and args.cmd != "batch-sweep":
        cfg = replace(cfg, attack=replace(cfg.attack,
                                          batch_size=int(args.batch_size)))
    return cfg


def build_parser():
    parser = argparse.ArgumentParser(
        prog="gradinv",
        description="gradient inversion experiment harness")
    sub = parser.add_subparsers(dest="cmd", required=True)
    for name in ("train-gan", "attack", "ablate-k", "defense-bench",
                 "batch-sweep"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--seed", type=int)
        p.add_argument("--out")
        p.add_argument("--k")
        p.add_argument("--defense", choices=[d.variant for d in DEFENSE_BENCH_SET])
        p.add_argument("--batch-size", dest="batch_size")
        p.add_argument("--variant")
        p.add_argument("--style")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _apply_overrides(load_config(args.config), args)
        if args.cmd == "train-gan":
            out = cmd_train_gan(cfg)
            print(f"checkpoint: {out} digest={checkpoint_digest(out)[:16]}")
        elif args.cmd == "attack":
            print(f"run: {cmd_attack(cfg)}")
        elif args.cmd == "ablate-k":
            ks = _parse_int_list(args.k) if args.k else list(
                range(load_checkpoint(cfg.generator_checkpoint).num_cuts + 1))
            print(f"report: {cmd_ablate_k(cfg, ks)}")
        elif args.cmd == "defense-bench":
            variants = [args.variant] if args.variant else None
            print(f"report: {cmd_defense_bench(cfg, variants)}")
        elif args.cmd == "batch-sweep":
            sizes = _parse_int_list(args.batch_size) if args.batch_size else [1, 2, 4]
            print(f"report: {cmd_batch_sweep(cfg, sizes)}")
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - runtime failures map to exit 2
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
