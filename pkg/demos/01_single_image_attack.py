"""Walk through one full gradient-inversion round, end to end.

A client computes a gradient on a single private image, ships it to the
server, and we (playing the honest-but-curious server) reconstruct the
image from nothing but that gradient and a generator trained on public
data from the same distribution.

Run from the repository root:

    python demos/01_single_image_attack.py

The first run trains a small GAN on the synthetic dataset (~2 min on CPU)
and caches it under demos/_artifacts/; later runs reuse it.
"""

import os

import torch

from gradinv.attack import AttackConfig, run_gifd
from gradinv.data import DatasetSpec, load_dataset
from gradinv.defense import DefenseConfig
from gradinv.flsim import load_public_report, load_truth, produce_exchange, save_exchange
from gradinv.invopt import LossConfig
from gradinv.data import save_images
from gradinv.metrics import compute_metrics
from gradinv.models import (ClientBatch, GanTrainConfig, SmallConvNet,
                            load_checkpoint, save_checkpoint, train_toy_gan)

ART = os.path.join(os.path.dirname(__file__), "_artifacts")
GAN_CKPT = os.path.join(ART, "gan")


def get_generator():
    if os.path.isfile(os.path.join(GAN_CKPT, "manifest.json")):
        return load_checkpoint(GAN_CKPT)
    print("training toy GAN on the public split (one-time, ~2 min)...")
    store = load_dataset(DatasetSpec(size=2000, split="gan-train"))
    gen = train_toy_gan(store, GanTrainConfig(epochs=24, batch_size=64,
                                              latent_dim=48, base_channels=48,
                                              seed=7))
    save_checkpoint(gen, GAN_CKPT, "generator", seed=7)
    return gen


def main():
    os.makedirs(ART, exist_ok=True)
    generator = get_generator()

    # The FL global model: a freshly initialized classifier, as in the
    # first round of federated training (the easiest moment to attack).
    torch.manual_seed(11)
    classifier = SmallConvNet(num_classes=10, width=8).eval()

    # --- client side: one private image, one gradient -------------------
    store = load_dataset(DatasetSpec(size=400, split="fl-eval"))
    batch = ClientBatch(torch.as_tensor(store.images[17:18]),
                        torch.as_tensor(store.labels[17:18]))
    record = produce_exchange(classifier, batch, DefenseConfig("none"), seed=0)
    grad_path, truth_path = save_exchange(record, os.path.join(ART, "round0"))
    print(f"client uploaded {grad_path} (label {int(batch.labels[0])} kept secret)")

    # --- server side: reconstruct from the public file only -------------
    shared = load_public_report(grad_path)
    cfg = AttackConfig(variant="gifd", k=2, steps=500, trials=2, seed=0,
                       loss=LossConfig(alpha_tv=1e-6))
    result = run_gifd(generator, classifier, shared, cfg)
    print(f"extracted label: {result.labels[0]}  "
          f"(stage {result.chosen_stage} won, match loss {result.final_loss:.2e})")

    # --- score against the sequestered truth ----------------------------
    truth, _ = load_truth(truth_path)
    metrics = compute_metrics(result.images, truth.images)
    print(f"psnr {metrics.psnr[0]:.1f} dB   ssim {metrics.ssim[0]:.3f}   "
          f"mse {metrics.mse[0]:.2e}")
    out = os.path.join(ART, "images")
    save_images(truth.images.numpy(), out, prefix="truth")
    save_images(result.images.detach().numpy(), out, prefix="recon")
    print(f"truth and reconstruction PNGs written to {out}/")


if __name__ == "__main__":
    main()
