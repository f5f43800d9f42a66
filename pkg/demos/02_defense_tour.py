"""How much does each gradient defense actually buy?

Re-runs the single-image attack from demo 01 against the same target while
the client applies, in turn: no defense, Gaussian noise, layer-wise norm
clipping, magnitude sparsification, and a Soteria-style defended layer.
The attack is told which defense is active (the realistic threat model:
defense mechanisms are public, only their randomness is private) and
adapts its gradient-matching transform accordingly.

A single target and trial is noisy -- on some seeds a defended run can
land above the undefended one. For averaged numbers over many targets use
the `gradinv defense-bench` command instead.

Run demo 01 first so the cached GAN exists, then:

    python demos/02_defense_tour.py
"""

import os

import torch

from gradinv.attack import AttackConfig, run_gifd
from gradinv.data import DatasetSpec, load_dataset
from gradinv.defense import DefenseConfig
from gradinv.flsim import load_public_report, produce_exchange, save_exchange
from gradinv.invopt import LossConfig
from gradinv.metrics import psnr
from gradinv.models import ClientBatch, SmallConvNet

ART = os.path.join(os.path.dirname(__file__), "_artifacts")

DEFENSES = [
    DefenseConfig("none"),
    DefenseConfig("gaussian_noise", sigma=0.1),
    DefenseConfig("clipping", clip_bound=4.0),
    DefenseConfig("sparsification", prune_rate=0.9),
    DefenseConfig("soteria", prune_rate=0.8),
]


def main():
    # Reuse the GAN cached by demo 01 (trains it if missing).
    import importlib.util
    spec = importlib.util.spec_from_file_location(
        "demo01", os.path.join(os.path.dirname(__file__),
                               "01_single_image_attack.py"))
    demo01 = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(demo01)
    generator = demo01.get_generator()

    torch.manual_seed(11)
    classifier = SmallConvNet(num_classes=10, width=8).eval()

    store = load_dataset(DatasetSpec(size=400, split="fl-eval"))
    batch = ClientBatch(torch.as_tensor(store.images[17:18]),
                        torch.as_tensor(store.labels[17:18]))
    cfg = AttackConfig(variant="gifd", k=2, steps=300, trials=1, seed=0,
                       loss=LossConfig(alpha_tv=1e-6))

    print(f"{'defense':>16}  {'psnr (dB)':>9}")
    for defense in DEFENSES:
        record = produce_exchange(classifier, batch, defense, seed=1)
        stem = os.path.join(ART, f"tour_{defense.variant}")
        grad_path, _ = save_exchange(record, stem)
        shared = load_public_report(grad_path)
        result = run_gifd(generator, classifier, shared, cfg,
                          declared_defense=defense.variant)
        print(f"{defense.variant:>16}  {psnr(result.images[0], batch.images[0]):>9.2f}")


if __name__ == "__main__":
    main()
