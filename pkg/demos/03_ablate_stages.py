"""Why search feature domains at all?

Sweeps the number of searched generator feature domains K on a handful of
targets. K=0 is a pure latent-space search (the classic GAN-prior attack);
each extra stage re-optimizes the intermediate activation inside a small
l1 ball around the previous stage's output, trading prior fidelity for
gradient fit. The mean PSNR should climb as K grows.

Run demo 01 first so the cached GAN exists, then:

    python demos/03_ablate_stages.py
"""

import importlib.util
import os

import numpy as np
import torch

from gradinv.attack import AttackConfig, run_gifd
from gradinv.data import DatasetSpec, load_dataset
from gradinv.defense import DefenseConfig
from gradinv.flsim import produce_exchange
from gradinv.invopt import LossConfig
from gradinv.metrics import psnr
from gradinv.models import ClientBatch, SmallConvNet

NUM_TARGETS = 5


def main():
    spec = importlib.util.spec_from_file_location(
        "demo01", os.path.join(os.path.dirname(__file__),
                               "01_single_image_attack.py"))
    demo01 = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(demo01)
    generator = demo01.get_generator()

    torch.manual_seed(11)
    classifier = SmallConvNet(num_classes=10, width=8).eval()
    store = load_dataset(DatasetSpec(size=400, split="fl-eval"))
    rng = np.random.default_rng(0)
    picks = rng.choice(len(store.labels), size=NUM_TARGETS, replace=False)

    print(f"{'K':>3}  {'mean psnr (dB)':>14}")
    for k in range(generator.num_cuts + 1):
        scores = []
        for t, idx in enumerate(picks):
            batch = ClientBatch(torch.as_tensor(store.images[idx:idx + 1]),
                                torch.as_tensor(store.labels[idx:idx + 1]))
            record = produce_exchange(classifier, batch, DefenseConfig("none"),
                                      seed=t)
            cfg = AttackConfig(variant="gifd", k=k, steps=200, trials=1,
                               seed=t, loss=LossConfig(alpha_tv=1e-6))
            result = run_gifd(generator, classifier, record.report, cfg)
            scores.append(psnr(result.images[0], batch.images[0]))
        print(f"{k:>3}  {float(np.mean(scores)):>14.2f}")


if __name__ == "__main__":
    main()
