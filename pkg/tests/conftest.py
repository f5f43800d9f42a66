import hashlib
import json
import os

import numpy as np
import pytest
import torch

from gradinv.data import DatasetSpec, load_dataset
from gradinv.models import (GanTrainConfig, SmallConvNet, load_checkpoint,
                            save_checkpoint, train_classifier, train_toy_gan)

CACHE_ROOT = os.path.join(os.path.expanduser("~"), ".cache", "gradinv-tests")

# Shared toy-scale settings: small enough for CPU attack sweeps, big enough
# for the GAN to produce usable reconstructions.
GAN_CONFIG = GanTrainConfig(epochs=24, batch_size=64, latent_dim=48,
                            base_channels=48, seed=7)
GAN_DATASET = DatasetSpec(size=2000, split="gan-train")
CLF_WIDTH = 8


def finite_diff(fn, x: torch.Tensor, idx, eps=1e-4):
    """Central finite difference of scalar fn at flat coordinate idx."""
    flat = x.detach().clone().reshape(-1)
    up, down = flat.clone(), flat.clone()
    up[idx] += eps
    down[idx] -= eps
    return (fn(up.reshape(x.shape)) - fn(down.reshape(x.shape))) / (2 * eps)


def _config_key():
    blob = json.dumps([GAN_CONFIG.__dict__, GAN_DATASET.__dict__, CLF_WIDTH],
                      sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


@pytest.fixture(scope="session")
def gan_checkpoint():
    """Path to the toy GAN checkpoint, trained once and cached across sessions."""
    ckpt = os.path.join(CACHE_ROOT, f"gan-{_config_key()}")
    if not os.path.isfile(os.path.join(ckpt, "manifest.json")):
        store = load_dataset(GAN_DATASET)
        gen = train_toy_gan(store, GAN_CONFIG)
        save_checkpoint(gen, ckpt, "generator", seed=GAN_CONFIG.seed)
    return ckpt


@pytest.fixture(scope="session")
def trained_generator(gan_checkpoint):
    return load_checkpoint(gan_checkpoint)


@pytest.fixture(scope="session")
def trained_classifier():
    ckpt = os.path.join(CACHE_ROOT, f"clf-{_config_key()}")
    if not os.path.isfile(os.path.join(ckpt, "manifest.json")):
        store = load_dataset(GAN_DATASET)
        clf = train_classifier(store, epochs=3, seed=5, width=CLF_WIDTH)
        save_checkpoint(clf, ckpt, "classifier", seed=5)
    return load_checkpoint(ckpt)


@pytest.fixture()
def fl_classifier():
    """Randomly initialized FL global model (the default attack setting)."""
    torch.manual_seed(11)
    return SmallConvNet(num_classes=10, width=CLF_WIDTH)


@pytest.fixture(scope="session")
def eval_store():
    return load_dataset(DatasetSpec(size=400, split="fl-eval"))


@pytest.fixture(autouse=True)
def _seed_all():
    torch.manual_seed(0)
    np.random.seed(0)
