import math

import pytest
import torch
import torch.nn as nn

from gradinv.data import DatasetSpec, load_dataset
from gradinv.models import (GanTrainConfig, LayeredGenerator, SmallConvNet,
                            checkpoint_digest, classification_loss,
                            compute_batch_gradients, load_checkpoint,
                            save_checkpoint, train_toy_gan)

from conftest import finite_diff


class _FixedLogits(nn.Module):
    def __init__(self, logits):
        super().__init__()
        self.logits = logits

    def forward(self, x):
        return self.logits.expand(len(x), -1)


def test_perfect_confidence_loss_vanishes():
    logits = torch.tensor([[1e4, 0.0, 0.0]])
    loss = classification_loss(_FixedLogits(logits), torch.rand(1, 3, 8, 8),
                               torch.tensor([0]))
    assert float(loss) == pytest.approx(0.0, abs=1e-6)


def test_uniform_logits_loss_is_log_num_classes():
    for num_classes in (2, 5, 10):
        logits = torch.zeros(1, num_classes)
        loss = classification_loss(_FixedLogits(logits), torch.rand(1, 3, 8, 8),
                                   torch.tensor([1]))
        assert float(loss) == pytest.approx(math.log(num_classes), rel=1e-6)


def test_loss_matches_detached_recomputation():
    torch.manual_seed(2)
    clf = SmallConvNet(width=4)
    images = torch.rand(3, 3, 32, 32, requires_grad=True)
    labels = torch.tensor([0, 4, 7])
    loss = classification_loss(clf, images, labels)
    loss.backward()
    redo = classification_loss(clf, images.detach().clone(), labels.detach())
    assert float(loss.detach()) == pytest.approx(float(redo.detach()), rel=1e-7)


def test_loss_shape_mismatch_raises():
    clf = SmallConvNet(width=4)
    with pytest.raises(ValueError):
        classification_loss(clf, torch.rand(2, 3, 32, 32), torch.tensor([1]))
    with pytest.raises(ValueError):
        classification_loss(clf, torch.rand(3, 32, 32), torch.tensor([1]))


def test_batch_gradients_single_sample_is_its_own_mean():
    clf = SmallConvNet(width=4)
    images, labels = torch.rand(1, 3, 32, 32), torch.tensor([2])
    rep = compute_batch_gradients(clf, images, labels)
    assert rep.names() == [n for n, _ in clf.named_parameters()]
    again = compute_batch_gradients(clf, images, labels)
    assert torch.equal(rep.flat(), again.flat())


def test_batch_gradients_linearity():
    clf = SmallConvNet(width=4)
    images, labels = torch.rand(2, 3, 32, 32), torch.tensor([1, 8])
    pair = compute_batch_gradients(clf, images, labels).flat()
    a = compute_batch_gradients(clf, images[:1], labels[:1]).flat()
    b = compute_batch_gradients(clf, images[1:], labels[1:]).flat()
    assert torch.allclose(pair, (a + b) / 2, rtol=1e-5, atol=1e-7)


def test_batch_gradients_mean_of_per_sample_reports():
    clf = SmallConvNet(width=4)
    images, labels = torch.rand(5, 3, 32, 32), torch.tensor([0, 1, 2, 3, 4])
    full = compute_batch_gradients(clf, images, labels).flat()
    per = torch.stack([
        compute_batch_gradients(clf, images[i:i + 1], labels[i:i + 1]).flat()
        for i in range(5)])
    assert torch.allclose(full, per.mean(dim=0), rtol=1e-4, atol=1e-6)


def test_batch_gradients_empty_batch_raises():
    clf = SmallConvNet(width=4)
    with pytest.raises(ValueError):
        compute_batch_gradients(clf, torch.rand(0, 3, 32, 32),
                                torch.zeros(0, dtype=torch.long))


def test_parameter_gradient_matches_finite_differences():
    torch.manual_seed(3)
    clf = SmallConvNet(width=4).double()
    images = torch.rand(2, 3, 32, 32, dtype=torch.float64)
    labels = torch.tensor([3, 6])
    rep = compute_batch_gradients(clf, images, labels)
    w = clf.conv2.weight
    grad = dict(rep.entries)["conv2.weight"].reshape(-1)

    def loss_at(tensor):
        with torch.no_grad():
            old = w.detach().clone()
            w.copy_(tensor)
        out = float(classification_loss(clf, images, labels).detach())
        with torch.no_grad():
            w.copy_(old)
        return out

    rng = torch.Generator().manual_seed(0)
    for idx in torch.randint(0, w.numel(), (5,), generator=rng):
        fd = finite_diff(loss_at, w, int(idx), eps=1e-5)
        assert float(grad[idx]) == pytest.approx(fd, rel=1e-3, abs=1e-9)


# ---------------------------------------------------------------------------
# Generator


def test_generator_output_contract():
    gen = LayeredGenerator(latent_dim=32, base_channels=32)
    with torch.no_grad():
        x = gen(torch.randn(4, 32))
    assert x.shape == (4, 3, 32, 32)
    assert float(x.min()) >= -1.0 and float(x.max()) <= 1.0


def test_forward_from_cut_zero_is_full_forward():
    gen = LayeredGenerator(latent_dim=32, base_channels=32)
    z = torch.randn(2, 32)
    assert torch.equal(gen(z), gen.forward_from(0, z))


def test_composition_identity_all_cuts():
    gen = LayeredGenerator(latent_dim=32, base_channels=32)
    z = torch.randn(2, 32)
    full = gen(z)
    h = z
    for i in range(gen.num_cuts):
        h = gen.blocks[i](h)
        assert torch.equal(full, gen.forward_from(i + 1, h)), f"cut {i + 1}"


def test_forward_from_shape_mismatch_raises():
    gen = LayeredGenerator(latent_dim=32, base_channels=32)
    with pytest.raises(ValueError):
        gen.forward_from(1, torch.randn(1, 3, 3, 3))
    with pytest.raises(ValueError):
        gen.forward_from(gen.num_cuts + 1, torch.randn(1, 32))


def test_generator_jacobian_matches_finite_differences():
    torch.manual_seed(4)
    gen = LayeredGenerator(latent_dim=16, base_channels=16).double()
    h0 = torch.randn(1, *gen.cut_shapes[2], dtype=torch.float64)
    probe = torch.randn(1, 3, 32, 32, dtype=torch.float64)

    h = h0.clone().requires_grad_(True)
    out = (gen.forward_from(2, h) * probe).sum()
    out.backward()
    grad = h.grad.reshape(-1)

    def scalar_at(tensor):
        with torch.no_grad():
            return float((gen.forward_from(2, tensor) * probe).sum())

    rng = torch.Generator().manual_seed(1)
    for idx in torch.randint(0, h0.numel(), (5,), generator=rng):
        fd = finite_diff(scalar_at, h0, int(idx), eps=1e-5)
        assert float(grad[idx]) == pytest.approx(fd, rel=1e-3, abs=1e-9)


# ---------------------------------------------------------------------------
# GAN training and checkpoints


@pytest.fixture(scope="module")
def tiny_store():
    return load_dataset(DatasetSpec(size=1000, split="gan-train"))


TINY_GAN = GanTrainConfig(epochs=1, batch_size=128, latent_dim=16,
                          base_channels=16, seed=3)


def test_train_toy_gan_contract(tiny_store, tmp_path):
    gen = train_toy_gan(tiny_store, TINY_GAN)
    assert gen.num_blocks >= 4
    z = torch.randn(3, 16, generator=torch.Generator().manual_seed(0))
    with torch.no_grad():
        x = gen(z)
    assert x.shape == (3, 3, 32, 32)
    assert float(x.abs().max()) <= 1.0

    ckpt = save_checkpoint(gen, str(tmp_path / "g"), "generator", seed=3)
    reloaded = load_checkpoint(ckpt)
    with torch.no_grad():
        assert torch.equal(gen(z), reloaded(z))


def test_train_toy_gan_deterministic(tiny_store, tmp_path):
    a = train_toy_gan(tiny_store, TINY_GAN)
    b = train_toy_gan(tiny_store, TINY_GAN)
    save_checkpoint(a, str(tmp_path / "a"), "generator")
    save_checkpoint(b, str(tmp_path / "b"), "generator")
    assert checkpoint_digest(str(tmp_path / "a")) == \
        checkpoint_digest(str(tmp_path / "b"))


def test_train_toy_gan_rejects_small_dataset(tiny_store):
    small = type(tiny_store)(tiny_store.images[:500], tiny_store.labels[:500],
                             tiny_store.ids[:500])
    with pytest.raises(ValueError):
        train_toy_gan(small, TINY_GAN)


def test_checkpoint_shape_validation(tmp_path):
    import numpy as np

    gen = LayeredGenerator(latent_dim=16, base_channels=16)
    ckpt = save_checkpoint(gen, str(tmp_path / "g"), "generator")
    victim = next(f for f in (tmp_path / "g").iterdir()
                  if f.suffix == ".npy")
    np.save(victim, np.zeros((2, 2), dtype=np.float32))
    with pytest.raises(ValueError, match="shape mismatch"):
        load_checkpoint(ckpt)
