"""Classifier (FL global model) and a splittable layered generator.

The generator decomposes into ordered blocks G_0..G_N; each block boundary is
a legal cut point, so forward_from(i, h) resumes generation from the feature
tensor at cut i. The classifier keeps its final fully-connected layer behind a
ReLU so the label-extraction sign property holds exactly.
"""

import hashlib
import json
import math
import os
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class GradientReport:
    """Per-parameter gradients shared by a client. The attack's sole observation."""

    entries: list                      # [(layer name, tensor)], order = parameter order
    input_shape: tuple = None          # (C, H, W) of the model the report came from

    def names(self):
        return [n for n, _ in self.entries]

    def tensors(self):
        return [t for _, t in self.entries]

    def flat(self) -> torch.Tensor:
        return torch.cat([t.reshape(-1) for _, t in self.entries])

    def detach(self) -> "GradientReport":
        return GradientReport([(n, t.detach().clone()) for n, t in self.entries],
                              self.input_shape)

    def digest(self) -> str:
        h = hashlib.sha256()
        for n, t in self.entries:
            h.update(n.encode())
            h.update(t.detach().cpu().numpy().tobytes())
        return h.hexdigest()


@dataclass
class ClientBatch:
    images: torch.Tensor               # (B, C, H, W) in [0, 1]
    labels: torch.Tensor               # (B,) class indices

    def __post_init__(self):
        if self.images.ndim != 4 or len(self.labels) != len(self.images):
            raise ValueError("batch images must be (B,C,H,W) with matching labels")
        if len(self.images) < 1:
            raise ValueError("empty batch")


class SmallConvNet(nn.Module):
    """4-conv + FC classifier. Pre-FC activations are ReLU outputs (non-negative)."""

    def __init__(self, num_classes=10, in_channels=3, width=16, resolution=32):
        super().__init__()
        w = width
        self.conv1 = nn.Conv2d(in_channels, w, 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(w, 2 * w, 3, stride=2, padding=1)
        self.conv3 = nn.Conv2d(2 * w, 2 * w, 3, stride=2, padding=1)
        self.conv4 = nn.Conv2d(2 * w, 4 * w, 3, stride=1, padding=1)
        spatial = (resolution // 8) ** 2
        self.fc = nn.Linear(4 * w * spatial, num_classes)
        for conv in (self.conv1, self.conv2, self.conv3, self.conv4):
            nn.init.kaiming_normal_(conv.weight, nonlinearity="relu")
        self.num_classes = num_classes
        self.arch = {"num_classes": num_classes, "in_channels": in_channels,
                     "width": width, "resolution": resolution}

    def features(self, x):
        x = F.relu(self.conv1(x))
        x = F.relu(self.conv2(x))
        x = F.relu(self.conv3(x))
        x = F.relu(self.conv4(x))
        return x.flatten(1)            # post-ReLU, elementwise >= 0

    def forward(self, x):
        return self.fc(self.features(x))


class LayeredGenerator(nn.Module):
    """Linear stem + upsampling conv blocks; tanh output in [-1, 1].

    Feature dimensionalities at the cuts are non-decreasing so that
    dimension-proportional l1 radii grow with depth.
    """

    def __init__(self, latent_dim=64, out_channels=3, resolution=32,
                 base_channels=64, num_classes=0):
        super().__init__()
        if resolution % 8 != 0:
            raise ValueError("resolution must be divisible by 8")
        c0 = base_channels
        s0 = resolution // 8
        self.latent_dim = latent_dim
        self.num_classes = num_classes
        if num_classes:
            self.class_embed = nn.Embedding(num_classes, latent_dim)

        class Stem(nn.Module):
            def __init__(self):
                super().__init__()
                self.fc = nn.Linear(latent_dim, c0 * s0 * s0)

            def forward(self, z):
                h = F.leaky_relu(self.fc(z), 0.2)
                return h.view(-1, c0, s0, s0)

        def norm(c):
            # GroupNorm: parameter-only (checkpoint friendly) and independent
            # of batch size, which matters when inverting single images.
            return nn.GroupNorm(math.gcd(8, c), c)

        def up_block(cin, cout):
            return nn.Sequential(
                nn.Upsample(scale_factor=2, mode="nearest"),
                nn.Conv2d(cin, cout, 3, padding=1),
                norm(cout),
                nn.LeakyReLU(0.2),
            )

        self.blocks = nn.ModuleList([
            Stem(),                                                    # G_0
            nn.Sequential(nn.Conv2d(c0, c0, 3, padding=1),             # G_1
                          norm(c0),
                          nn.LeakyReLU(0.2)),
            up_block(c0, c0 // 2),                                     # G_2
            up_block(c0 // 2, c0 // 4),                                # G_3
            up_block(c0 // 4, max(c0 // 8, out_channels * 4)),         # G_4
            nn.Sequential(nn.Conv2d(max(c0 // 8, out_channels * 4),    # G_5
                                    out_channels, 3, padding=1),
                          nn.Tanh()),
        ])
        self.cut_shapes = [(latent_dim,)]
        with torch.no_grad():
            h = torch.zeros(1, latent_dim)
            for block in self.blocks[:-1]:
                h = block(h)
                self.cut_shapes.append(tuple(h.shape[1:]))
        self.arch = {"latent_dim": latent_dim, "out_channels": out_channels,
                     "resolution": resolution, "base_channels": base_channels,
                     "num_classes": num_classes}

    @property
    def num_blocks(self):
        return len(self.blocks)

    @property
    def num_cuts(self):
        """N: index of the last optimizable intermediate feature h_N."""
        return len(self.blocks) - 1

    def condition(self, z, labels=None):
        if self.num_classes and labels is not None:
            return z + self.class_embed(labels)
        return z

    def forward(self, z, labels=None):
        return self.forward_from(0, self.condition(z, labels))

    def forward_from(self, cut_index: int, h: torch.Tensor, noises=None):
        """Run blocks G_cut_index..G_N on feature h (cut 0 == latent input)."""
        if not 0 <= cut_index <= self.num_cuts:
            raise ValueError(f"cut index {cut_index} outside [0, {self.num_cuts}]")
        expected = self.cut_shapes[cut_index]
        if tuple(h.shape[1:]) != expected:
            raise ValueError(
                f"feature shape {tuple(h.shape[1:])} does not match cut "
                f"{cut_index} shape {expected}")
        for block in self.blocks[cut_index:]:
            h = block(h)
        return h


def classification_loss(classifier, images, labels) -> torch.Tensor:
    """Mean cross-entropy; differentiable w.r.t. parameters and images."""
    if images.ndim != 4:
        raise ValueError("images must be (B,C,H,W)")
    if len(labels) != len(images):
        raise ValueError("labels/images length mismatch")
    return F.cross_entropy(classifier(images), labels)


def compute_batch_gradients(classifier, images, labels,
                            create_graph=False) -> GradientReport:
    """Batch-averaged parameter gradients of the classification loss.

    Mean cross-entropy makes this exactly the mean of per-sample gradients.
    With create_graph=True the result stays differentiable w.r.t. images.
    """
    if len(images) == 0:
        raise ValueError("empty batch")
    loss = classification_loss(classifier, images, labels)
    params = list(classifier.parameters())
    names = [n for n, _ in classifier.named_parameters()]
    grads = torch.autograd.grad(loss, params, create_graph=create_graph)
    return GradientReport(list(zip(names, grads)),
                          input_shape=tuple(images.shape[1:]))


# ---------------------------------------------------------------------------
# Toy GAN training


@dataclass
class GanTrainConfig:
    epochs: int = 5
    batch_size: int = 64
    lr: float = 2e-4
    latent_dim: int = 64
    base_channels: int = 64
    conditional: bool = True           # class-conditional, better mode coverage
    seed: int = 0


class _Discriminator(nn.Module):
    """Labels, when present, enter as constant one-hot planes."""

    def __init__(self, in_channels=3, width=32, num_classes=0):
        super().__init__()
        self.num_classes = num_classes
        self.net = nn.Sequential(
            nn.Conv2d(in_channels + num_classes, width, 4, 2, 1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(width, 2 * width, 4, 2, 1),
            nn.GroupNorm(8, 2 * width), nn.LeakyReLU(0.2),
            nn.Conv2d(2 * width, 4 * width, 4, 2, 1),
            nn.GroupNorm(8, 4 * width), nn.LeakyReLU(0.2),
        )
        self.fc = nn.Linear(4 * width * 16, 1)

    def forward(self, x, labels=None):
        if self.num_classes:
            planes = F.one_hot(labels, self.num_classes).to(x.dtype)
            planes = planes[:, :, None, None].expand(-1, -1, *x.shape[-2:])
            x = torch.cat([x, planes], dim=1)
        return self.fc(self.net(x).flatten(1))


def train_toy_gan(dataset, config: GanTrainConfig) -> LayeredGenerator:
    """Train the layered generator on a dataset of [0,1] images.

    Deterministic given config.seed: fixed init, seeded shuffling, no workers.
    """
    images = torch.as_tensor(dataset.images)
    labels_all = torch.as_tensor(dataset.labels)
    if len(images) < 1000:
        raise ValueError(f"need >= 1000 training images, got {len(images)}")
    res = images.shape[-1]
    num_classes = int(labels_all.max()) + 1 if config.conditional else 0
    torch.manual_seed(config.seed)
    gen = LayeredGenerator(latent_dim=config.latent_dim, out_channels=images.shape[1],
                           resolution=res, base_channels=config.base_channels,
                           num_classes=num_classes)
    disc = _Discriminator(in_channels=images.shape[1], num_classes=num_classes)
    opt_g = torch.optim.Adam(gen.parameters(), lr=config.lr, betas=(0.5, 0.999))
    opt_d = torch.optim.Adam(disc.parameters(), lr=config.lr, betas=(0.5, 0.999))
    rng = np.random.default_rng(config.seed)
    real_all = images * 2.0 - 1.0      # generator works in [-1, 1]

    for _ in range(config.epochs):
        order = rng.permutation(len(real_all))
        for start in range(0, len(order) - config.batch_size + 1, config.batch_size):
            idx = order[start:start + config.batch_size]
            real = real_all[idx]
            labels = labels_all[idx] if num_classes else None
            b = len(real)
            z = torch.randn(b, config.latent_dim)
            fake = gen(z, labels)

            d_loss = (F.softplus(-disc(real, labels)).mean()
                      + F.softplus(disc(fake.detach(), labels)).mean())
            opt_d.zero_grad()
            d_loss.backward()
            opt_d.step()

            g_loss = F.softplus(-disc(fake, labels)).mean()
            opt_g.zero_grad()
            g_loss.backward()
            opt_g.step()

    gen.eval()
    for p in gen.parameters():
        p.requires_grad_(False)
    return gen


def train_classifier(dataset, epochs=3, batch_size=64, lr=1e-3, seed=0,
                     width=16) -> SmallConvNet:
    """Supervised training of the small convnet; used for the perceptual
    metric's frozen features and for the partially-trained FL model option."""
    images = torch.as_tensor(dataset.images)
    labels = torch.as_tensor(dataset.labels)
    torch.manual_seed(seed)
    model = SmallConvNet(num_classes=int(labels.max()) + 1,
                         in_channels=images.shape[1], width=width,
                         resolution=images.shape[-1])
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    rng = np.random.default_rng(seed)
    for _ in range(epochs):
        order = rng.permutation(len(images))
        for start in range(0, len(order) - batch_size + 1, batch_size):
            idx = order[start:start + batch_size]
            loss = classification_loss(model, images[idx], labels[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    model.eval()
    return model


# ---------------------------------------------------------------------------
# Checkpoints: manifest.json + one .npy per parameter tensor

_KINDS = {"generator": LayeredGenerator, "classifier": SmallConvNet}


def save_checkpoint(model, out_dir: str, kind: str, seed: int = 0) -> str:
    if kind not in _KINDS:
        raise ValueError(f"unknown checkpoint kind {kind!r}")
    os.makedirs(out_dir, exist_ok=True)
    shapes = {}
    for name, tensor in model.state_dict().items():
        fname = name.replace(".", "__") + ".npy"
        np.save(os.path.join(out_dir, fname), tensor.detach().cpu().numpy())
        shapes[name] = list(tensor.shape)
    manifest = {"kind": kind, "arch": model.arch, "shapes": shapes, "seed": seed}
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    return out_dir


def load_checkpoint(ckpt_dir: str):
    path = os.path.join(ckpt_dir, "manifest.json")
    if not os.path.isfile(path):
        raise FileNotFoundError(f"no manifest in {ckpt_dir}")
    with open(path) as f:
        manifest = json.load(f)
    model = _KINDS[manifest["kind"]](**manifest["arch"])
    state = {}
    for name, shape in manifest["shapes"].items():
        arr = np.load(os.path.join(ckpt_dir, name.replace(".", "__") + ".npy"))
        if list(arr.shape) != shape:
            raise ValueError(f"shape mismatch for {name}: file {list(arr.shape)} "
                             f"vs manifest {shape}")
        state[name] = torch.as_tensor(arr)
    model.load_state_dict(state)
    model.eval()
    if manifest["kind"] == "generator":
        # classifier params stay differentiable: dummy gradients are taken
        # w.r.t. them during the attack
        for p in model.parameters():
            p.requires_grad_(False)
    return model


def checkpoint_digest(ckpt_dir: str) -> str:
    h = hashlib.sha256()
    for name in sorted(os.listdir(ckpt_dir)):
        path = os.path.join(ckpt_dir, name)
        if not os.path.isfile(path):
            continue
        with open(path, "rb") as f:
            h.update(name.encode())
            h.update(f.read())
    return h.hexdigest()
