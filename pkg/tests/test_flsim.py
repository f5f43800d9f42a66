import os

import pytest
import torch

from gradinv.defense import DefenseConfig
from gradinv.flsim import (load_public_report, load_truth, produce_exchange,
                           save_exchange)
from gradinv.models import ClientBatch, SmallConvNet, compute_batch_gradients


@pytest.fixture()
def batch():
    gen = torch.Generator().manual_seed(5)
    return ClientBatch(torch.rand(2, 3, 32, 32, generator=gen),
                       torch.tensor([1, 7]))


@pytest.fixture()
def clf():
    torch.manual_seed(6)
    return SmallConvNet(width=4)


def test_none_defense_publishes_raw_gradients(clf, batch):
    record = produce_exchange(clf, batch, DefenseConfig(variant="none"))
    raw = compute_batch_gradients(clf, batch.images, batch.labels)
    assert torch.equal(record.report.flat(), raw.flat())


def test_exchange_is_deterministic(clf, batch):
    cfg = DefenseConfig(variant="gaussian_noise", sigma=0.1)
    a = produce_exchange(clf, batch, cfg, seed=3)
    b = produce_exchange(clf, batch, cfg, seed=3)
    assert a.report.digest() == b.report.digest()


def test_defended_report_differs_from_raw(clf, batch):
    cfg = DefenseConfig(variant="sparsification", prune_rate=0.9)
    record = produce_exchange(clf, batch, cfg)
    raw = compute_batch_gradients(clf, batch.images, batch.labels)
    assert not torch.equal(record.report.flat(), raw.flat())


def test_save_load_roundtrip(clf, batch, tmp_path):
    cfg = DefenseConfig(variant="clipping", clip_bound=4.0)
    record = produce_exchange(clf, batch, cfg)
    grad_path, truth_path = save_exchange(record, str(tmp_path / "ex"))
    assert grad_path.endswith(".grad") and truth_path.endswith(".truth")
    assert os.path.isfile(grad_path) and os.path.isfile(truth_path)

    report = load_public_report(grad_path)
    assert report.names() == record.report.names()
    assert torch.equal(report.flat(), record.report.flat())
    assert tuple(report.input_shape) == (3, 32, 32)

    loaded_batch, loaded_cfg = load_truth(truth_path)
    assert torch.equal(loaded_batch.images, batch.images)
    assert torch.equal(loaded_batch.labels, batch.labels)
    assert loaded_cfg == cfg


def test_public_loader_refuses_truth_files(clf, batch, tmp_path):
    record = produce_exchange(clf, batch, DefenseConfig())
    _, truth_path = save_exchange(record, str(tmp_path / "ex"))
    with pytest.raises(PermissionError):
        load_public_report(truth_path)


def test_public_report_has_no_ground_truth_payload(clf, batch, tmp_path):
    """The .grad file must carry nothing beyond the gradients themselves."""
    record = produce_exchange(clf, batch, DefenseConfig())
    grad_path, _ = save_exchange(record, str(tmp_path / "ex"))
    blob = torch.load(grad_path, weights_only=True)
    assert set(blob) == {"entries", "input_shape"}


def test_attack_runs_with_truth_file_deleted(clf, batch, tmp_path):
    """End-to-end check that the attack path needs only the public file."""
    from gradinv.attack import AttackConfig, run_gifd

    record = produce_exchange(clf, ClientBatch(batch.images[:1],
                                               batch.labels[:1]),
                              DefenseConfig())
    grad_path, truth_path = save_exchange(record, str(tmp_path / "ex"))
    os.remove(truth_path)
    report = load_public_report(grad_path)
    cfg = AttackConfig(variant="direct-pixel", steps=3, trials=1, seed=0)
    result = run_gifd(None, clf, report, cfg)
    assert result.images.shape == (1, 3, 32, 32)
    assert result.labels == [int(batch.labels[0])]
