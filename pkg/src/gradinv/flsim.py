"""FL gradient exchange: the client computes batch-averaged gradients on
private data, applies a defense, and publishes the result.

Ground truth (images, labels, defense parameters) is sequestered in a
separate `.truth` file that attack code refuses to open.
"""

from dataclasses import dataclass

import torch

from .defense import DefenseConfig, apply_defense
from .models import ClientBatch, GradientReport, compute_batch_gradients

GRAD_SUFFIX = ".grad"
TRUTH_SUFFIX = ".truth"


@dataclass
class ExchangeRecord:
    report: GradientReport             # public view, post-defense
    batch: ClientBatch                 # ground truth, evaluation only
    defense: DefenseConfig


def produce_exchange(classifier, batch: ClientBatch, defense: DefenseConfig,
                     seed: int = 0) -> ExchangeRecord:
    raw = compute_batch_gradients(classifier, batch.images, batch.labels)
    defended = apply_defense(raw.detach(), defense, seed)
    return ExchangeRecord(defended, batch, defense)


def save_exchange(record: ExchangeRecord, path_stem: str):
    """Write <stem>.grad (public report) and <stem>.truth (evaluation data)."""
    public = {
        "entries": [(n, t.detach().clone()) for n, t in record.report.entries],
        "input_shape": record.report.input_shape,
    }
    torch.save(public, path_stem + GRAD_SUFFIX)
    truth = {
        "images": record.batch.images.detach().clone(),
        "labels": record.batch.labels.detach().clone(),
        "defense": record.defense.to_dict(),
    }
    torch.save(truth, path_stem + TRUTH_SUFFIX)
    return path_stem + GRAD_SUFFIX, path_stem + TRUTH_SUFFIX


def load_public_report(path: str) -> GradientReport:
    """Attack-side loader; refuses ground-truth files outright."""
    if path.endswith(TRUTH_SUFFIX):
        raise PermissionError(f"attack code must not open {TRUTH_SUFFIX} files")
    blob = torch.load(path, weights_only=True)
    return GradientReport(list(blob["entries"]), tuple(blob["input_shape"]))


def load_truth(path: str):
    """Evaluation-side loader for the sequestered batch + defense config."""
    blob = torch.load(path, weights_only=True)
    batch = ClientBatch(blob["images"], blob["labels"])
    return batch, DefenseConfig(**blob["defense"])
