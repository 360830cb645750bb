#!/usr/bin/env python3
"""
Evaluation - confusion matrices, per-class and mean IoU, and report output
as a JSON record plus a fixed-width table.
"""

from dataclasses import dataclass, field

import numpy as np
import torch
from rich.console import Console
from rich.table import Table

from utils.errors import ConfigError
from utils.logger import setup_logger

UNDEFINED = None


@dataclass
class ConfusionMatrix:
    """Rows are ground truth, columns are predictions"""
    num_classes: int
    counts: np.ndarray = None

    def __post_init__(self):
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if self.counts is None:
            self.counts = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)
        elif self.counts.shape != (self.num_classes, self.num_classes):
            raise ValueError(f"counts shape {self.counts.shape} does not match {self.num_classes} classes")

    @property
    def total(self):
        return int(self.counts.sum())

    def merge(self, other):
        if other.num_classes != self.num_classes:
            raise ValueError("cannot merge confusion matrices over different class sets")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)


def accumulate(cm, pred, gt, ignore_index=255):
    """Add one prediction / ground-truth pair (any matching shapes) to ``cm``"""
    pred = np.asarray(pred).astype(np.int64).ravel()
    gt = np.asarray(gt).astype(np.int64).ravel()
    if pred.shape != gt.shape:
        raise ValueError(f"prediction has {pred.size} pixels, ground truth {gt.size}")
    keep = gt != ignore_index if ignore_index is not None else np.ones_like(gt, dtype=bool)
    pred, gt = pred[keep], gt[keep]
    k = cm.num_classes
    for name, values in (("prediction", pred), ("ground truth", gt)):
        if values.size and (values.min() < 0 or values.max() >= k):
            raise ValueError(f"{name} holds a class id outside [0, {k})")
    counts = np.bincount(gt * k + pred, minlength=k * k).reshape(k, k)
    return ConfusionMatrix(k, cm.counts + counts)


@dataclass
class EvalReport:
    per_class_iou: list
    mean_iou: float
    config_fingerprint: str = None
    sample_count: int = 0
    class_names: list = field(default_factory=list)

    def to_record(self):
        return {
            "per_class_iou": list(self.per_class_iou),
            "mean_iou": self.mean_iou,
            "config_fingerprint": self.config_fingerprint,
            "sample_count": self.sample_count,
            "class_names": list(self.class_names),
        }

    def _names(self):
        return self.class_names or [str(c) for c in range(len(self.per_class_iou))]

    def render_table(self):
        """Plain fixed-width table: one column per class, mean last"""
        names = self._names()
        width = max(7, max(len(n) for n in names) + 1)
        header = "".join(f"{n:>{width}}" for n in names) + f"{'mIoU':>{width}}"
        cells = ["-" if v is UNDEFINED else f"{100 * v:.1f}" for v in self.per_class_iou]
        row = "".join(f"{c:>{width}}" for c in cells) + f"{100 * self.mean_iou:>{width}.1f}"
        return f"{header}\n{row}"

    def print_table(self, console=None, title=None):
        console = console or Console()
        table = Table(title=title or f"IoU (%) over {self.sample_count} samples")
        for name in self._names():
            table.add_column(name, justify="right")
        table.add_column("mIoU", justify="right", style="bold")
        cells = ["-" if v is UNDEFINED else f"{100 * v:.1f}" for v in self.per_class_iou]
        table.add_row(*cells, f"{100 * self.mean_iou:.1f}")
        console.print(table)


def iou(cm, config_fingerprint=None, sample_count=0, class_names=()):
    """IoU_c = TP / (TP + FP + FN); zero-union classes are undefined and left out of the mean"""
    counts = cm.counts
    if counts.size == 0:
        raise ValueError("empty confusion matrix")
    tp = np.diag(counts)
    union = counts.sum(axis=0) + counts.sum(axis=1) - tp
    per_class = [float(t / u) if u > 0 else UNDEFINED for t, u in zip(tp, union)]
    defined = [v for v in per_class if v is not UNDEFINED]
    if not defined:
        raise ValueError("every class has zero union; nothing was scored")
    return EvalReport(
        per_class_iou=per_class,
        mean_iou=float(np.mean(defined)),
        config_fingerprint=config_fingerprint,
        sample_count=sample_count,
        class_names=list(class_names),
    )


def evaluate(model, dataset, options, ignore_index=255, config_fingerprint=None):
    """Inference path only: target images against held-out adverse labels
    (``domain == "target"``) or source images against source labels.
    """
    logger = setup_logger()
    if len(dataset) == 0:
        raise ConfigError(f"evaluation split '{options.split}' is empty", key="eval.split")
    scene = dataset.scene
    dtype = next(model.parameters()).dtype
    cm = ConfusionMatrix(scene.num_classes)

    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            for start in range(0, len(dataset), options.batch_size):
                samples = [dataset[i] for i in range(start, min(start + options.batch_size, len(dataset)))]
                if options.domain == "target":
                    images = np.stack([s.target_float() for s in samples])
                    labels = [s.adverse_labels_heldout for s in samples]
                else:
                    images = np.stack([s.source_float() for s in samples])
                    labels = [s.source_labels for s in samples]
                pred = model.segment(torch.from_numpy(images).to(dtype)).argmax(dim=1).numpy()
                for p, gt in zip(pred, labels):
                    cm = accumulate(cm, p, gt, ignore_index)
    finally:
        model.train(was_training)

    report = iou(cm, config_fingerprint=config_fingerprint, sample_count=len(dataset),
                 class_names=scene.class_names)
    logger.info(f"Evaluated {len(dataset)} {options.domain} samples: mIoU {100 * report.mean_iou:.2f}")
    return report
