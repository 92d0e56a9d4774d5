# metrics.py
import csv
import math
from dataclasses import dataclass
from typing import Iterable, List

import numpy as np

from .errors import FormatError, ShapeError

SPLITS = ("train", "test")
CSV_HEADER = ("iteration", "split", "loss", "dice")


@dataclass
class MetricRecord:
    iteration: int
    split: str
    loss: float
    dice: float

    def problems(self) -> List[str]:
        errors = []
        if self.split not in SPLITS:
            errors.append(f"split must be one of {SPLITS}, got '{self.split}'")
        if not (math.isfinite(self.loss) and self.loss >= 0):
            errors.append(f"loss must be finite and >= 0, got {self.loss}")
        if not 0.0 <= self.dice <= 1.0:
            errors.append(f"dice must lie in [0, 1], got {self.dice}")
        return errors


def binarize(prob: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    return np.asarray(prob) >= threshold


def dice_coefficient(pred: np.ndarray, truth: np.ndarray, threshold: float = 0.5) -> float:
    """2|P & G| / (|P| + |G|) with P = pred >= threshold; two empty sets score 1.0."""
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise ShapeError(f"dice_coefficient: prediction shape {pred.shape} does not match truth shape {truth.shape}")
    p = binarize(pred, threshold)
    g = truth > 0
    total = int(np.count_nonzero(p)) + int(np.count_nonzero(g))
    if total == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(p & g)) / total


def curve_dice(pred: np.ndarray, truth: np.ndarray, threshold: float = 0.5) -> float:
    """Dice as plotted in the training curves: slices without airway score 0."""
    if not np.any(np.asarray(truth) > 0):
        return 0.0
    return dice_coefficient(pred, truth, threshold)


def epoch_means(records: Iterable[MetricRecord], epoch_length: int, split: str = "train") -> List[float]:
    """Mean loss per block of epoch_length iterations (the last block may be short)."""
    sums, counts = {}, {}
    for record in records:
        if record.split != split:
            continue
        epoch = record.iteration // epoch_length
        sums[epoch] = sums.get(epoch, 0.0) + record.loss
        counts[epoch] = counts.get(epoch, 0) + 1
    return [sums[e] / counts[e] for e in sorted(sums)]


def write_metrics_csv(records: Iterable[MetricRecord], path: str):
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for r in records:
            writer.writerow((r.iteration, r.split, f"{r.loss:.9g}", f"{r.dice:.9g}"))


def read_metrics_csv(path: str) -> List[MetricRecord]:
    with open(path, "r", encoding="utf-8", newline="") as f:
        rows = list(csv.reader(f))
    if not rows or tuple(rows[0]) != CSV_HEADER:
        raise FormatError(f"{path}: expected header {','.join(CSV_HEADER)}")
    records = []
    for lineno, row in enumerate(rows[1:], 2):
        try:
            iteration, split, loss, dice = row
            records.append(MetricRecord(int(iteration), split, float(loss), float(dice)))
        except ValueError as e:
            raise FormatError(f"{path}:{lineno}: malformed metrics row {row!r}") from e
    return records
