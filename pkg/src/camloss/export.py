"""Binary PGM heatmaps and the per-epoch metrics CSV."""
from __future__ import annotations

import csv
from dataclasses import astuple, fields
from pathlib import Path

import numpy as np

from .trainer import EpochMetrics

CSV_HEADER = ("epoch", "lr", "alpha", "loss_ce", "loss_cam", "train_acc", "test_acc")


def to_bytes(values) -> np.ndarray:
    """Map [0,1] values to 0..255 with round-half-away-from-zero."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    return np.floor(255.0 * v + 0.5).astype(np.uint8)


def encode_pgm(values) -> bytes:
    pixels = to_bytes(values)
    if pixels.ndim != 2:
        raise ValueError(f"PGM needs a 2-d map, got shape {pixels.shape}")
    h, w = pixels.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes()


def write_pgm(path, values) -> None:
    Path(path).write_bytes(encode_pgm(values))


def write_metrics(metrics: list[EpochMetrics], path) -> None:
    names = [f.name for f in fields(EpochMetrics)]
    assert tuple(names) == CSV_HEADER
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for m in metrics:
            epoch, *rest = astuple(m)
            writer.writerow([epoch] + [f"{v:.6f}" for v in rest])


def read_metrics(path) -> list[EpochMetrics]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != CSV_HEADER:
            raise ValueError(f"unexpected metrics header {header}")
        return [EpochMetrics(int(row[0]), *(float(v) for v in row[1:])) for row in reader]
