"""Frame accuracy in the collapsed (39-phone) space and confusion matrices."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import IntegrityError
from .model import ModelParams, classify, encode
from .tensor import ShapeError

PREDICT_CHUNK = 4096


def predict(params: ModelParams, ds) -> np.ndarray:
    """Argmax class per example on clean inputs (no corruption, no decoder).

    ``np.argmax`` returns the first maximum, i.e. ties go to the lowest index.
    """
    inputs = ds.inputs if hasattr(ds, "inputs") else np.asarray(ds)
    if inputs.ndim != 2 or inputs.shape[1] != params.shape.input_dim:
        raise ShapeError(f"inputs {inputs.shape} do not fit model input {params.shape.input_dim}")
    out = np.empty(inputs.shape[0], dtype=np.int64)
    for start in range(0, inputs.shape[0], PREDICT_CHUNK):
        chunk = inputs[start:start + PREDICT_CHUNK]
        out[start:start + PREDICT_CHUNK] = np.argmax(classify(params, encode(params, chunk)), axis=1)
    return out


@dataclass
class EvalReport:
    frame_accuracy_collapsed: float
    frame_accuracy_raw: float
    confusion: np.ndarray  # rows: reference, cols: prediction (collapsed space)
    num_frames: int
    labels: tuple[str, ...] = ()


def evaluate(preds, refs, cmap) -> EvalReport:
    preds = np.asarray(preds, dtype=np.int64)
    refs = np.asarray(refs, dtype=np.int64)
    if preds.shape != refs.shape or preds.ndim != 1:
        raise IntegrityError(f"{preds.shape[0]} predictions vs {refs.shape[0]} references")
    n_src = len(cmap.sources)
    for name, arr in (("prediction", preds), ("reference", refs)):
        if arr.size and (arr.min() < 0 or arr.max() >= n_src):
            raise IntegrityError(f"{name} index outside 0..{n_src - 1}")
    p39, r39 = cmap.index[preds], cmap.index[refs]
    k = len(cmap.targets)
    confusion = np.zeros((k, k), dtype=np.int64)
    np.add.at(confusion, (r39, p39), 1)
    n = int(preds.size)
    if n:
        collapsed = int(np.trace(confusion)) / n
        raw = int(np.sum(preds == refs)) / n
    else:
        collapsed = raw = float("nan")
    return EvalReport(collapsed, raw, confusion, n, tuple(cmap.targets))


def write_report(report: EvalReport, path: str | Path, extra: dict | None = None) -> None:
    """Scalar metrics block, blank line, then the confusion matrix with phone headers."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "value"])
        for key, value in (extra or {}).items():
            w.writerow([key, value])
        w.writerow(["frame_accuracy_collapsed", repr(report.frame_accuracy_collapsed)])
        w.writerow(["frame_accuracy_raw", repr(report.frame_accuracy_raw)])
        w.writerow(["num_frames", report.num_frames])
        w.writerow([])
        w.writerow(["ref\\hyp"] + list(report.labels))
        for name, row in zip(report.labels, report.confusion):
            w.writerow([name] + [int(v) for v in row])
