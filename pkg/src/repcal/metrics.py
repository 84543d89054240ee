"""Calibration and accuracy measurement, exact enumeration oracles, rate fits."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from . import scaffold
from .calibrate import BinnedPredictor, GroupCollection, _as_predict_fn, _bucket_ids
from .datagen import Dataset
from .errors import InvalidSpecError, MissingTruthError
from .scaffold import ScaffoldPartition


@dataclass(frozen=True)
class CellGap:
    key: object
    count: float
    residual: float

    @property
    def gap(self):
        return abs(self.residual)


@dataclass(frozen=True)
class CalibrationReport:
    """Per-slice mean residuals on fresh data, plus the worst absolute gap.

    Slices are partition cells for a binned predictor, or (group, value
    bucket) pairs for a general predictor.  Slices with no fresh mass are
    excluded from the gap and listed separately.
    """

    per_cell: tuple
    excluded: tuple
    n_eval: int

    @property
    def max_gap(self):
        return max((c.gap for c in self.per_cell), default=0.0)

    @property
    def alpha_hat(self):
        return self.max_gap


def calibration_report(predictor, groups_or_partition, fresh: Dataset,
                       bucket_width: float = 0.1) -> CalibrationReport:
    """Measure per-slice calibration residuals y - p_hat on fresh data.

    The fresh sample must be disjoint from the data the predictor saw; when
    both sides carry seeds this is checked.
    """
    if fresh.n < 1:
        raise InvalidSpecError("fresh evaluation data is empty")
    train_seed = getattr(predictor, "train_seed", -1)
    if train_seed != -1 and fresh.seed != -1 and train_seed == fresh.seed:
        raise InvalidSpecError(
            f"fresh data reuses the predictor's training seed {train_seed}"
        )
    pred = _as_predict_fn(predictor)(fresh.X)
    resid = fresh.y.astype(float) - pred

    per_cell = []
    excluded = []
    if isinstance(groups_or_partition, ScaffoldPartition):
        part = groups_or_partition
        h = predictor.h if isinstance(predictor, BinnedPredictor) else None
        if h is None:
            raise InvalidSpecError("cell-level report needs a binned predictor")
        ids = scaffold.assign_batch(part, h, fresh.X)
        for k in range(part.n_cells):
            sel = ids == k
            cnt = int(sel.sum())
            if cnt == 0:
                excluded.append(CellGap(k, 0, 0.0))
            else:
                per_cell.append(CellGap(k, cnt, float(resid[sel].mean())))
    elif isinstance(groups_or_partition, GroupCollection):
        groups = groups_or_partition
        masks = groups.masks(fresh.X)
        ids, nb = _bucket_ids(pred, bucket_width)
        for g in range(len(groups)):
            for b in range(nb):
                sel = masks[g] & (ids == b)
                cnt = int(sel.sum())
                key = f"{groups.names[g]}:{b}"
                if cnt == 0:
                    excluded.append(CellGap(key, 0, 0.0))
                else:
                    per_cell.append(CellGap(key, cnt, float(resid[sel].mean())))
    else:
        raise InvalidSpecError("expected a ScaffoldPartition or GroupCollection")
    return CalibrationReport(tuple(per_cell), tuple(excluded), fresh.n)


def mse_vs_truth(predictor, dataset: Dataset) -> float:
    """Mean squared distance between predictions and the attached truth."""
    if dataset.p_star is None:
        raise MissingTruthError("dataset carries no ground-truth probabilities")
    pred = _as_predict_fn(predictor)(dataset.X)
    return float(np.mean((pred - dataset.p_star) ** 2))


@dataclass(frozen=True)
class ExactCalibration:
    """Exact per-cell residuals E[Y - p_hat | cell] on a finite weighted domain."""

    per_cell: tuple
    max_gap: float


def exact_calibration_enumerable(domain, predictor, partition: ScaffoldPartition) -> ExactCalibration:
    """Exact calibration gaps by weighted enumeration (no sampling).

    ``domain`` is (X, weights, p_star) with weights summing to one over at
    most 10^4 points; E[Y | x] = p_star(x) makes every conditional residual
    an exact finite sum.
    """
    X, w, p_star = domain
    X = np.asarray(X, dtype=float)
    w = np.asarray(w, dtype=float)
    p_star = np.asarray(p_star, dtype=float)
    if X.shape[0] > 10_000:
        raise InvalidSpecError("enumerable domain limited to 10^4 points")
    if abs(w.sum() - 1.0) > 1e-10:
        raise InvalidSpecError(f"weights sum to {w.sum()!r}, expected 1")
    pred = _as_predict_fn(predictor)(X)
    h = predictor.h if isinstance(predictor, BinnedPredictor) else None
    if h is None:
        raise InvalidSpecError("exact oracle needs a binned predictor")
    ids = scaffold.assign_batch(partition, h, X)
    cells = []
    for k in range(partition.n_cells):
        sel = ids == k
        mass = float(w[sel].sum())
        if mass <= 0.0:
            continue
        residual = float(np.sum(w[sel] * (p_star[sel] - pred[sel])) / mass)
        cells.append(CellGap(k, mass, residual))
    return ExactCalibration(tuple(cells), max((c.gap for c in cells), default=0.0))


@dataclass(frozen=True)
class RateFit:
    """Least-squares fit of log(metric) against log(n)."""

    points: tuple
    slope: float
    intercept: float
    r_squared: float


def fit_rate(points) -> RateFit:
    """Fit a power law through (n, metric) pairs; needs >= 4 positive points."""
    pts = [(float(n), float(v)) for n, v in points]
    if len(pts) < 4:
        raise InvalidSpecError("rate fit needs at least 4 points")
    if any(v <= 0 for _, v in pts):
        raise InvalidSpecError("rate fit needs strictly positive metric values")
    logs = np.log(np.asarray(pts))
    x, y = logs[:, 0], logs[:, 1]
    slope, intercept = np.polyfit(x, y, 1)
    fitted = slope * x + intercept
    ss_res = float(np.sum((y - fitted) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 if ss_tot == 0 else max(0.0, 1.0 - ss_res / ss_tot)
    return RateFit(tuple(pts), float(slope), float(intercept), r2)


# ---------------------------------------------------------------------------
# report serialization


def report_to_json(report: CalibrationReport) -> str:
    return json.dumps({
        "n_eval": report.n_eval,
        "max_gap": report.max_gap,
        "alpha_hat": report.alpha_hat,
        "cells": [
            {"key": c.key, "count": c.count, "residual": c.residual, "gap": c.gap}
            for c in report.per_cell
        ],
        "excluded": [{"key": c.key} for c in report.excluded],
    })


def save_report(report: CalibrationReport, json_path, csv_path=None):
    with open(json_path, "w") as fh:
        fh.write(report_to_json(report))
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["key", "count", "residual", "gap"])
            for c in report.per_cell:
                writer.writerow([c.key, c.count, f"{c.residual:.17g}", f"{c.gap:.17g}"])
