"""Split-and-bin calibration and iterative group patching.

The core two-step procedure splits the data, fits the cell structure on the
first part, and sets each cell's prediction to the mean label of the second
part's points in that cell.  Cells that receive no calibration points fall
back to the global calibration mean, which keeps prediction total.  An
iterative patcher is provided for calibrating any predictor against an
arbitrary (possibly overlapping) collection of groups.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import scaffold
from ._rng import make_rng
from .datagen import Dataset
from .errors import InvalidSpecError, NonConvergenceWarning, PartitionParseError, UnsupportedVersionError
from .scaffold import ReprFn, ScaffoldPartition

PREDICTOR_FORMAT_VERSION = 1


def split(dataset: Dataset, pi: float, seed: int):
    """Random disjoint split with |first part| = floor(pi * m)."""
    if not 0.0 < pi < 1.0:
        raise InvalidSpecError(f"split fraction must be in (0, 1), got {pi}")
    m = dataset.n
    if m < 2:
        raise InvalidSpecError("need at least 2 points to split")
    perm = make_rng(seed, 0x5B117).permutation(m)
    m1 = int(np.floor(pi * m))
    return dataset.subset(perm[:m1]), dataset.subset(perm[m1:])


@dataclass
class BinnedPredictor:
    """Per-cell constant predictor fitted on a held-out calibration split."""

    partition: ScaffoldPartition
    h: ReprFn
    values: np.ndarray
    counts: np.ndarray
    fallback: float
    train_seed: int = -1

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.counts = np.asarray(self.counts, dtype=np.int64)
        K = self.partition.n_cells
        if self.values.shape != (K,) or self.counts.shape != (K,):
            raise InvalidSpecError("values/counts must have one entry per cell")
        if np.min(self.values) < 0.0 or np.max(self.values) > 1.0:
            raise InvalidSpecError("cell values must lie in [0, 1]")
        if not 0.0 <= self.fallback <= 1.0:
            raise InvalidSpecError("fallback must lie in [0, 1]")
        if np.min(self.counts) < 0:
            raise InvalidSpecError("counts must be nonnegative")

    def cells(self, X) -> np.ndarray:
        return scaffold.assign_batch(self.partition, self.h, X)

    def predict(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return self.values[self.cells(X)]


def fit_binned(part: ScaffoldPartition, h: ReprFn, d2: Dataset,
               train_seed: int = -1) -> BinnedPredictor:
    """Per-cell mean labels over the calibration split.

    The partition must have been built on the other split; this function
    never rebuilds it.  Empty cells predict the global calibration mean.
    """
    if d2.n < 1:
        raise InvalidSpecError("calibration split is empty")
    K = part.n_cells
    ids = scaffold.assign_batch(part, h, d2.X)
    counts = np.bincount(ids, minlength=K)
    sums = np.bincount(ids, weights=d2.y.astype(float), minlength=K)
    fallback = float(d2.y.mean())
    values = np.full(K, fallback)
    nz = counts > 0
    values[nz] = sums[nz] / counts[nz]
    return BinnedPredictor(part, h, values, counts, fallback, train_seed)


def predict(bp: BinnedPredictor, x) -> float:
    """Prediction for one point: its cell's value (or the fallback)."""
    return float(bp.predict(np.asarray(x, dtype=float)[None, :])[0])


def meta_algorithm(dataset: Dataset, h: ReprFn, B: int, pi: float = 0.5,
                   seed: int = 0, mode: str = "conditional") -> BinnedPredictor:
    """Split, build the partition on the first part, bin-calibrate on the second."""
    d1, d2 = split(dataset, pi, seed)
    part = scaffold.build_partition(h, d1.X, B, mode=mode)
    return fit_binned(part, h, d2, train_seed=dataset.seed)


@dataclass
class ComposedPredictor:
    """A predictor of the form w(h(x)) that exposes its representation."""

    h: ReprFn
    w: object  # callable on (n, r) representation values

    def predict(self, X) -> np.ndarray:
        H = np.atleast_2d(self.h(X))
        return np.clip(np.asarray(self.w(H), dtype=float).reshape(H.shape[0]), 0.0, 1.0)


def no_harm_postprocess(p0: ComposedPredictor, dataset: Dataset, B: int,
                        pi: float = 0.5, seed: int = 0) -> BinnedPredictor:
    """Re-calibrate an existing predictor over cells built from its own representation.

    Identical to :func:`meta_algorithm` run on ``p0``'s representation; named
    separately because its contract is a mean-squared-error comparison
    against ``p0`` rather than a calibration guarantee.
    """
    if not isinstance(p0, ComposedPredictor):
        raise InvalidSpecError("no-harm post-processing needs a predictor exposing its representation")
    return meta_algorithm(dataset, p0.h, B, pi=pi, seed=seed)


# ---------------------------------------------------------------------------
# iterative patcher


@dataclass(frozen=True)
class GroupCollection:
    """Named membership predicates; groups may intersect arbitrarily."""

    predicates: tuple
    names: tuple

    def __post_init__(self):
        if len(self.predicates) != len(self.names) or not self.predicates:
            raise InvalidSpecError("need one name per group predicate")

    def __len__(self):
        return len(self.predicates)

    @staticmethod
    def everything() -> "GroupCollection":
        return GroupCollection((lambda X: np.ones(len(X), dtype=bool),), ("all",))

    def masks(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        out = np.stack([np.asarray(g(X), dtype=bool) for g in self.predicates])
        if out.shape != (len(self), X.shape[0]):
            raise InvalidSpecError("group predicate returned wrong-shaped mask")
        return out


def _as_predict_fn(p):
    if hasattr(p, "predict"):
        return lambda X: np.asarray(p.predict(X), dtype=float)
    if callable(p):
        return lambda X: np.asarray(p(X), dtype=float)
    raise InvalidSpecError("predictor must be callable or expose .predict")


def _bucket_ids(values, width):
    nb = int(np.ceil(1.0 / width))
    return np.minimum((values / width).astype(int), nb - 1), nb


@dataclass
class PatchedPredictor:
    """Base predictor plus an ordered list of (group, bucket, shift) adjustments."""

    base: object
    groups: GroupCollection
    bucket_width: float
    adjustments: list = field(default_factory=list)
    converged: bool = True
    audit: list = field(default_factory=list)

    def predict(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        v = np.clip(_as_predict_fn(self.base)(X), 0.0, 1.0)
        masks = self.groups.masks(X)
        for g, bucket, shift in self.adjustments:
            ids, _ = _bucket_ids(v, self.bucket_width)
            sel = masks[g] & (ids == bucket)
            v[sel] = np.clip(v[sel] + shift, 0.0, 1.0)
        return v


def iterative_multicalibrate(p0, groups: GroupCollection, data: Dataset,
                             alpha: float, bucket_width: float = 0.1,
                             max_iters: int = 1000) -> PatchedPredictor:
    """Patch a predictor until no (group, value-bucket) slice is miscalibrated.

    A slice qualifies for adjustment when it carries empirical mass at least
    ``alpha / len(groups)`` and its mean residual exceeds ``alpha`` in
    magnitude; the slice's predictions shift by the residual (clipped to
    [0, 1]).  The empirical squared error strictly decreases at every
    accepted adjustment, which bounds the number of iterations; hitting
    ``max_iters`` returns the best-so-far predictor flagged as unconverged.
    """
    if alpha <= 0:
        raise InvalidSpecError("alpha must be positive")
    if not 0.0 < bucket_width <= 1.0:
        raise InvalidSpecError("bucket width must be in (0, 1]")
    patched = PatchedPredictor(p0, groups, bucket_width)
    X, y = data.X, data.y.astype(float)
    m = data.n
    masks = groups.masks(X)
    v = np.clip(_as_predict_fn(p0)(X), 0.0, 1.0)
    mass_floor = alpha / len(groups)

    for _ in range(max_iters):
        ids, nb = _bucket_ids(v, bucket_width)
        found = False
        for g in range(len(groups)):
            for bucket in range(nb):
                sel = masks[g] & (ids == bucket)
                cnt = int(sel.sum())
                if cnt / m < mass_floor or cnt == 0:
                    continue
                shift = float(np.mean(y[sel] - v[sel]))
                if abs(shift) <= alpha:
                    continue
                before = float(np.mean((v - y) ** 2))
                v[sel] = np.clip(v[sel] + shift, 0.0, 1.0)
                after = float(np.mean((v - y) ** 2))
                patched.adjustments.append((g, bucket, shift))
                patched.audit.append({
                    "group": groups.names[g],
                    "bucket": bucket,
                    "shift": shift,
                    "sq_err_before": before,
                    "sq_err_after": after,
                })
                found = True
                break
            if found:
                break
        if not found:
            return patched
    patched.converged = False
    warnings.warn("patcher stopped at max_iters with violations remaining",
                  NonConvergenceWarning)
    return patched


def save_audit_trail(patched: PatchedPredictor, path):
    """One JSON document per line, one accepted adjustment per document."""
    with open(path, "w") as fh:
        for entry in patched.audit:
            fh.write(json.dumps(entry) + "\n")


# ---------------------------------------------------------------------------
# predictor serialization


def predictor_to_json(bp: BinnedPredictor) -> str:
    doc = {
        "format": "repcal-predictor",
        "version": PREDICTOR_FORMAT_VERSION,
        "partition": json.loads(scaffold.partition_to_json(bp.partition)),
        "repr": scaffold.repr_fn_to_dict(bp.h),
        "values": bp.values.tolist(),
        "counts": bp.counts.tolist(),
        "fallback": bp.fallback,
        "train_seed": bp.train_seed,
    }
    return json.dumps(doc)


def predictor_from_json(text: str) -> BinnedPredictor:
    if not text.strip():
        raise PartitionParseError("empty predictor document")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise PartitionParseError(f"invalid JSON: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format") != "repcal-predictor":
        raise PartitionParseError("not a predictor document (missing format tag)")
    if doc.get("version") != PREDICTOR_FORMAT_VERSION:
        raise UnsupportedVersionError(f"predictor version {doc.get('version')!r} unsupported")
    try:
        part = scaffold.partition_from_json(json.dumps(doc["partition"]))
        h = scaffold.repr_fn_from_dict(doc["repr"])
        return BinnedPredictor(part, h,
                               np.asarray(doc["values"], dtype=float),
                               np.asarray(doc["counts"], dtype=np.int64),
                               float(doc["fallback"]),
                               int(doc.get("train_seed", -1)))
    except (KeyError, TypeError, ValueError) as exc:
        raise PartitionParseError(f"malformed predictor document: {exc}") from exc


def save_predictor(bp: BinnedPredictor, path):
    with open(path, "w") as fh:
        fh.write(predictor_to_json(bp))


def load_predictor(path) -> BinnedPredictor:
    with open(path) as fh:
        return predictor_from_json(fh.read())
