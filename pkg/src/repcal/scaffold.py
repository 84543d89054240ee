"""Quantile-cell partitions over a representation mapping.

The range of an r-dimensional representation is carved into K = B^r cells.
Coordinate 1 is split at B-quantiles of the training values; recursively,
each later coordinate is split at quantiles conditional on the points routed
to the node (default), or at one global grid per coordinate (``mode="global"``).
Cells are left-closed/right-open with unbounded outer cells, so every real
vector lands in exactly one cell.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import datagen
from .errors import (
    InsufficientSamplesError,
    InvalidSpecError,
    PartitionParseError,
    UnsupportedVersionError,
)

PARTITION_FORMAT_VERSION = 1


@dataclass(frozen=True)
class ReprFn:
    """A representation mapping R^d -> R^r.

    kind is ``linear`` (x -> W x), ``mlp_prefix`` (post-activation output of a
    network prefix) or ``external`` (arbitrary vectorized callable; not
    serializable).
    """

    kind: str
    r: int
    d: int
    W: np.ndarray | None = None
    spec: "datagen.MlpSpec | None" = None
    depth: int | None = None
    fn: object = None

    @staticmethod
    def linear(W) -> "ReprFn":
        W = np.asarray(W, dtype=float)
        if W.ndim != 2:
            raise InvalidSpecError("linear representation needs an r x d matrix")
        return ReprFn("linear", W.shape[0], W.shape[1], W=W)

    @staticmethod
    def mlp_prefix(spec, depth: int) -> "ReprFn":
        if not 1 <= depth < spec.depth:
            raise InvalidSpecError(f"prefix depth must be in [1, {spec.depth - 1}]")
        return ReprFn("mlp_prefix", spec.layers[depth - 1].d_out, spec.input_dim,
                      spec=spec, depth=depth)

    @staticmethod
    def external(fn, r: int, d: int) -> "ReprFn":
        return ReprFn("external", r, d, fn=fn)

    def __call__(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        single = X.ndim == 1
        if single:
            X = X[None, :]
        if self.kind == "linear":
            H = X @ self.W.T
        elif self.kind == "mlp_prefix":
            H = datagen.eval_prefix_batch(self.spec, self.depth, X)
        else:
            H = np.asarray(self.fn(X), dtype=float)
            if H.shape != (X.shape[0], self.r):
                raise InvalidSpecError(
                    f"external representation returned shape {H.shape}, expected {(X.shape[0], self.r)}"
                )
        if not np.all(np.isfinite(H)):
            raise InvalidSpecError("representation produced non-finite values")
        return H[0] if single else H


def repr_fn_to_dict(h: ReprFn) -> dict:
    if h.kind == "linear":
        return {"kind": "linear", "W": h.W.tolist()}
    if h.kind == "mlp_prefix":
        return {"kind": "mlp_prefix", "spec": datagen.spec_to_dict(h.spec), "depth": h.depth}
    raise InvalidSpecError("external representations are not serializable")


def repr_fn_from_dict(d: dict) -> ReprFn:
    try:
        if d["kind"] == "linear":
            return ReprFn.linear(np.asarray(d["W"], dtype=float))
        if d["kind"] == "mlp_prefix":
            return ReprFn.mlp_prefix(datagen.spec_from_dict(d["spec"]), int(d["depth"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise PartitionParseError(f"malformed representation document: {exc}") from exc
    raise PartitionParseError(f"unknown representation kind {d.get('kind')!r}")


def _type1_cuts(sorted_vals: np.ndarray, B: int) -> np.ndarray:
    """Cut b = first value of quantile bucket b+1 (inverse empirical CDF).

    With m values, bucket b holds sorted ranks (ceil((b-1)m/B), ceil(bm/B)].
    Duplicated values can spill into the right neighbour (ties route right);
    degenerate nodes yield duplicated cut points, which is valid.
    """
    m = sorted_vals.size
    if m == 0:
        return np.zeros(B - 1)
    idx = np.ceil(np.arange(1, B) * m / B).astype(int)
    return sorted_vals[np.minimum(idx, m - 1)]


@dataclass(frozen=True)
class ScaffoldPartition:
    """The fitted cell structure: a depth-r tree of per-coordinate cuts.

    Leaves carry dense cell ids 0..K-1 in depth-first order plus the number
    of training points routed to them.  The structure is immutable and safe
    to share across threads; routing is pure.
    """

    r: int
    B: int
    mode: str
    root: dict
    train_counts: np.ndarray

    @property
    def n_cells(self):
        return self.B ** self.r

    def cells_of(self, H) -> np.ndarray:
        """Cell ids for rows of an (n, r) representation-value matrix."""
        H = np.asarray(H, dtype=float)
        if H.ndim != 2 or H.shape[1] != self.r:
            raise InvalidSpecError(f"representation values must be (n, {self.r})")
        out = np.empty(H.shape[0], dtype=np.int64)

        def route(node, idx):
            if "cell" in node:
                out[idx] = node["cell"]
                return
            cuts = node["_cuts"]
            vals = H[idx, node["coord"]]
            buckets = np.searchsorted(cuts, vals, side="right")
            for b, child in enumerate(node["children"]):
                sub = idx[buckets == b]
                if sub.size:
                    route(child, sub)

        route(self.root, np.arange(H.shape[0]))
        return out


def _attach_cut_arrays(node):
    if "children" in node:
        node["_cuts"] = np.asarray(node["cuts"], dtype=float)
        for child in node["children"]:
            _attach_cut_arrays(child)
    return node


def build_partition(h: ReprFn, X, B: int, mode: str = "conditional") -> ScaffoldPartition:
    """Fit the K = B^r quantile-cell partition on training points.

    Requires at least B^r training points.  A constant coordinate collapses
    its cuts onto one value; all mass then routes to the rightmost child,
    which is documented behaviour rather than an error.
    """
    if B < 1:
        raise InvalidSpecError("B must be >= 1")
    if mode not in ("conditional", "global"):
        raise InvalidSpecError(f"unknown partition mode {mode!r}")
    X = np.asarray(X, dtype=float)
    H = h(X)
    n, r = H.shape
    K = B ** r
    if n < K:
        raise InsufficientSamplesError(f"need at least B^r = {K} training points, got {n}")

    global_cuts = None
    if mode == "global":
        global_cuts = [_type1_cuts(np.sort(H[:, j], kind="stable"), B) for j in range(r)]

    counts = np.zeros(K, dtype=np.int64)
    next_cell = iter(range(K))

    def grow(idx, level):
        if level == r:
            cid = next(next_cell)
            counts[cid] = idx.size
            return {"cell": cid, "count": int(idx.size)}
        vals = H[idx, level]
        if mode == "global":
            cuts = global_cuts[level]
        else:
            cuts = _type1_cuts(np.sort(vals, kind="stable"), B)
        buckets = np.searchsorted(cuts, vals, side="right")
        children = [grow(idx[buckets == b], level + 1) for b in range(B)]
        return {"coord": level, "cuts": [float(c) for c in cuts], "children": children}

    root = _attach_cut_arrays(grow(np.arange(n), 0))
    return ScaffoldPartition(r=r, B=B, mode=mode, root=root, train_counts=counts)


def assign(part: ScaffoldPartition, h: ReprFn, x) -> int:
    """Cell id of a single point; total on all finite inputs."""
    return int(assign_batch(part, h, np.asarray(x, dtype=float)[None, :])[0])


def assign_batch(part: ScaffoldPartition, h: ReprFn, X) -> np.ndarray:
    return part.cells_of(np.atleast_2d(h(X)))


# ---------------------------------------------------------------------------
# serialization


def _strip_cut_arrays(node):
    if "children" in node:
        return {
            "coord": node["coord"],
            "cuts": node["cuts"],
            "children": [_strip_cut_arrays(c) for c in node["children"]],
        }
    return {"cell": node["cell"], "count": node["count"]}


def partition_to_json(part: ScaffoldPartition) -> str:
    doc = {
        "format": "repcal-partition",
        "version": PARTITION_FORMAT_VERSION,
        "r": part.r,
        "B": part.B,
        "mode": part.mode,
        "train_counts": part.train_counts.tolist(),
        "tree": _strip_cut_arrays(part.root),
    }
    return json.dumps(doc)


def _validate_tree(node, r, B, level, path):
    if "cell" in node:
        if level != r:
            raise PartitionParseError(f"{path}: leaf at depth {level}, expected {r}")
        return
    if "coord" not in node or "cuts" not in node or "children" not in node:
        raise PartitionParseError(f"{path}: interior node missing coord/cuts/children")
    cuts = node["cuts"]
    if len(cuts) != B - 1 or len(node["children"]) != B:
        raise PartitionParseError(f"{path}: expected {B - 1} cuts and {B} children")
    if any(cuts[i] > cuts[i + 1] for i in range(len(cuts) - 1)):
        raise PartitionParseError(f"{path}: cut points not nondecreasing")
    for i, child in enumerate(node["children"]):
        _validate_tree(child, r, B, level + 1, f"{path}.children[{i}]")


def partition_from_json(text: str) -> ScaffoldPartition:
    if not text.strip():
        raise PartitionParseError("empty partition document")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise PartitionParseError(f"invalid JSON: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format") != "repcal-partition":
        raise PartitionParseError("not a partition document (missing format tag)")
    if doc.get("version") != PARTITION_FORMAT_VERSION:
        raise UnsupportedVersionError(f"partition version {doc.get('version')!r} unsupported")
    try:
        r, B, mode = int(doc["r"]), int(doc["B"]), doc["mode"]
        counts = np.asarray(doc["train_counts"], dtype=np.int64)
        tree = doc["tree"]
    except (KeyError, TypeError, ValueError) as exc:
        raise PartitionParseError(f"malformed partition document: {exc}") from exc
    if counts.shape != (B ** r,):
        raise PartitionParseError(f"train_counts has length {counts.size}, expected {B ** r}")
    _validate_tree(tree, r, B, 0, "tree")
    return ScaffoldPartition(r=r, B=B, mode=mode, root=_attach_cut_arrays(tree),
                             train_counts=counts)


def save_partition(part: ScaffoldPartition, path):
    with open(path, "w") as fh:
        fh.write(partition_to_json(part))


def load_partition(path) -> ScaffoldPartition:
    with open(path) as fh:
        return partition_from_json(fh.read())
