"""Synthetic truth models and dataset generation.

A ground-truth conditional probability is represented by an explicit layered
network (:class:`MlpSpec`).  Inputs are drawn from one of three laws
(:class:`InputLaw`), labels are Bernoulli draws from the truth, and every
sampling routine is deterministic given its integer seed.  Specs whose raw
output leaves [0, 1] are rescaled once by :func:`clamp_to_probability`; the
affine map is stored on the spec so the truth stays exact.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field, replace

import numpy as np

from ._rng import derive_seed, make_rng
from .errors import (
    DegenerateSpecError,
    DimensionMismatchError,
    InvalidLawError,
    InvalidSpecError,
    PartitionParseError,
    UnsupportedVersionError,
)

ACTIVATIONS = ("relu", "softplus", "identity")

SPEC_FORMAT_VERSION = 1


def _apply_activation(z, name):
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "softplus":
        # log(1 + e^z), stable for large |z|
        return np.logaddexp(0.0, z)
    if name == "identity":
        return z
    raise InvalidSpecError(f"unknown activation {name!r}")


@dataclass(frozen=True)
class Layer:
    """One dense layer: z -> activation(W z + b)."""

    weights: np.ndarray
    bias: np.ndarray
    activation: str

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        b = np.asarray(self.bias, dtype=float)
        if w.ndim != 2:
            raise InvalidSpecError("layer weights must be a 2-d matrix")
        if b.shape != (w.shape[0],):
            raise InvalidSpecError("layer bias length must match output dimension")
        if self.activation not in ACTIVATIONS:
            raise InvalidSpecError(f"unknown activation {self.activation!r}")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)

    @property
    def d_out(self):
        return self.weights.shape[0]

    @property
    def d_in(self):
        return self.weights.shape[1]


@dataclass(frozen=True)
class MlpSpec:
    """An explicit layered network used as a synthetic truth model.

    Parameters
    ----------
    layers : list of Layer
        Dense layers; adjacent dimensions must chain and the final output
        dimension must be 1.
    input_dim : int
        Expected input dimension.
    homogeneous : bool
        If set, all bias vectors must be zero (scale-equivariant network).
    weight_bound : float
        Declared bound; every weight entry must lie in [-bound, bound].
    output_affine : (scale, offset) or None
        Final affine rescale recorded by :func:`clamp_to_probability`.
    """

    layers: tuple
    input_dim: int
    homogeneous: bool = False
    weight_bound: float = np.inf
    output_affine: tuple | None = None

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise InvalidSpecError("spec needs at least one layer")
        d_in = self.input_dim
        for j, layer in enumerate(layers, start=1):
            if layer.d_in != d_in:
                raise DimensionMismatchError(
                    f"layer {j} expects input dim {layer.d_in}, got {d_in}"
                )
            d_in = layer.d_out
        if layers[-1].d_out != 1:
            raise InvalidSpecError("final layer must have output dimension 1")
        if self.homogeneous:
            for j, layer in enumerate(layers, start=1):
                if np.any(layer.bias != 0.0):
                    raise InvalidSpecError(f"homogeneous spec has nonzero bias in layer {j}")
        bound = float(self.weight_bound)
        for j, layer in enumerate(layers, start=1):
            if np.max(np.abs(layer.weights), initial=0.0) > bound + 1e-12:
                raise InvalidSpecError(f"layer {j} weight magnitude exceeds bound {bound}")
        if self.output_affine is not None:
            s, o = self.output_affine
            object.__setattr__(self, "output_affine", (float(s), float(o)))
        object.__setattr__(self, "layers", layers)

    @property
    def depth(self):
        return len(self.layers)

    @property
    def layer_dims(self):
        return [self.input_dim] + [layer.d_out for layer in self.layers]


def _forward(spec: MlpSpec, Z: np.ndarray, start: int = 0) -> np.ndarray:
    for layer in spec.layers[start:]:
        Z = _apply_activation(Z @ layer.weights.T + layer.bias, layer.activation)
    out = Z[:, 0]
    if spec.output_affine is not None:
        s, o = spec.output_affine
        out = s * out + o
    return out


def eval_mlp(spec: MlpSpec, x) -> float:
    """Forward pass on a single input vector, returning the scalar output.

    The recorded output affine (if any) is applied; no clipping happens here.
    """
    x = np.asarray(x, dtype=float)
    if x.shape != (spec.input_dim,):
        raise DimensionMismatchError(
            f"input has shape {x.shape}, spec expects ({spec.input_dim},)"
        )
    if not np.all(np.isfinite(x)):
        raise InvalidSpecError("input vector must be finite")
    return float(_forward(spec, x[None, :]))


def eval_mlp_batch(spec: MlpSpec, X) -> np.ndarray:
    """Vectorized :func:`eval_mlp` over the rows of ``X``."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != spec.input_dim:
        raise DimensionMismatchError(
            f"input has shape {X.shape}, spec expects (n, {spec.input_dim})"
        )
    return _forward(spec, X)


def eval_prefix(spec: MlpSpec, depth: int, x) -> np.ndarray:
    """Post-activation output of layer ``depth``, used as a representation map."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = x[None, :] if single else x
    out = eval_prefix_batch(spec, depth, X)
    return out[0] if single else out


def eval_prefix_batch(spec: MlpSpec, depth: int, X) -> np.ndarray:
    if not 1 <= depth < spec.depth:
        raise InvalidSpecError(f"prefix depth must be in [1, {spec.depth - 1}], got {depth}")
    Z = np.asarray(X, dtype=float)
    if Z.ndim != 2 or Z.shape[1] != spec.input_dim:
        raise DimensionMismatchError(
            f"input has shape {Z.shape}, spec expects (n, {spec.input_dim})"
        )
    for layer in spec.layers[:depth]:
        Z = _apply_activation(Z @ layer.weights.T + layer.bias, layer.activation)
    return Z


def eval_suffix(spec: MlpSpec, depth: int, z) -> np.ndarray:
    """Apply layers ``depth+1 .. k`` (and the output affine) to a post-activation value."""
    if not 1 <= depth < spec.depth:
        raise InvalidSpecError(f"suffix depth must be in [1, {spec.depth - 1}], got {depth}")
    Z = np.atleast_2d(np.asarray(z, dtype=float))
    expect = spec.layers[depth - 1].d_out
    if Z.shape[1] != expect:
        raise DimensionMismatchError(f"suffix input has dim {Z.shape[1]}, expected {expect}")
    out = _forward(spec, Z, start=depth)
    return out if np.asarray(z).ndim == 2 else float(out[0])


def eval_from_preactivation(spec: MlpSpec, depth: int, u) -> np.ndarray:
    """Network output as a function of the pre-activation of layer ``depth``.

    For ``depth=1`` this is the link function u -> net(x) with u = W1 x: the
    bias and activation of layer 1 are applied to ``u``, then the remaining
    layers run as usual.
    """
    if not 1 <= depth <= spec.depth:
        raise InvalidSpecError(f"depth must be in [1, {spec.depth}], got {depth}")
    U = np.atleast_2d(np.asarray(u, dtype=float))
    layer = spec.layers[depth - 1]
    if U.shape[1] != layer.d_out:
        raise DimensionMismatchError(f"pre-activation has dim {U.shape[1]}, expected {layer.d_out}")
    Z = _apply_activation(U + layer.bias, layer.activation)
    out = _forward(spec, Z, start=depth)
    return out if np.asarray(u).ndim == 2 else float(out[0])


def predict_proba(spec: MlpSpec, X) -> np.ndarray:
    """Ground-truth probabilities for the rows of ``X`` (output clipped to [0, 1])."""
    return np.clip(eval_mlp_batch(spec, X), 0.0, 1.0)


def clamp_to_probability(spec: MlpSpec, law: "InputLaw", n_sample: int = 10_000,
                         seed: int = 0, lo: float = 0.02, hi: float = 0.98) -> MlpSpec:
    """Affinely rescale the spec output into [lo, hi] over the law's support.

    The empirical output range over ``n_sample`` fresh draws is mapped onto
    [lo, hi]; the affine map is recorded on the returned spec so the rescaled
    truth remains exact.  Raises DegenerateSpecError when the output is
    numerically constant.
    """
    if n_sample < 10_000:
        raise InvalidSpecError("clamping needs at least 10**4 probe samples")
    X = law.sample(n_sample, make_rng(seed, 0xC1A))
    raw = eval_mlp_batch(spec, X)
    rmin, rmax = float(np.min(raw)), float(np.max(raw))
    if rmax - rmin < 1e-9:
        raise DegenerateSpecError(f"constant output (range [{rmin}, {rmax}]); cannot rescale")
    scale = (hi - lo) / (rmax - rmin)
    offset = lo - scale * rmin
    if spec.output_affine is not None:
        s0, o0 = spec.output_affine
        scale, offset = scale * s0, scale * o0 + offset
    return replace(spec, output_affine=(scale, offset))


# ---------------------------------------------------------------------------
# input laws


@dataclass(frozen=True)
class InputLaw:
    """Distribution of the feature vector.

    kind is one of ``uniform_symmetric_box`` (uniform on [-C, C]^d),
    ``gaussian`` (N(0, sigma)) or ``symmetrized_truncated_gaussian``
    (N(0, sigma) conditioned on ||x|| <= C, emitted as +/-x pairs).
    """

    kind: str
    dim: int
    box_halfwidth: float | None = None
    sigma: np.ndarray | None = None
    eig_bounds: tuple | None = None

    def __post_init__(self):
        if self.kind not in ("uniform_symmetric_box", "gaussian", "symmetrized_truncated_gaussian"):
            raise InvalidLawError(f"unknown law kind {self.kind!r}")
        if self.kind == "uniform_symmetric_box":
            if not (self.box_halfwidth and self.box_halfwidth > 0):
                raise InvalidLawError("uniform box law needs a positive halfwidth")
        else:
            sigma = np.asarray(self.sigma, dtype=float)
            if sigma.shape != (self.dim, self.dim):
                raise InvalidLawError("sigma must be d x d")
            if not np.allclose(sigma, sigma.T, atol=1e-10):
                raise InvalidLawError("sigma must be symmetric")
            eigs = np.linalg.eigvalsh(sigma)
            if eigs[0] <= 0:
                raise InvalidLawError("sigma must be positive definite")
            lo, hi = self.eig_bounds if self.eig_bounds else (float(eigs[0]), float(eigs[-1]))
            if eigs[0] < lo - 1e-9 or eigs[-1] > hi + 1e-9:
                raise InvalidLawError(
                    f"sigma eigenvalues [{eigs[0]:.4g}, {eigs[-1]:.4g}] leave declared [{lo}, {hi}]"
                )
            object.__setattr__(self, "sigma", sigma)
            object.__setattr__(self, "eig_bounds", (lo, hi))
            if self.kind == "symmetrized_truncated_gaussian":
                if not (self.box_halfwidth and self.box_halfwidth > 0):
                    raise InvalidLawError("truncated law needs a positive radius")

    @staticmethod
    def uniform_box(dim: int, halfwidth: float = 1.0) -> "InputLaw":
        return InputLaw("uniform_symmetric_box", dim, box_halfwidth=float(halfwidth))

    @staticmethod
    def gaussian(sigma) -> "InputLaw":
        sigma = np.asarray(sigma, dtype=float)
        return InputLaw("gaussian", sigma.shape[0], sigma=sigma)

    @staticmethod
    def symmetrized_truncated_gaussian(sigma, radius: float) -> "InputLaw":
        sigma = np.asarray(sigma, dtype=float)
        return InputLaw("symmetrized_truncated_gaussian", sigma.shape[0],
                        sigma=sigma, box_halfwidth=float(radius))

    @property
    def is_symmetric(self):
        # all three kinds have density(x) = density(-x) by construction
        return True

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if n < 1:
            raise InvalidLawError("sample size must be >= 1")
        if self.kind == "uniform_symmetric_box":
            c = self.box_halfwidth
            return rng.uniform(-c, c, size=(n, self.dim))
        chol = np.linalg.cholesky(self.sigma)
        if self.kind == "gaussian":
            return rng.standard_normal((n, self.dim)) @ chol.T
        # symmetrized truncated gaussian: accept ||z|| <= radius, emit +/-z pairs
        radius = self.box_halfwidth
        half = (n + 1) // 2
        accepted = []
        got = 0
        for _ in range(1000):
            z = rng.standard_normal((max(2 * half, 256), self.dim)) @ chol.T
            keep = z[np.linalg.norm(z, axis=1) <= radius]
            if keep.size:
                accepted.append(keep)
                got += keep.shape[0]
            if got >= half:
                break
        else:
            raise InvalidLawError("truncation radius rejects essentially all mass")
        z = np.concatenate(accepted, axis=0)[:half]
        paired = np.empty((2 * half, self.dim))
        paired[0::2] = z
        paired[1::2] = -z
        return paired[:n]

    def covariance(self) -> np.ndarray:
        """Exact covariance for box/gaussian laws, deterministic MC for the truncated law."""
        if self.kind == "uniform_symmetric_box":
            return (self.box_halfwidth ** 2 / 3.0) * np.eye(self.dim)
        if self.kind == "gaussian":
            return self.sigma.copy()
        X = self.sample(200_000, make_rng(0x7B0C, self.dim))
        return X.T @ X / X.shape[0]

    def describe(self) -> dict:
        out = {"kind": self.kind, "dim": self.dim}
        if self.box_halfwidth is not None:
            out["box_halfwidth"] = self.box_halfwidth
        if self.sigma is not None:
            out["sigma"] = self.sigma.tolist()
            out["eig_bounds"] = list(self.eig_bounds)
        return out

    @staticmethod
    def from_dict(d: dict) -> "InputLaw":
        kind = d["kind"]
        if kind == "uniform_symmetric_box":
            return InputLaw.uniform_box(d["dim"], d["box_halfwidth"])
        sigma = np.asarray(d["sigma"], dtype=float)
        if kind == "gaussian":
            return InputLaw.gaussian(sigma)
        return InputLaw.symmetrized_truncated_gaussian(sigma, d["box_halfwidth"])


# ---------------------------------------------------------------------------
# datasets


@dataclass
class Dataset:
    """Feature matrix with binary labels and optional ground-truth probabilities."""

    X: np.ndarray
    y: np.ndarray
    p_star: np.ndarray | None = None
    seed: int = -1

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        self.y = np.asarray(self.y)
        if self.X.ndim != 2 or self.X.shape[0] < 1:
            raise InvalidSpecError("X must be a nonempty n x d matrix")
        if self.y.shape != (self.X.shape[0],):
            raise InvalidSpecError("y length must match X rows")
        if not np.all(np.isfinite(self.X)):
            raise InvalidSpecError("X contains NaN or Inf")
        if not np.all((self.y == 0) | (self.y == 1)):
            raise InvalidSpecError("y entries must be 0 or 1")
        self.y = self.y.astype(np.int8)
        if self.p_star is not None:
            self.p_star = np.asarray(self.p_star, dtype=float)
            if self.p_star.shape != (self.X.shape[0],):
                raise InvalidSpecError("p_star length must match X rows")
            if not np.all(np.isfinite(self.p_star)):
                raise InvalidSpecError("p_star contains NaN or Inf")
            if np.min(self.p_star) < 0.0 or np.max(self.p_star) > 1.0:
                raise InvalidSpecError("p_star entries must lie in [0, 1]")

    @property
    def n(self):
        return self.X.shape[0]

    @property
    def d(self):
        return self.X.shape[1]

    def subset(self, idx) -> "Dataset":
        ps = None if self.p_star is None else self.p_star[idx]
        return Dataset(self.X[idx], self.y[idx], ps, self.seed)


def sample_dataset(spec: MlpSpec, law: InputLaw, n: int, seed: int) -> Dataset:
    """Draw X from the law, attach the exact truth, and sample Bernoulli labels.

    Deterministic given (spec, law, n, seed).  Specs without a recorded
    output affine must already emit values in [0, 1] on the drawn batch.
    """
    if law.dim != spec.input_dim:
        raise DimensionMismatchError(
            f"law dimension {law.dim} != spec input dim {spec.input_dim}"
        )
    rng = make_rng(seed)
    X = law.sample(n, rng)
    raw = eval_mlp_batch(spec, X)
    if spec.output_affine is None and (raw.min() < -1e-12 or raw.max() > 1 + 1e-12):
        raise InvalidSpecError(
            "spec output leaves [0, 1]; run clamp_to_probability before sampling labels"
        )
    p = np.clip(raw, 0.0, 1.0)
    y = (rng.random(n) < p).astype(np.int8)
    return Dataset(X, y, p, seed)


@dataclass(frozen=True)
class TransferTaskFamily:
    """A family of related tasks sharing the first-layer map.

    Under covariate shift the tasks share one spec and differ in their input
    laws; under concept shift they share the input law and the first-layer
    weights while the downstream layers differ per task.
    """

    shift: str
    specs: tuple
    laws: tuple
    n_per_task: int

    def __post_init__(self):
        if self.shift not in ("covariate", "concept"):
            raise InvalidSpecError(f"unknown shift kind {self.shift!r}")
        specs = tuple(self.specs)
        laws = tuple(self.laws)
        if len(specs) != len(laws) or not specs:
            raise InvalidSpecError("need one spec and one law per task")
        W1 = specs[0].layers[0].weights
        for t, spec in enumerate(specs):
            if not np.array_equal(spec.layers[0].weights, W1):
                raise InvalidSpecError(f"task {t} does not share the first-layer weights")
        r = W1.shape[0]
        if len(specs) < r:
            raise InvalidSpecError(f"need at least r={r} tasks, got {len(specs)}")
        gram = W1 @ W1.T
        if not np.allclose(gram, np.eye(r), atol=1e-8):
            raise InvalidSpecError("shared first-layer rows must be orthonormal")
        if self.n_per_task < 1:
            raise InvalidSpecError("n_per_task must be >= 1")
        object.__setattr__(self, "specs", specs)
        object.__setattr__(self, "laws", laws)

    @property
    def T(self):
        return len(self.specs)

    @property
    def W1(self):
        return self.specs[0].layers[0].weights

    @property
    def r(self):
        return self.W1.shape[0]


def sample_transfer(family: TransferTaskFamily, seed: int) -> list:
    """One dataset per task, with per-task seeds derived from ``seed``.

    Task ``t`` uses ``derive_seed(seed, t)``, so a one-task family reproduces
    ``sample_dataset(spec, law, n, derive_seed(seed, 0))`` exactly.
    """
    return [
        sample_dataset(spec, law, family.n_per_task, derive_seed(seed, t))
        for t, (spec, law) in enumerate(zip(family.specs, family.laws))
    ]


def digitlike_levels(levels: int, lo: float = 0.02, hi: float = 0.98) -> np.ndarray:
    """The distinct truth values used by :func:`digitlike_truth`."""
    return np.clip(np.arange(levels) / levels, lo, hi)


def digitlike_truth(levels: int, d: int, n: int, seed: int,
                    separation: float = 3.0) -> Dataset:
    """Cluster mixture with a small set of distinct truth values.

    Each point picks a level uniformly, draws X from a level-specific unit
    Gaussian whose means sit ``separation`` apart, and has truth value
    level/levels capped into [0.02, 0.98].
    """
    if not 2 <= levels <= 32:
        raise InvalidSpecError("levels must be between 2 and 32")
    rng = make_rng(seed)
    dirs = rng.standard_normal((levels, d))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    means = separation * dirs
    lab = rng.integers(0, levels, size=n)
    X = means[lab] + rng.standard_normal((n, d))
    p = digitlike_levels(levels)[lab]
    y = (rng.random(n) < p).astype(np.int8)
    ds = Dataset(X, y, p, seed)
    ds.level = lab  # extra provenance used by tests and demos
    return ds


# ---------------------------------------------------------------------------
# random spec generators


def _uniform_weights(rng, shape, bound):
    return rng.uniform(-bound, bound, size=shape)


def random_homogeneous_spec(d: int, depth: int, width: int, seed: int,
                            weight_bound: float = 1.5) -> MlpSpec:
    """Bias-free ReLU network with scalar first layer and |q(1)| bounded away from 0.

    Candidates whose suffix gain at unit activation is below 1e-3 in magnitude
    are resampled, since the recovered direction degenerates there.
    """
    if depth < 2:
        raise InvalidSpecError("homogeneous spec needs depth >= 2")
    rng = make_rng(seed, 0x40E0)
    for _ in range(200):
        dims = [d, 1] + [width] * (depth - 2) + [1]
        layers = []
        for j in range(depth):
            w = _uniform_weights(rng, (dims[j + 1], dims[j]), weight_bound)
            act = "relu" if j < depth - 1 else "identity"
            layers.append(Layer(w, np.zeros(dims[j + 1]), act))
        spec = MlpSpec(tuple(layers), d, homogeneous=True, weight_bound=weight_bound)
        if abs(eval_suffix(spec, 1, [1.0])) >= 1e-3:
            return spec
    raise DegenerateSpecError("could not draw a spec with |q(1)| >= 1e-3")


def random_softplus_spec(d: int, depth: int, width: int, seed: int,
                         weight_bound: float = 1.5) -> MlpSpec:
    """Softplus network with biases (smooth link, Gaussian-input moment path)."""
    if depth < 2:
        raise InvalidSpecError("spec needs depth >= 2")
    rng = make_rng(seed, 0x50F7)
    dims = [d, 1] + [width] * (depth - 2) + [1]
    layers = []
    for j in range(depth):
        w = _uniform_weights(rng, (dims[j + 1], dims[j]), weight_bound)
        b = rng.uniform(-0.5, 0.5, size=dims[j + 1])
        act = "softplus" if j < depth - 1 else "identity"
        layers.append(Layer(w, b, act))
    return MlpSpec(tuple(layers), d, weight_bound=weight_bound)


def _orthonormal_rows(rng, r, d):
    q, _ = np.linalg.qr(rng.standard_normal((d, r)))
    return q.T[:r]


def _step_bank_layers(r, channels, weight_bound):
    """Hidden softplus layer + linear combiner computing per-coordinate smooth steps.

    channels is a list of (coord, kappa, tau_lo, tau_hi, gain); each channel
    contributes gain * (softplus(kappa (z - tau_lo)) - softplus(kappa (z - tau_hi)))
    / (kappa (tau_hi - tau_lo)), a smooth 0-to-gain step along coordinate coord.
    """
    m = len(channels)
    W2 = np.zeros((2 * m, r))
    b2 = np.zeros(2 * m)
    W3 = np.zeros((1, 2 * m))
    for i, (coord, kappa, tau_lo, tau_hi, gain) in enumerate(channels):
        W2[2 * i, coord] = kappa
        W2[2 * i + 1, coord] = kappa
        b2[2 * i] = -kappa * tau_lo
        b2[2 * i + 1] = -kappa * tau_hi
        height = kappa * (tau_hi - tau_lo)
        W3[0, 2 * i] = gain / height
        W3[0, 2 * i + 1] = -gain / height
    bound = max(np.max(np.abs(W2)), np.max(np.abs(W3)), weight_bound)
    return W2, b2, W3, bound


def _sign_codes(T: int, r: int) -> np.ndarray:
    """T x r matrix of +/-1 codes with near-orthogonal, near-balanced columns.

    Tiles the three non-constant columns of the order-4 Hadamard matrix (and
    products of them for r > 3), which are exactly orthogonal whenever T is a
    multiple of 4.
    """
    h4 = np.array([
        [1, 1, 1],
        [1, -1, -1],
        [-1, 1, -1],
        [-1, -1, 1],
    ])
    cols = []
    k = 0
    while len(cols) < r:
        base = h4[:, k % 3] * (h4[:, (k // 3) % 3] if k >= 3 else 1)
        cols.append(np.tile(base, T // 4 + 1)[:T])
        k += 1
    return np.stack(cols, axis=1)


def covariate_family(d: int, r: int, T: int, n_per_task: int, seed: int,
                     diversity_floor: float = 0.1, max_tries: int = 40) -> TransferTaskFamily:
    """Shared truth, per-task Gaussian input covariances.

    The shared link stacks a steep zero-centered step on each representation
    coordinate, where the mean gradient responds strongly to that coordinate's
    variance.  Per-task covariances scale the representation coordinates
    between a low and a high value following orthogonal sign codes, so the
    stacked mean-gradient matrix keeps a healthy r-th singular value.
    Families measuring below ``diversity_floor * sqrt(T)`` are redrawn.
    """
    for attempt in range(max_tries):
        rng = make_rng(seed, 0xC071, attempt)
        W1 = _orthonormal_rows(rng, r, d)
        channels = []
        for j in range(r):
            width = rng.uniform(0.13, 0.18)
            center = rng.uniform(-0.05, 0.05)
            channels.append((j, 6.0 / width, center - width, center + width, 1.0))
        W2, b2, W3, bound = _step_bank_layers(r, channels, weight_bound=2.0)
        layers = (
            Layer(W1, np.zeros(r), "identity"),
            Layer(W2, b2, "softplus"),
            Layer(W3, np.zeros(1), "identity"),
        )
        spec = MlpSpec(layers, d, weight_bound=bound)

        # high variance on the d-r inactive directions keeps the per-task
        # regression noise there small without touching the truth model
        lo_scale, hi_scale, complement_scale = 0.2, 6.0, 5.0
        codes = _sign_codes(T, r)
        laws = []
        diags = []
        for t in range(T):
            jitter = rng.uniform(0.9, 1.1, size=r)
            diag = np.where(codes[t] > 0, hi_scale, lo_scale) * jitter
            diags.append(diag)
            sigma = complement_scale * np.eye(d) + W1.T @ (np.diag(diag) - complement_scale * np.eye(r)) @ W1
            laws.append(InputLaw.gaussian(sigma))

        pooled = np.concatenate([law.sample(max(2000, 10_000 // T + 1), make_rng(seed, 7, t))
                                 for t, law in enumerate(laws)])
        raw = eval_mlp_batch(spec, pooled)
        if raw.max() - raw.min() < 1e-9:
            continue
        scale = 0.96 / (raw.max() - raw.min())
        spec = replace(spec, output_affine=(scale, 0.02 - scale * raw.min()))

        M = np.stack([
            _mean_link_gradient_diag(spec, diag, make_rng(seed, 11, attempt, t))
            for t, diag in enumerate(diags)
        ], axis=1)
        if np.linalg.svd(M, compute_uv=False)[r - 1] >= diversity_floor * np.sqrt(T):
            return TransferTaskFamily("covariate", (spec,) * T, tuple(laws), n_per_task)
    raise DegenerateSpecError("could not draw a sufficiently diverse covariate family")


def _mean_link_gradient_diag(spec, diag, rng, n_mc=3000, step=1e-5):
    """MC estimate of E[grad g(U)] for U ~ N(0, diag) on the representation coordinates."""
    r = len(diag)
    U = rng.standard_normal((n_mc, r)) * np.sqrt(diag)
    return _mean_link_gradient_at(spec, U, step)


def _mean_link_gradient_at(spec, U, step=1e-5):
    r = U.shape[1]
    grad = np.empty(r)
    for j in range(r):
        e = np.zeros(r)
        e[j] = step
        hi = eval_from_preactivation(spec, 1, U + e)
        lo = eval_from_preactivation(spec, 1, U - e)
        grad[j] = np.mean(hi - lo) / (2 * step)
    return grad


def concept_family(d: int, r: int, T: int, n_per_task: int, seed: int,
                   diversity_floor: float = 0.1, max_tries: int = 40) -> TransferTaskFamily:
    """Shared input law and first layer, per-task downstream links.

    Each task gets a steep smooth step along its own direction in
    representation space; directions cycle through the coordinate axes with
    random tilt, which keeps the stacked gradient matrix well conditioned.
    """
    for attempt in range(max_tries):
        rng = make_rng(seed, 0xC0CE, attempt)
        W1 = _orthonormal_rows(rng, r, d)
        # unit variance on the representation coordinates, higher variance on
        # the inactive complement to keep regression noise there small
        complement_scale = 5.0
        sigma = complement_scale * np.eye(d) + W1.T @ ((1.0 - complement_scale) * np.eye(r)) @ W1
        law = InputLaw.gaussian(sigma)
        specs = []
        ok = True
        for t in range(T):
            v = np.zeros(r)
            v[t % r] = 1.0
            v = v + 0.45 * rng.standard_normal(r)
            v /= np.linalg.norm(v)
            kappa = rng.uniform(5.0, 7.0)
            tau = rng.uniform(-0.35, 0.35)
            width = rng.uniform(0.5, 0.8)
            m = 1
            W2 = np.zeros((2 * m, r))
            W2[0] = kappa * v
            W2[1] = kappa * v
            b2 = np.array([-kappa * (tau - width), -kappa * (tau + width)])
            height = kappa * 2 * width
            W3 = np.array([[1.0 / height, -1.0 / height]])
            layers = (
                Layer(W1, np.zeros(r), "identity"),
                Layer(W2, b2, "softplus"),
                Layer(W3, np.zeros(1), "identity"),
            )
            spec = MlpSpec(layers, d, weight_bound=max(np.max(np.abs(W2)), 2.0))
            probe = law.sample(4000, make_rng(seed, 13, attempt, t))
            raw = eval_mlp_batch(spec, probe)
            if raw.max() - raw.min() < 1e-9:
                ok = False
                break
            scale = 0.96 / (raw.max() - raw.min())
            specs.append(replace(spec, output_affine=(scale, 0.02 - scale * raw.min())))
        if not ok:
            continue
        rng_div = make_rng(seed, 17, attempt)
        U = rng_div.standard_normal((3000, r))
        M = np.stack([_mean_link_gradient_at(s, U) for s in specs], axis=1)
        if np.linalg.svd(M, compute_uv=False)[r - 1] >= diversity_floor * np.sqrt(T):
            return TransferTaskFamily("concept", tuple(specs), (law,) * T, n_per_task)
    raise DegenerateSpecError("could not draw a sufficiently diverse concept family")


# ---------------------------------------------------------------------------
# serialization


def spec_to_dict(spec: MlpSpec) -> dict:
    return {
        "format": "repcal-mlp",
        "version": SPEC_FORMAT_VERSION,
        "input_dim": spec.input_dim,
        "homogeneous": spec.homogeneous,
        "weight_bound": None if np.isinf(spec.weight_bound) else spec.weight_bound,
        "output_affine": list(spec.output_affine) if spec.output_affine else None,
        "layers": [
            {
                "weights": layer.weights.tolist(),
                "bias": layer.bias.tolist(),
                "activation": layer.activation,
            }
            for layer in spec.layers
        ],
    }


def spec_from_dict(d: dict) -> MlpSpec:
    try:
        if d.get("format") != "repcal-mlp":
            raise PartitionParseError("not a spec document (missing format tag)")
        if d.get("version") != SPEC_FORMAT_VERSION:
            raise UnsupportedVersionError(f"spec version {d.get('version')!r} unsupported")
        layers = tuple(
            Layer(np.asarray(l["weights"], dtype=float),
                  np.asarray(l["bias"], dtype=float),
                  l["activation"])
            for l in d["layers"]
        )
        bound = d.get("weight_bound")
        affine = d.get("output_affine")
        return MlpSpec(layers, int(d["input_dim"]),
                       homogeneous=bool(d.get("homogeneous", False)),
                       weight_bound=np.inf if bound is None else float(bound),
                       output_affine=tuple(affine) if affine else None)
    except (KeyError, TypeError, ValueError) as exc:
        raise PartitionParseError(f"malformed spec document: {exc}") from exc


def spec_hash(spec: MlpSpec) -> str:
    blob = json.dumps(spec_to_dict(spec), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_spec(spec: MlpSpec, path):
    with open(path, "w") as fh:
        json.dump(spec_to_dict(spec), fh)


def load_spec(path) -> MlpSpec:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise PartitionParseError(f"{path}: invalid JSON: {exc}") from exc
    return spec_from_dict(doc)


def save_dataset(ds: Dataset, path, spec: MlpSpec | None = None,
                 law: InputLaw | None = None):
    """CSV with header x0..x{d-1},y[,p_star] plus a JSON metadata sidecar."""
    path = str(path)
    cols = [f"x{j}" for j in range(ds.d)] + ["y"]
    if ds.p_star is not None:
        cols.append("p_star")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for i in range(ds.n):
            row = [f"{v:.17g}" for v in ds.X[i]] + [str(int(ds.y[i]))]
            if ds.p_star is not None:
                row.append(f"{ds.p_star[i]:.17g}")
            writer.writerow(row)
    meta = {"seed": ds.seed, "n": ds.n, "d": ds.d}
    if spec is not None:
        meta["spec_hash"] = spec_hash(spec)
    if law is not None:
        meta["law"] = law.describe()
    with open(path + ".meta.json", "w") as fh:
        json.dump(meta, fh)


def load_dataset(path) -> Dataset:
    path = str(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise PartitionParseError(f"{path}: empty dataset file") from None
        rows = list(reader)
    has_p = header[-1] == "p_star"
    d = len(header) - (2 if has_p else 1)
    if header[:d] != [f"x{j}" for j in range(d)] or header[d] != "y":
        raise PartitionParseError(f"{path}: unexpected CSV header {header!r}")
    data = np.asarray(rows, dtype=float)
    if data.ndim != 2 or data.shape[1] != len(header):
        raise PartitionParseError(f"{path}: ragged or empty CSV body")
    seed = -1
    try:
        with open(path + ".meta.json") as fh:
            seed = int(json.load(fh).get("seed", -1))
    except FileNotFoundError:
        pass
    p = data[:, d + 1] if has_p else None
    return Dataset(data[:, :d], data[:, d].astype(int), p, seed)
