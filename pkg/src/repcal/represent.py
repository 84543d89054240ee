"""Learning representation maps from data.

Single-task: ordinary least squares on binary labels recovers the first-layer
direction of the truth network up to a scalar (moment identities below).
Multi-task: per-task OLS vectors are stacked and the top-r left singular
subspace estimates the shared first-layer row space; estimation error is
measured by the rotation-minimized Frobenius distance.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from ._rng import make_rng
from .datagen import InputLaw, MlpSpec, eval_from_preactivation, eval_mlp_batch, eval_suffix
from .errors import (
    IllConditionedError,
    InvalidLawError,
    InvalidSpecError,
    NearSingularGammaWarning,
    RankDeficientWarning,
)

CONDITION_LIMIT = 1e10


@dataclass(frozen=True)
class OlsFit:
    """Least-squares coefficients plus the Gram condition number seen while fitting."""

    beta: np.ndarray
    gram_condition: float
    n_used: int


def ols(X, y) -> OlsFit:
    """Least squares via orthogonal factorization, never explicit Gram inversion.

    Guarantees the normal-equation residual ||X'(y - X beta)|| <= 1e-8 ||X'y||
    and refuses second-moment matrices with condition number above 1e10.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, d = X.shape
    if n <= d:
        raise InvalidSpecError(f"need n > d, got n={n}, d={d}")
    if y.shape != (n,):
        raise InvalidSpecError("y must be a length-n vector")
    sv = np.linalg.svd(X, compute_uv=False)
    cond = np.inf if sv[-1] == 0 else float((sv[0] / sv[-1]) ** 2)
    if cond >= CONDITION_LIMIT:
        raise IllConditionedError(cond)
    q, r_mat = np.linalg.qr(X)
    beta = np.linalg.solve(r_mat, q.T @ y)
    lhs = np.linalg.norm(X.T @ (y - X @ beta))
    rhs = np.linalg.norm(X.T @ y)
    if lhs > 1e-8 * max(rhs, 1e-300):
        raise IllConditionedError(cond)
    return OlsFit(beta, cond, n)


def symmetric_relu_coefficient(spec: MlpSpec) -> float:
    """Scalar linking E[p*(X) X] to Sigma_X W1' for bias-free ReLU networks.

    Equals half the suffix gain at unit activation, including any recorded
    output-affine scale (the affine offset integrates to zero against a
    symmetric law).
    """
    if not spec.homogeneous:
        raise InvalidSpecError("coefficient defined for homogeneous (bias-free) specs")
    if spec.layers[0].d_out != 1:
        raise InvalidSpecError("first layer must have a single output")
    offset = spec.output_affine[1] if spec.output_affine else 0.0
    return 0.5 * (eval_suffix(spec, 1, [1.0]) - offset)


@dataclass(frozen=True)
class SteinMoment:
    """Monte-Carlo moment E[p*(X) X] next to its closed-form counterpart.

    ``path`` records which identity produced the closed form:
    ``symmetric-relu`` (bias-free ReLU truth, symmetric input law) or
    ``gaussian-stein`` (Gaussian law, differentiable link).  ``gamma_hat``
    is the estimated mean link derivative (the scalar in front of
    Sigma_X W1').
    """

    mc_moment: np.ndarray
    mc_se: np.ndarray
    closed_form: np.ndarray
    gamma_hat: float
    path: str


def stein_moment_oracle(spec: MlpSpec, law: InputLaw, n_mc: int, seed: int) -> SteinMoment:
    """Estimate E[p*(X) X] by Monte Carlo and compute the matching identity value.

    Bias-free ReLU specs with symmetric laws use the half-gain identity; all
    other specs require a Gaussian law, where the mean link derivative is
    estimated with central finite differences at step 1e-5.
    """
    rng = make_rng(seed, 0x57E1)
    X = law.sample(n_mc, rng)
    p = eval_mlp_batch(spec, X)
    prod = X * p[:, None]
    mc = prod.mean(axis=0)
    se = prod.std(axis=0, ddof=1) / np.sqrt(n_mc)
    sigma = law.covariance()
    W1 = spec.layers[0].weights

    relu_path = (
        spec.homogeneous
        and W1.shape[0] == 1
        and all(layer.activation == "relu" for layer in spec.layers[:-1])
    )
    if relu_path:
        if not law.is_symmetric:
            raise InvalidLawError("half-gain identity needs a symmetric input law")
        gamma = symmetric_relu_coefficient(spec)
        closed = gamma * (sigma @ W1.T).ravel()
        path = "symmetric-relu"
    else:
        if law.kind != "gaussian":
            raise InvalidLawError("non-ReLU or biased specs need a Gaussian law")
        U = X @ W1.T
        step = 1e-5
        grads = np.empty(W1.shape[0])
        for j in range(W1.shape[0]):
            e = np.zeros(W1.shape[0])
            e[j] = step
            hi = eval_from_preactivation(spec, 1, U + e)
            lo = eval_from_preactivation(spec, 1, U - e)
            grads[j] = np.mean(hi - lo) / (2 * step)
        closed = (sigma @ W1.T @ grads[:, None]).ravel()
        gamma = float(grads[0]) if grads.size == 1 else float(np.linalg.norm(grads))
        path = "gaussian-stein"

    if abs(gamma) < 1e-3:
        warnings.warn(f"mean link derivative {gamma:.2e} is near zero; "
                      "direction recovery unreliable", NearSingularGammaWarning)
    return SteinMoment(mc, se, closed, float(gamma), path)


@dataclass(frozen=True)
class SubspaceEstimate:
    """Top-r left singular subspace of the stacked per-task coefficient matrix."""

    W_hat: np.ndarray
    singular_values: np.ndarray
    r: int
    conditions: tuple
    rank_deficient: bool

    def __post_init__(self):
        gram = self.W_hat @ self.W_hat.T
        if not np.allclose(gram, np.eye(self.r), atol=1e-8):
            raise InvalidSpecError("estimated rows are not orthonormal")
        if np.any(np.diff(self.singular_values) > 1e-12):
            raise InvalidSpecError("singular values must be nonincreasing")


def multitask_subspace(tasks, r: int) -> SubspaceEstimate:
    """Stack per-task OLS coefficient vectors and extract the top-r row space.

    Emits RankDeficientWarning (and flags the result) when the r-th singular
    value per sqrt(T) falls below 1e-6, which signals that the tasks were not
    diverse enough to pin down an r-dimensional subspace.
    """
    T = len(tasks)
    if T < r:
        raise InvalidSpecError(f"need at least r={r} tasks, got {T}")
    fits = [ols(ds.X, ds.y.astype(float)) for ds in tasks]
    B = np.stack([f.beta for f in fits], axis=1)
    U, S, _ = np.linalg.svd(B, full_matrices=False)
    deficient = bool(S[r - 1] / np.sqrt(T) < 1e-6)
    if deficient:
        warnings.warn(f"r-th singular value {S[r - 1]:.3e} is vanishing relative to sqrt(T); "
                      "task diversity assumption violated", RankDeficientWarning)
    return SubspaceEstimate(U[:, :r].T.copy(), S, r,
                            tuple(f.gram_condition for f in fits), deficient)


def procrustes_distance(W_hat, W) -> float:
    """Rotation-minimized Frobenius distance between two row-orthonormal maps.

    min over orthogonal O of ||O W_hat - W||_F, computed in closed form from
    the SVD of W W_hat'; equals sqrt(2r - 2 tr(Sigma)), and the two forms are
    checked against each other.
    """
    W_hat = np.asarray(W_hat, dtype=float)
    W = np.asarray(W, dtype=float)
    if W_hat.shape != W.shape or W_hat.ndim != 2:
        raise InvalidSpecError("inputs must be r x d matrices of equal shape")
    r = W.shape[0]
    for name, M in (("W_hat", W_hat), ("W", W)):
        if not np.allclose(M @ M.T, np.eye(r), atol=1e-6):
            raise InvalidSpecError(f"{name} rows are not orthonormal")
    U, S, Vt = np.linalg.svd(W @ W_hat.T)
    O = U @ Vt
    dist = float(np.linalg.norm(O @ W_hat - W))
    alt = float(np.sqrt(max(2 * r - 2 * S.sum(), 0.0)))
    if abs(dist - alt) > 1e-6 * max(1.0, dist):
        raise InvalidSpecError("internal inconsistency between distance formulas")
    return dist


def linear_map_mse(A, Bmat, cov) -> float:
    """E ||A X - B X||^2 for X with covariance ``cov``: tr((A-B) cov (A-B)')."""
    D = np.atleast_2d(np.asarray(A, dtype=float) - np.asarray(Bmat, dtype=float))
    return float(np.trace(D @ np.asarray(cov, dtype=float) @ D.T))


def subspace_to_dict(est: SubspaceEstimate, d: int, T: int) -> dict:
    return {
        "W_hat": est.W_hat.tolist(),
        "singular_values": est.singular_values.tolist(),
        "r": est.r,
        "d": d,
        "T": T,
        "conditions": list(est.conditions),
        "rank_deficient": est.rank_deficient,
    }
