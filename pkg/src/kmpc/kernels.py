"""Wendland radial basis kernels and kernel-matrix factorizations.

Only the smoothness-1 Wendland family is provided.  For n <= 3 the radial
profile is ``phi(r) = (1 - r)^4 (4 r + 1) / 20`` on ``[0, 1]`` and zero
beyond; ``r`` is measured in units of the support radius ``sigma``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
from scipy.spatial.distance import cdist

__all__ = [
    "KernelSpec",
    "KernelError",
    "KernelFactorization",
    "wendland_phi",
    "kernel_eval",
    "kernel_matrix",
    "kernel_features",
    "kernel_gradients",
    "factorize_spd",
    "interpolant_eval",
]

_PHI0 = 1.0 / 20.0


class KernelError(ValueError):
    """Raised for invalid kernel inputs or failed factorizations."""


@dataclass(frozen=True)
class KernelSpec:
    """Wendland kernel parameters.

    Parameters
    ----------
    n : int
        Spatial dimension.
    k : int
        Smoothness degree; only ``k = 1`` is supported.
    sigma : float
        Support radius.  The kernel vanishes for distances ``>= sigma``.
    jitter : float
        Relative diagonal regularization used when factorizing kernel matrices.
    """

    n: int = 2
    k: int = 1
    sigma: float = 1.0
    jitter: float = 1e-10

    def __post_init__(self):
        if self.n < 1:
            raise KernelError(f"dimension must be >= 1, got {self.n}")
        if self.k < 1:
            raise KernelError(f"smoothness must be >= 1, got {self.k}")
        if not self.sigma > 0:
            raise KernelError(f"support radius must be positive, got {self.sigma}")
        if self.jitter < 0:
            raise KernelError(f"jitter must be non-negative, got {self.jitter}")

    @property
    def exponent(self) -> int:
        # floor(n/2) + k + 1, never below the n=2 value so that n <= 3 matches
        # the (1-r)^4 (4r+1) profile exactly.
        return max(3, self.n // 2 + 2)

    def to_dict(self) -> dict:
        return {"n": self.n, "k": self.k, "sigma": self.sigma, "jitter": self.jitter}

    @classmethod
    def from_dict(cls, data: dict) -> "KernelSpec":
        return cls(
            n=int(data["n"]),
            k=int(data.get("k", 1)),
            sigma=float(data.get("sigma", 1.0)),
            jitter=float(data.get("jitter", 1e-10)),
        )


def _check_order(spec: KernelSpec):
    if spec.k != 1:
        raise KernelError(f"unsupported kernel order k={spec.k} (only k=1 is implemented)")


def _profile(s: np.ndarray, ell: int) -> np.ndarray:
    t = np.clip(1.0 - s, 0.0, None)
    return _PHI0 * t ** (ell + 1) * ((ell + 1) * s + 1.0)


def wendland_phi(r, spec: KernelSpec):
    """Evaluate the radial profile at distance(s) ``r``.

    Returns a float for scalar input and an array otherwise.
    """
    _check_order(spec)
    r_arr = np.asarray(r, dtype=float)
    if np.any(r_arr < 0):
        raise KernelError("distance must be non-negative")
    out = _profile(r_arr / spec.sigma, spec.exponent)
    return float(out) if out.ndim == 0 else out


def _as_points(X, spec: KernelSpec, name: str) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != spec.n:
        raise KernelError(f"{name} must have shape (p, {spec.n}), got {X.shape}")
    return X


def kernel_eval(x, y, spec: KernelSpec) -> float:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != (spec.n,) or y.shape != (spec.n,):
        raise KernelError(f"dimension mismatch: {x.shape} vs {y.shape}, expected ({spec.n},)")
    return wendland_phi(float(np.linalg.norm(x - y)), spec)


def kernel_matrix(X, Y, spec: KernelSpec) -> np.ndarray:
    """Dense matrix with entries ``k(X_i, Y_j)``."""
    _check_order(spec)
    X = _as_points(X, spec, "X")
    Y = _as_points(Y, spec, "Y")
    if len(X) == 0 or len(Y) == 0:
        raise KernelError("empty point list")
    return _profile(cdist(X, Y) / spec.sigma, spec.exponent)


def kernel_features(x, X, spec: KernelSpec) -> np.ndarray:
    """Canonical feature vector ``(k(x, X_1), ..., k(x, X_d))``.

    A single point gives shape ``(d,)``; a batch of ``p`` points gives ``(p, d)``.
    """
    x_arr = np.asarray(x, dtype=float)
    K = kernel_matrix(x_arr, X, spec)
    return K[0] if x_arr.ndim == 1 else K


def kernel_gradients(x, X, spec: KernelSpec) -> np.ndarray:
    """Gradient of each feature ``k(., X_j)`` at the single point ``x``, shape ``(d, n)``."""
    _check_order(spec)
    x = np.asarray(x, dtype=float)
    X = _as_points(X, spec, "X")
    diff = x[None, :] - X
    s = np.sqrt(np.einsum("ij,ij->i", diff, diff)) / spec.sigma
    ell = spec.exponent
    # d/ds of the profile is -c (l+1)(l+2) s (1-s)^l, and ds/dx = diff / (sigma^2 s)
    scale = -_PHI0 * (ell + 1) * (ell + 2) / spec.sigma**2
    w = scale * np.clip(1.0 - s, 0.0, None) ** ell
    return w[:, None] * diff


@dataclass(frozen=True)
class KernelFactorization:
    """Lower Cholesky factor of ``K + jitter * I``."""

    factor: np.ndarray
    jitter: float
    nodes: np.ndarray | None = None

    @property
    def size(self) -> int:
        return self.factor.shape[0]

    def solve(self, b: np.ndarray) -> np.ndarray:
        return scipy.linalg.cho_solve((self.factor, True), b, check_finite=False)

    def matrix(self) -> np.ndarray:
        """Reconstruct the regularized matrix ``K + jitter * I``."""
        return self.factor @ self.factor.T


def factorize_spd(K, jitter_rel: float = 1e-10, nodes=None, retries: int = 3) -> KernelFactorization:
    """Cholesky-factorize ``K + lam I`` with ``lam = jitter_rel * trace(K) / d``.

    On failure the jitter is escalated by a factor 100 up to ``retries`` times.
    """
    K = np.asarray(K, dtype=float)
    if K.ndim != 2 or K.shape[0] != K.shape[1]:
        raise KernelError(f"kernel matrix must be square, got {K.shape}")
    d = K.shape[0]
    if not np.allclose(K, K.T, rtol=1e-12, atol=0.0):
        raise KernelError("kernel matrix is not symmetric")
    base = np.trace(K) / d
    lam = jitter_rel * base
    for attempt in range(retries + 1):
        try:
            L = scipy.linalg.cholesky(K + lam * np.eye(d), lower=True, check_finite=False)
        except np.linalg.LinAlgError:
            L = None
        if L is not None and np.all(np.diag(L) > 0):
            return KernelFactorization(L, lam, None if nodes is None else np.asarray(nodes, float))
        lam = 100.0 * lam if lam > 0 else 1e-14 * base
    raise KernelError(
        "kernel matrix numerically singular (duplicate or near-duplicate nodes?)"
    )


def interpolant_eval(fact: KernelFactorization, values, x, spec: KernelSpec):
    """Evaluate the kernel interpolant of nodal ``values`` at ``x``."""
    if fact.nodes is None:
        raise KernelError("factorization carries no node set")
    values = np.asarray(values, dtype=float)
    if values.shape[0] != fact.size:
        raise KernelError(f"expected {fact.size} nodal values, got {values.shape[0]}")
    coef = fact.solve(values)
    k = kernel_features(x, fact.nodes, spec)
    return k @ coef
