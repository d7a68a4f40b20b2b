"""Kernel EDMD surrogates for autonomous and control-affine dynamics.

The control-affine predictor propagates the coordinate observables through

    f_eps(x, u) = (K0 + sum_k u_k Kk)^T-weighted features,

i.e. ``f_eps(x, u)_l = k_X(x)^T (K0 + sum_k u_k Kk) psi_X[:, l]`` with the
propagation matrices ``Kk = K_X^{-1} K_{g_k(X)} K_X^{-1}``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .data import Cluster, ClusterDataset, regression_matrix
from .kernels import (
    KernelFactorization,
    KernelSpec,
    factorize_spd,
    kernel_features,
    kernel_gradients,
    kernel_matrix,
)

__all__ = [
    "RegressionError",
    "SurrogateModel",
    "LinearModel",
    "PlantModel",
    "local_regression",
    "fit_control_affine",
    "fit_autonomous",
]


class RegressionError(ValueError):
    pass


def local_regression(cluster: Cluster, pi_at_origin: bool = False, rcond: float = 1e-10) -> np.ndarray:
    """Least-squares estimate ``H_i = [g0(x_i) | G(x_i)]`` of shape ``(n, m+1)``.

    With ``pi_at_origin`` the drift column is pinned to zero and only the input
    columns are fitted.
    """
    V = regression_matrix(cluster)
    Xp = np.asarray(cluster.x_plus, dtype=float).T
    n = Xp.shape[0]
    M = V[1:] if pi_at_origin else V
    s = np.linalg.svd(M, compute_uv=False)
    if len(s) == 0 or s[-1] <= rcond * s[0]:
        raise RegressionError("cluster regression degenerate: regression matrix is rank deficient")
    coef = Xp @ np.linalg.pinv(M, rcond=rcond)
    if pi_at_origin:
        return np.hstack([np.zeros((n, 1)), coef])
    return coef


class _Predictor:
    """Shared helpers for anything exposing ``predict_batch``."""

    n: int
    m: int

    def predict(self, x, u=None) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(1, self.n)
        u = np.zeros((1, self.m)) if u is None else np.asarray(u, dtype=float).reshape(1, self.m)
        return self.predict_batch(x, u)[0]

    def jacobians(self, x, u=None, h: float | None = None):
        """``A`` by central differences, ``B`` from affinity in ``u``."""
        x = np.asarray(x, dtype=float).reshape(self.n)
        u = np.zeros(self.m) if u is None else np.asarray(u, dtype=float).reshape(self.m)
        if h is None:
            h = 1e-6 * max(1.0, float(np.linalg.norm(x)))
        E = np.eye(self.n) * h
        X = np.vstack([x + E, x - E])
        U = np.repeat(u[None, :], 2 * self.n, axis=0)
        F = self.predict_batch(X, U)
        A = ((F[: self.n] - F[self.n:]) / (2 * h)).T
        U2 = np.vstack([np.zeros((1, self.m)), np.eye(self.m)])
        F2 = self.predict_batch(np.repeat(x[None, :], self.m + 1, axis=0), U2)
        B = (F2[1:] - F2[0]).T
        return A, B


@dataclass(eq=False)
class SurrogateModel(_Predictor):
    """Fitted kEDMD predictor.

    Attributes
    ----------
    spec : KernelSpec
    nodes : ndarray, shape (d, n)
        Virtual observation points; ``nodes[0]`` is the origin for
        control-affine fits.
    vertex_images : list of ndarray, each (d, n)
        Estimated ``g_k(nodes)`` for ``k = 0..m``.
    pi_variant : bool
    factorization : KernelFactorization
    propagation : list of ndarray, each (d, d)
        ``K_X^{-1} K_{g_k(X)} K_X^{-1}``.
    """

    spec: KernelSpec
    nodes: np.ndarray
    vertex_images: list
    pi_variant: bool
    factorization: KernelFactorization
    propagation: list
    seed: int | None = None
    dataset_hash: str | None = None

    def __post_init__(self):
        psi = self.nodes  # coordinate observables evaluated at the nodes
        self._coef = np.stack([Kk @ psi for Kk in self.propagation])  # (m+1, d, n)
        self._tree = cKDTree(self.nodes)

    @property
    def n(self) -> int:
        return self.nodes.shape[1]

    @property
    def m(self) -> int:
        return len(self.propagation) - 1

    @property
    def d(self) -> int:
        return self.nodes.shape[0]

    def predict_batch(self, X, U=None) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        F = kernel_features(X, self.nodes, self.spec)  # (p, d)
        out = F @ self._coef[0]
        if self.m:
            U = np.asarray(U, dtype=float).reshape(len(X), self.m)
            for k in range(1, self.m + 1):
                out += U[:, k - 1:k] * (F @ self._coef[k])
        return out

    def step_jacobians(self, x, u):
        """Return ``f_eps(x, u)`` with analytic ``df/dx`` and ``df/du``.

        Only nodes inside the kernel support around ``x`` are touched, which
        makes single-point evaluation cheap for large ``d``.
        """
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float).reshape(self.m)
        idx = np.sort(np.asarray(self._tree.query_ball_point(x, self.spec.sigma), dtype=int))
        if len(idx) == 0:
            return np.zeros(self.n), np.zeros((self.n, self.n)), np.zeros((self.n, self.m))
        nodes = self.nodes[idx]
        coef = self._coef[:, idx]
        feat = kernel_features(x, nodes, self.spec)
        grad = kernel_gradients(x, nodes, self.spec)  # (|idx|, n)
        C = coef[0] + np.tensordot(u, coef[1:], axes=1) if self.m else coef[0]
        f = feat @ C
        A = C.T @ grad
        B = np.stack([feat @ coef[k] for k in range(1, self.m + 1)], axis=1) if self.m else np.zeros((self.n, 0))
        return f, A, B

    def equilibrium_offset(self) -> float:
        return float(np.linalg.norm(self.predict(np.zeros(self.n), np.zeros(self.m))))

    def to_dict(self) -> dict:
        return {
            "kernel_spec": self.spec.to_dict(),
            "nodes": self.nodes.tolist(),
            "vertex_images": [g.tolist() for g in self.vertex_images],
            "pi_variant": self.pi_variant,
            "seed": self.seed,
            "dataset_hash": self.dataset_hash,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SurrogateModel":
        spec = KernelSpec.from_dict(data["kernel_spec"])
        nodes = np.array(data["nodes"], dtype=float)
        images = [np.array(g, dtype=float) for g in data["vertex_images"]]
        return _assemble(spec, nodes, images, bool(data["pi_variant"]),
                         seed=data.get("seed"), dataset_hash=data.get("dataset_hash"))


def _assemble(spec, nodes, images, pi_variant, seed=None, dataset_hash=None) -> SurrogateModel:
    KX = kernel_matrix(nodes, nodes, spec)
    fact = factorize_spd(KX, spec.jitter, nodes=nodes)
    props = []
    for G in images:
        KG = kernel_matrix(G, nodes, spec)
        # K^{-1} KG K^{-1} via two solves; K symmetric so (K^{-1} KG^T)^T = KG K^{-1}
        right = fact.solve(KG.T).T
        props.append(fact.solve(right))
    return SurrogateModel(spec, nodes, images, pi_variant, fact, props, seed, dataset_hash)


def fit_control_affine(dataset: ClusterDataset, spec: KernelSpec, pi_variant: bool = True,
                       dataset_hash: str | None = None) -> SurrogateModel:
    """Fit the control-affine kEDMD model from clustered data.

    The first cluster must sit at the origin; with ``pi_variant`` its drift
    estimate is pinned to zero so that ``f_eps(0, 0) = 0``.
    """
    nodes = dataset.centers
    if pi_variant and np.linalg.norm(nodes[0]) != 0.0:
        raise RegressionError("PI fit requires the first cluster at the origin")
    H = [local_regression(c, pi_at_origin=(pi_variant and i == 0))
         for i, c in enumerate(dataset.clusters)]
    H = np.stack(H)  # (d, n, m+1)
    images = [H[:, :, k].copy() for k in range(H.shape[2])]
    return _assemble(spec, nodes, images, pi_variant, seed=dataset.seed, dataset_hash=dataset_hash)


def fit_autonomous(nodes, images, spec: KernelSpec) -> SurrogateModel:
    """kEDMD for ``x+ = f(x)`` given exact images ``f(nodes)``."""
    nodes = np.asarray(nodes, dtype=float)
    images = np.asarray(images, dtype=float)
    if images.shape != nodes.shape:
        raise RegressionError(f"images shape {images.shape} does not match nodes {nodes.shape}")
    return _assemble(spec, nodes, [images], pi_variant=False)


class LinearModel(_Predictor):
    """Affine-free linear predictor ``x+ = A x + B u``; handy as a reference model."""

    def __init__(self, A, B):
        self.A = np.atleast_2d(np.asarray(A, dtype=float))
        self.B = np.asarray(B, dtype=float).reshape(self.A.shape[0], -1)
        self.n, self.m = self.B.shape

    def predict_batch(self, X, U=None):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        U = np.zeros((len(X), self.m)) if U is None else np.asarray(U, dtype=float).reshape(len(X), self.m)
        return X @ self.A.T + U @ self.B.T

    def step_jacobians(self, x, u):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float).reshape(self.m)
        return self.A @ x + self.B @ u, self.A, self.B


class PlantModel(_Predictor):
    """Expose a plant through the surrogate interface (oracle model)."""

    def __init__(self, plant):
        self.plant = plant
        self.n, self.m = plant.n, plant.m

    def predict_batch(self, X, U=None):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        U = np.zeros((len(X), self.m)) if U is None else U
        return self.plant.step_batch(X, U)

    def step_jacobians(self, x, u):
        A, B = self.plant.jacobians(x, u)
        return self.plant.step(x, u), A, B
