"""Plants, Padua observation grids and clustered training data."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.spatial import cKDTree

__all__ = [
    "Box",
    "Plant",
    "ControlAffinePlant",
    "VanDerPol",
    "Cluster",
    "ClusterDataset",
    "DataError",
    "padua_points",
    "padua_degree",
    "build_observation_grid",
    "build_cluster_dataset",
    "regression_matrix",
    "fill_distance",
    "make_plant",
]


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class Box:
    """Axis-aligned box ``[lower, upper]``."""

    lower: tuple
    upper: tuple

    def __post_init__(self):
        lo = tuple(float(v) for v in np.atleast_1d(self.lower))
        hi = tuple(float(v) for v in np.atleast_1d(self.upper))
        if len(lo) != len(hi):
            raise DataError("box bounds differ in dimension")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def symmetric(cls, half_width: float, dim: int) -> "Box":
        return cls((-half_width,) * dim, (half_width,) * dim)

    @property
    def dim(self) -> int:
        return len(self.lower)

    @property
    def lo(self) -> np.ndarray:
        return np.array(self.lower)

    @property
    def hi(self) -> np.ndarray:
        return np.array(self.upper)

    @property
    def is_empty(self) -> bool:
        return bool(np.any(self.lo > self.hi))

    def contains(self, x, tol: float = 0.0):
        x = np.asarray(x, dtype=float)
        inside = (x >= self.lo - tol) & (x <= self.hi + tol)
        return bool(np.all(inside)) if x.ndim == 1 else np.all(inside, axis=-1)

    def grid(self, steps) -> np.ndarray:
        """Tensor grid with ``steps`` points per axis, shape ``(prod(steps), dim)``."""
        steps = np.broadcast_to(np.asarray(steps, dtype=int), (self.dim,))
        axes = [np.linspace(a, b, int(s)) for a, b, s in zip(self.lower, self.upper, steps)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([g.ravel() for g in mesh], axis=-1)

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return rng.uniform(self.lo, self.hi, size=(size, self.dim))

    def to_dict(self) -> dict:
        return {"lower": list(self.lower), "upper": list(self.upper)}

    @classmethod
    def from_dict(cls, data: dict) -> "Box":
        return cls(tuple(data["lower"]), tuple(data["upper"]))


class Plant:
    """Discrete-time plant ``x+ = f(x, u)`` with its constraint sets.

    Subclasses implement :meth:`step_batch`.  ``state_box`` is the MPC state
    constraint set, ``sample_box`` the data domain and ``input_box`` the input
    constraint set.
    """

    plant_id = "plant"
    n: int
    m: int
    state_box: Box
    sample_box: Box
    input_box: Box

    def step_batch(self, X: np.ndarray, U: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def step(self, x, u) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(1, self.n)
        u = np.asarray(u, dtype=float).reshape(1, self.m)
        return self.step_batch(x, u)[0]

    def jacobians(self, x, u, h: float = 1e-6):
        """Central finite-difference Jacobians ``(df/dx, df/du)``."""
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float).reshape(self.m)
        A = np.empty((self.n, self.n))
        B = np.empty((self.n, self.m))
        for i in range(self.n):
            e = np.zeros(self.n)
            e[i] = h
            A[:, i] = (self.step(x + e, u) - self.step(x - e, u)) / (2 * h)
        for i in range(self.m):
            e = np.zeros(self.m)
            e[i] = h
            B[:, i] = (self.step(x, u + e) - self.step(x, u - e)) / (2 * h)
        return A, B

    def describe(self) -> dict:
        return {
            "plant_id": self.plant_id,
            "state_box": self.state_box.to_dict(),
            "sample_box": self.sample_box.to_dict(),
            "input_box": self.input_box.to_dict(),
        }


class ControlAffinePlant(Plant):
    """Plant ``x+ = g0(x) + G(x) u`` from vectorized callables.

    ``g0`` maps ``(p, n) -> (p, n)`` and ``G`` maps ``(p, n) -> (p, n, m)``.
    """

    def __init__(self, g0: Callable, G: Callable, n: int, m: int,
                 state_box: Box, sample_box: Box, input_box: Box, plant_id: str = "control_affine"):
        self.g0 = g0
        self.G = G
        self.n = n
        self.m = m
        self.state_box = state_box
        self.sample_box = sample_box
        self.input_box = input_box
        self.plant_id = plant_id

    def step_batch(self, X, U):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        U = np.asarray(U, dtype=float).reshape(len(X), self.m)
        return self.g0(X) + np.einsum("pij,pj->pi", self.G(X), U)


class VanDerPol(ControlAffinePlant):
    """Euler-discretized controlled van der Pol oscillator."""

    plant_id = "vanderpol"

    def __init__(self, dt: float = 0.05, nu: float = 0.1,
                 state_box: Box | None = None, sample_box: Box | None = None,
                 input_box: Box | None = None):
        self.dt = dt
        self.nu = nu
        super().__init__(
            self._g0, self._G, 2, 1,
            state_box or Box.symmetric(1.9, 2),
            sample_box or Box.symmetric(2.0, 2),
            input_box or Box.symmetric(2.0, 1),
            plant_id="vanderpol",
        )

    def _g0(self, X):
        x1, x2 = X[:, 0], X[:, 1]
        return np.stack([x1 + self.dt * x2,
                         x2 + self.dt * (self.nu * (1.0 - x1**2) * x2 - x1)], axis=-1)

    def _G(self, X):
        G = np.zeros((len(X), 2, 1))
        G[:, 1, 0] = self.dt
        return G

    def jacobians(self, x, u, h=None):
        x1, x2 = float(x[0]), float(x[1])
        A = np.array([[1.0, self.dt],
                      [-self.dt * (1.0 + 2.0 * self.nu * x1 * x2),
                       1.0 + self.dt * self.nu * (1.0 - x1**2)]])
        B = np.array([[0.0], [self.dt]])
        return A, B

    def describe(self):
        out = super().describe()
        out.update(dt=self.dt, nu=self.nu)
        return out


def make_plant(plant_id: str = "vanderpol", **params) -> Plant:
    if plant_id == "vanderpol":
        return VanDerPol(**params)
    raise DataError(f"unknown plant id {plant_id!r}")


# --- Padua points -----------------------------------------------------------

def padua_points(degree: int, box: Box | None = None) -> np.ndarray:
    """First-family Padua points of the given degree.

    The ``(degree+1)(degree+2)/2`` points ``(cos(j pi/n), cos(k pi/(n+1)))``
    with ``j + k`` even live on ``[-1, 1]^2`` and are mapped affinely to ``box``.
    """
    if degree < 1:
        raise DataError(f"Padua degree must be >= 1, got {degree}")
    if box is not None and box.dim != 2:
        raise DataError("Padua points are only defined on 2-D boxes")
    j = np.arange(degree + 1)
    k = np.arange(degree + 2)
    J, Kk = np.meshgrid(j, k, indexing="ij")
    mask = (J + Kk) % 2 == 0
    pts = np.stack([np.cos(J[mask] * np.pi / degree),
                    np.cos(Kk[mask] * np.pi / (degree + 1))], axis=-1)
    if box is not None:
        pts = box.lo + (pts + 1.0) * 0.5 * (box.hi - box.lo)
    return pts


def padua_degree(d: int) -> int:
    """Padua degree whose grid plus the origin has ``d`` points."""
    size = lambda deg: (deg + 1) * (deg + 2) // 2 + 1
    deg = 1
    while size(deg) < d:
        deg += 1
    if size(deg) == d:
        return deg
    nearest = [size(deg - 1), size(deg)] if deg > 1 else [size(deg)]
    raise DataError(f"d={d} is not realizable by a Padua grid; nearest values: {nearest}")


def build_observation_grid(degree: int, box: Box) -> np.ndarray:
    """Padua points on ``box`` with the origin prepended as the first node."""
    if not box.contains(np.zeros(box.dim)):
        raise DataError("observation box must contain the origin")
    pts = padua_points(degree, box)
    keep = np.linalg.norm(pts, axis=1) > 1e-12
    return np.vstack([np.zeros((1, 2)), pts[keep]])


# --- clustered data ---------------------------------------------------------

@dataclass
class Cluster:
    """Triplets ``(x_ij, u_ij, x+_ij)`` around one virtual observation point."""

    center: np.ndarray
    radius: float
    x: np.ndarray
    u: np.ndarray
    x_plus: np.ndarray

    def __len__(self):
        return len(self.x)

    def to_dict(self) -> dict:
        return {
            "center": self.center.tolist(),
            "radius": self.radius,
            "triplets": [[xi.tolist(), ui.tolist(), xp.tolist()]
                         for xi, ui, xp in zip(self.x, self.u, self.x_plus)],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Cluster":
        trip = data["triplets"]
        return cls(
            center=np.array(data["center"], dtype=float),
            radius=float(data["radius"]),
            x=np.array([t[0] for t in trip], dtype=float),
            u=np.array([t[1] for t in trip], dtype=float),
            x_plus=np.array([t[2] for t in trip], dtype=float),
        )


@dataclass
class ClusterDataset:
    clusters: list
    radius: float
    seed: int
    plant_id: str = "vanderpol"
    successors_outside: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def centers(self) -> np.ndarray:
        return np.array([c.center for c in self.clusters])

    @property
    def d(self) -> int:
        return len(self.clusters)

    @property
    def n_triplets(self) -> int:
        return sum(len(c) for c in self.clusters)

    def to_dict(self) -> dict:
        return {
            "plant_id": self.plant_id,
            "seed": self.seed,
            "radius": self.radius,
            "successors_outside": self.successors_outside,
            "meta": self.meta,
            "clusters": [c.to_dict() for c in self.clusters],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ClusterDataset":
        return cls(
            clusters=[Cluster.from_dict(c) for c in data["clusters"]],
            radius=float(data["radius"]),
            seed=int(data["seed"]),
            plant_id=data.get("plant_id", "vanderpol"),
            successors_outside=int(data.get("successors_outside", 0)),
            meta=dict(data.get("meta", {})),
        )


def regression_matrix(cluster: Cluster) -> np.ndarray:
    """``V_i = [1 ... 1; u_i1 ... u_id_i]`` of shape ``(m+1, d_i)``."""
    if len(cluster) == 0:
        raise DataError("empty cluster")
    U = np.asarray(cluster.u, dtype=float).reshape(len(cluster), -1)
    return np.vstack([np.ones(len(cluster)), U.T])


def _sample_ball(rng, center, radius, size, box: Box) -> np.ndarray:
    n = len(center)
    if radius == 0.0:
        return np.repeat(center[None, :], size, axis=0)
    out = []
    have = 0
    for _ in range(1000):
        z = rng.standard_normal((size, n))
        z /= np.linalg.norm(z, axis=1, keepdims=True)
        rad = radius * rng.uniform(0.0, 1.0, size) ** (1.0 / n)
        cand = center + z * rad[:, None]
        cand = cand[box.contains(cand)]
        out.append(cand)
        have += len(cand)
        if have >= size:
            return np.vstack(out)[:size]
    raise DataError(f"invalid cluster at {center}: ball does not meet the sampling domain")


def build_cluster_dataset(plant: Plant, centers, radius: float, samples_per_cluster: int,
                          seed: int = 0, min_singular: float = 1e-6, retries: int = 100) -> ClusterDataset:
    """Sample ``samples_per_cluster`` triplets in every ball ``B_radius(center)``.

    States are uniform in the ball intersected with ``plant.sample_box``;
    inputs are uniform in ``plant.input_box``.  Each cluster draws from its own
    spawned RNG stream, so the result does not depend on evaluation order.
    """
    centers = np.asarray(centers, dtype=float)
    if samples_per_cluster < plant.m + 1:
        raise DataError(f"need at least m+1={plant.m + 1} samples per cluster")
    if radius < 0:
        raise DataError("cluster radius must be non-negative")
    box = plant.sample_box
    for c in centers:
        gap = np.linalg.norm(np.clip(c, box.lo, box.hi) - c)
        if gap > radius:
            raise DataError(f"invalid cluster at {c}: ball lies outside the sampling domain")

    streams = np.random.SeedSequence(seed).spawn(len(centers))
    clusters = []
    outside = 0
    for c, ss in zip(centers, streams):
        rng = np.random.default_rng(ss)
        xs = _sample_ball(rng, c, radius, samples_per_cluster, box)
        for _ in range(retries):
            us = plant.input_box.sample(rng, samples_per_cluster)
            V = np.vstack([np.ones(samples_per_cluster), us.T])
            if np.linalg.svd(V, compute_uv=False)[-1] >= min_singular:
                break
        else:
            raise DataError(f"degenerate input sampling at cluster {c}")
        xp = plant.step_batch(xs, us)
        outside += int(np.sum(~box.contains(xp)))
        clusters.append(Cluster(c.copy(), float(radius), xs, us, xp))
    return ClusterDataset(clusters, float(radius), int(seed), plant.plant_id, outside)


def fill_distance(X, box: Box, resolution: float = 0.01) -> float:
    """Grid estimate of ``sup_{x in box} min_i |x - X_i|`` (a lower bound)."""
    X = np.asarray(X, dtype=float)
    if X.size == 0:
        raise DataError("empty node set")
    if resolution <= 0:
        raise DataError("resolution must be positive")
    steps = [int(np.ceil((b - a) / resolution)) + 1 for a, b in zip(box.lower, box.upper)]
    grid = box.grid(steps)
    dist, _ = cKDTree(X).query(grid)
    return float(dist.max())
