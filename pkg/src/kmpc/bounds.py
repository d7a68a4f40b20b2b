"""Empirical error and Lipschitz certificates for a surrogate on S x U."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from .data import Box, Plant

__all__ = [
    "CertifiedBounds",
    "ProportionalityError",
    "grid_errors",
    "estimate_uniform_bound",
    "estimate_proportional_constants",
    "fit_proportional_constants",
    "estimate_lipschitz",
    "validate_bounds",
    "certify",
    "bounds_report_csv",
]

ORIGIN_TOL = 1e-9


class ProportionalityError(ValueError):
    pass


@dataclass
class CertifiedBounds:
    """Estimated ``eta``, ``(c_x, c_u)`` and ``lbar`` for one model.

    ``c_x``/``c_u`` are ``None`` when the model has a nonzero error at the
    origin (plain kEDMD), in which case no proportional bound exists.
    """

    eta: float
    c_x: float | None
    c_u: float | None
    lbar: float
    grid: dict = field(default_factory=dict)
    violation_rate: float | None = None
    max_overshoot: float | None = None
    lipschitz_jacobian: float | None = None
    lipschitz_secant: float | None = None
    note: str = ""

    @property
    def proportional(self) -> bool:
        return self.c_x is not None

    def bound(self, x_norm, u_norm):
        x_norm = np.asarray(x_norm, dtype=float)
        if not self.proportional:
            return np.full_like(x_norm, self.eta)
        return np.minimum(self.c_x * x_norm + self.c_u * np.asarray(u_norm), self.eta)

    def to_dict(self) -> dict:
        return {
            "eta": self.eta,
            "c_x": self.c_x,
            "c_u": self.c_u,
            "lbar": self.lbar,
            "grid": self.grid,
            "violation_rate": self.violation_rate,
            "max_overshoot": self.max_overshoot,
            "lipschitz_jacobian": self.lipschitz_jacobian,
            "lipschitz_secant": self.lipschitz_secant,
            "note": self.note,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CertifiedBounds":
        return cls(**data)


def _grid(box_s: Box, box_u: Box, steps, offset: bool = False):
    sx, su = steps
    Xs = box_s.grid(sx)
    Us = box_u.grid(su)
    if offset:
        # shift by half a cell, staying strictly inside the boxes
        hx = (box_s.hi - box_s.lo) / (sx - 1) / 2
        hu = (box_u.hi - box_u.lo) / (su - 1) / 2
        Xs = Box(tuple(box_s.lo + hx), tuple(box_s.hi - hx)).grid(sx - 1)
        Us = Box(tuple(box_u.lo + hu), tuple(box_u.hi - hu)).grid(su - 1)
    X = np.repeat(Xs, len(Us), axis=0)
    U = np.tile(Us, (len(Xs), 1))
    return X, U


def grid_errors(plant: Plant, model, box_s: Box, box_u: Box, steps=(41, 9), offset=False,
                chunk: int = 4096):
    """Prediction error ``|f(x,u) - f_eps(x,u)|`` on a tensor grid of S x U."""
    X, U = _grid(box_s, box_u, steps, offset)
    err = np.empty(len(X))
    for a in range(0, len(X), chunk):
        b = a + chunk
        err[a:b] = np.linalg.norm(plant.step_batch(X[a:b], U[a:b]) - model.predict_batch(X[a:b], U[a:b]), axis=1)
    return X, U, err


def estimate_uniform_bound(plant, model, box_s, box_u, grid_steps=(41, 9), margin=0.05) -> float:
    """``eta = (1 + margin) * max`` grid error."""
    _, _, err = grid_errors(plant, model, box_s, box_u, grid_steps)
    return (1.0 + margin) * float(err.max())


def fit_proportional_constants(a, b, e, rel_floor: float = 1e-12):
    """Minimize ``c_x + c_u`` s.t. ``c_x a_j + c_u b_j >= e_j``, ``c >= 0``.

    The feasible set only depends on the convex hull of the normalized points
    ``(a_j, b_j) / e_j``, so the optimal vertex is found by enumerating pairs of
    hull vertices together with the two axis intersections.  Errors below
    ``rel_floor * max(e)`` are left out of the vertex search and restored by a
    final feasibility pass.
    """
    a, b, e = (np.asarray(v, dtype=float) for v in (a, b, e))
    live = e > 0
    if not np.any(live):
        return 0.0, 0.0
    a, b, e = a[live], b[live], e[live]
    if np.any((a == 0) & (b == 0)):
        raise ProportionalityError("model not proportional: PI constraint violated (nonzero error at origin)")
    emax = float(e.max())
    en = e / emax
    main = en > rel_floor
    P = np.stack([a[main] / en[main], b[main] / en[main]], axis=1)
    idx = np.arange(len(P))
    if len(P) > 3:
        try:
            idx = ConvexHull(P).vertices
        except QhullError:
            pass
    Ph = P[idx]

    cands = []
    if np.all(Ph[:, 0] > 0):
        cands.append((float(np.max(1.0 / Ph[:, 0])), 0.0))
    if np.all(Ph[:, 1] > 0):
        cands.append((0.0, float(np.max(1.0 / Ph[:, 1]))))
    for i, j in itertools.combinations(range(len(Ph)), 2):
        M = Ph[[i, j]]
        det = M[0, 0] * M[1, 1] - M[0, 1] * M[1, 0]
        if abs(det) <= 1e-12 * abs(M[0, 0] * M[1, 1]) + 1e-12 * abs(M[0, 1] * M[1, 0]) or det == 0.0:
            continue
        c = np.linalg.solve(M, np.ones(2))
        if np.all(c >= 0):
            cands.append((float(c[0]), float(c[1])))
    best = None
    for cx, cu in cands:
        if np.all(P @ np.array([cx, cu]) >= 1.0 - 1e-12):
            if best is None or cx + cu < best[0] + best[1]:
                best = (cx, cu)
    if best is None:
        raise ProportionalityError("no proportional constants satisfy the grid constraints")
    cx, cu = best[0] * emax, best[1] * emax
    # points on an axis that the chosen vertex ignores
    if cu == 0.0 and np.any(a == 0):
        cu = float(np.max(e[a == 0] / b[a == 0]))
    if cx == 0.0 and np.any(b == 0):
        cx = float(np.max(e[b == 0] / a[b == 0]))
    # enforce exact satisfaction after round-off
    scale = max(1.0, float(np.max(e / (a * cx + b * cu))))
    return cx * scale, cu * scale


def estimate_proportional_constants(plant, model, box_s, box_u, grid_steps=(41, 9)):
    """Minimal ``(c_x, c_u)`` with ``err <= c_x|x| + c_u|u|`` on the grid."""
    X, U, err = grid_errors(plant, model, box_s, box_u, grid_steps)
    xn = np.linalg.norm(X, axis=1)
    un = np.linalg.norm(U, axis=1)
    at_origin = (xn == 0) & (un == 0)
    if np.any(err[at_origin] > ORIGIN_TOL):
        raise ProportionalityError(
            f"model not proportional: PI constraint violated (error {err[at_origin].max():.3e} at origin)"
        )
    keep = ~at_origin
    return fit_proportional_constants(xn[keep], un[keep], err[keep])


def estimate_lipschitz(model, box_s: Box, box_u: Box, grid_steps=(41, 9), margin=0.05,
                       n_pairs: int = 10_000, seed: int = 0) -> tuple[float, float, float]:
    """Lipschitz constant of ``x -> f_eps(x, u)`` on S, uniformly in ``u``.

    Returns ``(lbar, jacobian_estimate, secant_estimate)`` where
    ``lbar = max((1 + margin) * jacobian_estimate, secant_estimate)``.
    """
    X, U = _grid(box_s, box_u, grid_steps)
    n = model.n
    h = 1e-6
    J = np.empty((len(X), n, n))
    for i in range(n):
        e = np.zeros(n)
        e[i] = h
        J[:, :, i] = (model.predict_batch(X + e, U) - model.predict_batch(X - e, U)) / (2 * h)
    jac = float(np.linalg.norm(J, ord=2, axis=(1, 2)).max())

    rng = np.random.default_rng(seed)
    xa = box_s.sample(rng, n_pairs)
    xb = box_s.sample(rng, n_pairs)
    us = box_u.sample(rng, n_pairs)
    num = np.linalg.norm(model.predict_batch(xa, us) - model.predict_batch(xb, us), axis=1)
    den = np.linalg.norm(xa - xb, axis=1)
    sec = float(np.max(num / den))
    return max((1.0 + margin) * jac, sec), jac, sec


def validate_bounds(plant, model, bounds: CertifiedBounds, box_s, box_u, grid_steps=(61, 13)):
    """Violation rate and max overshoot (relative to ``eta``) on a shifted grid."""
    X, U, err = grid_errors(plant, model, box_s, box_u, grid_steps, offset=True)
    bnd = bounds.bound(np.linalg.norm(X, axis=1), np.linalg.norm(U, axis=1))
    over = err - bnd
    rate = float(np.mean(over > 0))
    return rate, float(max(0.0, over.max()) / bounds.eta)


def certify(plant, model, box_s=None, box_u=None, grid_steps=(41, 9), margin=0.05,
            holdout_steps=(61, 13), n_pairs=10_000, seed=0) -> CertifiedBounds:
    """Estimate all certificates for ``model`` against ``plant``."""
    box_s = box_s or plant.state_box
    box_u = box_u or plant.input_box
    eta = estimate_uniform_bound(plant, model, box_s, box_u, grid_steps, margin)
    note = ""
    try:
        c_x, c_u = estimate_proportional_constants(plant, model, box_s, box_u, grid_steps)
    except ProportionalityError as exc:
        c_x = c_u = None
        note = str(exc)
    lbar, jac, sec = estimate_lipschitz(model, box_s, box_u, grid_steps, margin, n_pairs, seed)
    out = CertifiedBounds(
        eta=eta, c_x=c_x, c_u=c_u, lbar=lbar,
        grid={"state_steps": int(grid_steps[0]), "input_steps": int(grid_steps[1]),
              "holdout_state_steps": int(holdout_steps[0]), "holdout_input_steps": int(holdout_steps[1]),
              "margin": margin, "state_box": box_s.to_dict(), "input_box": box_u.to_dict()},
        lipschitz_jacobian=jac, lipschitz_secant=sec, note=note,
    )
    out.violation_rate, out.max_overshoot = validate_bounds(plant, model, out, box_s, box_u, holdout_steps)
    return out


def bounds_report_csv(plant, model, bounds: CertifiedBounds, box_s, box_u, grid_steps=(41, 9)) -> str:
    """CSV rows ``x1..xn,u1..um,error,bound`` on the estimation grid."""
    X, U, err = grid_errors(plant, model, box_s, box_u, grid_steps)
    bnd = bounds.bound(np.linalg.norm(X, axis=1), np.linalg.norm(U, axis=1))
    head = [f"x{i + 1}" for i in range(X.shape[1])] + [f"u{i + 1}" for i in range(U.shape[1])] + ["error", "bound"]
    lines = [",".join(head)]
    for x, u, e, b in zip(X, U, err, bnd):
        lines.append(",".join(repr(float(v)) for v in (*x, *u, e, b)))
    return "\n".join(lines) + "\n"
