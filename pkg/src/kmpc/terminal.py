"""Terminal cost, terminal set and local controller from the surrogate linearization."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Box

__all__ = [
    "TerminalError",
    "TerminalIngredients",
    "lqr_gain",
    "solve_terminal_P",
    "lyapunov_residual",
    "ellipsoid_level_in_box",
    "sample_level_set",
    "check_level",
    "calibrate_level_c",
    "design_terminal",
    "offset_slack",
    "terminal_cost",
    "terminal_controller",
]


class TerminalError(RuntimeError):
    pass


@dataclass
class TerminalIngredients:
    """Quadratic terminal cost ``x^T P x``, level ``c`` and gain ``K``.

    The terminal map is the identity (Lipschitz constant 1).
    """

    A: np.ndarray
    B: np.ndarray
    K: np.ndarray
    P: np.ndarray
    beta: float
    c: float
    Q: np.ndarray
    R: np.ndarray
    samples: int = 10_000
    seed: int = 0
    report: dict = field(default_factory=dict)
    phi_lipschitz: float = 1.0

    def cost(self, x):
        x = np.asarray(x, dtype=float)
        return np.einsum("...i,ij,...j->...", x, self.P, x)

    def controller(self, x):
        return np.asarray(x, dtype=float) @ self.K.T

    def contains(self, x, tol: float = 0.0):
        return self.cost(x) <= self.c + tol

    def to_dict(self) -> dict:
        return {
            "A": self.A.tolist(), "B": self.B.tolist(), "K": self.K.tolist(), "P": self.P.tolist(),
            "Q": self.Q.tolist(), "R": self.R.tolist(), "beta": self.beta, "c": self.c,
            "seed": self.seed, "samples": self.samples, "report": self.report,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TerminalIngredients":
        arr = lambda k: np.array(data[k], dtype=float)
        return cls(arr("A"), arr("B"), arr("K"), arr("P"), float(data["beta"]), float(data["c"]),
                   arr("Q"), arr("R"), int(data.get("samples", 10_000)), int(data.get("seed", 0)),
                   dict(data.get("report", {})))


def terminal_cost(ingredients: TerminalIngredients, x):
    return ingredients.cost(x)


def terminal_controller(ingredients: TerminalIngredients, x):
    return ingredients.controller(x)


def lqr_gain(A, B, Q, R, tol: float = 1e-12, max_iter: int = 100_000):
    """Discrete LQR gain ``K`` (``u = K x``) by Riccati fixed-point iteration.

    Returns ``(K, P_s)``.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float).reshape(A.shape[0], -1)
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    P = Q.copy()
    for _ in range(max_iter):
        S = R + B.T @ P @ B
        PB = A.T @ P @ B
        P_new = Q + A.T @ P @ A - PB @ np.linalg.solve(S, PB.T)
        P_new = 0.5 * (P_new + P_new.T)
        if not np.all(np.isfinite(P_new)):
            raise TerminalError("linearized surrogate not stabilizable (Riccati iteration diverged)")
        delta = np.linalg.norm(P_new - P) / max(np.linalg.norm(P_new), 1e-300)
        P = P_new
        if delta <= tol:
            break
    else:
        raise TerminalError("linearized surrogate not stabilizable (Riccati iteration did not converge)")
    K = -np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
    rho = max(abs(np.linalg.eigvals(A + B @ K)))
    if rho >= 1.0:
        raise TerminalError(f"linearized surrogate not stabilizable (spectral radius {rho:.6f})")
    return K, P


def solve_terminal_P(A, B, K, Q, R, beta: float) -> np.ndarray:
    """Solve ``Acl^T P Acl - P = -beta (Q + K^T R K)`` via Kronecker vectorization."""
    if not beta > 1.0:
        raise TerminalError(f"beta must exceed 1, got {beta}")
    A = np.atleast_2d(A)
    Acl = A + np.asarray(B).reshape(A.shape[0], -1) @ np.atleast_2d(K)
    n = Acl.shape[0]
    W = beta * (np.atleast_2d(Q) + np.atleast_2d(K).T @ np.atleast_2d(R) @ np.atleast_2d(K))
    M = np.kron(Acl.T, Acl.T) - np.eye(n * n)
    try:
        vecP = np.linalg.solve(M, -W.reshape(-1))
    except np.linalg.LinAlgError as exc:
        raise TerminalError("Lyapunov solve failed") from exc
    P = vecP.reshape(n, n)
    P = 0.5 * (P + P.T)
    if np.min(np.linalg.eigvalsh(P)) <= 0:
        raise TerminalError("Lyapunov solve failed: P is not positive definite")
    return P


def lyapunov_residual(A, B, K, Q, R, beta, P):
    """Return ``(relative equality residual, max eig of the inequality matrix)``."""
    Acl = A + B @ K
    W = Q + K.T @ R @ K
    M = Acl.T @ P @ Acl - P
    eq = np.linalg.norm(M + beta * W) / np.linalg.norm(P)
    ineq = np.max(np.linalg.eigvalsh(0.5 * ((M + beta * W) + (M + beta * W).T)))
    return float(eq), float(ineq)


def ellipsoid_level_in_box(P, box: Box) -> float:
    """Largest ``c`` with ``{x^T P x <= c}`` inside ``box`` (origin interior)."""
    Pinv = np.linalg.inv(P)
    diag = np.diag(Pinv)
    dist = np.minimum(-box.lo, box.hi)
    if np.any(dist <= 0):
        return 0.0
    return float(np.min(dist**2 / diag))


def sample_level_set(P, c: float, samples: int, rng: np.random.Generator) -> np.ndarray:
    """Half of the points on ``{x^T P x = c}``, half uniform inside it."""
    n = P.shape[0]
    L = np.linalg.cholesky(P)
    z = rng.standard_normal((samples, n))
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    half = samples // 2
    radii = np.ones(samples)
    radii[half:] = rng.uniform(0.0, 1.0, samples - half) ** (1.0 / n)
    z *= radii[:, None]
    # x = sqrt(c) L^{-T} z  gives  x^T P x = c |z|^2
    return np.sqrt(c) * np.linalg.solve(L.T, z.T).T


def check_level(model, ing_K, P, Q, R, c, box_s: Box, box_u: Box, radius: float,
                samples: int, seed: int, decrease_slack=0.0):
    """Count violations of containment, input admissibility and decrease.

    ``decrease_slack`` may be a callable of the successor states, used to
    admit a known equilibrium offset of non-PI models.
    """
    rng = np.random.default_rng(seed)
    X = sample_level_set(P, c, samples, rng)
    U = X @ ing_K.T
    tight = Box(tuple(box_s.lo + radius), tuple(box_s.hi - radius))
    contain = ~tight.contains(X, tol=1e-12)
    inputs = ~box_u.contains(U, tol=1e-12)
    Xn = model.predict_batch(X, U)
    vx = np.einsum("pi,ij,pj->p", X, P, X)
    vn = np.einsum("pi,ij,pj->p", Xn, P, Xn)
    stage = np.einsum("pi,ij,pj->p", X, Q, X) + np.einsum("pi,ij,pj->p", U, R, U)
    slack = decrease_slack(Xn) if callable(decrease_slack) else decrease_slack
    decrease = vn - vx + stage > slack
    return {
        "containment": int(contain.sum()),
        "input": int(inputs.sum()),
        "decrease": int(decrease.sum()),
        "worst_decrease_margin": float(np.max(vn - vx + stage - slack)),
    }


def calibrate_level_c(model, K, P, Q, R, box_s: Box, box_u: Box, radius: float,
                      samples: int = 10_000, seed: int = 0, shrink: float = 0.8,
                      max_shrink: int = 50, decrease_slack=0.0):
    """Largest tested level ``c`` passing all sampled checks.

    Starts at the ellipsoid-in-tightened-box level and shrinks geometrically.
    Returns ``(c, report)``.
    """
    tight = Box(tuple(box_s.lo + radius), tuple(box_s.hi - radius))
    if tight.is_empty:
        raise TerminalError("tightened terminal box is empty")
    c = ellipsoid_level_in_box(P, tight)
    if c <= 0:
        raise TerminalError("terminal set collapsed: tightened box has no interior")
    c0 = c
    for it in range(max_shrink + 1):
        rep = check_level(model, K, P, Q, R, c, box_s, box_u, radius, samples, seed, decrease_slack)
        if rep["containment"] == 0 and rep["input"] == 0 and rep["decrease"] == 0:
            rep.update(c0=c0, shrinks=it)
            return c, rep
        c *= shrink
    raise TerminalError("terminal set collapsed - increase beta or data density")


def offset_slack(model, P):
    """Decrease slack induced by a nonzero ``f_eps(0, 0)``.

    With ``f = fbar + delta`` one has ``V(f) - V(fbar) <= 2|P||delta||fbar| + |P||delta|^2``.
    """
    delta = model.predict(np.zeros(model.n), np.zeros(model.m))
    dn = float(np.linalg.norm(delta))
    if dn <= 1e-9:
        return 0.0
    pn = float(np.linalg.norm(P, 2))

    def slack(Xn):
        fbar = np.linalg.norm(Xn - delta, axis=1)
        return 2.0 * pn * dn * fbar + pn * dn**2

    return slack


def design_terminal(model, Q, R, box_s: Box, box_u: Box, eta: float, lbar: float, horizon: int,
                    beta: float = 1.5, samples: int = 10_000, seed: int = 0,
                    gain_Q=None, gain_R=None) -> TerminalIngredients:
    """Linearize at the origin, compute ``K``, ``P`` and calibrate ``c``.

    Parameters
    ----------
    gain_Q, gain_R : array_like, optional
        Weights of the LQR problem that produces ``K``. They default to the
        stage weights ``Q, R``. A larger ``gain_R`` gives a gentler gain and
        hence a larger input-admissible terminal set; ``P`` and the decrease
        checks always use the stage weights.
    """
    from .mpc import cbar  # local import: mpc depends on this module

    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    A, B = model.jacobians(np.zeros(model.n), np.zeros(model.m))
    gQ = Q if gain_Q is None else np.atleast_2d(np.asarray(gain_Q, dtype=float))
    gR = R if gain_R is None else np.atleast_2d(np.asarray(gain_R, dtype=float))
    K, _ = lqr_gain(A, B, gQ, gR)
    P = solve_terminal_P(A, B, K, Q, R, beta)
    radius = cbar(horizon, lbar) * eta
    slack = offset_slack(model, P)
    c, rep = calibrate_level_c(model, K, P, Q, R, box_s, box_u, radius, samples, seed,
                               decrease_slack=slack)
    eq, ineq = lyapunov_residual(A, B, K, Q, R, beta, P)
    rep.update(
        lyapunov_residual=eq, inequality_max_eig=ineq,
        spectral_radius=float(max(abs(np.linalg.eigvals(A + B @ K)))),
        tightening_radius=radius, horizon=horizon,
        practical=not (slack == 0.0),
        gain_Q=gQ.tolist(), gain_R=gR.tolist(),
    )
    return TerminalIngredients(A, B, K, P, beta, c, Q, R, samples, seed, rep)
