"""Constraint-tightened MPC with terminal conditions on a surrogate model.

The finite-horizon problem is solved by single shooting over the input
sequence.  State and terminal constraints are handled by an augmented
Lagrangian outer loop; input bounds are passed directly to the inner
quasi-Newton (L-BFGS-B) solve, followed by a few projected Newton steps.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .data import Box
from .terminal import TerminalIngredients

__all__ = [
    "cbar",
    "tightened_box",
    "max_feasible_horizon",
    "SolverSettings",
    "MPCConfig",
    "OcpSolution",
    "OcpInfeasible",
    "rollout",
    "solve_ocp",
    "MPCController",
]


def cbar(k: int, lbar: float) -> float:
    """Tightening factor ``sum_{i<k} lbar^i``."""
    if k < 1:
        raise ValueError(f"step index must be >= 1, got {k}")
    return float(sum(lbar**i for i in range(k)))


def tightened_box(box: Box, radius: float) -> Box | None:
    """Pontryagin difference of a box and a Euclidean ball; ``None`` when empty."""
    if radius < 0:
        raise ValueError("radius must be non-negative")
    lo = box.lo + radius
    hi = box.hi - radius
    if np.any(lo > hi):
        return None
    return Box(tuple(lo), tuple(hi))


def max_feasible_horizon(state_box: Box, eta: float, lbar: float, limit: int = 100,
                         terminal_survives=None) -> int:
    """Largest ``N <= limit`` whose tightened boxes ``k = 1..N`` are all nonempty.

    ``terminal_survives(N) -> bool`` optionally adds the requirement that a
    terminal level ``c > 0`` can be calibrated for horizon ``N``.
    """
    best = 0
    for N in range(1, limit + 1):
        if tightened_box(state_box, cbar(N, lbar) * eta) is None:
            break
        if terminal_survives is not None and not terminal_survives(N):
            continue
        best = N
    return best


@dataclass
class SolverSettings:
    kkt_tol: float = 1e-8
    max_iter: int = 500
    penalty0: float = 10.0
    penalty_growth: float = 10.0
    max_outer: int = 20
    newton_steps: int = 8

    def to_dict(self) -> dict:
        return {"kkt_tol": self.kkt_tol, "max_iter": self.max_iter, "penalty0": self.penalty0,
                "penalty_growth": self.penalty_growth, "max_outer": self.max_outer,
                "newton_steps": self.newton_steps}

    @classmethod
    def from_dict(cls, data: dict) -> "SolverSettings":
        return cls(**data)


def _spd(M, name):
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if not np.allclose(M, M.T) or np.min(np.linalg.eigvalsh(M)) <= 0:
        raise ValueError(f"{name} must be symmetric positive definite")
    return M


@dataclass
class MPCConfig:
    horizon: int
    Q: np.ndarray
    R: np.ndarray
    state_box: Box
    input_box: Box
    eta: float
    lbar: float
    terminal: TerminalIngredients
    solver: SolverSettings = field(default_factory=SolverSettings)

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be positive")
        self.Q = _spd(self.Q, "Q")
        self.R = _spd(self.R, "R")
        self.boxes = []
        for k in range(1, self.horizon + 1):
            b = tightened_box(self.state_box, cbar(k, self.lbar) * self.eta)
            if b is None:
                raise ValueError(f"tightened state box empty at k={k}")
            self.boxes.append(b)

    def tightened(self, k: int) -> Box:
        return self.boxes[k - 1]

    def stage_cost(self, x, u):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        return float(x @ self.Q @ x + u @ self.R @ u)

    def to_dict(self) -> dict:
        return {
            "N": self.horizon, "Q": self.Q.tolist(), "R": self.R.tolist(),
            "state_box": self.state_box.to_dict(), "input_box": self.input_box.to_dict(),
            "eta": self.eta, "lbar": self.lbar,
            "terminal": self.terminal.to_dict(), "solver": self.solver.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MPCConfig":
        return cls(
            horizon=int(data["N"]), Q=np.array(data["Q"]), R=np.array(data["R"]),
            state_box=Box.from_dict(data["state_box"]), input_box=Box.from_dict(data["input_box"]),
            eta=float(data["eta"]), lbar=float(data["lbar"]),
            terminal=TerminalIngredients.from_dict(data["terminal"]),
            solver=SolverSettings.from_dict(data.get("solver", {})),
        )


@dataclass
class OcpSolution:
    inputs: np.ndarray
    states: np.ndarray
    cost: float
    status: str
    kkt_residual: float
    violation: float
    active: list = field(default_factory=list)
    max_violated: str | None = None
    start: int = 0

    @property
    def feasible(self) -> bool:
        return self.status != "infeasible"


class OcpInfeasible(RuntimeError):
    def __init__(self, solution: OcpSolution):
        super().__init__(f"OCP infeasible: most violated constraint {solution.max_violated} "
                         f"(violation {solution.violation:.3e})")
        self.solution = solution


def rollout(model, x0, U, sensitivities: bool = False):
    """Surrogate trajectory ``x(0..N)`` for inputs ``U`` of shape ``(N, m)``.

    With ``sensitivities`` also returns ``S`` of shape ``(N+1, n, N*m)`` with
    ``S[k] = dx(k)/dU``.
    """
    U = np.asarray(U, dtype=float)
    N, m = U.shape
    n = len(x0)
    X = np.empty((N + 1, n))
    X[0] = x0
    if not sensitivities:
        for k in range(N):
            X[k + 1] = model.predict(X[k], U[k])
        return X
    S = np.zeros((N + 1, n, N * m))
    for k in range(N):
        f, A, B = model.step_jacobians(X[k], U[k])
        X[k + 1] = f
        S[k + 1] = A @ S[k]
        S[k + 1][:, k * m:(k + 1) * m] += B
    return X, S


class _Problem:
    """Objective and constraints of one OCP instance in the stacked inputs."""

    def __init__(self, model, config: MPCConfig, x0):
        self.model = model
        self.cfg = config
        self.x0 = np.asarray(x0, dtype=float)
        self.N = config.horizon
        self.m = len(config.input_box.lower)
        self.n = len(self.x0)
        self.lb = np.tile(config.input_box.lo, self.N)
        self.ub = np.tile(config.input_box.hi, self.N)
        names = []
        for k in range(1, self.N):
            for i in range(self.n):
                names.append(f"state[k={k}].x{i + 1}<=upper")
            for i in range(self.n):
                names.append(f"state[k={k}].x{i + 1}>=lower")
        names.append("terminal")
        self.names = names
        self._cache_key = None

    def evaluate(self, z):
        key = z.tobytes()
        if key == self._cache_key:
            return self._cache
        cfg = self.cfg
        U = z.reshape(self.N, self.m)
        X, S = rollout(self.model, self.x0, U, sensitivities=True)
        Q, R, P = cfg.Q, cfg.R, cfg.terminal.P
        J = 0.0
        gJ = np.zeros_like(z)
        for k in range(self.N):
            J += X[k] @ Q @ X[k] + U[k] @ R @ U[k]
            gJ += 2.0 * S[k].T @ (Q @ X[k])
            gJ[k * self.m:(k + 1) * self.m] += 2.0 * R @ U[k]
        J += X[-1] @ P @ X[-1]
        gJ += 2.0 * S[-1].T @ (P @ X[-1])
        g = []
        Dg = []
        for k in range(1, self.N):
            box = cfg.tightened(k)
            g.append(X[k] - box.hi)
            Dg.append(S[k])
            g.append(box.lo - X[k])
            Dg.append(-S[k])
        g.append(np.array([X[-1] @ P @ X[-1] - cfg.terminal.c]))
        Dg.append((2.0 * P @ X[-1] @ S[-1])[None, :])
        g = np.concatenate(g)
        Dg = np.vstack(Dg)
        self._cache_key = key
        self._cache = (float(J), gJ, g, Dg, X)
        return self._cache

    def kkt(self, z, lam):
        J, gJ, g, Dg, _ = self.evaluate(z)
        gL = gJ + Dg.T @ lam
        proj = z - np.clip(z - gL, self.lb, self.ub)
        comp = np.abs(lam * g).max() if len(g) else 0.0
        return float(max(np.abs(proj).max(), comp))


def _al_value(z, prob: _Problem, lam, rho, scale):
    J, gJ, g, Dg, _ = prob.evaluate(z)
    t = np.maximum(0.0, lam + rho * g)
    val = J + (t @ t - lam @ lam) / (2.0 * rho)
    grad = gJ + Dg.T @ t
    return val / scale, grad / scale


def _newton_polish(prob: _Problem, z, lam, rho, scale, steps, gtol=0.0):
    """Projected Newton on the free variables with a finite-difference Hessian.

    Stops once the free gradient (unscaled) drops to ``gtol``.
    """
    for _ in range(steps):
        f0, g0 = _al_value(z, prob, lam, rho, scale)
        at_lo = (z <= prob.lb + 1e-12) & (g0 > 0)
        at_hi = (z >= prob.ub - 1e-12) & (g0 < 0)
        free = ~(at_lo | at_hi)
        if not np.any(free) or np.abs(g0[free]).max() * scale <= gtol:
            break
        idx = np.flatnonzero(free)
        H = np.empty((len(idx), len(idx)))
        for a, j in enumerate(idx):
            h = 1e-6 * max(1.0, abs(z[j]))
            zp = z.copy()
            zp[j] += h
            zm = z.copy()
            zm[j] -= h
            H[:, a] = (_al_value(zp, prob, lam, rho, scale)[1][idx]
                       - _al_value(zm, prob, lam, rho, scale)[1][idx]) / (2 * h)
        H = 0.5 * (H + H.T)
        w, V = np.linalg.eigh(H)
        if w.max() <= 0:
            break
        w = np.maximum(w, 1e-10 * w.max())
        step = -(V @ ((V.T @ g0[idx]) / w))
        t = 1.0
        improved = False
        for _ in range(30):
            zn = z.copy()
            zn[idx] = np.clip(z[idx] + t * step, prob.lb[idx], prob.ub[idx])
            fn, _ = _al_value(zn, prob, lam, rho, scale)
            if fn <= f0 + 1e-4 * t * (g0[idx] @ step) or (fn < f0 and t < 1e-3):
                improved = True
                break
            t *= 0.5
        if not improved:
            break
        z = zn
    return z


def _solve_from(prob: _Problem, z0, settings: SolverSettings, scale):
    z = np.clip(np.asarray(z0, dtype=float), prob.lb, prob.ub)
    n_con = len(prob.names)
    lam = np.zeros(n_con)
    rho = settings.penalty0
    prev_viol = np.inf
    tol = settings.kkt_tol
    bounds = list(zip(prob.lb, prob.ub))
    for _ in range(settings.max_outer):
        res = minimize(_al_value, z, args=(prob, lam, rho, scale), jac=True,
                       method="L-BFGS-B", bounds=bounds,
                       options={"maxiter": settings.max_iter, "ftol": 1e-15, "gtol": 1e-13})
        z = _newton_polish(prob, res.x, lam, rho, scale, settings.newton_steps, 0.01 * tol)
        _, _, g, _, _ = prob.evaluate(z)
        lam_new = np.maximum(0.0, lam + rho * g)
        viol = float(max(0.0, g.max()))
        lam = lam_new
        if viol <= tol and prob.kkt(z, lam) <= tol:
            break
        if viol > 0.25 * prev_viol:
            rho *= settings.penalty_growth
        prev_viol = viol
    return z, lam


def _restore(prob: _Problem, z0, settings):
    def viol_obj(z):
        _, _, g, Dg, _ = prob.evaluate(z)
        t = np.maximum(0.0, g)
        return float(t @ t), 2.0 * Dg.T @ t

    res = minimize(viol_obj, z0, jac=True, method="L-BFGS-B", bounds=list(zip(prob.lb, prob.ub)),
                   options={"maxiter": settings.max_iter, "ftol": 0.0, "gtol": 1e-16})
    return res.x


def _package(prob: _Problem, z, lam, start, settings) -> OcpSolution:
    J, _, g, _, X = prob.evaluate(z)
    viol = float(max(0.0, g.max()))
    kkt = prob.kkt(z, lam)
    tol = settings.kkt_tol
    active = [prob.names[i] for i in np.flatnonzero(g >= -1e-8)]
    for j in np.flatnonzero((z <= prob.lb + 1e-12) | (z >= prob.ub - 1e-12)):
        active.append(f"input[k={j // prob.m}].u{j % prob.m + 1}")
    if viol > tol:
        status = "infeasible"
    elif kkt <= tol:
        status = "optimal"
    else:
        status = "max_iter"
    worst = prob.names[int(np.argmax(g))] if viol > 0 else None
    return OcpSolution(z.reshape(prob.N, prob.m).copy(), X.copy(), J, status, kkt, viol,
                       active, worst, start)


def _terminal_rollout(model, config: MPCConfig, x0):
    K = config.terminal.K
    x = np.asarray(x0, dtype=float)
    U = []
    for _ in range(config.horizon):
        u = np.clip(K @ x, config.input_box.lo, config.input_box.hi)
        U.append(u)
        x = model.predict(x, u)
    return np.array(U)


def solve_ocp(model, config: MPCConfig, x0, warm_start=None) -> OcpSolution:
    """Solve the tightened finite-horizon OCP from ``x0``.

    Three starts are tried (zero, ``warm_start``, terminal-controller rollout)
    and the best non-infeasible result is returned; ties go to the lowest
    start index.
    """
    prob = _Problem(model, config, x0)
    settings = config.solver
    starts = [np.zeros(prob.N * prob.m)]
    if warm_start is not None:
        starts.append(np.asarray(warm_start, dtype=float).reshape(-1))
    starts.append(_terminal_rollout(model, config, x0).reshape(-1))
    x0 = np.asarray(x0, dtype=float)
    scale = max(float(x0 @ (config.Q + config.terminal.P) @ x0), 1e-300)

    best = None
    for idx, z0 in enumerate(starts):
        z, lam = _solve_from(prob, z0, settings, scale)
        sol = _package(prob, z, lam, idx, settings)
        if sol.status == "infeasible":
            zr = _restore(prob, z, settings)
            _, _, g, _, _ = prob.evaluate(zr)
            if g.max() <= settings.kkt_tol:
                z, lam = _solve_from(prob, zr, settings, scale)
                sol = _package(prob, z, lam, idx, settings)
        if best is None or _better(sol, best):
            best = sol
    return best


_RANK = {"optimal": 0, "max_iter": 1, "infeasible": 2}


def _better(a: OcpSolution, b: OcpSolution) -> bool:
    if (a.status == "infeasible") != (b.status == "infeasible"):
        return b.status == "infeasible"
    if a.status == "infeasible":
        return a.violation < b.violation
    if a.cost < b.cost - 1e-12 * max(1.0, abs(b.cost)):
        return True
    if abs(a.cost - b.cost) <= 1e-12 * max(1.0, abs(b.cost)):
        return _RANK[a.status] < _RANK[b.status]
    return False


class MPCController:
    """Receding-horizon feedback ``mu(x) = u*(0)`` with shifted warm starts."""

    def __init__(self, model, config: MPCConfig):
        self.model = model
        self.config = config
        self.warm = None
        self.last = None

    def reset(self):
        self.warm = None
        self.last = None

    def shifted_candidate(self, sol: OcpSolution) -> np.ndarray:
        """``(u*_1, ..., u*_{N-1}, K x*(N))``."""
        tail = self.config.terminal.K @ sol.states[-1]
        return np.vstack([sol.inputs[1:], tail[None, :]])

    def feedback(self, x, warm_start=None, abort: bool = True):
        """Return ``(u0, solution)``; raises :class:`OcpInfeasible` unless ``abort`` is False."""
        ws = self.warm if warm_start is None else warm_start
        sol = solve_ocp(self.model, self.config, x, ws)
        self.last = sol
        if sol.status == "infeasible":
            if abort or self.warm is None:
                raise OcpInfeasible(sol)
            u0 = np.asarray(self.warm, dtype=float).reshape(self.config.horizon, -1)[0]
            return u0, sol
        cand = self.shifted_candidate(sol)
        self.warm = np.clip(cand, self.config.input_box.lo, self.config.input_box.hi)
        return sol.inputs[0].copy(), sol
