"""Closed-loop simulation of the true plant under the surrogate MPC."""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from .mpc import MPCController, OcpInfeasible, rollout

__all__ = [
    "ClosedLoopTrace",
    "run_closed_loop",
    "trace_metrics",
    "compare_runs",
    "trace_csv",
]


@dataclass
class ClosedLoopTrace:
    states: np.ndarray          # (T+1, n) true states
    inputs: np.ndarray          # (T, m)
    stage_costs: np.ndarray     # (T,)
    values: np.ndarray          # (T,) optimal values V_N(x(k))
    statuses: list
    margins: np.ndarray         # (T,) min tightened-constraint margin of the prediction
    deviation_ratio: np.ndarray  # (T,) max_i |x_{u+}(i) - x_{u*}(i+1)| / (lbar^i eta)
    candidate_admissible: np.ndarray  # (T,) bool
    model_error: np.ndarray     # (T,) |f(x,u) - f_eps(x,u)|
    truncated: str | None = None
    label: str = ""
    meta: dict = field(default_factory=dict)

    @property
    def steps(self) -> int:
        return len(self.inputs)

    @property
    def norms(self) -> np.ndarray:
        return np.linalg.norm(self.states, axis=1)


def _margin(config, X):
    """Smallest slack of the predicted states in their tightened boxes / terminal set."""
    worst = np.inf
    for k in range(1, config.horizon):
        b = config.tightened(k)
        worst = min(worst, float(np.min(np.concatenate([b.hi - X[k], X[k] - b.lo]))))
    term = config.terminal
    worst = min(worst, float(term.c - term.cost(X[-1])))
    return worst


def _certificate_checks(model, config, sol, x_next):
    """Deviation-bound ratio and admissibility of the shifted candidate at ``x_next``."""
    N = config.horizon
    term = config.terminal
    u_tail = term.K @ sol.states[-1]
    x_ext = np.vstack([sol.states, model.predict(sol.states[-1], u_tail)[None, :]])
    cand = np.vstack([sol.inputs[1:], u_tail[None, :]])
    Xc = rollout(model, x_next, cand)
    ratio = 0.0
    for i in range(N + 1):
        dev = np.linalg.norm(Xc[i] - x_ext[i + 1])
        ratio = max(ratio, dev / (config.lbar**i * config.eta))
    ok = bool(np.all(config.input_box.contains(cand, tol=1e-12)))
    for k in range(1, N):
        ok &= config.tightened(k).contains(Xc[k], tol=1e-12)
    ok &= bool(term.cost(Xc[N]) <= term.c + 1e-12)
    return ratio, ok


def run_closed_loop(plant, controller: MPCController, x0, steps: int = 600,
                    label: str = "", check_certificates: bool = True) -> ClosedLoopTrace:
    """Measure, solve and apply for ``steps`` steps.

    The trace is truncated (and the reason recorded) when an OCP becomes
    infeasible after the first step; an infeasible first OCP raises.
    """
    model = controller.model
    cfg = controller.config
    controller.reset()
    x = np.asarray(x0, dtype=float).copy()
    states = [x.copy()]
    inputs, stage, values, status, margins, ratios, admissible, errs = ([] for _ in range(8))
    truncated = None
    for k in range(steps):
        try:
            u, sol = controller.feedback(x)
        except OcpInfeasible as exc:
            if k == 0:
                raise
            truncated = f"step {k}: {exc}"
            break
        x_next = plant.step(x, u)
        inputs.append(u)
        stage.append(cfg.stage_cost(x, u))
        values.append(sol.cost)
        status.append(sol.status)
        margins.append(_margin(cfg, sol.states))
        errs.append(float(np.linalg.norm(x_next - model.predict(x, u))))
        if check_certificates:
            r, ok = _certificate_checks(model, cfg, sol, x_next)
        else:
            r, ok = np.nan, True
        ratios.append(r)
        admissible.append(ok)
        x = x_next
        states.append(x.copy())
    m = cfg.input_box.dim
    return ClosedLoopTrace(
        states=np.array(states), inputs=np.array(inputs).reshape(-1, m),
        stage_costs=np.array(stage), values=np.array(values), statuses=status,
        margins=np.array(margins), deviation_ratio=np.array(ratios),
        candidate_admissible=np.array(admissible, dtype=bool), model_error=np.array(errs),
        truncated=truncated, label=label,
    )


def trace_metrics(trace: ClosedLoopTrace, rel_tol: float = 1e-6, abs_tol: float = 1e-9) -> dict:
    """Aggregate stability and feasibility indicators of a trace."""
    norms = trace.norms
    tail = norms[-max(1, int(np.ceil(0.2 * len(norms)))):]
    v = trace.values
    if len(v) > 1:
        inc = np.diff(v) > rel_tol * v[:-1] + abs_tol
        lyap = int(np.sum(inc))
    else:
        lyap = 0
    n_ok = sum(s != "infeasible" for s in trace.statuses)
    return {
        "final_error": float(norms[-1]),
        "plateau": float(np.median(tail)),
        "lyapunov_violations": lyap,
        "feasibility_rate": float(n_ok / len(trace.statuses)) if trace.statuses else 1.0,
        "constraint_margin_min": float(np.min(trace.margins)) if len(trace.margins) else 0.0,
    }


def compare_runs(traces, labels=None) -> str:
    """CSV with one ``|x(k)|`` column per trace, padded with the last value.

    Entries of ``traces`` may also be plain arrays of norms.
    """
    labels = labels or [getattr(t, "label", "") or f"run{i}" for i, t in enumerate(traces)]
    cols = [np.asarray(t.norms if isinstance(t, ClosedLoopTrace) else t, dtype=float) for t in traces]
    T = max(len(c) for c in cols)
    cols = [np.concatenate([c, np.full(T - len(c), c[-1])]) for c in cols]
    buf = io.StringIO()
    buf.write(",".join(["k", *labels]) + "\n")
    for k in range(T):
        buf.write(",".join([str(k), *(repr(float(c[k])) for c in cols)]) + "\n")
    return buf.getvalue()


def trace_csv(trace: ClosedLoopTrace) -> str:
    """CSV with header ``k,x1,x2,u,stage_cost,value,status``.

    The final state row carries empty input/cost fields.
    """
    n = trace.states.shape[1]
    m = trace.inputs.shape[1]
    head = ["k", *(f"x{i + 1}" for i in range(n)), *(["u"] if m == 1 else [f"u{i + 1}" for i in range(m)]),
            "stage_cost", "value", "status"]
    buf = io.StringIO()
    buf.write(",".join(head) + "\n")
    for k, x in enumerate(trace.states):
        row = [str(k), *(repr(float(v)) for v in x)]
        if k < trace.steps:
            row += [repr(float(v)) for v in trace.inputs[k]]
            row += [repr(float(trace.stage_costs[k])), repr(float(trace.values[k])), trace.statuses[k]]
        else:
            row += [""] * m + ["", "", "final"]
        buf.write(",".join(row) + "\n")
    return buf.getvalue()
