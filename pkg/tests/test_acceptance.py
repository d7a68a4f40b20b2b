"""Acceptance suite: one PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py -s -v`` (the lines are printed
even without ``-s``).  The four closed-loop studies are shared by the whole
module and take a few minutes on one core.
"""

import itertools
import subprocess
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import pytest

from kmpc.cli import FIG1_RUNS, fig1_label, thread_cap
from kmpc.data import Box, ControlAffinePlant, VanDerPol, build_cluster_dataset, padua_points
from kmpc.experiment import ExperimentConfig, run_pipeline, stage_terminal
from kmpc.mpc import max_feasible_horizon, solve_ocp
from kmpc.surrogate import local_regression
from kmpc.terminal import check_level, lyapunov_residual, offset_slack

S = Box.symmetric(1.9, 2)
TESTS = Path(__file__).parent


def report(capsys, number, title, ok, detail=""):
    with capsys.disabled():
        print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {number}: {title}  {detail}")


def _run(args):
    d, pi = args
    label = fig1_label(d, pi)
    res = run_pipeline(ExperimentConfig(d=d, pi=pi), label)
    res.pop("dataset")
    return label, res


@pytest.fixture(scope="module")
def runs():
    t0 = time.perf_counter()
    workers = min(thread_cap(), len(FIG1_RUNS))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            out = dict(ex.map(_run, FIG1_RUNS))
    else:
        out = dict(map(_run, FIG1_RUNS))
    out["_seconds"] = time.perf_counter() - t0
    out["_workers"] = workers
    return out


def pi_labels():
    return [fig1_label(d, True) for d in (352, 1327)]


def all_labels():
    return [fig1_label(d, pi) for d, pi in FIG1_RUNS]


def test_criterion_1_closed_loop_comparison(runs, capsys):
    pi, plain, pi352 = (runs[k]["trace"] for k in ("d1327_PI-kEDMD", "d1327_kEDMD", "d352_PI-kEDMD"))
    n = pi.norms
    reached = bool(n.min() <= 1e-3)
    # after first reaching 1e-3, 50-step window maxima shrink until the float floor
    k0 = int(np.argmax(n <= 1e-3)) if reached else len(n)
    w = [n[i:i + 50].max() for i in range(k0, len(n) - 49, 50)]
    decreasing = reached and all(b < a or b <= 1e-12 for a, b in zip(w, w[1:])) and n[-1] < n[k0]
    p_pi, p_plain = (runs[k]["summary"]["plateau"] for k in ("d1327_PI-kEDMD", "d1327_kEDMD"))
    sep = p_plain >= 10 * p_pi
    order = n[-1] < pi352.norms[-1]
    fast = runs["_seconds"] <= 600
    ok = decreasing and sep and order and fast and pi.steps == 600 == plain.steps
    report(capsys, 1, "closed-loop comparison", ok,
           f"PI1327 final={n[-1]:.2e}; plateaus PI={p_pi:.2e} plain={p_plain:.2e}; "
           f"PI352 final={pi352.norms[-1]:.2e}; {runs['_seconds']:.0f}s on {runs['_workers']} worker(s)")
    assert ok


def test_criterion_2_horizon_feasibility(runs, capsys):
    box_reported = max_feasible_horizon(S, 0.05, 2.27)
    box_fine = max_feasible_horizon(S, 0.005, 1.75)
    res = runs["d1327_PI-kEDMD"]
    _, rep = stage_terminal(res["config"], res["model"], 0.005, 1.75, survival=True)
    surv = rep["n_max_terminal"]
    ok = box_reported == 4 and box_fine == 10 and surv <= 10
    report(capsys, 2, "horizon feasibility", ok,
           f"box rule 4 -> {box_reported}, 10 -> {box_fine}; terminal-survival -> {surv} (reference value 9)")
    assert box_reported == 4 and box_fine == 10 and surv <= 10


def test_criterion_3_certificates_in_range(runs, capsys):
    bands = {"d352_PI-kEDMD": ((0.025, 0.1), 2.27), "d1327_PI-kEDMD": ((0.0025, 0.01), 1.75)}
    ok = True
    parts = []
    for label, ((lo, hi), lref) in bands.items():
        b = runs[label]["bounds"]
        good = (lo <= b.eta <= hi and abs(b.lbar - lref) <= 0.25 * lref
                and b.violation_rate <= 0.01 and b.max_overshoot <= 0.1)
        ok &= good
        parts.append(f"{label}: eta={b.eta:.4g} lbar={b.lbar:.4g} holdout rate={b.violation_rate:.2e} "
                     f"overshoot={b.max_overshoot:.3f}eta")
    report(capsys, 3, "certificates in range", ok, "; ".join(parts))
    assert ok


def test_state_slice_error_reported(runs, capsys):
    # listed test vector: d=1327 PI error on a 50x50 grid of S x {0}; reported against 0.005
    res = runs["d1327_PI-kEDMD"]
    plant, model = res["config"].make_plant(), res["model"]
    g = np.linspace(-1.9, 1.9, 50)
    X = np.array(list(itertools.product(g, g)))
    U = np.zeros((len(X), 1))
    err = np.linalg.norm(plant.step_batch(X, U) - model.predict_batch(X, U), axis=1).max()
    with capsys.disabled():
        print(f"\n[INFO] d=1327 PI error on S x {{0}}: {err:.4g} (listed 0.005; certified eta "
              f"{res['bounds'].eta:.4g})")
    # held-out points may exceed the certified value by the held-out overshoot allowance
    assert err - res["bounds"].eta <= 0.1 * res["bounds"].eta


def test_criterion_4_equilibrium(runs, capsys):
    off = {k: runs[k]["model"].equilibrium_offset() for k in all_labels()}
    ok = all(off[k] <= 1e-9 for k in pi_labels()) and all(
        off[k] > 0 for k in all_labels() if k not in pi_labels())
    report(capsys, 4, "equilibrium preservation", ok, " ".join(f"{k}={v:.2e}" for k, v in off.items()))
    assert ok


def test_criterion_5_exact_recovery(capsys):
    def g0(X):
        return np.column_stack([np.sin(X[:, 0]) + 0.3 * X[:, 1] ** 2, X[:, 0] * X[:, 1] - 0.5 * X[:, 1]])

    def G(X):
        return np.stack([np.column_stack([1 + X[:, 0] ** 2, np.cos(X[:, 1])]),
                         np.column_stack([X[:, 1], np.ones(len(X))])], axis=1)

    box = Box.symmetric(1.0, 2)
    plant = ControlAffinePlant(g0, G, 2, 2, box, box, Box.symmetric(1.0, 2))
    worst = 0.0
    for p, centers in ((plant, padua_points(12, box)), (VanDerPol(), padua_points(25, S))):
        ds = build_cluster_dataset(p, centers, 0.0, 8, seed=1)
        for c in ds.clusters:
            x = c.center[None, :]
            truth = np.hstack([p.g0(x)[0][:, None], p.G(x)[0]])
            worst = max(worst, np.linalg.norm(local_regression(c) - truth))
    ok = worst <= 1e-9
    report(capsys, 5, "exact recovery", ok, f"max Frobenius error {worst:.2e}")
    assert ok


def test_criterion_6_terminal_certificate(runs, capsys):
    ok = True
    parts = []
    for label in all_labels():
        res = runs[label]
        cfg, model = res["mpc_config"], res["model"]
        t = cfg.terminal
        eq, ineq = lyapunov_residual(t.A, t.B, t.K, t.Q, t.R, t.beta, t.P)
        rep = check_level(model, t.K, t.P, t.Q, t.R, t.c, cfg.state_box, cfg.input_box,
                          t.report["tightening_radius"], 10_000, t.seed, offset_slack(model, t.P))
        viol = rep["containment"] + rep["input"] + rep["decrease"]
        good = eq <= 1e-10 and ineq <= 1e-8 and viol == 0
        ok &= good
        parts.append(f"{label}: residual={eq:.1e} eig={ineq:.1e} violations={viol}")
    report(capsys, 6, "terminal certificate", ok, "; ".join(parts))
    assert ok


def brute_force(model, cfg, x0, levels=9):
    N = cfg.horizon
    grid = np.linspace(cfg.input_box.lo[0], cfg.input_box.hi[0], levels)
    seqs = np.array(list(itertools.product(grid, repeat=N)))
    X = np.tile(x0, (len(seqs), 1))
    cost = np.zeros(len(seqs))
    ok = np.ones(len(seqs), dtype=bool)
    for k in range(N):
        U = seqs[:, k:k + 1]
        cost += np.einsum("pi,ij,pj->p", X, cfg.Q, X) + np.einsum("pi,ij,pj->p", U, cfg.R, U)
        X = model.predict_batch(X, U)
        ok &= cfg.tightened(k + 1).contains(X, tol=0.0) if k + 1 < N else True
    vf = cfg.terminal.cost(X)
    ok &= vf <= cfg.terminal.c
    return (cost + vf)[ok].min() if ok.any() else np.inf


def test_criterion_7_ocp_vs_brute_force(runs, capsys):
    x0 = np.array([0.5, 0.5])
    ok = True
    parts = []
    for label in pi_labels():
        res = runs[label]
        t0 = time.perf_counter()
        sol = solve_ocp(res["model"], res["mpc_config"], x0)
        bf = brute_force(res["model"], res["mpc_config"], x0)
        dt = time.perf_counter() - t0
        good = sol.status == "optimal" and sol.cost <= bf + 1e-9 and dt <= 60
        ok &= good
        parts.append(f"{label}: nlp={sol.cost:.6f} brute={bf:.6f} ({dt:.1f}s)")
    report(capsys, 7, "OCP vs brute force", ok, "; ".join(parts))
    assert ok


def test_criterion_8_recursive_feasibility(runs, capsys):
    ok = True
    parts = []
    for label in all_labels():
        s = runs[label]["summary"]
        good = (s["truncated"] is None and "infeasible" not in s["statuses"] and s["states_outside"] == 0
                and s["deviation_violations"] == 0)
        ok &= good
        parts.append(f"{label}: statuses={s['statuses']} outside={s['states_outside']} "
                     f"max deviation ratio={s['deviation_ratio_max']:.3f}")
    report(capsys, 8, "recursive feasibility", ok, "; ".join(parts))
    assert ok


def test_criterion_9_lyapunov_decrease(runs, capsys):
    ok = True
    parts = []
    for label in pi_labels():
        tr = runs[label]["trace"]
        plateau = runs[label]["summary"]["plateau"]
        active = tr.norms[:-2] >= 10 * plateau
        margin = np.diff(tr.values) + 0.5 * tr.stage_costs[:-1]
        bad = int(np.sum(margin[active] > 0))
        ok &= bad == 0
        parts.append(f"{label}: violations={bad} over {int(active.sum())} steps, "
                     f"worst margin={margin[active].max():.2e}")
    report(capsys, 9, "Lyapunov decrease", ok, "; ".join(parts))
    assert ok


def test_criterion_10_kernel_suite(capsys):
    t0 = time.perf_counter()
    res = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider",
                          str(TESTS / "test_kernels.py"), str(TESTS / "test_data.py"), "-k", "kernel or padua"],
                         capture_output=True, text=True, cwd=TESTS.parent)
    dt = time.perf_counter() - t0
    ok = res.returncode == 0 and dt <= 5.0
    report(capsys, 10, "kernel/interpolation suite", ok, f"{res.stdout.strip().splitlines()[-1]} ({dt:.2f}s)")
    assert ok
