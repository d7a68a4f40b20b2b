"""Experiment configuration and the end-to-end pipeline stages.

Each stage is a plain function so that the command line, the test-suite and
notebooks share one code path.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .bounds import CertifiedBounds, certify
from .data import ClusterDataset, build_cluster_dataset, build_observation_grid, fill_distance, make_plant, padua_degree
from .kernels import KernelSpec
from .mpc import MPCConfig, MPCController, SolverSettings, max_feasible_horizon
from .simulate import ClosedLoopTrace, run_closed_loop, trace_metrics
from .surrogate import SurrogateModel, fit_control_affine
from .terminal import TerminalError, design_terminal

__all__ = [
    "ExperimentConfig",
    "KERNEL_PRESETS",
    "kernel_preset",
    "config_hash",
    "canonical_json",
    "stage_generate",
    "stage_identify",
    "stage_bounds",
    "stage_terminal",
    "stage_simulate",
    "run_pipeline",
]

# Support radius and terminal-gain input weight per cluster count.  The
# radius keeps the estimated error and Lipschitz constants in the reported
# range; the gain weight yields a terminal set reachable from the default
# initial state within four steps.
KERNEL_PRESETS = {
    352: {"sigma": 0.75, "gain_R": 0.3},
    1327: {"sigma": 0.58, "gain_R": 1.0},
}
DEFAULT_JITTER = 1e-12


def kernel_preset(d: int) -> dict:
    """Preset for ``d``; other sizes interpolate the radius log-log in ``d``."""
    if d in KERNEL_PRESETS:
        return dict(KERNEL_PRESETS[d])
    (d0, p0), (d1, p1) = sorted(KERNEL_PRESETS.items())
    alpha = math.log(p0["sigma"] / p1["sigma"]) / math.log(d1 / d0)
    return {"sigma": p0["sigma"] * (d0 / d) ** alpha, "gain_R": 1.0}


@dataclass
class ExperimentConfig:
    """All knobs of one van der Pol study; defaults reproduce the main run."""

    plant: dict = field(default_factory=lambda: {"id": "vanderpol", "dt": 0.05, "nu": 0.1})
    d: int = 1327
    samples_per_cluster: int = 25
    radius: float | None = None          # None: sqrt(n) / d
    sigma: float | None = None           # None: preset for d
    jitter: float = DEFAULT_JITTER
    pi: bool = True
    bound_grid: tuple = (41, 9)
    holdout_grid: tuple = (61, 13)
    bound_margin: float = 0.05
    lipschitz_pairs: int = 10_000
    horizon: int = 4
    Q: list = field(default_factory=lambda: [[1.0, 0.0], [0.0, 1.0]])
    R: list = field(default_factory=lambda: [[1e-4]])
    beta: float = 5.0
    gain_R: float | None = None          # None: preset for d
    terminal_samples: int = 10_000
    x0: tuple = (0.5, 0.5)
    steps: int = 600
    seed: int = 0

    def __post_init__(self):
        self.bound_grid = tuple(int(v) for v in self.bound_grid)
        self.holdout_grid = tuple(int(v) for v in self.holdout_grid)
        self.x0 = tuple(float(v) for v in self.x0)
        if self.d < 1:
            raise ValueError(f"invalid d={self.d}")
        if self.horizon < 1:
            raise ValueError("horizon must be positive")

    # resolved values ----------------------------------------------------
    def make_plant(self):
        params = {k: v for k, v in self.plant.items() if k != "id"}
        return make_plant(self.plant.get("id", "vanderpol"), **params)

    def resolved_radius(self, n: int = 2) -> float:
        return math.sqrt(n) / self.d if self.radius is None else float(self.radius)

    def resolved_sigma(self) -> float:
        return kernel_preset(self.d)["sigma"] if self.sigma is None else float(self.sigma)

    def resolved_gain_R(self) -> float:
        return kernel_preset(self.d)["gain_R"] if self.gain_R is None else float(self.gain_R)

    def kernel_spec(self, n: int = 2) -> KernelSpec:
        return KernelSpec(n=n, k=1, sigma=self.resolved_sigma(), jitter=self.jitter)

    # serialization ------------------------------------------------------
    def to_dict(self) -> dict:
        out = asdict(self)
        out["bound_grid"] = list(self.bound_grid)
        out["holdout_grid"] = list(self.holdout_grid)
        out["x0"] = list(self.x0)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**copy.deepcopy(data))

    def replace(self, **changes) -> "ExperimentConfig":
        data = self.to_dict()
        data.update({k: v for k, v in changes.items() if v is not None})
        return ExperimentConfig.from_dict(data)


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(config: ExperimentConfig) -> str:
    return hashlib.sha256(canonical_json(config.to_dict()).encode()).hexdigest()


# --- stages -----------------------------------------------------------------

def stage_generate(config: ExperimentConfig):
    """Return ``(dataset, summary)`` for the configured grid and seed."""
    plant = config.make_plant()
    degree = padua_degree(config.d)
    nodes = build_observation_grid(degree, plant.sample_box)
    radius = config.resolved_radius(plant.n)
    ds = build_cluster_dataset(plant, nodes, radius, config.samples_per_cluster, seed=config.seed)
    summary = {
        "d": ds.d,
        "padua_degree": degree,
        "radius": radius,
        "triplets": ds.n_triplets,
        "fill_distance": fill_distance(nodes, plant.sample_box),
        "successors_outside": ds.successors_outside,
    }
    ds.meta.update(summary)
    return ds, summary


def stage_identify(config: ExperimentConfig, dataset: ClusterDataset, dataset_hash: str | None = None) -> SurrogateModel:
    return fit_control_affine(dataset, config.kernel_spec(dataset.centers.shape[1]),
                              pi_variant=config.pi, dataset_hash=dataset_hash)


def stage_bounds(config: ExperimentConfig, model) -> CertifiedBounds:
    plant = config.make_plant()
    return certify(plant, model, grid_steps=config.bound_grid, margin=config.bound_margin,
                   holdout_steps=config.holdout_grid, n_pairs=config.lipschitz_pairs, seed=config.seed)


def stage_terminal(config: ExperimentConfig, model, eta: float, lbar: float,
                   survival: bool = False, survival_limit: int = 100) -> tuple[MPCConfig | None, dict]:
    """Design terminal ingredients and assemble the MPC configuration.

    Returns ``(mpc_config, report)``; ``mpc_config`` is ``None`` when the
    tightened sets or the terminal set do not exist for the configured
    horizon (a certificate failure, not a program error).
    """
    plant = config.make_plant()
    Q = np.array(config.Q, dtype=float)
    R = np.array(config.R, dtype=float)
    box_s, box_u = plant.state_box, plant.input_box
    n_box = max_feasible_horizon(box_s, eta, lbar)
    report = {"eta": eta, "lbar": lbar, "horizon": config.horizon, "n_max_box": n_box}

    def design(N):
        return design_terminal(model, Q, R, box_s, box_u, eta, lbar, N, beta=config.beta,
                               samples=config.terminal_samples, seed=config.seed,
                               gain_R=[[config.resolved_gain_R()]])

    if survival:
        def survives(N):
            try:
                design(N)
            except TerminalError:
                return False
            return True

        report["n_max_terminal"] = max_feasible_horizon(box_s, eta, lbar, limit=min(survival_limit, n_box),
                                                        terminal_survives=survives)
    if config.horizon > n_box:
        report["error"] = f"tightened state set empty for horizon {config.horizon} (N_max = {n_box})"
        return None, report
    try:
        term = design(config.horizon)
    except TerminalError as exc:
        report["error"] = str(exc)
        return None, report
    report["terminal"] = term.report
    cfg = MPCConfig(config.horizon, Q, R, box_s, box_u, eta, lbar, term, SolverSettings())
    return cfg, report


def stage_simulate(config: ExperimentConfig, model, mpc_config: MPCConfig, label: str = "") -> tuple[ClosedLoopTrace, dict]:
    """Closed loop of the true plant; returns the trace and a certificate summary."""
    plant = config.make_plant()
    controller = MPCController(model, mpc_config)
    trace = run_closed_loop(plant, controller, config.x0, config.steps, label=label)
    metrics = trace_metrics(trace)
    inside = plant.state_box.contains(trace.states, tol=0.0)
    summary = {
        **metrics,
        "steps_completed": trace.steps,
        "truncated": trace.truncated,
        "states_outside": int(np.sum(~inside)),
        "deviation_ratio_max": float(np.max(trace.deviation_ratio)) if trace.steps else 0.0,
        "deviation_violations": int(np.sum(trace.deviation_ratio > 1.0)),
        "candidate_inadmissible": int(np.sum(~trace.candidate_admissible)),
        "statuses": sorted(set(trace.statuses)),
    }
    summary["certificate_ok"] = (
        trace.truncated is None and summary["states_outside"] == 0
        and summary["deviation_violations"] == 0 and summary["candidate_inadmissible"] == 0
        and "infeasible" not in summary["statuses"]
    )
    return trace, summary


def run_pipeline(config: ExperimentConfig, label: str = "") -> dict:
    """All stages in memory; returns the intermediate objects keyed by stage."""
    dataset, gen = stage_generate(config)
    model = stage_identify(config, dataset)
    bounds = stage_bounds(config, model)
    mpc_config, term = stage_terminal(config, model, bounds.eta, bounds.lbar)
    out = {"config": config, "dataset": dataset, "generate": gen, "model": model,
           "bounds": bounds, "mpc_config": mpc_config, "terminal": term}
    if mpc_config is not None:
        out["trace"], out["summary"] = stage_simulate(config, model, mpc_config, label)
    return out
