"""Command-line workbench: ``kmpc <command> [options]``.

Artifacts are JSON files in the output directory (CSV for traces).  Every
JSON artifact records the SHA-256 of the configuration fields its stage
depends on and of each input file it was built from; downstream commands
refuse inputs whose recorded hashes no longer match.

Exit codes: 0 success, 1 error, 2 certificate violation.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .bounds import CertifiedBounds, bounds_report_csv
from .data import ClusterDataset
from .experiment import (
    ExperimentConfig,
    canonical_json,
    stage_bounds,
    stage_generate,
    stage_identify,
    stage_simulate,
    stage_terminal,
)
from .mpc import MPCConfig
from .simulate import compare_runs, trace_csv
from .surrogate import SurrogateModel

EXIT_OK, EXIT_ERROR, EXIT_CERTIFICATE = 0, 1, 2

# configuration fields each stage depends on (cumulative)
_STAGE_KEYS = {}
_STAGE_KEYS["dataset"] = ("plant", "d", "samples_per_cluster", "radius", "seed")
_STAGE_KEYS["model"] = _STAGE_KEYS["dataset"] + ("sigma", "jitter", "pi")
_STAGE_KEYS["bounds"] = _STAGE_KEYS["model"] + ("bound_grid", "holdout_grid", "bound_margin", "lipschitz_pairs")
_STAGE_KEYS["controller"] = _STAGE_KEYS["bounds"] + ("horizon", "Q", "R", "beta", "gain_R", "terminal_samples")
_STAGE_KEYS["trace"] = _STAGE_KEYS["controller"] + ("x0", "steps")

FILES = {
    "dataset": "dataset.json",
    "model": "model.json",
    "bounds": "bounds.json",
    "controller": "controller.json",
    "trace": "trace.json",
}


class PipelineError(RuntimeError):
    pass


class CertificateViolation(RuntimeError):
    pass


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def stage_hash(config: ExperimentConfig, kind: str) -> str:
    full = config.to_dict()
    sub = {k: full[k] for k in _STAGE_KEYS[kind]}
    return hashlib.sha256(canonical_json(sub).encode()).hexdigest()


def _dump(path: Path, obj):
    text = json.dumps(obj, sort_keys=True, indent=1, allow_nan=False)
    path.write_text(text + "\n", encoding="utf-8")


def write_artifact(out: Path, kind: str, payload: dict, config: ExperimentConfig, inputs=()) -> Path:
    path = out / FILES[kind]
    prov = {
        "config_sha256": stage_hash(config, kind),
        "inputs": {Path(p).name: sha256_file(p) for p in inputs},
    }
    _dump(path, {"kind": kind, "provenance": prov, **payload})
    return path


def _check_inputs(path: Path, data: dict):
    for name, digest in data.get("provenance", {}).get("inputs", {}).items():
        src = path.parent / name
        if not src.exists():
            raise PipelineError(f"stale pipeline artifact: {path.name} was built from missing {name}")
        if sha256_file(src) != digest:
            raise PipelineError(f"stale pipeline artifact: {path.name} was built from a different {name}")


def load_artifact(out: Path, kind: str, config: ExperimentConfig) -> dict:
    path = out / FILES[kind]
    if not path.exists():
        raise PipelineError(f"missing upstream artifact {path} (run the producing command first)")
    data = json.loads(path.read_text(encoding="utf-8"))
    if data.get("kind") != kind:
        raise PipelineError(f"{path} is not a {kind} artifact")
    if data["provenance"]["config_sha256"] != stage_hash(config, kind):
        raise PipelineError(f"stale pipeline artifact: {path.name} was built with a different configuration")
    _check_inputs(path, data)
    return data


# --- commands ----------------------------------------------------------------

def cmd_generate(config: ExperimentConfig, out: Path) -> int:
    ds, summary = stage_generate(config)
    write_artifact(out, "dataset", {"summary": summary, "dataset": ds.to_dict()}, config)
    print(f"dataset: d={summary['d']} triplets={summary['triplets']} radius={summary['radius']:.6g} "
          f"fill_distance={summary['fill_distance']:.4g}")
    return EXIT_OK


def _load_model(out: Path, config: ExperimentConfig) -> SurrogateModel:
    return SurrogateModel.from_dict(load_artifact(out, "model", config)["model"])


def cmd_identify(config: ExperimentConfig, out: Path) -> int:
    data = load_artifact(out, "dataset", config)
    ds = ClusterDataset.from_dict(data["dataset"])
    ds_path = out / FILES["dataset"]
    model = stage_identify(config, ds, dataset_hash=sha256_file(ds_path))
    offset = model.equilibrium_offset()
    write_artifact(out, "model", {"model": model.to_dict(), "equilibrium_offset": offset}, config, [ds_path])
    print(f"model: d={model.d} pi={model.pi_variant} sigma={model.spec.sigma:.4g} |f(0,0)|={offset:.3e}")
    return EXIT_OK


def cmd_bounds(config: ExperimentConfig, out: Path) -> int:
    model = _load_model(out, config)
    b = stage_bounds(config, model)
    plant = config.make_plant()
    (out / "bounds_grid.csv").write_text(
        bounds_report_csv(plant, model, b, plant.state_box, plant.input_box, config.bound_grid), encoding="utf-8")
    write_artifact(out, "bounds", {"bounds": b.to_dict()}, config, [out / FILES["model"]])
    prop = f"c_x={b.c_x:.4g} c_u={b.c_u:.4g}" if b.proportional else "not proportional"
    print(f"bounds: eta={b.eta:.4g} lbar={b.lbar:.4g} {prop} holdout_violation_rate={b.violation_rate:.3g}")
    return EXIT_OK


def cmd_terminal(config: ExperimentConfig, out: Path, eta=None, lbar=None, survival=False) -> int:
    model = _load_model(out, config)
    bdata = load_artifact(out, "bounds", config)
    b = CertifiedBounds.from_dict(bdata["bounds"])
    eta = b.eta if eta is None else float(eta)
    lbar = b.lbar if lbar is None else float(lbar)
    mpc_config, report = stage_terminal(config, model, eta, lbar, survival=survival)
    print(f"N_max (box rule) = {report['n_max_box']}")
    if "n_max_terminal" in report:
        print(f"N_max (terminal-set survival) = {report['n_max_terminal']}")
    if mpc_config is None:
        raise CertificateViolation(report["error"])
    payload = {"controller": mpc_config.to_dict(), "report": report,
               "overrides": {"eta": eta != b.eta, "lbar": lbar != b.lbar}}
    write_artifact(out, "controller", payload, config, [out / FILES["model"], out / FILES["bounds"]])
    t = mpc_config.terminal
    print(f"terminal: K={np.round(t.K, 4).tolist()} c={t.c:.4g} beta={t.beta}")
    return EXIT_OK


def cmd_simulate(config: ExperimentConfig, out: Path, label: str = "") -> int:
    model = _load_model(out, config)
    cdata = load_artifact(out, "controller", config)
    mpc_config = MPCConfig.from_dict(cdata["controller"])
    trace, summary = stage_simulate(config, model, mpc_config, label)
    csv_path = out / "trace.csv"
    csv_path.write_text(trace_csv(trace), encoding="utf-8")
    write_artifact(out, "trace", {"summary": summary, "label": label}, config,
                   [out / FILES["model"], out / FILES["controller"], csv_path])
    print(f"simulate: final |x|={summary['final_error']:.3e} plateau={summary['plateau']:.3e} "
          f"deviation_ratio_max={summary['deviation_ratio_max']:.3f}")
    if not summary["certificate_ok"]:
        raise CertificateViolation(f"closed-loop certificate violated: {summary}")
    return EXIT_OK


def run_all(config: ExperimentConfig, out: Path, label: str = "") -> int:
    out.mkdir(parents=True, exist_ok=True)
    _dump(out / "config.json", config.to_dict())
    for step in (cmd_generate, cmd_identify, cmd_bounds, cmd_terminal):
        step(config, out)
    return cmd_simulate(config, out, label)


FIG1_RUNS = [(352, False), (352, True), (1327, False), (1327, True)]


def fig1_label(d: int, pi: bool) -> str:
    return f"d{d}_{'PI-kEDMD' if pi else 'kEDMD'}"


def _fig1_worker(args):
    cfg_dict, out = args
    config = ExperimentConfig.from_dict(cfg_dict)
    label = fig1_label(config.d, config.pi)
    try:
        code = run_all(config, Path(out), label)
    except CertificateViolation as exc:
        print(f"{label}: {exc}", file=sys.stderr)
        code = EXIT_CERTIFICATE
    return label, code


def thread_cap() -> int:
    raw = os.environ.get("KMPC_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            raise PipelineError(f"KMPC_THREADS must be a positive integer, got {raw!r}")
    return os.cpu_count() or 1


def cmd_reproduce_fig1(config: ExperimentConfig, out: Path) -> int:
    """Frozen preset: the default study for both cluster counts and both fits."""
    jobs = []
    for d, pi in FIG1_RUNS:
        data = config.to_dict()
        data.update(d=d, pi=pi, sigma=None, gain_R=None)
        cfg = ExperimentConfig.from_dict(data)
        jobs.append((cfg.to_dict(), str(out / fig1_label(d, pi))))
    workers = min(thread_cap(), len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_fig1_worker, jobs))
    else:
        results = [_fig1_worker(j) for j in jobs]
    traces = []
    labels = []
    summary = {}
    for (label, code), (_, run_dir) in zip(results, jobs):
        run_dir = Path(run_dir)
        summary[label] = {"exit_code": code}
        if (run_dir / FILES["trace"]).exists():
            summary[label].update(json.loads((run_dir / FILES["trace"]).read_text())["summary"])
            traces.append(_norms_from_csv(run_dir / "trace.csv"))
            labels.append(label)
    (out / "fig1.csv").write_text(compare_runs(traces, labels), encoding="utf-8")
    _dump(out / "fig1.json", {"runs": summary,
                              "inputs": {f"{lab}/trace.csv": sha256_file(out / lab / "trace.csv") for lab in labels}})
    for label, s in summary.items():
        if "final_error" in s:
            print(f"{label}: final |x|={s['final_error']:.3e} plateau={s['plateau']:.3e} exit={s['exit_code']}")
        else:
            print(f"{label}: exit={s['exit_code']}")
    codes = [c for _, c in results]
    return max(codes) if codes else EXIT_OK


def _norms_from_csv(path: Path) -> np.ndarray:
    rows = path.read_text(encoding="utf-8").splitlines()
    head = rows[0].split(",")
    cols = [i for i, h in enumerate(head) if h.startswith("x")]
    return np.array([np.linalg.norm([float(r.split(",")[i]) for i in cols]) for r in rows[1:]])


def cmd_verify(out: Path, config: ExperimentConfig | None = None) -> int:
    """Check the provenance of every artifact below ``out``."""
    found = 0
    code = EXIT_OK
    for path in sorted(out.rglob("*.json")):
        data = json.loads(path.read_text(encoding="utf-8"))
        if not isinstance(data, dict) or "provenance" not in data:
            continue
        found += 1
        kind = data["kind"]
        cfg = config
        if cfg is None:
            cfg_path = path.parent / "config.json"
            if not cfg_path.exists():
                raise PipelineError(f"no config.json next to {path}")
            cfg = ExperimentConfig.from_dict(json.loads(cfg_path.read_text(encoding="utf-8")))
        if data["provenance"]["config_sha256"] != stage_hash(cfg, kind):
            raise PipelineError(f"stale pipeline artifact: {path} (configuration changed)")
        _check_inputs(path, data)
        ok = True
        if kind == "trace" and not data["summary"]["certificate_ok"]:
            ok = False
            code = EXIT_CERTIFICATE
        print(f"{'ok  ' if ok else 'FAIL'} {path.relative_to(out)}")
    if found == 0:
        raise PipelineError(f"no pipeline artifacts found under {out}")
    return code


# --- argument handling ---------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="experiment config JSON (default: <out>/config.json if present)")
    common.add_argument("--seed", type=int, help="data-generation seed")
    common.add_argument("--out", type=Path, default=Path("runs"), help="artifact directory")
    common.add_argument("--d", type=int, help="number of virtual observation points")
    common.add_argument("--pi", action=argparse.BooleanOptionalAction, default=None,
                        help="pin the drift regression at the origin cluster")
    common.add_argument("--horizon", type=int, help="MPC prediction horizon")
    common.add_argument("--steps", type=int, help="closed-loop simulation length")

    p = argparse.ArgumentParser(prog="kmpc", description="kernel EDMD surrogate MPC workbench")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="sample the clustered data set")
    sub.add_parser("identify", parents=[common], help="fit the kEDMD surrogate")
    sub.add_parser("bounds", parents=[common], help="estimate error and Lipschitz bounds")
    t = sub.add_parser("terminal", parents=[common], help="terminal ingredients and controller file")
    t.add_argument("--eta", type=float, help="override the uniform error bound")
    t.add_argument("--lbar", type=float, help="override the Lipschitz bound")
    t.add_argument("--survival", action="store_true", help="also report the terminal-set survival horizon")
    sub.add_parser("simulate", parents=[common], help="closed loop against the true plant")
    sub.add_parser("run", parents=[common], help="all stages in sequence")
    sub.add_parser("reproduce-fig1", parents=[common], help="four-configuration comparison")
    sub.add_parser("verify", parents=[common], help="check artifact provenance")
    return p


def resolve_config(args) -> ExperimentConfig:
    if args.config is not None:
        config = ExperimentConfig.from_dict(json.loads(Path(args.config).read_text(encoding="utf-8")))
    elif (args.out / "config.json").exists() and args.command not in ("generate", "reproduce-fig1", "run"):
        config = ExperimentConfig.from_dict(json.loads((args.out / "config.json").read_text(encoding="utf-8")))
    else:
        config = ExperimentConfig()
    return config.replace(seed=args.seed, d=args.d, pi=args.pi, horizon=args.horizon, steps=args.steps)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        out = args.out
        if args.command == "verify":
            explicit = args.config is not None or any(
                v is not None for v in (args.seed, args.d, args.pi, args.horizon, args.steps))
            return cmd_verify(out, resolve_config(args) if explicit else None)
        config = resolve_config(args)
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "reproduce-fig1":
            return cmd_reproduce_fig1(config, out)
        if args.command == "run":
            return run_all(config, out)
        commands = {
            "generate": lambda: cmd_generate(config, out),
            "identify": lambda: cmd_identify(config, out),
            "bounds": lambda: cmd_bounds(config, out),
            "terminal": lambda: cmd_terminal(config, out, args.eta, args.lbar, args.survival),
            "simulate": lambda: cmd_simulate(config, out),
        }
        code = commands[args.command]()
        # the directory config follows the last successful stage
        _dump(out / "config.json", config.to_dict())
        return code
    except CertificateViolation as exc:
        print(f"certificate violation: {exc}", file=sys.stderr)
        return EXIT_CERTIFICATE
    except (PipelineError, ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
