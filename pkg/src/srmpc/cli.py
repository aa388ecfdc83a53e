"""Command-line front end: ``srmpc simulate|analyze|validate|sweep-alpha``.

Exit codes: 0 success, 1 runtime failure (partial outputs are kept), 2
configuration error.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import sys
import tempfile
import time
from dataclasses import replace
from pathlib import Path

import click
import numpy as np

from .config import ExperimentConfig, build_model, build_noise, build_sim_config, load_config
from .errors import ConfigError, SrmpcError

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


def atomic_write(path, text):
    """Write ``text`` to ``path`` through a temporary file and a rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _num(v):
    """Locale-independent shortest round-trip representation."""
    v = float(v)
    if math.isnan(v):
        return "nan"
    return repr(v)


def trace_csv(trace):
    """Per-step table; the final row carries ``z_N``, ``y_N`` and blank inputs."""
    nx, nu, nh = trace.z.shape[1], trace.u.shape[1], trace.eta.shape[1]
    header = (["k"] + [f"z{i + 1}" for i in range(nx)] + [f"y{i + 1}" for i in range(nx)]
              + [f"u{i + 1}" for i in range(nu)] + [f"eta{i + 1}" for i in range(nh)]
              + ["stage_cost", "trace_Sigma", "diverged"])
    buf = io.StringIO()
    out = csv.writer(buf, lineterminator="\n")
    out.writerow(header)
    n = trace.steps
    for k in range(n + 1):
        last = k == n
        row = [str(k)] + [_num(v) for v in trace.z[k]] + [_num(v) for v in trace.y[k]]
        row += [""] * (nu + nh + 1) if last else (
            [_num(v) for v in trace.u[k]] + [_num(v) for v in trace.eta[k]] + [_num(trace.stage_cost[k])])
        row += [_num(np.trace(trace.Sigma[k])), "1" if (last and trace.diverged) else "0"]
        out.writerow(row)
    return buf.getvalue()


def plot_csv(traces, delta=None):
    """Long-format ``controller,k,t,variable,value`` rows for state trajectories."""
    buf = io.StringIO()
    out = csv.writer(buf, lineterminator="\n")
    out.writerow(["controller", "k", "t", "variable", "value"])
    for name, trace in traces.items():
        for k, zk in enumerate(trace.z):
            t = k * delta if delta else k
            for i, v in enumerate(zk):
                out.writerow([name, k, _num(t), f"z{i + 1}", _num(v)])
    return buf.getvalue()


def _dump(obj):
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n"


def _header(cfg: ExperimentConfig):
    return {"config": cfg.source, "config_hash": cfg.digest, "seed": cfg.sim.seed}


def _fail(code, msg):
    click.echo(f"error: {msg}", err=True)
    sys.exit(code)


def _load(path):
    try:
        return load_config(path)
    except ConfigError as exc:
        _fail(EXIT_CONFIG, str(exc))


def _prepare(cfg):
    try:
        return build_model(cfg), build_noise(cfg)
    except SrmpcError as exc:
        _fail(EXIT_CONFIG, str(exc))


def simulate(cfg: ExperimentConfig, out_dir=None, plot=None):
    """Run every configured controller; returns ``(summary dict, ok flag)``."""
    from .sim import run_closed_loop

    if not cfg.controllers:
        raise ConfigError("controllers: at least one controller is required for simulate")
    model, noise = build_model(cfg), build_noise(cfg)
    out = Path(out_dir or cfg.output_dir)
    summary = dict(_header(cfg), runs={})
    traces, ok = {}, True
    for spec in cfg.controllers:
        trace = run_closed_loop(model, noise, build_sim_config(cfg, spec))
        traces[spec.name] = trace
        atomic_write(out / f"trace_{spec.name}.csv", trace_csv(trace))
        summary["runs"][spec.name] = {
            "controller": spec.kind, "alpha": spec.alpha, "steps_completed": trace.steps,
            "diverged": trace.diverged, "divergence_reason": trace.divergence_reason,
            "failure": trace.failure, "closed_loop_cost": trace.closed_loop_cost,
            "max_abs_state": float(np.nanmax(np.abs(trace.z))), "wall_time": round(trace.wall_time, 3),
        }
        ok &= trace.failure is None
    if cfg.plot_csv if plot is None else plot:
        atomic_write(out / "plot_states.csv", plot_csv(traces, cfg.params.get("delta")))
    atomic_write(out / "summary.json", _dump(summary))
    return summary, ok


def _analysis_report(cfg, spec, model, noise):
    from . import loss

    lcfg = loss.LossConfig(tol=spec.tol)
    base = replace(build_sim_config(cfg), controller=spec.controller)
    N = spec.horizon or cfg.sim.steps
    if spec.kind == "alpha_sweep":
        rows = loss.alpha_sweep(model, cfg.sim.y0, cfg.sim.Sigma0, noise, spec.alphas,
                                spec.horizon or cfg.sim.horizon, initial_control=cfg.sim.initial_control)
        vals = [r.expected_loss for r in rows]
        return {"kind": "alpha_sweep", "rows": [vars(r) for r in rows],
                "monotone_decreasing": bool(all(b < a for a, b in zip(vals, vals[1:])))}
    base = replace(base, steps=N)
    plan = loss.nominal_plan(model, cfg.sim.y0, N, lcfg)
    estimate = loss.second_order_estimate(model, plan, cfg.sim.Sigma0, noise)[0]
    if spec.kind == "loss_decomposition":
        _, trace = loss.loss_sample(model, noise, base, cfg.sim.seed, 0, lcfg)
        rep = loss.loss_decomposition(model, trace, lcfg)
        rep.estimate = estimate
        fields = {k: v for k, v in rep.to_dict().items() if not (isinstance(v, float) and math.isnan(v))}
        return dict(kind=spec.kind, **fields)
    if spec.kind == "monte_carlo":
        mc = loss.monte_carlo_loss(model, spec.controller, noise, spec.trials, cfg.sim.seed, base, lcfg)
        return {"kind": spec.kind, "trials": spec.trials, "failures": mc.failures, "mc_mean": mc.mean,
                "mc_stderr": mc.stderr, "estimate": estimate,
                "gap_over_stderr": abs(mc.mean - estimate) / mc.stderr if mc.stderr > 0 else float("inf")}
    study = loss.gamma_scaling_study(model, spec.controller, noise, spec.levels, spec.trials,
                                     cfg.sim.seed, base, lcfg)
    return {"kind": spec.kind, "trials": spec.trials, "slope": study.slope,
            "below_noise_floor": study.below_noise_floor,
            "rows": [dict(vars(r), gap=r.gap, resolved=r.resolved) for r in study.rows]}


def analyze(cfg: ExperimentConfig, out_dir=None):
    if not cfg.analyses:
        raise ConfigError("analysis: at least one analysis must be requested")
    model, noise = build_model(cfg), build_noise(cfg)
    out = Path(out_dir or cfg.output_dir)
    report = dict(_header(cfg), analyses=[])
    for spec in cfg.analyses:
        t0 = time.perf_counter()
        entry = _analysis_report(cfg, spec, model, noise)
        entry["wall_time"] = round(time.perf_counter() - t0, 3)
        report["analyses"].append(entry)
        if spec.kind == "alpha_sweep":
            atomic_write(out / "alpha_sweep.csv", sweep_table(entry["rows"]))
    atomic_write(out / "report.json", _dump(report))
    return report


def sweep_table(rows):
    buf = io.StringIO()
    out = csv.writer(buf, lineterminator="\n")
    out.writerow(["alpha", "expected_loss", "nominal_cost", "excitation", "converged"])
    for r in rows:
        out.writerow([_num(r["alpha"]), _num(r["expected_loss"]), _num(r["nominal_cost"]),
                      _num(r["excitation"]), int(r["converged"])])
    return buf.getvalue()


def _run(fn):
    """Map library errors onto exit codes."""
    try:
        return fn()
    except ConfigError as exc:
        _fail(EXIT_CONFIG, str(exc))
    except (SrmpcError, ArithmeticError) as exc:
        _fail(EXIT_RUNTIME, f"{type(exc).__name__}: {exc}")


@click.group()
def main():
    """Self-reflective MPC experiments."""


@main.command("simulate")
@click.argument("config", type=click.Path(dir_okay=False))
@click.option("--out", "out_dir", type=click.Path(file_okay=False), help="Override the output directory.")
@click.option("--plot/--no-plot", default=None, help="Also write long-format plot data.")
def simulate_cmd(config, out_dir, plot):
    """Run the configured closed loops and write trace CSVs plus summary.json."""
    cfg = _load(config)
    summary, ok = _run(lambda: simulate(cfg, out_dir, plot))
    for name, run in summary["runs"].items():
        state = "diverged" if run["diverged"] else ("FAILED" if run["failure"] else "bounded")
        click.echo(f"{name:>20s}: {state:8s} steps={run['steps_completed']} cost={run['closed_loop_cost']:.4g}")
    if not ok:
        _fail(EXIT_RUNTIME, "a closed loop stopped on a solver failure (partial trace written)")


@main.command("analyze")
@click.argument("config", type=click.Path(dir_okay=False))
@click.option("--out", "out_dir", type=click.Path(file_okay=False), help="Override the output directory.")
def analyze_cmd(config, out_dir):
    """Loss decomposition, Monte-Carlo comparison, noise scaling or alpha sweep."""
    cfg = _load(config)
    report = _run(lambda: analyze(cfg, out_dir))
    for entry in report["analyses"]:
        click.echo(json.dumps({k: v for k, v in entry.items() if k not in ("rows", "delta_stages")}))


@main.command("sweep-alpha")
@click.argument("config", type=click.Path(dir_okay=False))
@click.option("--alphas", default="0.5,1,2", show_default=True, help="Comma-separated trade-off weights.")
@click.option("--horizon", type=int, default=None, help="Prediction horizon (default: sim.horizon).")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), help="Override the output directory.")
def sweep_alpha_cmd(config, alphas, horizon, out_dir):
    """Print the (alpha, expected loss) table of the self-reflective plan."""
    from .config import AnalysisSpec

    cfg = _load(config)
    try:
        values = tuple(float(a) for a in alphas.split(","))
    except ValueError:
        _fail(EXIT_CONFIG, f"--alphas: cannot parse {alphas!r}")
    if min(values) < 0:
        _fail(EXIT_CONFIG, "--alphas: weights must be non-negative")
    model, noise = _prepare(cfg)
    spec = AnalysisSpec(kind="alpha_sweep", alphas=values, horizon=horizon)
    entry = _run(lambda: _analysis_report(cfg, spec, model, noise))
    click.echo(f"{'alpha':>8s}  {'sum L':>10s}")
    for r in entry["rows"]:
        click.echo(f"{r['alpha']:8.3g}  {r['expected_loss']:10.4f}")
    atomic_write(Path(out_dir or cfg.output_dir) / "alpha_sweep.csv", sweep_table(entry["rows"]))


@main.command("validate")
@click.option("--only", default=None, help="Comma-separated criterion numbers (default: all).")
@click.option("--full", is_flag=True, help="Include the long full-scale runs.")
@click.option("--report", type=click.Path(dir_okay=False), help="Write the results as JSON.")
def validate_cmd(only, full, report):
    """Run the acceptance suite and print one line per criterion."""
    from .acceptance import run_all

    try:
        which = None if only is None else [int(s) for s in only.split(",")]
    except ValueError:
        _fail(EXIT_CONFIG, f"--only: cannot parse {only!r}")
    results = run_all(which, full=full, echo=click.echo)
    if report:
        atomic_write(report, _dump([r.to_dict() for r in results]))
    if not all(r.passed for r in results):
        sys.exit(EXIT_RUNTIME)


if __name__ == "__main__":
    main()
