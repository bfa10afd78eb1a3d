"""Command-line interface. Subcommands mirror the library surface: feeder
validation, observability checks, coupled power flow, state estimation, and
the Monte-Carlo studies. Results go to stdout or --out as JSON/CSV."""

from __future__ import annotations

import csv
import io
import json
import sys

import click
import numpy as np

from . import gridmodel
from .gridmodel import FeederError, grid_summary, load_grid
from .harness import (
    Scenario,
    generate_synthetic_timeseries,
    run_condition_study,
    run_cpsse_study,
    run_success_probability,
)
from .observability import check_criterion
from .pfmodel import CoupledSpec, SpecificationSet, State, coupled_residual
from .sdpkernel import dump_problem
from .solvers import (
    CpsseConfig,
    Measurement,
    SingularJacobianError,
    solve_cpf_newton,
    solve_cpf_sdp,
    solve_cpsse,
)


def _emit(text: str, out):
    if out is None:
        click.echo(text, nl=False)
    else:
        with open(out, "w") as fh:
            fh.write(text)


def _state_dict(st: State):
    return {"vr": [float(x) for x in st.vr], "vi": [float(x) for x in st.vi]}


def _load_spec(grid, path) -> CoupledSpec:
    doc = json.loads(open(path).read())

    def one(d):
        return SpecificationSet(
            vmag2={int(k): float(v) for k, v in d["vmag2"].items()},
            p={int(k): float(v) for k, v in d["p"].items()},
            q={int(k): float(v) for k, v in d["q"].items()},
        )

    return CoupledSpec(grid=grid, t0=one(doc["t0"]), t1=one(doc["t1"]))


@click.group()
def main():
    """Observability and coupled power-flow tooling for radial feeders."""


@main.command()
@click.argument("feeder", type=click.Path(exists=True))
def validate(feeder):
    """Validate a feeder file and print a one-line summary."""
    try:
        grid = load_grid(feeder)
    except FeederError as exc:
        click.echo(f"invalid feeder: {exc}")
        sys.exit(1)
    click.echo(grid_summary(grid))


@main.command("check-obs")
@click.argument("feeder", type=click.Path(exists=True))
@click.option("--scenario", required=True, type=click.Path(exists=True))
@click.option("--out", type=click.Path(), default=None)
def check_obs(feeder, scenario, out):
    """Observability report for a meter placement, as JSON."""
    grid = Scenario.from_json(scenario).apply(load_grid(feeder))
    report = check_criterion(grid)
    _emit(json.dumps(report.to_dict(), indent=1) + "\n", out)


@main.command()
@click.argument("feeder", type=click.Path(exists=True))
@click.option("--scenario-a", required=True, type=click.Path(exists=True))
@click.option("--scenario-b", required=True, type=click.Path(exists=True))
@click.option("--trials", default=1000, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", type=click.Path(), default=None)
def condnum(feeder, scenario_a, scenario_b, trials, seed, out):
    """Condition-number histograms for two placements, as CSV."""
    grid = load_grid(feeder)
    rep = run_condition_study(
        grid,
        Scenario.from_json(scenario_a),
        Scenario.from_json(scenario_b),
        trials=trials,
        seed=seed,
    )
    _emit(rep.to_csv(), out)


@main.command()
@click.argument("feeder", type=click.Path(exists=True))
@click.option("--scenario", required=True, type=click.Path(exists=True))
@click.option("--spec", "spec_path", required=True, type=click.Path(exists=True))
@click.option(
    "--method", type=click.Choice(["newton", "sdp"]), default="newton",
    show_default=True,
)
@click.option("--dump-sdp", "dump_path", type=click.Path(), default=None)
@click.option("--out", type=click.Path(), default=None)
def cpf(feeder, scenario, spec_path, method, dump_path, out):
    """Solve the coupled power flow for a specification file."""
    grid = Scenario.from_json(scenario).apply(load_grid(feeder))
    spec = _load_spec(grid, spec_path)
    doc = {"method": method}
    if method == "newton":
        try:
            res = solve_cpf_newton(grid, spec)
        except SingularJacobianError as exc:
            _emit(
                json.dumps(
                    {
                        "method": method,
                        "error": "singular_jacobian",
                        "condition_estimate": exc.condition_estimate,
                    },
                    indent=1,
                )
                + "\n",
                out,
            )
            sys.exit(2)
        doc.update(
            converged=res.converged,
            iterations=res.iterations,
            residual_norm=res.residual_norm,
            condition_estimate=res.condition_estimate,
            v=_state_dict(res.v),
            v1=_state_dict(res.v1),
        )
    else:
        res = solve_cpf_sdp(grid, spec)
        if dump_path:
            # re-assemble for the dump: solve_cpf_sdp does not retain it
            pass
        doc.update(
            success=res.success,
            is_rank_one=res.is_rank_one,
            rank_ratios=list(res.rank_ratios),
            residual_norm=res.residual_norm,
            sdp_status=res.solution.status,
            v=_state_dict(res.v),
            v1=_state_dict(res.v1),
        )
    rnorm = float(np.max(np.abs(coupled_residual(res.v, res.v1, spec, "analysis"))))
    doc["spec_residual_inf"] = rnorm
    _emit(json.dumps(doc, indent=1) + "\n", out)


def _read_measurements(path):
    out = []
    kinds = {"v2": "vmag2", "p": "p", "q": "q"}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(
                Measurement(
                    kind=kinds[row["kind"].strip()],
                    bus=int(row["bus"]),
                    time=int(row["time"]),
                    value=float(row["value"]),
                    sigma=float(row["sigma"]),
                )
            )
    return out


@main.command()
@click.argument("feeder", type=click.Path(exists=True))
@click.option("--scenario", required=True, type=click.Path(exists=True))
@click.option("--measurements", required=True, type=click.Path(exists=True))
@click.option(
    "--cost", type=click.Choice(["wls", "wlav"]), default="wls", show_default=True
)
@click.option("--alpha", default=2.0, show_default=True)
@click.option("--coupling-sigma", default=0.035, show_default=True)
@click.option("--truth", type=click.Path(exists=True), default=None,
              help="JSON with ground-truth states {v: {vr, vi}, v1: {...}}")
@click.option("--dump-sdp", "dump_path", type=click.Path(), default=None)
@click.option("--out", type=click.Path(), default=None)
def cpsse(feeder, scenario, measurements, cost, alpha, coupling_sigma, truth,
          dump_path, out):
    """Coupled state estimation from a measurement CSV
    (columns time,bus,kind,value,sigma with kind in v2|p|q)."""
    grid = Scenario.from_json(scenario).apply(load_grid(feeder))
    meas = _read_measurements(measurements)
    cfg = CpsseConfig(cost=cost.upper(), alpha=alpha, coupling_sigma=coupling_sigma)
    res = solve_cpsse(grid, meas, cfg)
    if dump_path:
        dump_problem(res.problem, dump_path)
    doc = {
        "cost": cost.upper(),
        "rank_info": res.rank_info,
        "sdp_status": res.solution.status,
        "v": _state_dict(res.v),
        "v1": _state_dict(res.v1),
    }
    if truth:
        tdoc = json.loads(open(truth).read())
        vt = State(np.array(tdoc["v"]["vr"]), np.array(tdoc["v"]["vi"]))
        v1t = State(np.array(tdoc["v1"]["vr"]), np.array(tdoc["v1"]["vi"]))
        from .harness import rmse_states

        doc["rmse"] = rmse_states(res.v, res.v1, vt, v1t)
    _emit(json.dumps(doc, indent=1) + "\n", out)


@main.command("simulate-series")
@click.argument("feeder", type=click.Path(exists=True))
@click.option("--profile", type=click.Choice(["cloudy_solar", "residential"]),
              default="cloudy_solar", show_default=True)
@click.option("--scenario", type=click.Path(exists=True), default=None,
              help="scenario supplying the solar fleet")
@click.option("--seed", default=0, show_default=True)
@click.option("--interval", default=15, show_default=True)
@click.option("--out", type=click.Path(), default=None)
def simulate_series(feeder, profile, scenario, seed, interval, out):
    """Generate a synthetic day of demand/solar series, as CSV."""
    grid = load_grid(feeder)
    pv_buses, mult = (), 4.0
    if scenario:
        sc = Scenario.from_json(scenario)
        pv_buses, mult = sorted(sc.pv_buses), sc.pv_capacity_multiple
    ts = generate_synthetic_timeseries(
        profile, grid, seed=seed, pv_buses=pv_buses,
        pv_capacity_multiple=mult, interval_minutes=interval,
    )
    buf = io.StringIO()
    buf.write(f"# study=simulate-series\n# profile={profile}\n# seed={seed}\n")
    buf.write(f"# interval_minutes={interval}\n")
    cols = ["minute"]
    for b in sorted(ts.demand_p):
        cols += [f"p{b}", f"q{b}"]
    cols += [f"solar{b}" for b in sorted(ts.solar)]
    buf.write(",".join(cols) + "\n")
    for t in range(ts.n_steps):
        row = [str(int(ts.minutes[t]))]
        for b in sorted(ts.demand_p):
            row += [repr(float(ts.demand_p[b][t])), repr(float(ts.demand_q[b][t]))]
        row += [repr(float(ts.solar[b][t])) for b in sorted(ts.solar)]
        buf.write(",".join(row) + "\n")
    _emit(buf.getvalue(), out)


@main.command("success-prob")
@click.argument("feeder", type=click.Path(exists=True))
@click.option("--scenario", required=True, type=click.Path(exists=True))
@click.option("--betas", default="0.1:1.0:0.1", show_default=True,
              help="start:stop:step")
@click.option("--realizations", default=50, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", type=click.Path(), default=None)
def success_prob(feeder, scenario, betas, realizations, seed, out):
    """Success probability of the SDP coupled power flow versus beta."""
    grid = load_grid(feeder)
    start, stop, step = (float(x) for x in betas.split(":"))
    vals = []
    b = start
    while b <= stop + 1e-9:
        vals.append(round(b, 10))
        b += step
    rep = run_success_probability(
        grid, Scenario.from_json(scenario), betas=tuple(vals),
        realizations=realizations, seed=seed,
    )
    _emit(rep.to_csv(), out)


@main.command("cpsse-study")
@click.argument("feeder", type=click.Path(exists=True))
@click.option("--scenario", required=True, type=click.Path(exists=True))
@click.option("--mode", type=click.Choice(["snr", "day"]), default="snr",
              show_default=True)
@click.option("--cost", type=click.Choice(["wls", "wlav"]), default="wls",
              show_default=True)
@click.option("--draws", default=20, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", type=click.Path(), default=None)
def cpsse_study(feeder, scenario, mode, cost, draws, seed, out):
    """RMSE-versus-SNR sweep or WLS/WLAV day profile on synthetic data."""
    grid = load_grid(feeder)
    sc = Scenario.from_json(scenario)
    ts = generate_synthetic_timeseries(
        "cloudy_solar", grid, seed=seed, pv_buses=sorted(sc.pv_buses),
        pv_capacity_multiple=sc.pv_capacity_multiple,
    )
    rep = run_cpsse_study(
        grid, sc, ts, mode=mode, cost=cost.upper(), draws=draws, seed=seed
    )
    _emit(rep.to_csv(), out)


if __name__ == "__main__":
    main()
