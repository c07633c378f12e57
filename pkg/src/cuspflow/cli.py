"""Command-line entry point: ``cuspflow {validate,run,potential,report}``.

Exit codes: 0 success, 1 validation failure (bad config, failed self-test,
missing input), 2 runtime failure (integrator abort, unreadable artifacts).
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
import traceback
from pathlib import Path

import numpy as np

from . import __version__
from . import diagnostics as diag
from . import io as cio
from .atlas import GeometryError
from .config import ConfigError, RunConfig, load_config, output_directory
from .flow import FlowError, initial_data, initial_state, iterate, sup_R_minus_rho
from .geometry import make_geometry
from .potential import SolverError, solve_potential
from .selftest import run_battery
from .svgplot import line_chart

log = logging.getLogger("cuspflow")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2

CSV_NAME = "timeseries.csv"
SUMMARY_NAME = "summary.json"
FAILED_NAME = "FAILED"
PLOTS = (
    ("sup_R_minus_rho", "sup |R - rho|", True),
    ("sup_h", "sup h", True),
    ("area", "area", False),
    ("decay_norm", "decay norm of u - lambda_j", False),
)


# ----------------------------------------------------------------- helpers
def _geometry(cfg: RunConfig):
    return make_geometry(cfg.surface, cfg.discretization)


def _initial_metric(cfg: RunConfig, background):
    ini = cfg.initial
    rho = cfg.flow.rho if cfg.flow.rho_mode == "explicit" and cfg.flow.rho else -2.0
    return initial_data(background, ini.bumps, ini.end_perturbations(cfg.surface.n_ends),
                        base=ini.base, rho=rho)


def _fit_dict(fit, window):
    if fit is None:
        return None
    return {"C": fit.C, "rate": fit.rate, "r2": fit.r2, "n": fit.n, "window": list(window)}


def build_summary(cfg: RunConfig, records, final, status: str, stop_reason: str,
                  steps: int, error: str | None = None) -> dict:
    """Summary JSON content; deterministic (no timings or host data)."""
    n_ends = cfg.surface.n_ends
    chi = cfg.surface.euler
    out = {
        "cuspflow_version": __version__, "csv_version": diag.CSV_VERSION,
        "status": status, "stop_reason": stop_reason, "steps": steps,
        "records": len(records), "chi": chi, "error": error,
    }
    if not records:
        return out
    r0, r1 = records[0], records[-1]
    areas = np.array([r.area for r in records])
    out.update({
        "t_final": r1.t, "rho": r1.rho,
        "sup_R_minus_rho": {"initial": r0.sup_R_minus_rho, "final": r1.sup_R_minus_rho},
        "gauss_bonnet_defect": {"initial": r0.gb_defect, "final": r1.gb_defect},
        "area": {"initial": r0.area, "final": r1.area,
                 "max_relative_change": float(np.max(np.abs(areas - r0.area)) / r0.area),
                 "law_limit": (4 * math.pi * chi / r1.rho) if r1.rho else None},
        "residual_max": {
            ch: _nanmax([abs(getattr(r, ch)) for r in records])
            for ch in ("res_area", "res_curvature", "res_trace", "res_h")
        },
        "sup_u_change_final": r1.sup_u_change,
    })
    ends = []
    lam_target = (-2.0 / r1.rho) if r1.rho else None
    for j in range(n_ends):
        ends.append({
            "end": j, "sigma": cfg.surface.sigma[j],
            "lambda": {"initial": r0.lam[j], "final": r1.lam[j], "limit": lam_target},
            "end_curvature": {"initial": r0.end_curvature[j], "final": r1.end_curvature[j],
                              "limit": r1.rho},
            "decay_norm": {"initial": r0.decay_norm[j],
                           "max_t_le_1": _nanmax([r.decay_norm[j] for r in records if r.t <= 1.0]),
                           "final": r1.decay_norm[j]},
        })
    out["ends"] = ends
    if status == "completed":
        fits = diag.convergence_fits(records)
        win = fits["window"]
        out["transient_end"] = diag.transient_end(records)
        out["fits"] = {ch: _fit_dict(fits[ch], win) for ch in ("sup_R_minus_rho", "sup_h")}
    return out


def _nanmax(vals):
    a = np.asarray(vals, dtype=float)
    a = a[np.isfinite(a)]
    return float(a.max()) if a.size else None


def write_plots(directory: Path, records, n_ends: int) -> list[str]:
    t = np.array([r.t for r in records])
    names = []
    for ch, title, log_y in PLOTS:
        if ch == "decay_norm":
            series = {f"end {j}": (t, [r.decay_norm[j] for r in records]) for j in range(n_ends)}
        else:
            series = {ch: (t, [getattr(r, ch) for r in records])}
        name = f"{ch}.svg"
        (directory / name).write_text(line_chart(series, title, "t", ch, log_y=log_y))
        names.append(name)
    return names


# ---------------------------------------------------------------- commands
def cmd_validate(cfg: RunConfig, outdir: Path) -> int:
    _, background = _geometry(cfg)
    checks = run_battery(background)
    ok = all(c.passed for c in checks)
    outdir.mkdir(parents=True, exist_ok=True)
    cio.write_json(outdir / "validate.json", {
        "passed": ok, "checks": [c.to_dict() for c in checks],
        "config": cfg.to_dict(),
    })
    for c in checks:
        print(f"{'PASS' if c.passed else 'FAIL'}  {c.name:24s} {c.value:.3e}  (tol {c.tol:.1e})")
    return EXIT_OK if ok else EXIT_INVALID


def cmd_run(cfg: RunConfig, outdir: Path) -> int:
    outdir.mkdir(parents=True, exist_ok=True)
    marker = outdir / FAILED_NAME
    if marker.exists():
        marker.unlink()
    cio.write_json(outdir / "config.json", cfg.to_dict())
    fmt = set(cfg.output.formats)
    n_ends = cfg.surface.n_ends
    fcfg = cfg.flow

    _, background = _geometry(cfg)
    metric0 = _initial_metric(cfg, background)
    state = initial_state(metric0, fcfg)
    if "checkpoint" in fmt:
        cio.save_checkpoint(outdir / "checkpoint_initial.cfk", state)
    rec = diag.Recorder(state, fcfg)

    last, steps, error = state, 0, None
    try:
        for st in iterate(state, fcfg, lambda s: sup_R_minus_rho(s) < fcfg.stop_tol):
            if st is state:
                continue
            steps += 1
            last = st
            if steps % fcfg.cadence == 0:
                rec.push(st)
        if steps and steps % fcfg.cadence:
            rec.push(last)
    except Exception as exc:  # integrator abort: keep what we have
        error = exc
        if isinstance(exc, FlowError) and exc.state is not None:
            last = exc.state
    records = rec.finish()

    if error is None:
        status = "completed"
        eps = 1e-12 * max(1.0, fcfg.t_final)
        stop_reason = "t_final" if last.t >= fcfg.t_final - eps else "stop_tol"
    else:
        status, stop_reason = "failed", "error"

    if "csv" in fmt:
        cio.write_timeseries(outdir / CSV_NAME, records, n_ends)
    summary = build_summary(cfg, records, last, status, stop_reason, steps,
                            None if error is None else f"{type(error).__name__}: {error}")
    if "json" in fmt or error is not None:
        cio.write_json(outdir / SUMMARY_NAME, summary)
    if "checkpoint" in fmt:
        cio.save_checkpoint(outdir / ("checkpoint_final.cfk" if error is None
                                      else "checkpoint_last.cfk"), last)
    if "svg" in fmt and records:
        write_plots(outdir, records, n_ends)
    if cfg.output.field_dump:
        R = last.R.values
        fields = {"u": last.metric.u.values, "R": R}
        if last.f is not None:
            fields["f"] = last.f.values
        cio.write_fields(outdir / "fields_final.bin", last.atlas, fields, {"t": last.t})

    if error is not None:
        dump = {
            "error": f"{type(error).__name__}: {error}",
            "traceback": traceback.format_exception(type(error), error, error.__traceback__),
            "t_last_good": last.t, "dt_last": last.dt, "steps": steps,
            "last_record": records[-1].flat() if records else None,
        }
        marker.write_text(cio.dumps_json(dump) + "\n")
        print(f"run failed at t = {last.t:.6g}: {error}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"run completed: t = {last.t:.6g}, {steps} steps, "
          f"sup|R - rho| = {records[-1].sup_R_minus_rho:.3e} ({stop_reason})")
    return EXIT_OK


def cmd_potential(cfg: RunConfig, checkpoint: Path, outdir: Path) -> int:
    if not checkpoint.is_file():
        print(f"error: checkpoint {checkpoint} does not exist", file=sys.stderr)
        return EXIT_INVALID
    state, pre = cio.load_checkpoint(checkpoint)
    expect = cio.geometry_header(make_geometry(cfg.surface, cfg.discretization)[0])
    got = {k: pre[k] for k in ("surface", "discretization")}
    if cio.dumps_json(expect) != cio.dumps_json(got):
        print("error: checkpoint geometry differs from the config", file=sys.stderr)
        return EXIT_INVALID
    metric = state.metric
    sol = solve_potential(metric)
    area = state.area
    outdir.mkdir(parents=True, exist_ok=True)
    cio.write_fields(outdir / "potential_f.bin", metric.atlas, {"f": sol.f.values},
                     {"t": state.t, "source": checkpoint.name})
    cio.write_json(outdir / "potential.json", {
        "source": checkpoint.name, "t": state.t,
        "c": list(sol.c), "beta": list(sol.beta),
        "sup_grad_f": sol.grad_bound, "integral_f": sol.mean_residual,
        "area": area, "integral_f_over_area": sol.mean_residual / area,
        "rbar": sol.rbar, "multiplier": sol.multiplier, "projected_mass": sol.projected_mass,
        "residual_backward": sol.residual, "residual_abs": sol.residual_abs,
    })
    cs = ", ".join(f"{c:.6g}" for c in sol.c)
    print(f"potential: c = [{cs}], sup|grad f| = {sol.grad_bound:.3e}, "
          f"|int f dA| / A = {sol.mean_residual / area:.3e}")
    return EXIT_OK


def render_report(run_dir: Path) -> str:
    """Markdown report from the artifacts of a run directory (no physics recomputed).

    Raises
    ------
    ArtifactError
        Listing every artifact that exists but cannot be parsed.
    """
    bad, summary, cols = [], None, None
    sp, cp = run_dir / SUMMARY_NAME, run_dir / CSV_NAME
    if sp.exists():
        try:
            summary = cio.read_json(sp)
            if not isinstance(summary, dict):
                raise cio.ArtifactError(f"{sp}: not an object")
        except cio.ArtifactError as exc:
            bad.append(str(exc))
    if cp.exists():
        try:
            _, cols = cio.read_timeseries(cp)
        except cio.ArtifactError as exc:
            bad.append(str(exc))
    if bad:
        raise cio.ArtifactError("unreadable artifacts:\n  " + "\n  ".join(bad))
    if summary is None and cols is None:
        raise cio.ArtifactError(f"no run artifacts in {run_dir}")
    failed = (run_dir / FAILED_NAME).exists()
    summary = summary or {}
    status = summary.get("status", "failed" if failed else "partial")

    def g(x):
        return "n/a" if x is None else (f"{x:.6g}" if isinstance(x, float) else str(x))

    L = [f"# cuspflow run report: {run_dir.name}", "", f"Status: **{status}**"]
    if failed or status != "completed":
        L.append(f"Failure: {summary.get('error') or 'see FAILED marker'}")
    L += ["", "## Run", "", "| quantity | value |", "|---|---|"]
    for k in ("t_final", "steps", "records", "rho", "chi", "stop_reason"):
        L.append(f"| {k} | {g(summary.get(k))} |")

    gb = summary.get("gauss_bonnet_defect")
    if gb is None and cols is not None and cols["gb_defect"].size:
        gb = {"initial": float(cols["gb_defect"][0]), "final": float(cols["gb_defect"][-1])}
    L += ["", "## Geometry", ""]
    if gb:
        L.append(f"Gauss-Bonnet defect (int R dA - 4 pi chi): initial {g(gb['initial'])}, "
                 f"final {g(gb['final'])}")
    else:
        L.append("Gauss-Bonnet defect: not recorded")
    if "area" in summary:
        a = summary["area"]
        L.append(f"Area: initial {g(a['initial'])}, final {g(a['final'])}, "
                 f"max relative change {g(a['max_relative_change'])}")

    L += ["", "## Convergence", ""]
    fits = summary.get("fits")
    if status != "completed" or not fits:
        L.append("**Convergence section missing**: the run did not complete, so no rates were fitted.")
    else:
        L += ["| channel | rate | r2 | samples | window |", "|---|---|---|---|---|"]
        for ch, f in fits.items():
            if f is None:
                L.append(f"| {ch} | n/a | n/a | 0 | n/a |")
            else:
                L.append(f"| {ch} | {g(f['rate'])} | {g(f['r2'])} | {f['n']} | "
                         f"[{g(f['window'][0])}, {g(f['window'][1])}] |")
        L.append("")
        L.append(f"sup|R - rho|: initial {g(summary['sup_R_minus_rho']['initial'])}, "
                 f"final {g(summary['sup_R_minus_rho']['final'])}")

    ends = summary.get("ends")
    if ends:
        L += ["", "## Ends", "",
              "| end | sigma | lambda initial | lambda final | lambda limit "
              "| end curvature final | curvature limit | decay norm initial | decay norm max (t<=1) |",
              "|---|---|---|---|---|---|---|---|---|"]
        for e in ends:
            L.append(f"| {e['end']} | {g(e['sigma'])} | {g(e['lambda']['initial'])} | "
                     f"{g(e['lambda']['final'])} | {g(e['lambda']['limit'])} | "
                     f"{g(e['end_curvature']['final'])} | {g(e['end_curvature']['limit'])} | "
                     f"{g(e['decay_norm']['initial'])} | {g(e['decay_norm']['max_t_le_1'])} |")
    res = summary.get("residual_max")
    if res:
        L += ["", "## Identity residuals (sup over the run)", "", "| channel | max |", "|---|---|"]
        L += [f"| {k} | {g(v)} |" for k, v in sorted(res.items())]

    svgs = sorted(p.name for p in run_dir.glob("*.svg"))
    if svgs:
        L += ["", "## Plots", ""]
        L += [f"![{Path(s).stem}]({s})" for s in svgs]
    return "\n".join(L) + "\n"


def cmd_report(run_dir: Path, output: Path | None) -> int:
    if not run_dir.is_dir():
        print(f"error: {run_dir} is not a directory", file=sys.stderr)
        return EXIT_INVALID
    try:
        text = render_report(run_dir)
    except cio.ArtifactError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    (output or run_dir / "report.md").write_text(text)
    print(text, end="")
    return EXIT_OK


# ------------------------------------------------------------------ parser
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cuspflow", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"cuspflow {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True):
        if config_required:
            sp.add_argument("config", type=Path)
        else:
            sp.add_argument("config", type=Path, nargs="?", default=None,
                            help="TOML file (default: the shipped benchmark config)")
        sp.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY.PATH=VALUE", help="override any config key")
        sp.add_argument("--output", type=Path, default=None, help="output directory")

    common(sub.add_parser("validate", help="self-test the operators on the configured geometry"),
           config_required=False)
    sp = sub.add_parser("run", help="integrate the flow and write artifacts")
    common(sp, config_required=False)
    sp.add_argument("--rho-mode", choices=("area_preserving", "explicit", "unnormalized"))
    sp = sub.add_parser("potential", help="solve for the potential of a checkpointed metric")
    common(sp)
    sp.add_argument("checkpoint", type=Path)
    sp = sub.add_parser("report", help="render a markdown report of a run directory")
    sp.add_argument("run_dir", type=Path)
    sp.add_argument("--output", type=Path, default=None)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "report":
        return cmd_report(args.run_dir, args.output)

    overrides = list(args.overrides)
    if getattr(args, "rho_mode", None):
        overrides.append(f'flow.rho_mode="{args.rho_mode}"')
    try:
        cfg = load_config(args.config, overrides)
        outdir = args.output or output_directory(cfg)
        if args.command == "validate":
            return cmd_validate(cfg, outdir)
    except (ConfigError, GeometryError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    try:
        if args.command == "run":
            return cmd_run(cfg, outdir)
        return cmd_potential(cfg, args.checkpoint, outdir)
    except GeometryError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (cio.ArtifactError, SolverError, FlowError, OSError, ValueError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
