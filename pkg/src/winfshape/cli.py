"""
Command line interface: ``python -m winfshape {mesh,run,report}``.

Configuration files are INI style with the sections ``[mesh]``, ``[flow]``,
``[descent]`` and ``[run]``.  Every key is optional; ``DEFAULTS`` lists all
of them.  Exit status is 0 on success, 2 for configuration or input errors
and 3 for numerical failures.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import logging
import math
import sys
from contextlib import nullcontext
from pathlib import Path

from . import flow
from .io import read_mesh, write_mesh, write_vtk
from .mesh import OBSTACLE, MeshError, generate_channel_mesh, refine_uniform
from .optimizer import OptimizationError, RunConfig, optimize, read_history
from .plap_descent import PlapConfig
from .winf_descent import AdmmConfig

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

REFERENCE_2D = {
    "tunnel": "-7, 7, -3, 3",
    "obstacle": "-0.5, 0.5, -0.5, 0.5",
    "resolution": "128",
    "layers": "40, 40, 28, 28",
}

DEFAULTS = {
    "mesh": {
        **REFERENCE_2D,
        "growth": "1.07",
        "refine": "0",
        "file": "",
    },
    "flow": {
        "nu": "0.02",
        "inflow_frequency": repr(math.pi / 6),
        "newton_rtol": "1e-10",
        "newton_maxiter": "25",
    },
    "descent": {
        "method": "winf",
        "sigma": "0.3",
        "tau": "1.0",
        "eps2": "auto",
        "eps3": "auto",
        "max_iter": "200",
        "norm": "spectral",
        "projection": "radial",
        "max_doublings": "20",
        "normalize": "true",
        "p_schedule": "2, 2.5, 3, 3.5, 4, 4.4, 4.8",
        "eps_reg": "1e-10",
        "plap_scale": "1.0",
        "restrict": "vertices",
        "derivative_scale": "1.0",
        "constraints": "true",
    },
    "run": {
        "steps": "50",
        "eps1": "none",
        "max_failures": "10",
        "snapshots": "false",
    },
}


class ConfigError(ValueError):
    pass


# -- configuration ------------------------------------------------------------


def load_config(path=None):
    """Read ``path`` over the defaults, rejecting unknown sections and keys."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.read_dict(DEFAULTS)
    if path is not None:
        user = configparser.ConfigParser(interpolation=None)
        try:
            with open(path) as fh:
                user.read_file(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        for section in user.sections():
            if section not in DEFAULTS:
                raise ConfigError(f"{path}: unknown section [{section}]")
            for key, value in user.items(section):
                if key not in DEFAULTS[section]:
                    raise ConfigError(f"{path}: unknown key '{key}' in [{section}]")
                cp.set(section, key, value)
    return cp


def _get(cp, section, key, kind):
    raw = cp.get(section, key).strip()
    try:
        if kind is bool:
            return cp.getboolean(section, key)
        if kind == "floats":
            return tuple(float(x) for x in raw.split(","))
        if kind == "ints":
            return tuple(int(x) for x in raw.split(","))
        if kind == "auto":
            return None if raw.lower() in ("auto", "none", "") else float(raw)
        return kind(raw)
    except ValueError:
        raise ConfigError(f"invalid value for '{key}' in [{section}]: {raw!r}") from None


def build_mesh(cp, preset=None, refine=0):
    if preset == "paper2d":
        for k, v in REFERENCE_2D.items():
            cp.set("mesh", k, v)
    elif preset is not None:
        raise ConfigError(f"unknown preset {preset!r}")
    extra = _get(cp, "mesh", "refine", int) + refine
    cp.set("mesh", "refine", str(extra))
    file = cp.get("mesh", "file").strip()
    if file:
        if preset is not None:
            raise ConfigError("a preset cannot be combined with [mesh] file")
        try:
            mesh = read_mesh(file)
        except OSError as exc:
            raise ConfigError(f"cannot read mesh {file}: {exc.strerror}") from None
    else:
        tunnel = _get(cp, "mesh", "tunnel", "floats")
        obstacle = _get(cp, "mesh", "obstacle", "floats")
        for key, val in (("tunnel", tunnel), ("obstacle", obstacle)):
            if len(val) != 4:
                raise ConfigError(f"'{key}' in [mesh] needs four numbers x0, x1, y0, y1")
        layers = cp.get("mesh", "layers").strip()
        layers = None if layers.lower() in ("", "auto", "none") else _get(cp, "mesh", "layers", "ints")
        if layers is not None and len(layers) != 4:
            raise ConfigError("'layers' in [mesh] needs four counts left, right, bottom, top")
        try:
            mesh = generate_channel_mesh(tunnel, obstacle, _get(cp, "mesh", "resolution", int),
                                         layers=layers, growth=_get(cp, "mesh", "growth", float))
        except MeshError as exc:
            raise ConfigError(f"[mesh] geometry: {exc}") from None
    if extra < 0:
        raise ConfigError("'refine' in [mesh] must be non-negative")
    return refine_uniform(mesh, extra) if extra else mesh


def build_run_config(cp, output=None, snapshots=None):
    g = lambda s, k, t: _get(cp, s, k, t)  # noqa: E731
    freq = g("flow", "inflow_frequency", float)
    restrict = cp.get("descent", "restrict").strip().lower()
    if restrict in ("false", "none", "off"):
        restrict = False
    if restrict not in ("vertices", "cells", False):
        raise ConfigError(f"invalid value for 'restrict' in [descent]: {restrict!r}")
    eps1 = g("run", "eps1", "auto")
    if snapshots is not None:
        cp.set("run", "snapshots", "true" if snapshots else "false")
    try:
        fcfg = flow.FlowConfig(nu=g("flow", "nu", float), inflow=flow.cosine_inflow(freq),
                               newton_rtol=g("flow", "newton_rtol", float),
                               newton_maxiter=g("flow", "newton_maxiter", int))
        sigma = g("descent", "sigma", float)
        admm = AdmmConfig(sigma=sigma, tau=g("descent", "tau", float), eps2=g("descent", "eps2", "auto"),
                          eps3=g("descent", "eps3", "auto"), max_iter=g("descent", "max_iter", int),
                          norm=cp.get("descent", "norm").strip(),
                          projection=cp.get("descent", "projection").strip(),
                          max_doublings=g("descent", "max_doublings", int),
                          normalize=g("descent", "normalize", bool))
        plap = PlapConfig(schedule=g("descent", "p_schedule", "floats"), eps_reg=g("descent", "eps_reg", float),
                          scale=g("descent", "plap_scale", float))
        return RunConfig(method=cp.get("descent", "method").strip(), steps=g("run", "steps", int),
                         sigma0=sigma, eps1=eps1, flow=fcfg, admm=admm, plap=plap, restrict=restrict,
                         derivative_scale=g("descent", "derivative_scale", float),
                         constraints=g("descent", "constraints", bool),
                         max_failures=g("run", "max_failures", int),
                         output=None if output is None else str(output),
                         snapshots=g("run", "snapshots", bool))
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"invalid configuration: {exc}") from None


def write_config(cp, path):
    with open(path, "w") as fh:
        cp.write(fh)


# -- subcommands ----------------------------------------------------------------


def cmd_mesh(args):
    cp = load_config(args.config)
    mesh = build_mesh(cp, args.preset, args.refine)
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    write_mesh(out / "domain.mesh.txt", mesh)
    write_vtk(out / "domain.vtk", mesh)
    n_obs = int((mesh.markers == OBSTACLE).sum())
    print(f"{mesh.n_vertices} vertices, {mesh.n_cells} cells, {n_obs} obstacle edges -> {out}")
    return EXIT_OK


def cmd_run(args):
    cp = load_config(args.config)
    mesh = build_mesh(cp, args.preset, args.refine)
    out = Path(args.out or "run")
    cfg = build_run_config(cp, output=out, snapshots=True if args.snapshots else None)
    out.mkdir(parents=True, exist_ok=True)
    write_config(cp, out / "config.ini")
    write_mesh(out / "initial.mesh.txt", mesh)
    try:
        final, hist = optimize(mesh, cfg, callback=_progress)
    except OptimizationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    write_mesh(out / "final.mesh.txt", final)
    print(f"J/J0 = {hist.rows[-1]['J_ratio']:.6f} after {len(hist) - 1} steps -> {out}")
    return EXIT_OK


def _progress(row):
    logging.getLogger("winfshape").info("step %d %s J/J0=%.6f sigma=%.4g edge ratio %.3f", row["step"],
                                        row["status"], row["J_ratio"], row["sigma"], row["edge_length_ratio"])


def report_tables(run_dirs):
    """Edge-ratio and J/J0 tables, one column per run, aligned by step."""
    runs = []
    for d in run_dirs:
        path = Path(d) / "history.csv"
        if not path.is_file():
            raise ConfigError(f"no history.csv in {d}")
        h = read_history(path)
        if not len(h):
            raise ConfigError(f"empty history in {d}")
        runs.append((f"{Path(d).name}:{h.rows[0]['method']}", h))
    if not runs:
        raise ConfigError("no run directories given")
    n = max(len(h) for _, h in runs)
    tables = {}
    for col in ("edge_length_ratio", "J_ratio"):
        rows = [["step"] + [name for name, _ in runs]]
        for k in range(n):
            rows.append([k] + [repr(float(h.rows[k][col])) if k < len(h) else "" for _, h in runs])
        tables[col] = rows
    return tables


def cmd_report(args):
    tables = report_tables(args.runs)
    out = Path(args.out) if args.out else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    for name, rows in tables.items():
        if out is not None:
            with open(out / f"{name}.csv", "w", newline="") as fh:
                csv.writer(fh).writerows(rows)
        else:
            print(f"# {name}")
            csv.writer(sys.stdout).writerows(rows)
    return EXIT_OK


# -- entry point -------------------------------------------------------------------


def make_parser():
    p = argparse.ArgumentParser(prog="winfshape", description="Shape optimisation of an obstacle in channel flow.")
    p.add_argument("--threads", type=int, default=None, help="BLAS thread count")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="INI configuration file")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--preset", choices=["paper2d"], help="use the reference channel geometry")
        sp.add_argument("--refine", type=int, default=0, help="additional uniform refinements")

    m = sub.add_parser("mesh", help="generate a mesh file")
    common(m)
    m.set_defaults(func=cmd_mesh)
    r = sub.add_parser("run", help="run the optimisation")
    common(r)
    r.add_argument("--snapshots", action="store_true", help="write VTK files for every step")
    r.set_defaults(func=cmd_run)
    rep = sub.add_parser("report", help="tabulate histories of finished runs")
    rep.add_argument("runs", nargs="*", help="run directories")
    rep.add_argument("--out", help="directory for the CSV tables")
    rep.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    parser = make_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None and args.threads < 1:
        print("error: --threads must be positive", file=sys.stderr)
        return EXIT_CONFIG
    if args.threads is not None:
        from threadpoolctl import threadpool_limits
        limit = threadpool_limits(args.threads)
    else:
        limit = nullcontext()
    with limit:
        try:
            return args.func(args)
        except ConfigError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
