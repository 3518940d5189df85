"""
Outer shape optimisation loop.

Each step solves the adjoint on the current mesh, assembles the restricted
shape derivative, computes a descent deformation ``u`` and moves the mesh
to ``x + u(x)``.  The trial shape is accepted when the energy decreases;
otherwise the gradient bound ``sigma`` is halved and the mesh kept.
"""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import flow
from .constraints import GeometricConstraints
from .fem import SolverError
from .io import write_vtk
from .mesh import InversionError, apply_deformation, hole_measures, quality_report
from .plap_descent import PlapConfig, plap_descent
from .winf_descent import AdmmConfig, DeformationSpace, admm_descent

log = logging.getLogger(__name__)

HISTORY_COLUMNS = [
    "step", "method", "J", "J_ratio", "directional", "sigma", "accepted", "status",
    "converged", "admm_iterations", "doublings", "newton_iterations", "linear_solves", "state_iterations",
    "max_du", "step_min_det", "edge_length_ratio", "min_det_DF", "min_angle",
    "g1", "g2", "g3", "area_drift", "barycenter_drift",
]


class OptimizationError(RuntimeError):
    """Hard failure of the outer loop at a given step."""

    def __init__(self, message, step):
        self.step = step
        super().__init__(f"step {step}: {message}")


@dataclass(frozen=True)
class RunConfig:
    """Settings of an optimisation run.

    Attributes
    ----------
    method : {"winf", "plap"}
    steps : int
        Number of outer iterations.
    sigma0 : float
        Initial bound on the cellwise deformation gradient.
    eps1 : float, optional
        Stop once ``|J'(u)| < sigma * eps1``.
    restrict : {"vertices", "cells", False}
        Restriction applied to the shape derivative.
    derivative_scale : float
        Factor applied to the shape derivative before the descent solve.
    max_failures : int
        Consecutive trial meshes that may invert or fail the state solve.
    negate_direction : bool
        Flip the descent deformation (forces rejections, for testing).
    """

    method: str = "winf"
    steps: int = 50
    sigma0: float = 0.3
    eps1: float | None = None
    flow: flow.FlowConfig = field(default_factory=flow.FlowConfig)
    admm: AdmmConfig = field(default_factory=AdmmConfig)
    plap: PlapConfig = field(default_factory=PlapConfig)
    restrict: object = "vertices"
    derivative_scale: float = 1.0
    constraints: bool = True
    max_failures: int = 10
    output: str | None = None
    snapshots: bool = False
    negate_direction: bool = False

    def __post_init__(self):
        if self.method not in ("winf", "plap"):
            raise ValueError(f"unknown method {self.method!r}")
        if self.steps < 1:
            raise ValueError("steps must be at least 1")
        if not 0 < self.sigma0 < 1:
            raise ValueError("sigma0 must lie in (0, 1)")
        if self.eps1 is not None and not self.eps1 > 0:
            raise ValueError("eps1 must be positive")
        if not self.derivative_scale > 0:
            raise ValueError("derivative_scale must be positive")


@dataclass
class RunHistory:
    """One row per outer step plus a leading row for the initial shape."""

    rows: list = field(default_factory=list)
    wall_times: list = field(default_factory=list)

    def __len__(self):
        return len(self.rows)

    def column(self, name):
        return np.array([r[name] for r in self.rows])

    @property
    def J(self):
        return self.column("J")

    @property
    def accepted(self):
        return self.column("accepted").astype(bool)

    def write(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=HISTORY_COLUMNS)
            w.writeheader()
            for r in self.rows:
                w.writerow({k: _fmt(r[k]) for k in HISTORY_COLUMNS})

    def write_timing(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "seconds"])
            for r, t in zip(self.rows, self.wall_times):
                w.writerow([r["step"], f"{t:.3f}"])


def _fmt(x):
    if isinstance(x, (bool, np.bool_)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        return "" if np.isnan(x) else repr(float(x))
    return x


def read_history(path):
    """Load ``history.csv`` into a :class:`RunHistory`."""
    rows = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            row = {}
            for k, v in r.items():
                if k == "method" or k == "status":
                    row[k] = v
                elif v == "":
                    row[k] = float("nan")
                elif k in ("step", "accepted", "converged", "admm_iterations", "doublings", "newton_iterations",
                           "linear_solves", "state_iterations"):
                    row[k] = int(v)
                else:
                    row[k] = float(v)
            rows.append(row)
    return RunHistory(rows)


def _snapshot(path, mesh, state, u=None):
    N = mesh.n_vertices
    vel = state.vertex_velocity()[:N]
    pdata = {"velocity": vel, "pressure": state.pressure[:N]}
    if u is not None:
        pdata["deformation"] = u.reshape(2, -1).T
    write_vtk(path, mesh, point_data=pdata)


def optimize(mesh0, cfg=RunConfig(), callback=None):
    """Run the descent loop.

    Parameters
    ----------
    mesh0 : TriMesh
    cfg : RunConfig
    callback : callable, optional
        Called as ``callback(row)`` after every step; a true return value
        ends the run.

    Returns
    -------
    mesh : TriMesh
        Final accepted shape.
    history : RunHistory

    Raises
    ------
    OptimizationError
        If a descent solve fails, or if ``cfg.max_failures`` consecutive
        trial meshes invert or have no state solution.
    """
    out = Path(cfg.output) if cfg.output else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    fcfg = cfg.flow
    t0 = time.perf_counter()
    mesh = mesh0
    try:
        state = flow.solve_state(mesh, fcfg)
    except (flow.FlowError, SolverError) as exc:
        raise OptimizationError(f"no state solution on the initial mesh: {exc}", 0) from None
    J = J0 = flow.energy(mesh, state, fcfg)
    area0, bary0 = hole_measures(mesh)
    q0 = quality_report(mesh)
    hist = RunHistory()
    nan = float("nan")
    row = dict(step=0, method=cfg.method, J=J, J_ratio=1.0, directional=nan, sigma=cfg.sigma0,
               accepted=True, status="initial", converged=True, admm_iterations=0, doublings=0, newton_iterations=0,
               linear_solves=0, state_iterations=state.iterations, max_du=0.0, step_min_det=1.0,
               edge_length_ratio=q0.edge_length_ratio, min_det_DF=1.0, min_angle=q0.min_cell_angle,
               g1=0.0, g2=0.0, g3=0.0, area_drift=0.0, barycenter_drift=0.0)

    def emit(row):
        hist.rows.append(row)
        hist.wall_times.append(time.perf_counter() - t0)
        if out is not None:
            hist.write(out / "history.csv")
            hist.write_timing(out / "timing.csv")
        return callback is not None and bool(callback(row))

    emit(row)
    if out is not None and cfg.snapshots:
        _snapshot(out / "step_0000.vtk", mesh, state)

    sigma = cfg.sigma0
    failures = 0
    area_ref0 = mesh0.signed_areas
    prev = row
    for k in range(1, cfg.steps + 1):
        adjoint = flow.solve_adjoint(mesh, fcfg, state)
        jp = flow.shape_derivative(mesh, fcfg, state, adjoint, restrict=cfg.restrict)
        if cfg.derivative_scale != 1.0:
            jp = jp.scaled(cfg.derivative_scale)
        space = DeformationSpace(mesh)
        G = GeometricConstraints(mesh) if cfg.constraints else None
        try:
            if cfg.method == "winf":
                acfg = replace(cfg.admm, sigma=sigma)
                res = admm_descent(jp, mesh, G, acfg, space=space)
            else:
                res = plap_descent(jp, mesh, G, cfg.plap, space=space, sigma=sigma)
        except Exception as exc:
            raise OptimizationError(f"descent failed: {exc}", k) from exc
        u = -res.u if cfg.negate_direction else res.u
        directional = float(jp.dual @ u)
        step_min_det = space.min_det(u)
        g = G.eval(u) if G is not None else np.zeros(3)

        status = "accepted"
        trial_state = None
        try:
            trial = apply_deformation(mesh, u)
            trial_state = flow.solve_state(trial, fcfg, initial=state)
            J_trial = flow.energy(trial, trial_state, fcfg)
        except InversionError:
            status, J_trial = "inverted", nan
        except (flow.FlowError, SolverError):
            status, J_trial = "state_failure", nan
        if status == "accepted" and not J_trial < J:
            status = "rejected"

        used_sigma = sigma
        if status == "accepted":
            mesh, state, J = trial, trial_state, J_trial
            failures = 0
        else:
            sigma *= 0.5
            if status != "rejected":
                failures += 1
                if failures > cfg.max_failures:
                    raise OptimizationError(f"{failures} consecutive failed trial meshes", k)

        if status == "accepted":
            q = quality_report(mesh)
            area, bary = hole_measures(mesh)
            row = dict(edge_length_ratio=q.edge_length_ratio,
                       min_det_DF=float((mesh.signed_areas / area_ref0).min()),
                       min_angle=q.min_cell_angle, g1=g[0], g2=g[1], g3=g[2],
                       area_drift=abs(area - area0) / abs(area0),
                       barycenter_drift=float(np.linalg.norm(bary - bary0)))
        else:
            row = {key: prev[key] for key in ("edge_length_ratio", "min_det_DF", "min_angle",
                                              "area_drift", "barycenter_drift")}
            row.update(g1=g[0], g2=g[1], g3=g[2])
        row.update(step=k, method=cfg.method, J=J, J_ratio=J / J0, directional=directional,
                   sigma=used_sigma, accepted=status == "accepted", status=status,
                   converged=res.converged, admm_iterations=res.iterations, doublings=res.doublings,
                   newton_iterations=res.newton_iterations, linear_solves=res.linear_solves,
                   state_iterations=trial_state.iterations if trial_state is not None else 0,
                   max_du=res.max_du, step_min_det=step_min_det)
        stop = emit(row)
        prev = row
        log.info("step %d %s J/J0=%.6f sigma=%.4g", k, status, J / J0, used_sigma)
        if out is not None and cfg.snapshots:
            _snapshot(out / f"step_{k:04d}.vtk", mesh, state, u if status == "accepted" else None)
        if stop or (cfg.eps1 is not None and abs(directional) < used_sigma * cfg.eps1):
            break
    return mesh, hist

