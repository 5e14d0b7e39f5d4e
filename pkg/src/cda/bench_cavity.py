"""Double-diffusive cavity benchmark: DNS reference run and nudged twin runs.

The cavity is ``[0, 1] x [0, 2]`` with no-slip walls, hot/salty left wall,
cold/fresh right wall and insulated top and bottom.  A DNS is run from rest
for a spin-up phase and then for an observation phase, during which its
coarse averages are recorded.  A twin run starts from zero at the beginning
of the observation phase and is nudged toward those averages.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .assembly import PhysicalParams
from .cda_stepper import (Discretization, Problem, State, Stepper, StepperConfig, StreamMisalignmentError,
                          Trajectory, run)
from .linalg import solve
from .mesh import LEFT, RIGHT, build_structured
from .observations import ReferenceStream
from .vtk import write_vtk

log = logging.getLogger(__name__)

WIDTH, HEIGHT = 1.0, 2.0


@dataclass(frozen=True)
class CavityConfig:
    Pr: float = 1.0
    Ra: float = 1e3
    Le: float = 2.0
    N: float = 0.8
    dt: float = 0.02
    dns_steps: int = 4000
    twin_steps: int = 4000
    n: int = 16
    H: float | None = None
    inv_Da: float = 0.0
    T_hot: float = 1.0
    T_cold: float = 0.0
    S_high: float = 1.0
    S_low: float = 0.0
    pair: str = "taylor-hood"

    def __post_init__(self):
        for name in ("Pr", "Ra", "Le", "dt"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.N < 0:
            raise ValueError(f"N must be nonnegative, got {self.N}")
        if self.inv_Da < 0:
            raise ValueError(f"inv_Da must be nonnegative, got {self.inv_Da}")
        for name in ("dns_steps", "twin_steps"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.n < 1:
            raise ValueError("n must be at least 1")

    @property
    def t_observe(self) -> float:
        """Start of the observation phase."""
        return self.dns_steps * self.dt


def map_nondimensional(cfg: CavityConfig) -> PhysicalParams:
    """Boussinesq scaling with the thermal diffusivity as velocity scale.

    nu = Pr, kappa = 1, Dc = 1/Le and buoyancy Ra Pr (T + N S) acting upward.
    The momentum source is ``(beta_T T + beta_C S) g``, so ``g`` is the unit
    upward vector here.
    """
    beta_T = cfg.Ra * cfg.Pr
    return PhysicalParams(nu=cfg.Pr, inv_Da=cfg.inv_Da, kappa=1.0, Dc=1.0 / cfg.Le, beta_T=beta_T,
                          beta_C=cfg.N * beta_T, gravity=(0.0, 1.0))


def _wall(left_value, right_value):
    mid = 0.5 * WIDTH

    def f(x, y, t=None):
        return np.where(np.asarray(x) < mid, left_value, right_value) + 0.0 * np.asarray(y)

    return f


def cavity_problem(cfg: CavityConfig) -> Problem:
    return Problem(T_bc=_wall(cfg.T_hot, cfg.T_cold), S_bc=_wall(cfg.S_high, cfg.S_low),
                   T_tags=(LEFT, RIGHT), S_tags=(LEFT, RIGHT))


def cavity_discretization(cfg: CavityConfig) -> Discretization:
    return Discretization(build_structured((0.0, WIDTH, 0.0, HEIGHT), cfg.n), H=cfg.H, pair=cfg.pair)


@dataclass
class DNSResult:
    """Reference run: norms over both phases, the observation stream and (when
    kept) the fine states of the observation phase, index 0 being its start."""

    cfg: CavityConfig
    disc: Discretization
    trajectory: Trajectory
    stream: ReferenceStream
    u: np.ndarray
    T: np.ndarray
    S: np.ndarray
    final: State
    T_range: tuple = (np.inf, -np.inf)
    S_range: tuple = (np.inf, -np.inf)

    def state(self, k: int) -> State:
        return State(self.u[k], np.zeros(self.disc.Q.n_dofs), self.T[k], self.S[k],
                     self.cfg.t_observe + k * self.cfg.dt)


class _RangeTracker:
    def __init__(self):
        self.T = [np.inf, -np.inf]
        self.S = [np.inf, -np.inf]

    def __call__(self, state: State):
        self.T = [min(self.T[0], state.T.min()), max(self.T[1], state.T.max())]
        self.S = [min(self.S[0], state.S.min()), max(self.S[1], state.S.max())]


def run_dns(cfg: CavityConfig, disc: Discretization | None = None, keep_states: bool = True,
            backend: str = "lu", tol: float | None = None) -> DNSResult:
    """Un-nudged run from rest: ``dns_steps`` of spin-up, then ``twin_steps`` observed."""
    disc = disc or cavity_discretization(cfg)
    params = map_nondimensional(cfg)
    stepper = Stepper(disc, cavity_problem(cfg), StepperConfig(dt=cfg.dt, params=params, backend=backend, tol=tol))
    ranges = _RangeTracker()
    total = cfg.dns_steps + cfg.twin_steps
    stream = ReferenceStream(disc.obs_T.grid, cfg.dt, cfg.t_observe, capacity=cfg.twin_steps)
    n_keep = cfg.twin_steps + 1 if keep_states else 0
    store_u = np.zeros((n_keep, disc.V.n_dofs))
    store_T = np.zeros((n_keep, disc.Y.n_dofs))
    store_S = np.zeros((n_keep, disc.Y.n_dofs))

    def keep(k, st):
        j = k - cfg.dns_steps
        if 0 <= j < n_keep:
            store_u[j], store_T[j], store_S[j] = st.u, st.T, st.S

    def callback(k, st):
        ranges(st)
        keep(k, st)
        if k > cfg.dns_steps:
            stream.append(disc.obs_u.observe(st.u), disc.obs_T.observe(st.T), disc.obs_S.observe(st.S))
        if k % 500 == 0:
            log.info("DNS step %d/%d t=%.2f", k, total, st.time)

    initial = stepper.lifted_zero_state(0.0)
    ranges(initial)
    keep(0, initial)
    traj = run(initial, total, stepper, callback=callback)
    return DNSResult(cfg, disc, traj, stream, store_u, store_T, store_S, traj.final,
                     tuple(ranges.T), tuple(ranges.S))


@dataclass
class TwinRunResult:
    mu: tuple
    time: np.ndarray
    diff_u: np.ndarray
    diff_T: np.ndarray
    diff_S: np.ndarray
    final_cda: State
    final_dns: State | None
    trajectory: Trajectory = field(repr=False, default=None)
    T_range: tuple = (np.inf, -np.inf)
    S_range: tuple = (np.inf, -np.inf)

    def series(self, name: str) -> np.ndarray:
        return getattr(self, f"diff_{name}")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "time", "diff_u", "diff_T", "diff_S"])
            for k in range(len(self.time)):
                w.writerow([k, repr(float(self.time[k])), repr(float(self.diff_u[k])),
                            repr(float(self.diff_T[k])), repr(float(self.diff_S[k]))])


def final_relative_l2(result: TwinRunResult, disc: Discretization) -> dict:
    """``||x_CDA - x_DNS|| / ||x_DNS||`` at the final time for u, T, S."""
    a, b = result.final_cda, result.final_dns
    out = {}
    for name, space in (("u", disc.V), ("T", disc.Y), ("S", disc.Y)):
        x, y = getattr(a, name), getattr(b, name)
        out[name] = disc.l2_norm(space, x - y) / disc.l2_norm(space, y)
    return out


def max_pointwise_ratio(a, b, skip_fraction: float = 0.1) -> float:
    """Largest ``max(a/b, b/a)`` over samples after the first ``skip_fraction``.

    Samples where both curves are zero count as equal; a zero against a
    nonzero value gives ``inf``.
    """
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    start = int(np.ceil(skip_fraction * (len(a) - 1)))
    a, b = a[start:], b[start:]
    both_zero = (a == 0) & (b == 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.maximum(a / b, b / a)
    r[both_zero] = 1.0
    return float(np.max(r)) if len(r) else 1.0


def run_twin(cfg: CavityConfig, mu, stream: ReferenceStream, reference: DNSResult | None = None,
             disc: Discretization | None = None, backend: str = "lu", tol: float | None = None) -> TwinRunResult:
    """Nudged run from zero interior data at the start of the observation phase.

    ``reference`` supplies the DNS fine states for the difference norms; with
    only a stream, differences are reported as NaN.
    """
    if reference is not None:
        disc = reference.disc
        if len(reference.u) < cfg.twin_steps + 1:
            raise ValueError("reference run did not keep the observation-phase states")
    disc = disc or cavity_discretization(cfg)
    if not np.isclose(stream.dt, cfg.dt, rtol=1e-12):
        raise StreamMisalignmentError(f"stream time step {stream.dt} differs from configured {cfg.dt}")
    if stream.grid != disc.obs_T.grid:
        raise StreamMisalignmentError("stream coarse grid does not match the discretization")
    if not np.isclose(stream.t0, cfg.t_observe, rtol=1e-12, atol=1e-12):
        raise StreamMisalignmentError(f"stream starts at t={stream.t0}, twin run at t={cfg.t_observe}")
    if stream.n_levels < cfg.twin_steps:
        raise StreamMisalignmentError(f"stream has {stream.n_levels} levels, twin run needs {cfg.twin_steps}")

    params = map_nondimensional(cfg)
    scfg = StepperConfig(dt=cfg.dt, mu1=mu[0], mu2=mu[1], mu3=mu[2], params=params, backend=backend,
                         tol=tol)
    stepper = Stepper(disc, cavity_problem(cfg), scfg)
    n = cfg.twin_steps
    diffs = np.full((3, n + 1), np.nan)
    ranges = _RangeTracker()

    def record(k, st):
        if reference is not None:
            diffs[0, k] = disc.l2_norm(disc.V, st.u - reference.u[k])
            diffs[1, k] = disc.l2_norm(disc.Y, st.T - reference.T[k])
            diffs[2, k] = disc.l2_norm(disc.Y, st.S - reference.S[k])

    def callback(k, st):
        ranges(st)
        record(k, st)
        if k % 500 == 0:
            log.info("twin mu=%s step %d/%d", tuple(mu), k, n)

    initial = stepper.lifted_zero_state(cfg.t_observe)
    ranges(initial)
    record(0, initial)
    traj = run(initial, n, stepper, stream, callback=callback)
    final_dns = reference.state(n) if reference is not None else None
    return TwinRunResult(tuple(float(m) for m in mu), traj.column("time"), diffs[0], diffs[1], diffs[2],
                         traj.final, final_dns, traj, tuple(ranges.T), tuple(ranges.S))


def stream_function(disc: Discretization, u: np.ndarray) -> np.ndarray:
    """P2 stream function: ``-lap psi = d u2/dx - d u1/dy`` with ``psi = 0`` on the boundary."""
    Y, V = disc.Y, disc.V
    ed = Y.elements
    grads = np.stack([V.elements.field_grads(V.component(u, c)) for c in range(2)])  # (2, nt, nq, 2)
    vort = grads[1, ..., 0] - grads[0, ..., 1]
    rhs = np.zeros(Y.n_dofs)
    np.add.at(rhs, Y.scalar_dof_map, np.einsum("tq,qa,tq->ta", ed.jxw, ed.values, vort))
    A = disc.ops.A_T
    fixed = Y.dirichlet_dofs()
    free = np.setdiff1d(np.arange(Y.n_dofs), fixed)
    psi = np.zeros(Y.n_dofs)
    if np.any(rhs[free]):
        psi[free], _ = solve(A[free][:, free], rhs[free])
    return psi


def export_fields(disc: Discretization, state: State, path, title: str = "cavity fields") -> Path:
    """VTK file with velocity, temperature, concentration and stream function at the P2 nodes."""
    V, Y = disc.V, disc.Y
    if V.n_scalar != Y.n_dofs:
        raise ValueError("velocity and scalar fields must share the P2 node set")
    vel = np.column_stack([V.component(state.u, 0), V.component(state.u, 1)])
    data = {"velocity": vel, "temperature": state.T, "concentration": state.S,
            "stream_function": stream_function(disc, state.u)}
    return write_vtk(path, Y, data, title=title)
