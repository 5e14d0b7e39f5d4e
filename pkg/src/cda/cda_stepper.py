"""Backward-Euler continuous data assimilation steps for the double-diffusive system.

Each step solves, in order, a linearized velocity-pressure saddle system with
lagged convecting velocity and lagged buoyancy, then temperature and
concentration convection-diffusion systems with the new velocity.  Nudging
terms ``mu (I_H(x - x_obs), I_H(v))`` are kept implicit.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
import scipy.sparse as sp

from . import assembly as asm
from .assembly import PhysicalParams, SystemOperators
from .fe_space import FESpace, build_space
from .linalg import DIRECT_TOL, ITERATIVE_TOL, SolverError, solve
from .mesh import TriMesh, barycentric_refine
from .observations import ObservationOperator, ObservationStream, build_observation_operator

log = logging.getLogger(__name__)

ALL_SIDES = (1, 2, 3, 4)


class DivergenceError(RuntimeError):
    def __init__(self, stage: str, message: str = ""):
        super().__init__(f"{stage}: {message or 'non-finite values'}")
        self.stage = stage


class StreamMisalignmentError(RuntimeError):
    pass


@dataclass
class State:
    u: np.ndarray
    p: np.ndarray
    T: np.ndarray
    S: np.ndarray
    time: float = 0.0

    def copy(self) -> "State":
        return State(self.u.copy(), self.p.copy(), self.T.copy(), self.S.copy(), self.time)

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in (self.u, self.p, self.T, self.S))


@dataclass(frozen=True)
class StepperConfig:
    dt: float
    mu1: float = 0.0
    mu2: float = 0.0
    mu3: float = 0.0
    params: PhysicalParams = field(default_factory=PhysicalParams)
    tol: float | None = None
    backend: str = "lu"
    pressure_pin: int = 0

    def __post_init__(self):
        if self.tol is None:
            object.__setattr__(self, "tol", DIRECT_TOL if self.backend == "lu" else ITERATIVE_TOL)
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        for name in ("mu1", "mu2", "mu3"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative, got {getattr(self, name)}")

    @property
    def mu(self) -> tuple[float, float, float]:
        return self.mu1, self.mu2, self.mu3


def _zero_field(x, y, t=None):
    return np.zeros_like(x)


def _zero_vector(x, y, t=None):
    return np.zeros((2,) + np.shape(x))


@dataclass
class Problem:
    """Boundary data, forcing and Dirichlet sides; callables take ``(x, y, t)``."""

    u_bc: Callable = _zero_vector
    T_bc: Callable = _zero_field
    S_bc: Callable = _zero_field
    F: Callable | None = None
    G: Callable | None = None
    Phi: Callable | None = None
    u_tags: tuple = ALL_SIDES
    T_tags: tuple = ALL_SIDES
    S_tags: tuple = ALL_SIDES


class Discretization:
    """Mesh, spaces and observation operators shared by all runs on one mesh.

    ``pair="taylor-hood"`` uses P2/P1 on the given mesh; ``"scott-vogelius"``
    refines barycentrically and uses P2/discontinuous P1.  Temperature and
    concentration use P2 on the same (possibly refined) mesh.
    """

    def __init__(self, mesh: TriMesh, H: float | None = None, pair: str = "taylor-hood"):
        if H is None:
            # mesh parameter h = h_max / sqrt(2) on the structured (unrefined) mesh
            H = 4 * mesh.h_max / np.sqrt(2)
        if pair == "scott-vogelius":
            mesh = barycentric_refine(mesh)
            self.V = build_space(mesh, 2, 2)
            self.Q = build_space(mesh, 1, 1, continuous=False)
        elif pair == "taylor-hood":
            self.V = build_space(mesh, 2, 2)
            self.Q = build_space(mesh, 1, 1)
        else:
            raise ValueError(f"unknown element pair {pair!r}")
        self.pair = pair
        self.mesh = mesh
        self.Y = build_space(mesh, 2, 1)
        self.V_scalar = build_space(mesh, 2, 1)
        self.H = float(H)
        self.obs_u: ObservationOperator = build_observation_operator(self.V_scalar, self.H)
        self.obs_T: ObservationOperator = build_observation_operator(self.Y, self.H)
        self.obs_S = self.obs_T
        self._ops: SystemOperators | None = None

    @property
    def ops(self) -> SystemOperators:
        if self._ops is None:
            zero_u = sp.csr_matrix((self.V.n_dofs, self.V.n_dofs))
            zero_T = sp.csr_matrix((self.Y.n_dofs, self.Y.n_dofs))
            self._ops = SystemOperators(
                M_u=asm.assemble_mass(self.V),
                A_u=asm.assemble_stiffness(self.V),
                B=asm.assemble_divergence(self.V, self.Q),
                M_T=asm.assemble_mass(self.Y),
                A_T=asm.assemble_stiffness(self.Y),
                G_u=zero_u,
                G_T=zero_T,
                G_S=zero_T,
                p_mean=asm.assemble_load(self.Q, 1.0),
            )
            # Unit-gain normal operators; the stepper scales them by mu.
            self._ops.G_u = asm.assemble_nudging(self.V, self.obs_u, 1.0)
            self._ops.G_T = asm.assemble_nudging(self.Y, self.obs_T, 1.0)
            self._ops.G_S = self._ops.G_T
        return self._ops

    def zero_state(self, time: float = 0.0) -> State:
        return State(np.zeros(self.V.n_dofs), np.zeros(self.Q.n_dofs), np.zeros(self.Y.n_dofs),
                     np.zeros(self.Y.n_dofs), time)

    def l2_norm(self, space: FESpace, x: np.ndarray) -> float:
        M = self.ops.M_u if space is self.V else self.ops.M_T
        return float(np.sqrt(max(x @ (M @ x), 0.0)))

    def norms(self, state: State) -> tuple[float, float, float]:
        return self.l2_norm(self.V, state.u), self.l2_norm(self.Y, state.T), self.l2_norm(self.Y, state.S)


def _constrained_solve(A, b, fixed, values, tol, backend, nudge=None):
    """Solve with Dirichlet values on ``fixed``.

    ``nudge = (P, d)`` adds ``P^T diag(d) P`` to ``A`` through coarse auxiliary
    unknowns ``z = diag(d) P x``, so the dense per-cell coupling is never formed.
    """
    n = A.shape[0]
    ordering = "COLAMD"
    if nudge is not None:
        P, d = nudge
        r = P.shape[0]
        A = sp.bmat([[A, P.T], [P, sp.diags(-1.0 / d)]], format="csr")
        b = np.concatenate([b, np.zeros(r)])
        ordering = "MMD_AT_PLUS_A"
    m = A.shape[0]
    free = np.setdiff1d(np.arange(m), fixed, assume_unique=False)
    A = sp.csr_matrix(A)
    A_free = A[free]
    rhs = b[free] - A_free[:, fixed] @ values
    x_free, report = solve(A_free[:, free], rhs, tol=tol, backend=backend, ordering=ordering)
    x = np.empty(m)
    x[fixed] = values
    x[free] = x_free
    return x[:n], report


@dataclass
class StepInfo:
    div_residual: float
    reports: dict


class Stepper:
    """Runs ``advance`` for a fixed discretization, problem and configuration."""

    def __init__(self, disc: Discretization, problem: Problem, cfg: StepperConfig):
        self.disc = disc
        self.problem = problem
        self.cfg = cfg
        ops = disc.ops
        prm = cfg.params
        dt = cfg.dt
        self.K_u = (1.0 / dt + prm.inv_Da) * ops.M_u + prm.nu * ops.A_u
        self.K_T = ops.M_T / dt + prm.kappa * ops.A_T
        self.K_S = ops.M_T / dt + prm.Dc * ops.A_T
        nq = disc.Q.n_dofs
        # Nudging enters as mu P^T W P, kept factorized; mu = 0 adds nothing.
        self.nudge_u = self.nudge_T = self.nudge_S = None
        if cfg.mu1 > 0:
            Pu = sp.block_diag([disc.obs_u.P] * 2)
            Pu = sp.hstack([Pu, sp.csr_matrix((Pu.shape[0], nq))], format="csr")
            self.nudge_u = (Pu, cfg.mu1 * np.concatenate([disc.obs_u.W] * 2))
        if cfg.mu2 > 0:
            self.nudge_T = (disc.obs_T.P, cfg.mu2 * disc.obs_T.W)
        if cfg.mu3 > 0:
            self.nudge_S = (disc.obs_S.P, cfg.mu3 * disc.obs_S.W)
        self.u_fixed = disc.V.dirichlet_dofs(problem.u_tags)
        self.T_fixed = disc.Y.dirichlet_dofs(problem.T_tags) if problem.T_tags else np.zeros(0, int)
        self.S_fixed = disc.Y.dirichlet_dofs(problem.S_tags) if problem.S_tags else np.zeros(0, int)
        if not 0 <= cfg.pressure_pin < nq:
            raise ValueError(f"pressure pin {cfg.pressure_pin} outside 0..{nq - 1}")
        self.saddle_fixed = np.concatenate([self.u_fixed, [disc.V.n_dofs + cfg.pressure_pin]]).astype(np.int64)
        self.area = float(ops.p_mean.sum())

    def lifted_zero_state(self, time: float = 0.0) -> State:
        """Zero interior data with the Dirichlet values of ``time`` on the boundary nodes."""
        st = self.disc.zero_state(time)
        p = self.problem
        st.u[self.u_fixed] = self._boundary(self.disc.V, p.u_bc, self.u_fixed, time)
        st.T[self.T_fixed] = self._boundary(self.disc.Y, p.T_bc, self.T_fixed, time)
        st.S[self.S_fixed] = self._boundary(self.disc.Y, p.S_bc, self.S_fixed, time)
        return st

    def _boundary(self, space: FESpace, f, fixed, t):
        if len(fixed) == 0:
            return np.zeros(0)
        return space.interpolate(f, t)[fixed]

    def _nudge_rhs(self, space, op, mu, data):
        if mu == 0:
            return 0.0
        if data is None:
            raise ValueError("nudging parameter is positive but no observations were supplied")
        return asm.nudging_rhs(space, op, mu, data)

    def advance(self, state: State, obs: dict | None = None) -> tuple[State, StepInfo]:
        disc, cfg, prob = self.disc, self.cfg, self.problem
        ops = disc.ops
        V, Q, Y = disc.V, disc.Q, disc.Y
        dt = cfg.dt
        t_new = state.time + dt
        obs = obs or {}
        reports = {}

        # (a) velocity-pressure
        N = asm.assemble_convection_skew(V, V, state.u)
        K = self.K_u + N
        rhs = ops.M_u @ state.u / dt
        rhs = rhs + asm.assemble_buoyancy_rhs(V, Y, state.T, Y, state.S, cfg.params)
        if prob.F is not None:
            rhs = rhs + asm.assemble_load(V, prob.F, t_new)
        rhs = rhs + self._nudge_rhs(V, disc.obs_u, cfg.mu1, obs.get("u"))
        saddle = sp.bmat([[K, -ops.B.T], [-ops.B, None]], format="csr")
        b = np.concatenate([rhs, np.zeros(Q.n_dofs)])
        vals = np.concatenate([self._boundary(V, prob.u_bc, self.u_fixed, t_new), [0.0]])
        x = self._stage("velocity", saddle, b, self.saddle_fixed, vals, reports, self.nudge_u)
        u_new = x[: V.n_dofs]
        p_new = x[V.n_dofs:]
        p_new = p_new - (ops.p_mean @ p_new) / self.area
        div_res = float(np.linalg.norm(ops.B @ u_new))

        # (b) temperature, (c) concentration with the new velocity
        N2 = asm.assemble_convection_skew(Y, V, u_new)
        new = {}
        for name, key, K0, old, src, bc, fixed, mu, op, nudge in (
            ("temperature", "T", self.K_T, state.T, prob.G, prob.T_bc, self.T_fixed, cfg.mu2, disc.obs_T,
             self.nudge_T),
            ("concentration", "S", self.K_S, state.S, prob.Phi, prob.S_bc, self.S_fixed, cfg.mu3, disc.obs_S,
             self.nudge_S),
        ):
            rhs = ops.M_T @ old / dt
            if src is not None:
                rhs = rhs + asm.assemble_load(Y, src, t_new)
            rhs = rhs + self._nudge_rhs(Y, op, mu, obs.get(key))
            vals = self._boundary(Y, bc, fixed, t_new)
            new[name] = self._stage(name, K0 + N2, rhs, fixed, vals, reports, nudge)

        out = State(u_new, p_new, new["temperature"], new["concentration"], t_new)
        return out, StepInfo(div_res, reports)

    def _stage(self, name, A, b, fixed, vals, reports, nudge=None):
        try:
            x, rep = _constrained_solve(A, b, fixed, vals, self.cfg.tol, self.cfg.backend, nudge)
        except SolverError as exc:
            raise DivergenceError(name, f"linear solve failed: {exc}") from exc
        if not np.all(np.isfinite(x)):
            raise DivergenceError(name)
        reports[name] = rep
        return x


def advance(state: State, obs: dict | None, cfg: StepperConfig, disc: Discretization,
            problem: Problem | None = None) -> State:
    """One step from ``state`` with coarse data ``obs`` at ``t + dt``."""
    return Stepper(disc, problem or Problem(), cfg).advance(state, obs)[0]


TRAJECTORY_COLUMNS = ("step", "time", "norm_u", "norm_T", "norm_S", "err_u", "err_T", "err_S", "div_residual")


@dataclass
class Trajectory:
    rows: list = field(default_factory=list)
    final: State | None = None

    def append(self, **row):
        self.rows.append({k: row.get(k, np.nan) for k in TRAJECTORY_COLUMNS})

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=float)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=TRAJECTORY_COLUMNS)
            w.writeheader()
            for r in self.rows:
                w.writerow({k: (int(v) if k == "step" else repr(float(v))) for k, v in r.items()})


def run(initial: State, horizon: int, stepper: Stepper, stream: ObservationStream | None = None,
        error_fn: Callable[[State], tuple] | None = None, callback: Callable | None = None,
        stream_offset: int = 0) -> Trajectory:
    """Advance ``horizon`` steps, recording norms (and errors when ``error_fn`` is given).

    Step ``k`` consumes stream level ``k + stream_offset``; its time must equal
    the time of the new state.
    """
    disc = stepper.disc
    traj = Trajectory()
    state = initial.copy()

    def record(k, st, div):
        nu, nT, nS = disc.norms(st)
        errs = error_fn(st) if error_fn is not None else (np.nan,) * 3
        traj.append(step=k, time=st.time, norm_u=nu, norm_T=nT, norm_S=nS,
                    err_u=errs[0], err_T=errs[1], err_S=errs[2], div_residual=div)

    record(0, state, 0.0)
    needs_obs = any(m > 0 for m in stepper.cfg.mu)
    for k in range(horizon):
        obs = None
        if needs_obs:
            if stream is None:
                raise ValueError("nudging requires an observation stream")
            level = k + stream_offset
            try:
                obs = stream.sample(level)
            except ValueError as exc:
                raise StreamMisalignmentError(f"observation stream exhausted at level {level}") from exc
            t_obs = stream.time(level)
            if abs(t_obs - (state.time + stepper.cfg.dt)) > 1e-9 * max(1.0, abs(t_obs)):
                raise StreamMisalignmentError(f"observation time {t_obs} != step time {state.time + stepper.cfg.dt}")
        try:
            state, info = stepper.advance(state, obs)
        except DivergenceError:
            log.error("run diverged at step %d (t=%g)", k + 1, state.time + stepper.cfg.dt)
            traj.final = state
            raise
        record(k + 1, state, info.div_residual)
        if callback is not None:
            callback(k + 1, state)
    traj.final = state
    return traj


def with_mu(cfg: StepperConfig, mu) -> StepperConfig:
    return replace(cfg, mu1=float(mu[0]), mu2=float(mu[1]), mu3=float(mu[2]))
