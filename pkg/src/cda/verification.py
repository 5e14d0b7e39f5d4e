"""Manufactured-solution verification: error norms, rate tables, decay curves."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .assembly import PhysicalParams
from .fe_space import FESpace
from .mesh import build_structured
from .observations import ManufacturedStream
from .cda_stepper import Discretization, Problem, Stepper, StepperConfig, Trajectory, run

log = logging.getLogger(__name__)

E = math.e

# nu = kappa = Dc = beta_T = beta_C = 1, infinite Darcy number.
MANUFACTURED_PARAMS = PhysicalParams()


class ManufacturedSolution:
    """u = (cos y, sin x) e^t, p = (x - y)(1 + t), T = sin(x+y) e^(1-t), S = cos(x+y) e^(1-t).

    Forcings are closed forms obtained by substituting the fields into the
    momentum, heat and solute equations with the given coefficients.
    """

    def __init__(self, params: PhysicalParams = MANUFACTURED_PARAMS):
        self.params = params

    @staticmethod
    def u(x, y, t):
        return np.stack(np.broadcast_arrays(np.cos(y) * np.exp(t), np.sin(x) * np.exp(t)))

    @staticmethod
    def p(x, y, t):
        return (x - y) * (1 + t)

    @staticmethod
    def T(x, y, t):
        return np.sin(x + y) * np.exp(1 - t)

    @staticmethod
    def S(x, y, t):
        return np.cos(x + y) * np.exp(1 - t)

    def F(self, x, y, t):
        prm = self.params
        et = np.exp(t)
        lin = 1.0 + prm.nu + prm.inv_Da
        theta = prm.beta_T * self.T(x, y, t) + prm.beta_C * self.S(x, y, t)
        g1, g2 = prm.gravity
        f1 = lin * np.cos(y) * et - np.sin(x) * np.sin(y) * et**2 + (1 + t) - theta * g1
        f2 = lin * np.sin(x) * et + np.cos(x) * np.cos(y) * et**2 - (1 + t) - theta * g2
        return np.stack(np.broadcast_arrays(f1, f2))

    def G(self, x, y, t):
        k = self.params.kappa
        return (2 * k - 1) * self.T(x, y, t) + E * (np.cos(y) + np.sin(x)) * np.cos(x + y)

    def Phi(self, x, y, t):
        d = self.params.Dc
        return (2 * d - 1) * self.S(x, y, t) - E * (np.cos(y) + np.sin(x)) * np.sin(x + y)

    def problem(self) -> Problem:
        return Problem(u_bc=self.u, T_bc=self.T, S_bc=self.S, F=self.F, G=self.G, Phi=self.Phi)

    def residuals(self, x, y, t, step=1e-5):
        """Strong-form residuals of all four equations by central differences.

        Evaluated in extended precision: with ``step = 1e-5`` the second
        differences would otherwise carry roundoff of order ``eps / step**2``.
        """
        prm = self.params
        x, y, t = (np.asarray(v, dtype=np.longdouble) for v in (x, y, t))
        d = np.longdouble(step)

        def dx(f, c=None):
            g = (lambda a, b, s: f(a, b, s)[c]) if c is not None else f
            return (g(x + d, y, t) - g(x - d, y, t)) / (2 * d)

        def dy(f, c=None):
            g = (lambda a, b, s: f(a, b, s)[c]) if c is not None else f
            return (g(x, y + d, t) - g(x, y - d, t)) / (2 * d)

        def dt(f, c=None):
            g = (lambda a, b, s: f(a, b, s)[c]) if c is not None else f
            return (g(x, y, t + d) - g(x, y, t - d)) / (2 * d)

        def lap(f, c=None):
            g = (lambda a, b, s: f(a, b, s)[c]) if c is not None else f
            return (g(x + d, y, t) + g(x - d, y, t) + g(x, y + d, t) + g(x, y - d, t) - 4 * g(x, y, t)) / d**2

        u = self.u(x, y, t)
        theta = prm.beta_T * self.T(x, y, t) + prm.beta_C * self.S(x, y, t)
        mom = []
        for c, grad_p in ((0, dx(self.p)), (1, dy(self.p))):
            conv = u[0] * dx(self.u, c) + u[1] * dy(self.u, c)
            r = (dt(self.u, c) - prm.nu * lap(self.u, c) + conv + prm.inv_Da * u[c] + grad_p
                 - theta * prm.gravity[c] - self.F(x, y, t)[c])
            mom.append(r)
        div = dx(self.u, 0) + dy(self.u, 1)
        heat = dt(self.T) - prm.kappa * lap(self.T) + u[0] * dx(self.T) + u[1] * dy(self.T) - self.G(x, y, t)
        solute = dt(self.S) - prm.Dc * lap(self.S) + u[0] * dx(self.S) + u[1] * dy(self.S) - self.Phi(x, y, t)
        return (np.array(mom, dtype=float), np.asarray(div, dtype=float), np.asarray(heat, dtype=float),
                np.asarray(solute, dtype=float))


def forcing_from_solution(params: PhysicalParams = MANUFACTURED_PARAMS):
    """Closed-form (F, G, Phi) for the manufactured solution."""
    sol = ManufacturedSolution(params)
    return sol.F, sol.G, sol.Phi


def l2_error(space: FESpace, coeffs: np.ndarray, exact, t=None, degree: int = 8) -> float:
    """``||u_h - u||_{L2}`` by quadrature exact to ``degree``; ``exact=None`` gives ``||u_h||``."""
    ed = space.elements_for(degree)
    x, y = ed.points[..., 0], ed.points[..., 1]
    total = 0.0
    ref = None
    if exact is not None:
        ref = np.asarray(exact(x, y) if t is None else exact(x, y, t), dtype=float)
        ref = np.broadcast_to(ref, (space.arity,) + x.shape if space.arity > 1 else x.shape)
    for c in range(space.arity):
        vals = ed.field_values(space.component(coeffs, c))
        if ref is not None:
            vals = vals - (ref[c] if space.arity > 1 else ref)
        total += float(np.sum(ed.jxw * vals * vals))
    return math.sqrt(total)


def manufactured_error_fn(disc: Discretization, sol: ManufacturedSolution):
    def errors(state):
        return (l2_error(disc.V, state.u, sol.u, state.time),
                l2_error(disc.Y, state.T, sol.T, state.time),
                l2_error(disc.Y, state.S, sol.S, state.time))
    return errors


def manufactured_run(n: int, dt: float, mu, t_final: float = 1.0, H: float | None = None,
                     pair: str = "taylor-hood", backend: str = "lu", tol: float | None = None, pressure_pin: int = 0,
                     params: PhysicalParams = MANUFACTURED_PARAMS, record_errors: bool = True,
                     initial=None) -> tuple[Trajectory, Discretization]:
    """Manufactured problem on the unit square with ``n`` subdivisions, zero initial data."""
    disc = Discretization(build_structured((0, 1, 0, 1), n), H=H, pair=pair)
    sol = ManufacturedSolution(params)
    cfg = StepperConfig(dt=dt, mu1=mu[0], mu2=mu[1], mu3=mu[2], params=params, backend=backend,
                        tol=tol, pressure_pin=pressure_pin)
    stepper = Stepper(disc, sol.problem(), cfg)
    steps = int(round(t_final / dt))
    stream = ManufacturedStream(sol, disc.obs_u, disc.obs_T, disc.obs_S, dt, n_levels=steps)
    state = disc.zero_state() if initial is None else initial(disc)
    err = manufactured_error_fn(disc, sol)
    if record_errors:
        traj = run(state, steps, stepper, stream, error_fn=err)
    else:
        traj = run(state, steps, stepper, stream)
        traj.rows[-1].update(zip(("err_u", "err_T", "err_S"), err(traj.final)))
    return traj, disc


RATE_COLUMNS = ("h", "err_u", "rate_u", "err_T", "rate_T", "err_S", "rate_S")


@dataclass
class RateTable:
    rows: list = field(default_factory=list)
    failed: bool = False

    @classmethod
    def from_errors(cls, hs, errors) -> "RateTable":
        """``errors`` is a list of (err_u, err_T, err_S) matched to ``hs``."""
        table = cls()
        for i, (h, e) in enumerate(zip(hs, errors)):
            row = {"h": h, "err_u": e[0], "err_T": e[1], "err_S": e[2]}
            for j, name in enumerate(("u", "T", "S")):
                if i == 0:
                    row[f"rate_{name}"] = float("nan")
                else:
                    prev = errors[i - 1][j]
                    row[f"rate_{name}"] = math.log(prev / e[j]) / math.log(hs[i - 1] / h)
            table.rows.append(row)
        return table

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=float)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=RATE_COLUMNS)
            w.writeheader()
            for r in self.rows:
                w.writerow({k: repr(float(r[k])) for k in RATE_COLUMNS})

    def format(self) -> str:
        lines = ["     h      err_u   rate     err_T   rate     err_S   rate"]
        for r in self.rows:
            lines.append(
                f"{r['h']:8.5f} {r['err_u']:9.3e} {r['rate_u']:5.2f} {r['err_T']:9.3e} {r['rate_T']:5.2f}"
                f" {r['err_S']:9.3e} {r['rate_S']:5.2f}"
            )
        return "\n".join(lines)


def convergence_study(h_list, dt: float = 1e-3, mu=(100.0, 100.0, 100.0), t_final: float = 1.0,
                      H_factor: float = 4.0, H: float | None = None, **kw) -> RateTable:
    """Final-time L2 errors of the manufactured problem per mesh size, with observed rates.

    The coarse observation size is ``H_factor * h`` on each level unless a
    fixed ``H`` is given.
    """
    hs = [float(h) for h in h_list]
    for a, b in zip(hs, hs[1:]):
        if not math.isclose(a / b, 2.0, rel_tol=1e-9):
            raise ValueError("h_list must decrease by halving")
    done_h, errors = [], []
    failed = False
    for h in hs:
        n = int(round(1.0 / h))
        try:
            traj, _ = manufactured_run(n, dt, mu, t_final, H=H if H is not None else H_factor * h,
                                       record_errors=False, **kw)
        except RuntimeError as exc:
            log.error("convergence run h=%g failed: %s", h, exc)
            failed = True
            break
        last = traj.rows[-1]
        errors.append((last["err_u"], last["err_T"], last["err_S"]))
        done_h.append(h)
        log.info("h=%g errors u=%.3e T=%.3e S=%.3e", h, *errors[-1])
    table = RateTable.from_errors(done_h, errors)
    table.failed = failed
    return table


@dataclass
class DecayCurve:
    mu: tuple
    time: np.ndarray
    err_u: np.ndarray
    err_T: np.ndarray
    err_S: np.ndarray
    window: tuple = (0.2, 0.8)

    def series(self, name: str) -> np.ndarray:
        return getattr(self, f"err_{name}")

    def rate(self, name: str) -> float:
        return fit_decay_rate(self.time, self.series(name), self.window)

    @property
    def rates(self) -> dict:
        return {n: self.rate(n) for n in ("u", "T", "S")}


def fit_decay_rate(time, err, window=(0.2, 0.8)) -> float:
    """Least-squares ``lambda`` in ``err ~ C exp(-lambda t)`` over a window of the horizon.

    ``window`` is a pair of fractions of the final time; nonpositive errors
    truncate the window at the first occurrence.
    """
    time = np.asarray(time, dtype=float)
    err = np.asarray(err, dtype=float)
    t_end = time[-1]
    sel = (time >= window[0] * t_end) & (time <= window[1] * t_end)
    idx = np.flatnonzero(sel)
    bad = idx[err[idx] <= 0]
    if len(bad):
        idx = idx[idx < bad[0]]
    if len(idx) < 2:
        raise ValueError("fewer than two positive samples in the fit window")
    slope = np.polyfit(time[idx], np.log(err[idx]), 1)[0]
    return float(-slope)


def decay_study(n: int = 16, dt: float = 1e-3, mu_list=((1, 1, 1), (10, 10, 10), (100, 100, 100), (1000, 1000, 1000)),
                t_final: float = 1.0, window=(0.2, 0.8), **kw) -> list[DecayCurve]:
    curves = []
    for mu in mu_list:
        if not mu[0] > 0:
            raise ValueError("decay study needs a positive velocity nudging parameter")
        traj, _ = manufactured_run(n, dt, mu, t_final, **kw)
        curves.append(DecayCurve(tuple(float(m) for m in mu), traj.column("time"), traj.column("err_u"),
                                 traj.column("err_T"), traj.column("err_S"), window))
    return curves


def write_decay_csv(curves, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["mu1", "mu2", "mu3", "time", "err_u", "err_T", "err_S"])
        for c in curves:
            for k in range(len(c.time)):
                w.writerow([*c.mu, repr(float(c.time[k])), repr(float(c.err_u[k])),
                            repr(float(c.err_T[k])), repr(float(c.err_S[k]))])


def is_eventually_monotone(err, skip_fraction=0.1, rtol=0.0) -> bool:
    """Nonincreasing after the first ``skip_fraction`` of samples (relative slack ``rtol``)."""
    e = np.asarray(err, dtype=float)
    start = int(math.ceil(skip_fraction * (len(e) - 1)))
    tail = e[start:]
    return bool(np.all(tail[1:] <= tail[:-1] * (1 + rtol)))


def poincare_constant(width: float, height: float) -> float:
    """Sharp Poincare-Friedrichs constant of a ``width x height`` rectangle, ``||v|| <= C ||grad v||``."""
    return 1.0 / (math.pi * math.sqrt(1.0 / width ** 2 + 1.0 / height ** 2))


@dataclass(frozen=True)
class StabilityBounds:
    """Predicted long-time energy bounds for the nudged scheme with homogeneous boundary data.

    ``u_sup``, ``T_sup`` and ``S_sup`` are time suprema of the L2 norms of the
    observed fields; ``F_dual``, ``G_dual`` and ``Phi_dual`` are time suprema
    of the forcings' H^-1 norms, for which ``C_PF ||.||_{L2}`` is an upper
    bound.  With an infinite Darcy number the velocity bound is infinite.
    """

    params: PhysicalParams
    mu: tuple
    dt: float
    C_PF: float
    u_sup: float = 0.0
    T_sup: float = 0.0
    S_sup: float = 0.0
    F_dual: float = 0.0
    G_dual: float = 0.0
    Phi_dual: float = 0.0

    @property
    def lambda_u(self) -> float:
        p = self.params
        return min(p.nu * self.dt / (4 * self.C_PF ** 2) + p.inv_Da * self.dt / 4, 1.0)

    @property
    def lambda_T(self) -> float:
        return min(self.params.kappa * self.dt / (4 * self.C_PF ** 2), 1.0)

    @property
    def lambda_S(self) -> float:
        return min(self.params.Dc * self.dt / (4 * self.C_PF ** 2), 1.0)

    def _scalar_floor(self, mu, diff, sup, dual):
        c2 = self.C_PF ** 2
        return (max(4 * mu * c2 / diff, mu * self.dt) * sup ** 2
                + max(4 * c2 / diff ** 2, self.dt / diff) * dual ** 2)

    @property
    def K_T_floor(self) -> float:
        """Large-time limit of the temperature bound."""
        return self._scalar_floor(self.mu[1], self.params.kappa, self.T_sup, self.G_dual)

    @property
    def K_S_floor(self) -> float:
        return self._scalar_floor(self.mu[2], self.params.Dc, self.S_sup, self.Phi_dual)

    def K_T(self, n, initial_energy: float = 0.0) -> np.ndarray:
        """Bound on ``||T^(n+1)||^2 + kappa dt/4 ||grad T^(n+1)||^2``.

        ``initial_energy`` is ``||T^0||^2 + kappa dt ||grad T^0||^2``.
        """
        n = np.asarray(n, dtype=float)
        return (1 + self.lambda_T) ** (-(n + 1)) * initial_energy + self.K_T_floor

    def K_S(self, n, initial_energy: float = 0.0) -> np.ndarray:
        n = np.asarray(n, dtype=float)
        return (1 + self.lambda_S) ** (-(n + 1)) * initial_energy + self.K_S_floor

    def u_bound(self, n, initial_energy: float = 0.0, T0_sq: float = 0.0, S0_sq: float = 0.0) -> np.ndarray:
        """Bound on ``||u^(n+1)||^2 + (nu + 1/Da) dt/4 ||.||`` terms; infinite when ``1/Da = 0``."""
        p = self.params
        n = np.asarray(n, dtype=float)
        if p.inv_Da == 0:
            return np.full(n.shape, np.inf)
        c2, Da = self.C_PF ** 2, 1.0 / p.inv_Da
        denom = p.nu + c2 * p.inv_Da
        g = max(abs(p.gravity[0]), abs(p.gravity[1]))
        buoy = max(4 * c2 * Da / denom, Da * self.dt) * (
            p.beta_T ** 2 * max(T0_sq, self.K_T_floor) + p.beta_C ** 2 * max(S0_sq, self.K_S_floor)) * g ** 2
        force = max(4 * c2 / (p.nu * denom), self.dt / p.nu) * self.F_dual ** 2
        nudge = max(4 * c2 * self.mu[0] / denom, self.mu[0] * self.dt) * self.u_sup ** 2
        return (1 + self.lambda_u) ** (-(n + 1)) * initial_energy + buoy + force + nudge
