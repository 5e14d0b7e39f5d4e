import numpy as np
import pytest

from cda.assembly import PhysicalParams
from cda.cda_stepper import (DivergenceError, Discretization, Problem, State, Stepper, StepperConfig,
                             StreamMisalignmentError, TRAJECTORY_COLUMNS, advance, run)
from cda.mesh import build_structured
from cda.observations import ManufacturedStream
from cda.verification import ManufacturedSolution, l2_error, manufactured_error_fn


@pytest.fixture(scope="module")
def disc4():
    return Discretization(build_structured((0, 1, 0, 1), 4), H=0.5)


@pytest.fixture(scope="module")
def sol():
    return ManufacturedSolution()


def _exact_state(disc, sol, t):
    return State(disc.V.interpolate(sol.u, t), disc.Q.interpolate(sol.p, t), disc.Y.interpolate(sol.T, t),
                 disc.Y.interpolate(sol.S, t), t)


def test_zero_is_fixed_point(disc4):
    cfg = StepperConfig(dt=0.1, mu1=10, mu2=10, mu3=10)
    zero = {"u": np.zeros((2, disc4.obs_u.n_cells)), "T": np.zeros(disc4.obs_T.n_cells),
            "S": np.zeros(disc4.obs_T.n_cells)}
    out = advance(disc4.zero_state(), zero, cfg, disc4)
    for a in (out.u, out.p, out.T, out.S):
        assert np.all(a == 0.0)
    assert out.time == pytest.approx(0.1)


def test_one_plain_step_from_exact_data(sol):
    disc = Discretization(build_structured((0, 1, 0, 1), 8))
    dt = 1e-3
    st = Stepper(disc, sol.problem(), StepperConfig(dt=dt))
    out, info = st.advance(_exact_state(disc, sol, 0.0))
    e_u = l2_error(disc.V, out.u, sol.u, dt)
    e_T = l2_error(disc.Y, out.T, sol.T, dt)
    # O(dt^2) local truncation plus O(h^3) interpolation error
    assert e_u < 1e-4 and e_T < 1e-4
    assert set(info.reports) == {"velocity", "temperature", "concentration"}


def test_state_invariants(disc4, sol):
    cfg = StepperConfig(dt=0.05, mu1=100, mu2=100, mu3=100)
    st = Stepper(disc4, sol.problem(), cfg)
    stream = ManufacturedStream(sol, disc4.obs_u, disc4.obs_T, disc4.obs_S, cfg.dt)
    out, _ = st.advance(disc4.zero_state(), stream.sample(0))
    assert out.is_finite()
    assert abs(disc4.ops.p_mean @ out.p) < 1e-12
    fixed = st.u_fixed
    assert np.allclose(out.u[fixed], disc4.V.interpolate(sol.u, cfg.dt)[fixed], atol=1e-14)
    assert np.allclose(out.T[st.T_fixed], disc4.Y.interpolate(sol.T, cfg.dt)[st.T_fixed], atol=1e-14)


@pytest.mark.parametrize("pair", ["taylor-hood", "scott-vogelius"])
def test_discrete_divergence(pair):
    disc = Discretization(build_structured((0, 1, 0, 1), 4), pair=pair)

    def F(x, y, t):
        return np.stack([np.sin(3 * y) + 0 * x, np.cos(2 * x) * y])

    st = Stepper(disc, Problem(F=F), StepperConfig(dt=0.1))
    state = disc.zero_state()
    for _ in range(3):
        state, info = st.advance(state)
        scale = np.linalg.norm(disc.ops.B.toarray(), 2) * np.linalg.norm(state.u)
        assert info.div_residual <= 1e-10 * scale
    assert np.linalg.norm(state.u) > 0


def test_zero_nudging_has_no_matrix(disc4):
    st = Stepper(disc4, Problem(), StepperConfig(dt=0.1, mu1=5.0))
    assert st.nudge_u is not None
    assert st.nudge_T is None and st.nudge_S is None


def test_nudging_matches_explicit_normal_matrix(disc4, sol):
    # the auxiliary-variable formulation must equal adding mu P^T W P directly
    from cda.cda_stepper import _constrained_solve
    import scipy.sparse as sp
    rng = np.random.default_rng(0)
    Y = disc4.Y
    K = disc4.ops.M_T * 10 + disc4.ops.A_T
    b = rng.normal(size=Y.n_dofs)
    fixed = Y.dirichlet_dofs()
    vals = rng.normal(size=len(fixed))
    mu = 37.0
    op = disc4.obs_T
    x1, _ = _constrained_solve(K, b, fixed, vals, 1e-10, "lu", nudge=(op.P, mu * op.W))
    x2, _ = _constrained_solve(sp.csr_matrix(K + mu * disc4.ops.G_T), b, fixed, vals, 1e-10, "lu")
    assert np.allclose(x1, x2, rtol=1e-9, atol=1e-11)


def test_large_mu_approaches_observations(sol):
    disc = Discretization(build_structured((0, 1, 0, 1), 4), H=0.5)
    stream = ManufacturedStream(sol, disc.obs_u, disc.obs_T, disc.obs_S, 0.01)
    obs = stream.sample(0)
    mismatch = []
    for mu in (1, 10, 100, 1e3, 1e4):
        st = Stepper(disc, sol.problem(), StepperConfig(dt=0.01, mu1=mu, mu2=mu, mu3=mu))
        out, _ = st.advance(disc.zero_state(), obs)
        mismatch.append([
            disc.obs_u.coarse_l2_sq(disc.obs_u.observe(out.u) - obs["u"]),
            disc.obs_T.coarse_l2_sq(disc.obs_T.observe(out.T) - obs["T"]),
            disc.obs_T.coarse_l2_sq(disc.obs_T.observe(out.S) - obs["S"]),
        ])
    mismatch = np.array(mismatch)
    assert np.all(np.diff(mismatch, axis=0) < 0)


def test_divergence_error_names_stage(disc4):
    st = Stepper(disc4, Problem(), StepperConfig(dt=0.1))
    bad = disc4.zero_state()
    bad.T[3] = np.nan
    with pytest.raises(DivergenceError) as info:
        st.advance(bad)
    assert info.value.stage == "velocity"


def test_nudging_without_data_is_an_error(disc4):
    st = Stepper(disc4, Problem(), StepperConfig(dt=0.1, mu2=1.0))
    with pytest.raises(ValueError):
        st.advance(disc4.zero_state(), {})


@pytest.mark.parametrize("kwargs", [{"dt": 0}, {"dt": -1}, {"dt": 0.1, "mu1": -1}, {"dt": 0.1, "mu3": -0.5}])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        StepperConfig(**kwargs)


def test_run_horizon_zero(disc4, sol):
    st = Stepper(disc4, sol.problem(), StepperConfig(dt=0.1))
    init = _exact_state(disc4, sol, 0.0)
    traj = run(init, 0, st)
    assert len(traj.rows) == 1
    assert traj.rows[0]["norm_u"] == pytest.approx(disc4.l2_norm(disc4.V, init.u))


def test_run_records_and_csv(disc4, sol, tmp_path):
    cfg = StepperConfig(dt=0.1, mu1=10, mu2=10, mu3=10)
    st = Stepper(disc4, sol.problem(), cfg)
    stream = ManufacturedStream(sol, disc4.obs_u, disc4.obs_T, disc4.obs_S, cfg.dt, n_levels=3)
    traj = run(disc4.zero_state(), 3, st, stream, error_fn=manufactured_error_fn(disc4, sol))
    assert len(traj.rows) == 4
    assert traj.column("time") == pytest.approx([0, 0.1, 0.2, 0.3])
    e0 = traj.rows[0]
    assert e0["err_u"] == pytest.approx(l2_error(disc4.V, np.zeros(disc4.V.n_dofs), sol.u, 0.0))
    traj.write_csv(tmp_path / "traj.csv")
    lines = (tmp_path / "traj.csv").read_text().splitlines()
    assert lines[0] == ",".join(TRAJECTORY_COLUMNS)
    assert len(lines) == 5
    with pytest.raises(StreamMisalignmentError):
        run(disc4.zero_state(), 4, st, stream)
    shifted = ManufacturedStream(sol, disc4.obs_u, disc4.obs_T, disc4.obs_S, cfg.dt, t0=0.05)
    with pytest.raises(StreamMisalignmentError):
        run(disc4.zero_state(), 1, st, shifted)


def test_runs_are_deterministic(disc4, sol):
    cfg = StepperConfig(dt=0.1, mu1=10, mu2=0, mu3=0)
    stream = ManufacturedStream(sol, disc4.obs_u, disc4.obs_T, disc4.obs_S, cfg.dt)
    a = run(disc4.zero_state(), 3, Stepper(disc4, sol.problem(), cfg), stream).final
    b = run(disc4.zero_state(), 3, Stepper(disc4, sol.problem(), cfg), stream).final
    for x, y in ((a.u, b.u), (a.p, b.p), (a.T, b.T), (a.S, b.S)):
        assert np.array_equal(x, y)


def test_gmres_backend_agrees(disc4, sol):
    init = _exact_state(disc4, sol, 0.0)
    out_lu, _ = Stepper(disc4, sol.problem(), StepperConfig(dt=0.1)).advance(init)
    out_it, info = Stepper(disc4, sol.problem(), StepperConfig(dt=0.1, backend="gmres", tol=1e-10)).advance(init)
    assert info.reports["velocity"].backend == "gmres"
    assert np.allclose(out_lu.u, out_it.u, atol=1e-8)
    assert np.allclose(out_lu.T, out_it.T, atol=1e-8)


def test_darcy_drag_slows_flow(disc4):
    def F(x, y, t):
        return np.stack([np.ones_like(x) * np.sin(np.pi * y), 0 * x])

    norms = []
    for inv_Da in (0.0, 100.0):
        cfg = StepperConfig(dt=0.1, params=PhysicalParams(inv_Da=inv_Da))
        out, _ = Stepper(disc4, Problem(F=F), cfg).advance(disc4.zero_state())
        norms.append(disc4.l2_norm(disc4.V, out.u))
    assert norms[1] < norms[0]
