import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from msfrecon.geometry import ProjectionOperator, ScanGeometry, Sinogram, Volume, WeightMap, project
from msfrecon.mbir import CGParams, ConvergenceError, MrfSpec
from msfrecon.metrics import nrmse
from msfrecon.phantom import generate_phantom
from msfrecon.solver import (AgentError, AgentSpec, ConsensusState, PnPConfig, ResidualTrace,
                             build_bm4d_agents, build_msf_agents, consensus_step,
                             data_fidelity_prox, residuals, run_pnp)
from oracles import dense_operator, laplacian, residuals_loop


def quad_agent(a, p):
    """Prox of (a/2)||z - p||^2."""
    return AgentSpec("custom", fn=lambda v, rho, warm: (a * p + rho * v) / (a + rho))


def identity_agent():
    return AgentSpec("custom", fn=lambda v, rho, warm: v.copy())


def small_problem(seed=0, noise=0.01, n=8, views=12):
    rng = np.random.default_rng(seed)
    g = ScanGeometry.uniform(views, n)
    op = ProjectionOperator(g, (1, n, n))
    truth = rng.random((1, n, n))
    y = Sinogram(op.forward(truth) + noise * rng.standard_normal(op.sino_shape),
                 np.array(g.angles))
    return g, op, y


def test_agent_spec_validation():
    g, _, y = small_problem()
    W = WeightMap.uniform(y)
    for bad in (dict(kind="oracle"), dict(kind="bm3d-plane", plane="ZZ", sigma=0.1),
                dict(kind="bm3d-plane", plane="XY"), dict(kind="bm4d", sigma=-1.0),
                dict(kind="mrf-prox"), dict(kind="data-fidelity", y=y, geom=g),
                dict(kind="custom")):
        with pytest.raises(ValueError):
            AgentSpec(**bad)
    assert AgentSpec("data-fidelity", y=y, weights=W, geom=g).label == "data-fidelity"


def test_consistent_data_is_a_fixed_point():
    g, op, _ = small_problem()
    v = np.random.default_rng(2).random((1, 8, 8))
    y = Sinogram(op.forward(v), np.array(g.angles))
    for rho in (0.1, 50.0):
        z = data_fidelity_prox(v, y, WeightMap.uniform(y), g, rho, CGParams(1e-14, 500))
        assert np.allclose(z, v, atol=1e-10)


def test_huge_rho_returns_input():
    g, _, y = small_problem()
    v = np.random.default_rng(3).random((1, 8, 8))
    z = data_fidelity_prox(Volume(v), y, WeightMap.uniform(y), g, 1e8)
    assert isinstance(z, Volume)
    assert np.linalg.norm(z.data - v) <= 1e-3 * np.linalg.norm(v)


def test_prox_matches_dense_oracle():
    g, op, y = small_problem(noise=0.05)
    w = np.random.default_rng(4).uniform(0.5, 2.0, op.sino_shape)
    v = np.random.default_rng(5).random((1, 8, 8))
    rho = 50.0
    z = data_fidelity_prox(v, y, WeightMap(w), g, rho, CGParams(1e-14, 1000))
    a = dense_operator(op.forward, (1, 8, 8))
    aw = a * w.ravel()[:, None]
    ref = np.linalg.solve(a.T @ aw + rho * np.eye(64), aw.T @ y.data.ravel() + rho * v.ravel())
    assert np.max(np.abs(z.ravel() - ref)) <= 1e-6 * max(1.0, np.max(np.abs(ref)))
    with pytest.raises(ValueError):
        data_fidelity_prox(v, y, WeightMap(w), g, 0.0)


def test_prox_non_finite_is_reported():
    g, _, y = small_problem()
    bad = WeightMap(np.full(y.data.shape, 1e308))
    with pytest.raises(ConvergenceError):
        data_fidelity_prox(np.ones((1, 8, 8)), y, bad, g, 1.0)


def test_state_invariants():
    with pytest.raises(ValueError):
        ConsensusState(np.zeros(3), [np.zeros(3)], [np.zeros(3)], 0.0)
    with pytest.raises(ValueError):
        ConsensusState(np.zeros(3), [np.zeros(4)], [np.zeros(3)], 1.0)
    s = ConsensusState.initial(np.ones((1, 2, 2)), 3, 50.0)
    assert len(s.z) == 3 and all(not u.any() for u in s.u) and s.k == 0


def test_identity_agents_constant_fixed_point():
    c = np.full((2, 4, 4), 0.7)
    s = ConsensusState.initial(c, 3, 50.0)
    new = consensus_step(s, [identity_agent() for _ in range(3)])
    # the average of three equal copies may round in the last bit
    assert np.allclose(new.x, c, rtol=1e-15, atol=0)
    assert all(np.allclose(z, c, rtol=1e-15, atol=0) for z in new.z)
    assert all(np.abs(u).max() <= 1e-15 for u in new.u)
    assert new.k == 1


def test_x_update_is_the_average():
    rng = np.random.default_rng(0)
    a, b = rng.random((2, 1, 3, 3))
    s = ConsensusState(np.zeros_like(a), [a, b], [np.zeros_like(a)] * 2, 50.0)
    new = consensus_step(s, [identity_agent(), identity_agent()])
    assert np.array_equal(new.x, (a + b) / 2)


@given(st.integers(0, 2 ** 31), st.integers(2, 5))
def test_step_algebra(seed, n):
    rng = np.random.default_rng(seed)
    z = list(rng.standard_normal((n, 1, 3, 3)))
    u = list(rng.standard_normal((n, 1, 3, 3)))
    s = ConsensusState(np.zeros((1, 3, 3)), z, u, 7.0)
    ps = rng.standard_normal((n, 1, 3, 3))
    agents = [quad_agent(float(i + 1), ps[i]) for i in range(n)]
    new = consensus_step(s, agents)
    mean = sum(zl - ul for zl, ul in zip(z, u)) / n
    assert np.allclose(new.x, mean, rtol=0, atol=1e-14)
    for ul, un, zn in zip(u, new.u, new.z):
        assert np.array_equal(un - ul, (ul + new.x - zn) - ul)
        assert np.allclose(un - ul, new.x - zn, rtol=0, atol=1e-14)


def test_two_quadratic_agents_reach_closed_form():
    rng = np.random.default_rng(1)
    p, q = rng.random((2, 1, 4, 4))
    a, b = 40.0, 70.0
    s = ConsensusState.initial(np.zeros_like(p), 2, 50.0)
    agents = [quad_agent(a, p), quad_agent(b, q)]
    for _ in range(50):
        s = consensus_step(s, agents)
    assert np.max(np.abs(s.x - (a * p + b * q) / (a + b))) <= 1e-6


def test_agent_failure_carries_index():
    def boom(v, rho, warm):
        raise FloatingPointError("bad")
    s = ConsensusState.initial(np.zeros((1, 2, 2)), 2, 1.0)
    with pytest.raises(AgentError) as err:
        consensus_step(s, [identity_agent(), AgentSpec("custom", fn=boom)])
    assert err.value.index == 1 and err.value.kind == "custom"


def test_residual_degenerate_cases():
    x = np.ones((1, 2, 2))
    s = ConsensusState(x, [x.copy(), x.copy()], [x * 0, x * 0], 50.0)
    p, d = residuals(s, s)
    assert p == 0.0 and d == 0.0


@pytest.mark.parametrize("seed", range(5))
def test_residuals_match_recomputation(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, 4, 4))
    z = list(rng.standard_normal((2, 1, 4, 4)))
    zp = list(rng.standard_normal((2, 1, 4, 4)))
    zeros = [np.zeros_like(x)] * 2
    got = residuals(ConsensusState(x, z, zeros, 50.0), ConsensusState(x, zp, zeros, 50.0))
    ref = residuals_loop(x, z, zp, 50.0)
    assert abs(got[0] - ref[0]) <= 1e-12 * ref[0]
    assert abs(got[1] - ref[1]) <= 1e-12 * ref[1]


def test_trace_validation_and_csv(tmp_path):
    tr = ResidualTrace()
    tr.append(1.0, 0.5)
    tr.append(0.1 / 3, 0.0)
    for bad in ((-1.0, 0.0), (np.nan, 0.0), (0.0, np.inf)):
        with pytest.raises(ValueError):
            tr.append(*bad)
    tr.to_csv(tmp_path / "t.csv")
    assert (tmp_path / "t.csv").read_text().splitlines()[0] == "iteration,primal,dual"
    back = ResidualTrace.from_csv(tmp_path / "t.csv")
    assert back.primal == tr.primal and back.dual == tr.dual


def quadratic_pair(beta=10.0):
    g, op, y = small_problem(noise=0.01)
    W = WeightMap.uniform(y)
    spec = MrfSpec(beta=beta)
    agents = [AgentSpec("data-fidelity", y=y, weights=W, geom=g, cg=CGParams(1e-13, 500)),
              AgentSpec("mrf-prox", mrf=spec, cg=CGParams(1e-13, 500))]
    a = dense_operator(op.forward, (1, 8, 8))
    ref = np.linalg.solve(a.T @ a + beta * laplacian((1, 8, 8), 26), a.T @ y.data.ravel())
    return agents, ref


def test_run_pnp_quadratic_matches_joint_minimizer():
    agents, ref = quadratic_pair()
    x, trace = run_pnp(agents, np.zeros((1, 8, 8)), PnPConfig(stop_frac=0.0, max_iter=200))
    assert len(trace) == 200 and not trace.converged
    assert np.linalg.norm(x.ravel() - ref) <= 1e-4 * np.linalg.norm(ref)


def test_stop_frac_one_stops_after_first_iteration():
    agents, _ = quadratic_pair()
    _, trace = run_pnp(agents, np.zeros((1, 8, 8)), PnPConfig(stop_frac=1.0))
    assert len(trace) == 1 and trace.converged


def test_either_residual_rule():
    agents, _ = quadratic_pair()
    cfg_both = PnPConfig(stop_frac=0.05, max_iter=300)
    cfg_any = PnPConfig(stop_frac=0.05, max_iter=300, require_both=False)
    _, both = run_pnp(agents, np.zeros((1, 8, 8)), cfg_both)
    _, either = run_pnp(agents, np.zeros((1, 8, 8)), cfg_any)
    assert both.converged and either.converged and len(either) <= len(both)
    last = len(both) - 1
    assert both.primal[last] <= 0.05 * both.primal[0] and both.dual[last] <= 0.05 * both.dual[0]


def test_run_pnp_agent_count_rules():
    agents, _ = quadratic_pair()
    with pytest.raises(ValueError):
        run_pnp(agents[:1], np.zeros((1, 8, 8)))
    with pytest.raises(ValueError):
        run_pnp([agents[1], agents[1]], np.zeros((1, 8, 8)))
    with pytest.raises(ValueError):
        run_pnp([agents[0], agents[0], agents[1]], np.zeros((1, 8, 8)))


def test_builders():
    g, _, y = small_problem()
    W = WeightMap.uniform(y)
    msf = build_msf_agents(y, W, g, (0.1, 0.2, 0.3))
    assert [a.label for a in msf] == ["data-fidelity", "XY", "YZ", "XZ"]
    assert msf[2].sigma != msf[3].sigma
    same = build_msf_agents(y, W, g, (0.1,) * 3)
    assert len(same) == 4 and {a.sigma for a in same[1:]} == {0.1}
    with pytest.raises(ValueError):
        build_msf_agents(y, W, g, (0.1, 0.0, 0.1))
    with pytest.raises(ValueError):
        build_msf_agents(y, W, g, (0.1, 0.1))
    b4 = build_bm4d_agents(y, W, g, 0.1)
    assert [a.kind for a in b4] == ["data-fidelity", "bm4d"]
    with pytest.raises(ValueError):
        build_bm4d_agents(y, W, g, -0.1)


def _msf_setup():
    truth = generate_phantom("shepp3d", (8, 32, 32))
    g = ScanGeometry.uniform(32, 32, n_slices=8)
    y = project(truth, g)
    return truth, g, y


def test_msf_consistency_run():
    truth, g, y = _msf_setup()
    agents = build_msf_agents(y, WeightMap.uniform(y), g, (0.001, 0.001, 0.001))
    x, trace = run_pnp(agents, truth.data, PnPConfig(max_iter=20))
    assert nrmse(x, truth) <= nrmse(truth, truth) + 0.01


def test_run_pnp_deterministic_across_threads():
    truth, g, y = _msf_setup()
    noisy = y.like(y.data + 0.1 * np.random.default_rng(0).standard_normal(y.data.shape))
    W = WeightMap.uniform(noisy)
    runs = []
    for threads in (1, 4):
        agents = build_msf_agents(noisy, W, g, (0.1, 0.1, 0.1), threads=threads)
        runs.append(run_pnp(agents, np.zeros(truth.shape), PnPConfig(max_iter=3, threads=threads)))
    (x1, t1), (x2, t2) = runs
    assert np.array_equal(x1, x2)
    assert t1.primal == t2.primal and t1.dual == t2.dual
