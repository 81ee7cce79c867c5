import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from netmorph import dynamics, fem
from netmorph import mesh as meshlib
from netmorph.dynamics import ModelParams, Simulator, StopRule


# -- pointwise terms ----------------------------------------------------------------------


def test_forcing_examples():
    assert np.all(dynamics.relaxation_forcing([0.0, 0.0], [1.0, 2.0], 3.0, 0.5, 1e-12) == 0)
    np.testing.assert_allclose(dynamics.relaxation_forcing([1.0, 0], [1.0, 0], 1.0, 1.0, 0.0), [0, 0])
    np.testing.assert_allclose(dynamics.relaxation_forcing([1.0, 0], [1.0, 0], 2.0, 1.0, 0.0), [3, 0])


def test_forcing_singular():
    with pytest.raises(dynamics.SingularRelaxationError):
        dynamics.relaxation_forcing(np.zeros((3, 2)), np.ones((3, 2)), 1.0, 0.5, 0.0)


@settings(max_examples=50, deadline=None)
@given(
    m=st.tuples(st.floats(-5, 5), st.floats(-5, 5)),
    g=st.tuples(st.floats(-5, 5), st.floats(-5, 5)),
    gamma=st.floats(0.5, 2.0),
)
def test_forcing_is_odd_in_m(m, g, gamma):
    f1 = dynamics.relaxation_forcing(m, g, 2.0, gamma, 1e-6)
    f2 = dynamics.relaxation_forcing(np.negative(m), g, 2.0, gamma, 1e-6)
    np.testing.assert_allclose(f1, -f2, atol=1e-12)


def test_adapt_dt_rule():
    g = 50.0 * 10.0
    assert dynamics.adapt_dt(None, g, first=True) == pytest.approx(2e-6)
    # inside the window the step is kept
    assert dynamics.adapt_dt(3e-6, g) == 3e-6
    # gradient doubles: the window shrinks 4x and the step resets to half the new scale
    assert dynamics.adapt_dt(2e-6, 2 * g) == pytest.approx(0.5 / (2 * g) ** 2)
    assert dynamics.adapt_dt(1e-3, 0.0, dt_max=1e-2) == 1e-2
    assert dynamics.adapt_dt(None, 1.0, dt_max=1e-2, first=True) == 1e-2


def test_nondimensionalize():
    out = dynamics.nondimensionalize(D=0.3, c=2.0, alpha=1.0, r=0.1, x_bar=1, m_bar=1, S_bar=1, gamma=0.5)
    assert out["D"] == pytest.approx(0.3) and out["c"] == pytest.approx(2.0) and out["r"] == pytest.approx(0.1)
    assert dynamics.nondimensionalize(1, 1, 2.0, 1, 1, 1.0, 1, 0.7)["t_bar"] == pytest.approx(0.5)
    assert dynamics.nondimensionalize(1, 1, 1, 0.4, 1, 2.0, 1, 1.0)["r"] == pytest.approx(0.1)
    with pytest.raises(ValueError):
        dynamics.nondimensionalize(1, 1, 1, 1, 1, 0.0, 1, 1)
    with pytest.raises(ValueError):
        dynamics.nondimensionalize(1, 1, 1, 1, 1, 1, 0.0, 1)


def test_params_validation():
    with pytest.raises(ValueError):
        ModelParams(D=-1)
    with pytest.raises(ValueError):
        ModelParams(r=0.0)
    with pytest.raises(ValueError):
        ModelParams(gamma=0.5, rho=0.0)
    ModelParams(gamma=0.5, rho=0.0, extinction_monitor=True)


def test_sparsity_index_constant_field():
    mesh = meshlib.generate_unit_square(3)
    u = np.tile([0.6, 0.8], (mesh.n_triangles, 1))
    assert dynamics.sparsity_index(mesh, u) == pytest.approx(1.0)
    assert math.isnan(dynamics.sparsity_index(mesh, np.zeros_like(u)))


# -- energy ------------------------------------------------------------------------------------


def test_energy_zero_fields(diamond_coarse):
    prm = ModelParams(S=0.0, gamma=1.0, rho=0.0)
    nt = diamond_coarse.n_triangles
    E = dynamics.discrete_energy(diamond_coarse, np.zeros((nt, 2)), np.zeros(diamond_coarse.n_vertices), None, prm)
    assert E == 0.0


def test_energy_pressure_only(diamond_coarse):
    prm = ModelParams(gamma=1.0, rho=0.0, r=1.0)
    sim = Simulator(diamond_coarse, prm)
    st0 = sim.initial_state(np.zeros((diamond_coarse.n_triangles, 2)))
    g = fem.gradient_per_triangle(diamond_coarse, st0.p)
    expected = 0.5 * prm.c**2 * fem.l2_norm_p0(diamond_coarse, g) ** 2
    assert st0.diag.E_h == pytest.approx(expected, rel=1e-12)
    assert expected > 0


def test_energy_undefined_for_gamma_zero(diamond_coarse):
    prm = ModelParams(gamma=0.0, rho=1e-6)
    nt = diamond_coarse.n_triangles
    with pytest.raises(ValueError):
        dynamics.discrete_energy(diamond_coarse, np.ones((nt, 2)), np.zeros(diamond_coarse.n_vertices), None, prm)
    assert math.isnan(Simulator(diamond_coarse, prm).energy(np.ones((nt, 2)), np.zeros(diamond_coarse.n_vertices), None))


# -- stepping ------------------------------------------------------------------------------------


def test_d0_step_is_explicit_euler(diamond_coarse, rng):
    prm = ModelParams(D=0.0, c=2.0, gamma=0.5, r=0.1)
    sim = Simulator(diamond_coarse, prm)
    m0 = rng.normal(size=(diamond_coarse.n_triangles, 2))
    s0 = sim.initial_state(m0)
    s1 = dynamics.imex_step(sim, s0, 1e-3)
    f = dynamics.relaxation_forcing(m0, s0.grad_p, prm.c, prm.gamma, prm.rho)
    np.testing.assert_array_equal(s1.m, m0 + 1e-3 * f)
    assert s1.t == 1e-3 and s1.k == 1


def test_d0_update_independent_of_ordering(diamond_coarse, rng):
    mesh = diamond_coarse
    perm = rng.permutation(mesh.n_triangles)
    prm = ModelParams(D=0.0)
    m0 = rng.normal(size=(mesh.n_triangles, 2))
    g = rng.normal(size=(mesh.n_triangles, 2))
    a = m0 + 1e-4 * dynamics.relaxation_forcing(m0, g, prm.c, prm.gamma, prm.rho)
    b = m0[perm] + 1e-4 * dynamics.relaxation_forcing(m0[perm], g[perm], prm.c, prm.gamma, prm.rho)
    np.testing.assert_array_equal(a[perm], b)


def test_zero_source_zero_state_stays_zero(diamond_coarse):
    sim = Simulator(diamond_coarse, ModelParams(S=0.0, D=0.1))
    st0 = sim.initial_state(np.zeros((diamond_coarse.n_triangles, 2)))
    res = sim.run(st0, StopRule(T=0.05))
    assert not np.any(res.final.m) and not np.any(res.final.p)
    assert res.final.t == pytest.approx(0.05)


def test_stop_at_zero_time(diamond_coarse):
    sim = Simulator(diamond_coarse, ModelParams())
    st0 = sim.initial_state(dynamics.initial_conductance(diamond_coarse))
    res = sim.run(st0, StopRule(T=0.0))
    assert res.final is st0 and len(res.trajectory) == 1 and res.reason == "final_time"


def test_relaxation_dominated_decay(diamond_coarse):
    # c |grad p| < 1 everywhere: per-triangle linear decay at gamma = 1
    prm = ModelParams(D=0.0, c=0.1, gamma=1.0, rho=0.0, r=1.0)
    sim = Simulator(diamond_coarse, prm)
    st0 = sim.initial_state(np.full((diamond_coarse.n_triangles, 2), 0.5))
    assert st0.diag.grad_inf < 1
    norms = [fem.l2_norm_p0(diamond_coarse, st0.m)]
    s = st0
    for _ in range(20):
        s = sim.step(s, 0.05)
        norms.append(fem.l2_norm_p0(diamond_coarse, s.m))
    ratios = np.array(norms[1:]) / np.array(norms[:-1])
    assert np.all(ratios < 1 - 0.05 * (1 - st0.diag.grad_inf**2) + 1e-12)


def test_sign_symmetry_gamma_one(diamond_coarse):
    prm = ModelParams(D=0.1, c=3.0, gamma=1.0, rho=0.0, r=0.1)
    m0 = dynamics.initial_conductance(diamond_coarse, shift=0.2)
    a = Simulator(diamond_coarse, prm, solver="direct")
    b = Simulator(diamond_coarse, prm, solver="direct")
    ra = a.run(a.initial_state(m0), StopRule(T=0.02))
    rb = b.run(b.initial_state(-m0), StopRule(T=0.02))
    np.testing.assert_allclose(ra.final.m, -rb.final.m, atol=1e-12)
    np.testing.assert_allclose(ra.final.p, rb.final.p, atol=1e-12)


def test_energy_monotone_coarse_run(diamond_coarse):
    prm = ModelParams(D=0.1, c=5.0, gamma=0.5, r=0.1, rho=1e-12)
    sim = Simulator(diamond_coarse, prm, on_energy_increase="abort")
    st0 = sim.initial_state(dynamics.initial_conductance(diamond_coarse))
    res = sim.run(st0, StopRule(T=0.5))
    E = np.array([d.E_h for d in res.trajectory])
    assert np.all(E[1:] <= E[:-1] + 1e-10 * np.maximum(1, E[:-1]))
    assert res.energy_violations == 0


def test_diagnostics_invariants(diamond_coarse):
    prm = ModelParams(D=0.1, c=5.0)
    sim = Simulator(diamond_coarse, prm)
    res = sim.run(sim.initial_state(dynamics.initial_conductance(diamond_coarse)), StopRule(T=0.05))
    for d in res.trajectory[1:]:
        assert all(math.isfinite(v) for v in d.as_row())
        assert d.s_k >= diamond_coarse.area**-0.5 - 1e-12
    # recomputing the pressure for the stored conductance reproduces the stored one
    p = sim.pressure(res.final.m)
    np.testing.assert_allclose(p, res.final.p, atol=1e-8 * abs(p).max())
    # identical consecutive states give m_ht = 0
    same = dynamics.StepState(res.final.k + 1, res.final.t + 1e-3, 1e-3, res.final.m, res.final.p,
                              res.final.sigma, grad_p=res.final.grad_p)
    assert dynamics.diagnostics(sim, same, res.final).m_ht == 0


def test_stationarity_stop(diamond_coarse):
    prm = ModelParams(D=0.5, c=5.0, gamma=0.5)
    sim = Simulator(diamond_coarse, prm)
    res = sim.run(sim.initial_state(dynamics.initial_conductance(diamond_coarse)),
                  StopRule(tol_E=1e-3, max_steps=20000))
    assert res.reason == "stationary" and abs(res.final.diag.E_ht) < 1e-3


def test_energy_increase_abort():
    mesh = meshlib.generate_diamond(0.25)
    sim = Simulator(mesh, ModelParams(D=0.0, c=5.0, gamma=1.0, rho=0.0), on_energy_increase="abort")
    st0 = sim.initial_state(np.full((mesh.n_triangles, 2), 0.3))
    # a grossly oversized explicit step overshoots and raises the energy
    sim.next_dt = lambda state: 50.0
    sim.dt_max = 50.0
    with pytest.raises(dynamics.EnergyIncreaseError):
        sim.run(st0, StopRule(T=1e3, max_steps=3))


def test_energy_increase_reject_halves_step():
    mesh = meshlib.generate_diamond(0.25)
    sim = Simulator(mesh, ModelParams(D=0.0, c=5.0, gamma=1.0, rho=0.0), on_energy_increase="reject")
    st0 = sim.initial_state(np.full((mesh.n_triangles, 2), 0.3))
    sim.next_dt = lambda state: 50.0
    res = sim.run(st0, StopRule(T=1e3, max_steps=2))
    assert res.rejected_steps > 0 and res.energy_violations == 0


def test_energy_increase_warns(caplog):
    mesh = meshlib.generate_diamond(0.25)
    sim = Simulator(mesh, ModelParams(D=0.0, c=5.0, gamma=1.0, rho=0.0))
    st0 = sim.initial_state(np.full((mesh.n_triangles, 2), 0.3))
    sim.next_dt = lambda state: 50.0
    with caplog.at_level("WARNING"):
        res = sim.run(st0, StopRule(T=1e3, max_steps=1))
    assert res.energy_violations == 1 and "energy increased" in caplog.text


def test_time_step_floor(diamond_coarse):
    sim = Simulator(diamond_coarse, ModelParams(), dt_min=1.0)
    st0 = sim.initial_state(dynamics.initial_conductance(diamond_coarse))
    with pytest.raises(dynamics.TimeStepError):
        sim.run(st0, StopRule(T=1.0))


def test_extinction_gamma_zero():
    mesh = meshlib.generate_diamond(0.2)
    prm = ModelParams(D=1e-3, c=1.0, gamma=0.0, rho=0.0, m_boundary="neumann", extinction_monitor=True)
    sim = Simulator(mesh, prm)
    st0 = sim.initial_state(dynamics.initial_conductance(mesh, shift=1e-3))
    res = sim.run(st0, StopRule(T=1.0, extinction=1e-8))
    assert res.reason == "extinction" and 0 < res.T_ex < 1e-3
    assert res.final.diag.min_abs_m < 1e-8


def test_initial_conductance_shift(diamond_coarse):
    m = dynamics.initial_conductance(diamond_coarse, shift=1e-3)
    assert m[:, 0].min() == pytest.approx(1e-3) and m[:, 0].max() <= 1 + 1e-3 + 1e-14
    assert not np.any(m[:, 1])
