import logging
import math

import numpy as np
import pytest

from grid import PfSpec, PowerFlowError, PvSetpoint, build_ybus, recover_full_state, solve_pf
from grid.powerflow import mismatch_vector, newton_jacobian, power_injection


def base_spec(net, **kwargs) -> PfSpec:
    pd, qd = net.demand()
    setpoints = tuple(PvSetpoint(g.bus, g.p_setpoint, g.v_setpoint) for g in net.generators)
    return PfSpec(net, build_ybus(net), setpoints, pd, qd, **kwargs)


def test_two_bus_no_load_is_flat(two_bus):
    net = two_bus()
    state = solve_pf(base_spec(net))
    np.testing.assert_allclose(state.v_mag, 1.0)
    np.testing.assert_allclose(state.v_ang, 0.0)
    assert state.slack_p == pytest.approx(0.0, abs=1e-12)
    assert state.slack_q == pytest.approx(0.0, abs=1e-12)
    assert state.iterations <= 1


def test_two_bus_lossless_angle(two_bus):
    net = two_bus(p_load_mw=50.0, pv_bus2=True)
    state = solve_pf(base_spec(net))
    np.testing.assert_allclose(state.v_mag, 1.0, atol=1e-10)
    assert state.v_ang[0] - state.v_ang[1] == pytest.approx(math.asin(0.5 * 0.1), abs=1e-8)
    assert state.slack_p == pytest.approx(0.5, abs=1e-8)


def test_case14_converges(case14):
    state = solve_pf(base_spec(case14))
    assert state.iterations <= 10
    assert state.slack_p == pytest.approx(2.324, abs=1e-2)
    assert state.v_ang[case14.slack_bus] == 0.0
    for gen in case14.generators:
        assert state.v_mag[gen.bus] == pytest.approx(gen.v_setpoint, abs=1e-12)


def test_case14_gauss_seidel_fixed_point(case14):
    """One Gauss-Seidel sweep against the schedule leaves the Newton solution in place."""
    spec = base_spec(case14)
    state = solve_pf(spec)
    y = spec.ybus.y
    v = state.voltage.copy()
    pd, qd = case14.demand()
    slack = case14.slack_bus
    gen_buses = {g.bus for g in case14.generators}
    p_spec = -pd.copy()
    for g in case14.generators:
        if g.bus != slack:
            p_spec[g.bus] += g.p_setpoint
    for i in range(case14.n_bus):
        if i == slack:
            continue
        if i in gen_buses:
            q_spec = -np.imag(np.conj(v[i]) * (y[i] @ v))
        else:
            q_spec = -qd[i]
        other = y[i] @ v - y[i, i] * v[i]
        updated = ((p_spec[i] - 1j * q_spec) / np.conj(v[i]) - other) / y[i, i]
        if i in gen_buses:
            updated = abs(v[i]) * updated / abs(updated)
        assert abs(updated - v[i]) < 1e-6
        v[i] = updated


def test_power_balance(case14):
    state = solve_pf(base_spec(case14))
    pd, _ = case14.demand()
    losses = float(np.sum(state.branch_flows.real))
    shunt = float(sum(b.g_shunt * state.v_mag[b.index] ** 2 for b in case14.buses))
    assert np.sum(state.p_gen) - np.sum(pd) == pytest.approx(losses + shunt, abs=1e-6)


def test_jacobian_matches_finite_differences(case14):
    spec = base_spec(case14)
    y = spec.ybus.y
    rng = np.random.default_rng(3)
    vm = 1.0 + 0.02 * rng.standard_normal(case14.n_bus)
    va = 0.1 * rng.standard_normal(case14.n_bus)
    pv = [1, 2, 5, 7]
    pq = [i for i in range(1, case14.n_bus) if i not in pv]
    pvpq = pv + pq
    s_spec = np.zeros(case14.n_bus, dtype=complex)
    jac = newton_jacobian(y, vm * np.exp(1j * va), pvpq, pq)

    h = 1e-6
    fd = np.zeros_like(jac)
    for col, (kind, bus) in enumerate([("a", b) for b in pvpq] + [("m", b) for b in pq]):
        plus_va, plus_vm = va.copy(), vm.copy()
        minus_va, minus_vm = va.copy(), vm.copy()
        if kind == "a":
            plus_va[bus] += h
            minus_va[bus] -= h
        else:
            plus_vm[bus] += h
            minus_vm[bus] -= h
        f_plus = mismatch_vector(y, plus_vm * np.exp(1j * plus_va), s_spec, pvpq, pq)
        f_minus = mismatch_vector(y, minus_vm * np.exp(1j * minus_va), s_spec, pvpq, pq)
        fd[:, col] = (f_plus - f_minus) / (2 * h)
    np.testing.assert_allclose(jac, fd, rtol=1e-5, atol=1e-6)


@pytest.mark.filterwarnings("error::scipy.linalg.LinAlgWarning")
def test_divergence_reported(two_bus):
    net = two_bus(p_load_mw=5000.0)
    with pytest.raises(PowerFlowError) as err:
        solve_pf(base_spec(net, max_iter=15))
    assert err.value.kind in ("diverged", "singular")


def test_recover_zero_demand_is_flat(two_bus):
    net = two_bus(pv_bus2=True)
    state = recover_full_state(net, np.zeros(1), np.ones(2), np.zeros(2), np.zeros(2))
    np.testing.assert_allclose(state.v_mag, 1.0)
    np.testing.assert_allclose(state.v_ang, 0.0, atol=1e-12)
    np.testing.assert_allclose(state.p_gen, 0.0, atol=1e-12)


def test_recover_rejects_bad_shapes(case14):
    pd, qd = case14.demand()
    with pytest.raises(ValueError, match="dispatch shapes"):
        recover_full_state(case14, np.zeros(3), np.ones(5), pd, qd)


def test_recover_switches_pv_to_pq_at_limit(three_bus, caplog):
    net = three_bus(q_limit_mvar=1.0)
    pd, qd = net.demand()
    relaxed = recover_full_state(net, np.array([0.5]), np.array([1.0, 1.05]), pd, qd, enforce_q_limits=False)
    assert relaxed.q_gen[1] > 0.01
    with caplog.at_level(logging.WARNING, logger="grid.powerflow"):
        state = recover_full_state(net, np.array([0.5]), np.array([1.0, 1.05]), pd, qd)
    assert "Switching PV buses [1] to PQ" in caplog.text
    assert state.q_gen[1] == pytest.approx(0.01, abs=1e-7)
    assert state.v_mag[1] < 1.05
    assert state.v_mag[0] == pytest.approx(1.0)


def test_recover_reproduces_dispatch(case14):
    pd, qd = case14.demand()
    p_ns = np.array([0.4, 0.1, 0.05, 0.05])
    v_gen = np.array([1.05, 1.04, 1.02, 1.05, 1.05])
    state = recover_full_state(case14, p_ns, v_gen, pd, qd, enforce_q_limits=False)
    np.testing.assert_allclose(state.p_gen[1:], p_ns)
    np.testing.assert_allclose(state.v_mag[[g.bus for g in case14.generators]], v_gen, atol=1e-12)
    assert state.p_gen[0] == pytest.approx(state.slack_p)
