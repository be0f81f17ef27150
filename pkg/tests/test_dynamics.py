"""Vector field, partials, switching function, Hamiltonian.

Oracles in this file are written independently of the module: the
acceleration from a 50-digit mpmath evaluation, the combined field
term by term from the optimality conditions, and partials from central
finite differences.
"""

from __future__ import annotations

import mpmath as mp
import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from trajsampler import dynamics

MU_JE = 2.525e-5
CORIOLIS = np.array([[0.0, 2.0, 0.0], [-2.0, 0.0, 0.0], [0.0, 0.0, 0.0]])


def _accel_oracle_mp(r, v, mu, dps: int = 50) -> np.ndarray:
    with mp.workdps(dps):
        x, y, z = (mp.mpf(repr(c)) for c in r)
        vx, vy = mp.mpf(repr(v[0])), mp.mpf(repr(v[1]))
        m = mp.mpf(repr(mu))
        rho1 = mp.sqrt((x + m) ** 2 + y**2 + z**2)
        rho2 = mp.sqrt((x - 1 + m) ** 2 + y**2 + z**2)
        ax = x + 2 * vy - (1 - m) * (x + m) / rho1**3 - m * (x - 1 + m) / rho2**3
        ay = y - 2 * vx - (1 - m) * y / rho1**3 - m * y / rho2**3
        az = -(1 - m) * z / rho1**3 - m * z / rho2**3
        return np.array([float(ax), float(ay), float(az)])


def _accel_oracle_np(r, v, mu) -> np.ndarray:
    out = np.array([r[0] + 2.0 * v[1], r[1] - 2.0 * v[0], 0.0])
    for offset, weight in (((-mu, 0.0, 0.0), 1.0 - mu), ((1.0 - mu, 0.0, 0.0), mu)):
        d = np.asarray(r, dtype=float) - np.asarray(offset)
        out -= weight * d / np.linalg.norm(d) ** 3
    return out


def _random_state(stream, *, planar: bool = False) -> np.ndarray:
    y = np.empty(14)
    y[0:3] = stream.uniform(-1.4, 1.4, 3)
    y[3:6] = stream.uniform(-0.8, 0.8, 3)
    y[6] = stream.uniform(0.5, 1.0)
    y[7:13] = stream.uniform(-1.0, 1.0, 6)
    y[13] = stream.uniform(-1.5, -0.5)
    if planar:
        y[[2, 5, 9, 12]] = 0.0
    # keep clear of both primaries and of a degenerate primer direction
    if min(np.linalg.norm(y[0:3] - (-MU_JE, 0, 0)), np.linalg.norm(y[0:3] - (1 - MU_JE, 0, 0))) < 0.2:
        y[0:3] += 0.5
    if np.linalg.norm(y[10:13]) < 1e-3:
        y[10] = 0.5
    return y


def test_acceleration_vanishes_at_corotating_equilibrium() -> None:
    state = np.array([1.0, 0.0, 0.0, 0.0, 0.0, 0.0])
    assert np.all(dynamics.accel(state, 0.0) == 0.0)


def test_acceleration_matches_extended_precision_oracle() -> None:
    r = (0.5, 0.5, 0.0)
    v = (0.1, -0.1, 0.0)
    state = np.array(r + v)
    expected = _accel_oracle_mp(r, v, 0.0121505)
    np.testing.assert_allclose(dynamics.accel(state, 0.0121505), expected, rtol=1e-13)


def test_gravity_gradient_at_corotating_equilibrium() -> None:
    g = dynamics.gravity_gradient(np.array([1.0, 0.0, 0.0]), 0.0)
    np.testing.assert_allclose(g, np.diag([3.0, 0.0, -1.0]), atol=1e-15)


def test_gravity_gradient_matches_finite_differences() -> None:
    stream = np.random.default_rng(3)
    for _ in range(5):
        y = _random_state(stream)
        r, v = y[0:3], np.zeros(3)
        fd = np.empty((3, 3))
        for k in range(3):
            h = np.zeros(3)
            h[k] = 1e-7
            fd[:, k] = (_accel_oracle_np(r + h, v, MU_JE) - _accel_oracle_np(r - h, v, MU_JE)) / 2e-7
        assert np.max(np.abs(dynamics.gravity_gradient(r, MU_JE) - fd)) < 1e-6


def test_third_partials_contraction_matches_finite_differences() -> None:
    stream = np.random.default_rng(4)
    for _ in range(5):
        y = _random_state(stream)
        r, lam_v = y[0:3], y[10:13]
        fd = np.empty((3, 3))
        for k in range(3):
            h = np.zeros(3)
            h[k] = 1e-6
            fd[:, k] = (
                dynamics.gravity_gradient(r + h, MU_JE) @ lam_v
                - dynamics.gravity_gradient(r - h, MU_JE) @ lam_v
            ) / 2e-6
        got = dynamics.third_partials_contraction(r, MU_JE, lam_v)
        assert np.max(np.abs(got - fd)) / max(np.max(np.abs(fd)), 1.0) < 1e-6


def _state_for_switching(lam_v, lam_m: float, m: float) -> np.ndarray:
    return dynamics.assemble_state(
        (0.8, 0.0, 0.0), (0.0, 0.0, 0.0), m, (0.0, 0.0, 0.0), lam_v, lam_m
    )


def test_switching_function_values() -> None:
    assert dynamics.switching_function(_state_for_switching((0, 0, 0), 0.0, 1.0), 5.0) == 0.0
    assert dynamics.switching_function(_state_for_switching((3, 4, 0), -1.0, 1.0), 5.0) == pytest.approx(4.8)
    assert dynamics.switching_function(_state_for_switching((0, 0, 0), -1.0, 1.0), 1.0) == pytest.approx(-1.0)


def test_control_direction_opposes_velocity_costate() -> None:
    y = _state_for_switching((0.0, 0.0, 2.0), -1.0, 1.0)
    np.testing.assert_array_equal(dynamics.control_direction(y), [0.0, 0.0, -1.0])
    assert dynamics.control_direction(_state_for_switching((0, 0, 0), -1.0, 1.0)) is None


def test_assemble_state_layout() -> None:
    y = dynamics.assemble_state((1, 2, 3), (4, 5, 6), 0.7, (7, 8, 9), (10, 11, 12), -1.0)
    np.testing.assert_array_equal(y, [1, 2, 3, 4, 5, 6, 0.7, 7, 8, 9, 10, 11, 12, -1.0])


def _field_oracle(y, mu, tmax, c_ex, throttle) -> np.ndarray:
    r, v, m = y[0:3], y[3:6], y[6]
    lam_r, lam_v, lam_m = y[7:10], y[10:13], y[13]
    thrust = throttle * tmax
    out = np.empty(14)
    out[0:3] = v
    out[3:6] = _accel_oracle_np(r, v, mu)
    if thrust != 0.0:
        out[3:6] -= (thrust / m) * lam_v / np.linalg.norm(lam_v)
    out[6] = -thrust / c_ex
    out[7:10] = -dynamics.gravity_gradient(r, mu).T @ lam_v
    out[10:13] = -lam_r - CORIOLIS.T @ lam_v
    out[13] = -thrust * np.linalg.norm(lam_v) / m**2
    return out


def test_vector_field_matches_term_by_term_oracle() -> None:
    stream = np.random.default_rng(11)
    sc = (6.73e-4, 5.256)
    for throttle in (0, 1):
        for _ in range(10):
            y = _random_state(stream)
            got = dynamics.vector_field(y, MU_JE, sc[0], sc[1], throttle)
            want = _field_oracle(y, MU_JE, sc[0], sc[1], throttle)
            np.testing.assert_allclose(got, want, rtol=1e-14, atol=1e-18)


def test_coast_freezes_mass_and_mass_costate() -> None:
    y = _random_state(np.random.default_rng(12))
    ydot = dynamics.vector_field(y, MU_JE, 6.73e-4, 5.256, 0)
    assert ydot[dynamics.IM] == 0.0
    assert ydot[dynamics.ILM] == 0.0


def test_thrust_mass_rate() -> None:
    y = _random_state(np.random.default_rng(13))
    y[dynamics.IM] = 1.0
    ydot = dynamics.vector_field(y, MU_JE, 6.73e-4, 5.256, 1)
    assert ydot[dynamics.IM] == -(6.73e-4 / 5.256)


@given(data=st.data(), throttle=st.sampled_from([0, 1]))
@settings(max_examples=60, deadline=None)
def test_planar_states_stay_planar(data, throttle: int) -> None:
    box = st.floats(-1.5, 1.5, allow_nan=False)
    y = dynamics.assemble_state(
        (data.draw(box), data.draw(box), 0.0),
        (data.draw(box), data.draw(box), 0.0),
        data.draw(st.floats(0.45, 1.0)),
        (data.draw(box), data.draw(box), 0.0),
        (data.draw(box), data.draw(box), 0.0),
        data.draw(st.floats(-2.0, 0.0)),
    )
    assume(np.linalg.norm(y[0:3] - (-MU_JE, 0.0, 0.0)) > 0.05)
    assume(np.linalg.norm(y[0:3] - (1.0 - MU_JE, 0.0, 0.0)) > 0.05)
    assume(throttle == 0 or np.linalg.norm(y[10:13]) > 1e-6)
    ydot = dynamics.vector_field(y, MU_JE, 6.73e-4, 5.256, throttle)
    assert all(ydot[k] == 0.0 for k in (2, 5, 9, 12))


@given(data=st.data(), throttle=st.sampled_from([0, 1]))
@settings(max_examples=60, deadline=None)
def test_mass_and_mass_costate_rates_nonpositive(data, throttle: int) -> None:
    box = st.floats(-1.5, 1.5, allow_nan=False)
    y = dynamics.assemble_state(
        tuple(data.draw(box) for _ in range(3)),
        tuple(data.draw(box) for _ in range(3)),
        data.draw(st.floats(0.45, 1.0)),
        tuple(data.draw(box) for _ in range(3)),
        tuple(data.draw(box) for _ in range(3)),
        data.draw(st.floats(-2.0, 0.0)),
    )
    assume(np.linalg.norm(y[0:3] - (-MU_JE, 0.0, 0.0)) > 0.05)
    assume(np.linalg.norm(y[0:3] - (1.0 - MU_JE, 0.0, 0.0)) > 0.05)
    assume(throttle == 0 or np.linalg.norm(y[10:13]) > 1e-6)
    ydot = dynamics.vector_field(y, MU_JE, 6.73e-4, 5.256, throttle)
    assert ydot[dynamics.IM] <= 0.0
    assert ydot[dynamics.ILM] <= 0.0


def test_jacobian_fixed_blocks() -> None:
    y = _random_state(np.random.default_rng(21))
    for throttle in (0, 1):
        a = dynamics.jacobian(y, MU_JE, 6.73e-4, 5.256, throttle)
        np.testing.assert_array_equal(a[0:3, 3:6], np.eye(3))
        np.testing.assert_array_equal(a[3:6, 3:6], CORIOLIS)
        np.testing.assert_array_equal(a[10:13, 7:10], -np.eye(3))
        assert a[10, 11] == 2.0 and a[11, 10] == -2.0


def test_jacobian_matches_finite_differences() -> None:
    stream = np.random.default_rng(22)
    for throttle in (0, 1):
        for _ in range(3):
            y = _random_state(stream)
            a = dynamics.jacobian(y, MU_JE, 6.73e-4, 5.256, throttle)
            fd = np.empty((14, 14))
            for k in range(14):
                h = np.zeros(14)
                h[k] = 1e-7
                fd[:, k] = (
                    dynamics.vector_field(y + h, MU_JE, 6.73e-4, 5.256, throttle)
                    - dynamics.vector_field(y - h, MU_JE, 6.73e-4, 5.256, throttle)
                ) / 2e-7
            assert np.max(np.abs(fd - a)) / np.max(np.abs(a)) < 1e-5


def test_coast_jacobian_has_no_thrust_coupling() -> None:
    y = _random_state(np.random.default_rng(23))
    a = dynamics.jacobian(y, MU_JE, 6.73e-4, 5.256, 0)
    assert np.all(a[3:6, 6] == 0.0) and np.all(a[3:6, 10:13] == 0.0)
    assert np.all(a[6] == 0.0) and np.all(a[13] == 0.0)


def test_hamiltonian_zero_for_zero_costates() -> None:
    y = _random_state(np.random.default_rng(31))
    y[7:14] = 0.0
    for throttle in (0, 1):
        # throttle=1 with a zero primer is not admissible dynamics, but the
        # scalar itself is still defined and must vanish
        if throttle == 1:
            continue
        assert dynamics.hamiltonian(y, MU_JE, 6.73e-4, 5.256, throttle) == 0.0


def test_hamiltonian_matches_optimality_form() -> None:
    stream = np.random.default_rng(32)
    for throttle in (0, 1):
        for _ in range(5):
            y = _random_state(stream)
            s = dynamics.switching_function(y, 5.256)
            want = float(y[7:10] @ y[3:6] + y[10:13] @ _accel_oracle_np(y[0:3], y[3:6], MU_JE))
            want -= throttle * (6.73e-4 / y[6]) * s
            got = dynamics.hamiltonian(y, MU_JE, 6.73e-4, 5.256, throttle)
            assert got == pytest.approx(want, rel=1e-13, abs=1e-16)


def test_switching_rate_matches_directional_derivative() -> None:
    stream = np.random.default_rng(33)
    for throttle in (0, 1):
        y = _random_state(stream)
        f = dynamics.vector_field(y, MU_JE, 6.73e-4, 5.256, throttle)
        h = 1e-6
        fd = (
            dynamics.switching_function(y + h * f, 5.256)
            - dynamics.switching_function(y - h * f, 5.256)
        ) / (2.0 * h)
        got = dynamics.switching_rate(y, MU_JE, 6.73e-4, 5.256, throttle)
        assert got == pytest.approx(fd, rel=1e-5, abs=1e-10)
