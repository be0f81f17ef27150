"""System family, unit conversions, spacecraft constants, Jacobi integral."""

from __future__ import annotations

import math

import numpy as np
import pytest

from trajsampler import systems
from trajsampler.errors import ConfigError


def test_family_endpoint_jupiter_europa() -> None:
    sys0 = systems.interpolate_system(0.0)
    assert sys0.mu == 2.525e-5
    assert sys0.units.du_km == 670_900.0
    assert sys0.units.tu_s == 48_822.76
    assert sys0.units.mu_kg == 1.898e27


def test_family_endpoint_saturn_titan() -> None:
    sys1 = systems.interpolate_system(1.0)
    assert sys1.mu == 2.366e-4
    assert sys1.units.du_km == 1_221_870.0
    assert sys1.units.tu_s == 219_277.51
    assert sys1.units.mu_kg == 5.685e26


def test_family_midpoint_mass_ratio() -> None:
    assert systems.interpolate_system(0.5).mu == pytest.approx(1.30925e-4, rel=1e-12)


def test_family_interpolation_is_affine() -> None:
    lo = systems.interpolate_system(0.0)
    hi = systems.interpolate_system(1.0)
    for alpha in (0.1, 0.25, 0.6, 0.9):
        w = 1.0 - alpha
        mid = systems.interpolate_system(alpha)
        assert mid.mu == w * lo.mu + alpha * hi.mu
        assert mid.units.du_km == w * lo.units.du_km + alpha * hi.units.du_km
        assert mid.units.tu_s == w * lo.units.tu_s + alpha * hi.units.tu_s
        assert mid.units.mu_kg == w * lo.units.mu_kg + alpha * hi.units.mu_kg


def test_family_parameter_domain() -> None:
    with pytest.raises(ConfigError):
        systems.interpolate_system(-0.01)
    with pytest.raises(ConfigError):
        systems.interpolate_system(1.01)


def test_system_config_rejects_bad_mass_ratio() -> None:
    with pytest.raises(ConfigError):
        systems.SystemConfig(alpha=0.0, mu=0.0, units=systems.JUPITER_EUROPA)
    with pytest.raises(ConfigError):
        systems.SystemConfig(alpha=0.0, mu=0.5, units=systems.JUPITER_EUROPA)


def test_unit_scale_derived_quantities() -> None:
    je = systems.JUPITER_EUROPA
    assert je.v_unit_ms == pytest.approx(670_900_000.0 / 48_822.76, rel=1e-14)
    assert je.a_unit_ms2 == pytest.approx(je.v_unit_ms / je.tu_s, rel=1e-14)
    assert je.tu_days == pytest.approx(48_822.76 / 86_400.0, rel=1e-14)


def test_exhaust_velocity_conversion() -> None:
    c_si = systems.REFERENCE_ISP_S * systems.G0_MS2
    assert c_si == pytest.approx(72_225.98, abs=5e-3)
    sc = systems.default_spacecraft()
    assert sc.exhaust_velocity == pytest.approx(5.2560, rel=1e-4)
    assert sc.exhaust_velocity == c_si / systems.JUPITER_EUROPA.v_unit_ms


def test_thrust_conversion() -> None:
    sc = systems.default_spacecraft()
    expected = (4.735 / 25_000.0) / systems.JUPITER_EUROPA.a_unit_ms2
    assert sc.thrust == expected
    assert sc.thrust == pytest.approx(6.73e-4, rel=2e-3)


def test_default_spacecraft_fixed_across_family() -> None:
    # NU spacecraft constants are anchored once; nothing about them may
    # vary with alpha or between calls.
    a = systems.default_spacecraft()
    b = systems.default_spacecraft()
    assert (a.thrust, a.exhaust_velocity, a.dry_mass_frac) == (
        b.thrust, b.exhaust_velocity, b.dry_mass_frac
    )
    assert a.dry_mass_frac == 10_000.0 / 25_000.0


def test_spacecraft_requires_positive_inputs() -> None:
    with pytest.raises(ConfigError):
        systems.SpacecraftConfig(thrust=0.0, exhaust_velocity=5.0, dry_mass_frac=0.4)
    with pytest.raises(ConfigError):
        systems.SpacecraftConfig(thrust=1e-4, exhaust_velocity=0.0, dry_mass_frac=0.4)
    with pytest.raises(ConfigError):
        systems.SpacecraftConfig(thrust=1e-4, exhaust_velocity=5.0, dry_mass_frac=1.0)


def test_jacobi_constant_massless_secondary() -> None:
    state = np.array([1.0, 0.0, 0.0, 0.0, 0.0, 0.0])
    assert systems.jacobi_constant(state, 0.0) == pytest.approx(3.0, abs=1e-15)


def test_jacobi_constant_equal_primaries() -> None:
    state = np.array([0.0, 1.0, 0.0, 0.0, 0.0, 0.0])
    rho = math.sqrt(1.25)
    assert systems.jacobi_constant(state, 0.5) == pytest.approx(1.0 + 1.0 / rho + 1.0 / rho, rel=1e-15)


def test_jacobi_constant_velocity_term() -> None:
    rest = np.array([0.8, 0.1, 0.0, 0.0, 0.0, 0.0])
    moving = rest.copy()
    moving[3:6] = (0.3, -0.2, 0.1)
    mu = 2.525e-5
    dv2 = float(moving[3:6] @ moving[3:6])
    assert systems.jacobi_constant(moving, mu) == pytest.approx(
        systems.jacobi_constant(rest, mu) - dv2, rel=1e-14
    )
