"""CR3BP system family and natural-unit conversions.

The transfer problem is posed in a one-parameter family of planar
circular restricted three-body systems. The family parameter ``alpha``
interpolates the mass ratio linearly between the Jupiter-Europa system
(alpha = 0) and the Saturn-Titan system (alpha = 1):

    mu(alpha) = 2.525e-5 + alpha * (2.366e-4 - 2.525e-5)

All dynamics run in natural units (NU): distance unit DU = secondary's
orbit radius, time unit TU = orbit period / 2pi, mass unit = primary +
secondary mass. Spacecraft quantities are additionally normalized by the
initial wet mass, so m(t0) = 1.

Spacecraft NU constants are computed once from the Jupiter-Europa SI
values and held fixed across the family; the corresponding Saturn-Titan
SI figures are rounded consistency checks, not inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

G0_MS2 = 9.80665

MU_ALPHA0 = 2.525e-5
MU_ALPHA1 = 2.366e-4


@dataclass(frozen=True)
class UnitScales:
    """SI anchors of one system's natural units."""

    du_km: float
    tu_s: float
    mu_kg: float

    @property
    def v_unit_ms(self) -> float:
        """Speed of 1 DU/TU in m/s."""
        return self.du_km * 1e3 / self.tu_s

    @property
    def a_unit_ms2(self) -> float:
        """Acceleration of 1 DU/TU^2 in m/s^2."""
        return self.v_unit_ms / self.tu_s

    @property
    def tu_days(self) -> float:
        return self.tu_s / 86400.0


JUPITER_EUROPA = UnitScales(du_km=670_900.0, tu_s=48_822.76, mu_kg=1.898e27)
SATURN_TITAN = UnitScales(du_km=1_221_870.0, tu_s=219_277.51, mu_kg=5.685e26)


@dataclass(frozen=True)
class SystemConfig:
    """One member of the interpolated system family.

    Attributes:
        alpha: family parameter in [0, 1].
        mu: CR3BP mass ratio.
        units: SI anchors. Only the endpoints correspond to physical
            systems; intermediate scales are linear interpolations kept
            for reporting.
    """

    alpha: float
    mu: float
    units: UnitScales

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must be in [0, 1], got {self.alpha}")
        if not 0.0 < self.mu < 0.5:
            raise ConfigError(f"mass ratio out of range: {self.mu}")


def interpolate_system(alpha: float) -> SystemConfig:
    """Build the family member at ``alpha``."""
    alpha = float(alpha)
    # convex-combination form so both endpoints reproduce the anchor
    # constants exactly
    w = 1.0 - alpha
    mu = w * MU_ALPHA0 + alpha * MU_ALPHA1
    units = UnitScales(
        du_km=w * JUPITER_EUROPA.du_km + alpha * SATURN_TITAN.du_km,
        tu_s=w * JUPITER_EUROPA.tu_s + alpha * SATURN_TITAN.tu_s,
        mu_kg=w * JUPITER_EUROPA.mu_kg + alpha * SATURN_TITAN.mu_kg,
    )
    return SystemConfig(alpha=alpha, mu=mu, units=units)


@dataclass(frozen=True)
class SpacecraftConfig:
    """Spacecraft constants in natural units.

    Attributes:
        thrust: max thrust, in units of m0 * DU / TU^2.
        exhaust_velocity: effective exhaust velocity in DU/TU.
        dry_mass_frac: dry mass as a fraction of initial wet mass.
    """

    thrust: float
    exhaust_velocity: float
    dry_mass_frac: float

    def __post_init__(self):
        if self.thrust <= 0.0:
            raise ConfigError(f"thrust must be positive, got {self.thrust}")
        if self.exhaust_velocity <= 0.0:
            raise ConfigError(f"exhaust velocity must be positive, got {self.exhaust_velocity}")
        if not 0.0 < self.dry_mass_frac < 1.0:
            raise ConfigError(f"dry mass fraction must be in (0, 1), got {self.dry_mass_frac}")

    @classmethod
    def from_si(
        cls,
        thrust_n: float,
        isp_s: float,
        wet_mass_kg: float,
        dry_mass_kg: float,
        units: UnitScales,
    ) -> "SpacecraftConfig":
        c_ms = isp_s * G0_MS2
        return cls(
            thrust=thrust_n / wet_mass_kg / units.a_unit_ms2,
            exhaust_velocity=c_ms / units.v_unit_ms,
            dry_mass_frac=dry_mass_kg / wet_mass_kg,
        )


# Reference vehicle: 25 t wet / 10 t dry, Isp 7365 s, 4.735 N max thrust,
# anchored to the Jupiter-Europa unit scales.
WET_MASS_KG = 25_000.0
DRY_MASS_KG = 10_000.0
REFERENCE_ISP_S = 7365.0
REFERENCE_THRUST_N = 4.735


def default_spacecraft() -> SpacecraftConfig:
    """NU spacecraft constants used throughout the family."""
    return SpacecraftConfig.from_si(
        thrust_n=REFERENCE_THRUST_N,
        isp_s=REFERENCE_ISP_S,
        wet_mass_kg=WET_MASS_KG,
        dry_mass_kg=DRY_MASS_KG,
        units=JUPITER_EUROPA,
    )


def jacobi_constant(state, mu: float) -> float:
    """Jacobi integral of a ballistic state.

    Args:
        state: length-6 array (r1, r2, r3, v1, v2, v3) in NU.
        mu: mass ratio.
    """
    r = np.asarray(state, dtype=float)[:3]
    v = np.asarray(state, dtype=float)[3:6]
    rho1 = np.sqrt((r[0] + mu) ** 2 + r[1] ** 2 + r[2] ** 2)
    rho2 = np.sqrt((r[0] - 1.0 + mu) ** 2 + r[1] ** 2 + r[2] ** 2)
    # a massless secondary contributes nothing, even evaluated on top of it
    secondary = 2.0 * mu / rho2 if mu != 0.0 else 0.0
    return (
        r[0] ** 2
        + r[1] ** 2
        + 2.0 * (1.0 - mu) / rho1
        + secondary
        - float(v @ v)
    )
