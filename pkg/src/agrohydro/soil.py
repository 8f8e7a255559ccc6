"""van Genuchten-Mualem constitutive relations.

All functions accept scalar or array pressure heads (m, negative in the
unsaturated range) and return arrays of matching shape.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

#: Heads at or above this value are clamped to it when ``clamp=True``.
SATURATION_CLAMP = -1e-9


class SoilDomainError(ValueError):
    """Raised for heads or moisture values outside the retention curve's domain."""


@dataclass(frozen=True)
class SoilParams:
    k_sat: float
    theta_s: float
    theta_r: float
    alpha: float
    n: float
    tortuosity: float = 0.5

    def __post_init__(self):
        if not self.k_sat > 0:
            raise SoilDomainError(f"k_sat must be positive, got {self.k_sat}")
        if not 0 <= self.theta_r < self.theta_s <= 1:
            raise SoilDomainError(
                f"need 0 <= theta_r < theta_s <= 1, got {self.theta_r}, {self.theta_s}"
            )
        if not self.alpha > 0:
            raise SoilDomainError(f"alpha must be positive, got {self.alpha}")
        if not self.n > 1:
            raise SoilDomainError(f"n must exceed 1, got {self.n}")

    @property
    def m(self) -> float:
        return 1.0 - 1.0 / self.n

    @property
    def beta(self) -> np.ndarray:
        """Retention parameters ``(theta_s, theta_r, alpha, n)``."""
        return np.array([self.theta_s, self.theta_r, self.alpha, self.n])

    @property
    def beta_bar(self) -> np.ndarray:
        """All five model parameters ``(k_sat, theta_s, theta_r, alpha, n)``."""
        return np.array([self.k_sat, self.theta_s, self.theta_r, self.alpha, self.n])

    def with_beta(self, beta) -> "SoilParams":
        theta_s, theta_r, alpha, n = (float(b) for b in beta)
        return replace(self, theta_s=theta_s, theta_r=theta_r, alpha=alpha, n=n)

    def with_k_sat(self, k_sat: float) -> "SoilParams":
        return replace(self, k_sat=float(k_sat))


#: Loam profile used throughout the experiments (K_sat in m/s).
LOAM = SoilParams(k_sat=2.89e-6, theta_s=0.430, theta_r=0.078, alpha=3.60, n=1.56)


@dataclass(frozen=True)
class RetentionJacobian:
    """Partials of water content with respect to ``(theta_s, theta_r, alpha, n)``."""

    d_theta_s: np.ndarray
    d_theta_r: np.ndarray
    d_alpha: np.ndarray
    d_n: np.ndarray

    def as_array(self) -> np.ndarray:
        """Stack to shape ``(..., 4)`` in beta order."""
        return np.stack(
            np.broadcast_arrays(self.d_theta_s, self.d_theta_r, self.d_alpha, self.d_n),
            axis=-1,
        )


def _head(h, clamp: bool) -> np.ndarray:
    h = np.asarray(h, dtype=float)
    if clamp:
        return np.minimum(h, SATURATION_CLAMP)
    if np.any(~(h < 0)):
        raise SoilDomainError("retention relations require h < 0; pass clamp=True to saturate")
    return h


def effective_saturation(h, p: SoilParams, clamp: bool = False) -> np.ndarray:
    h = _head(h, clamp)
    return (1.0 + (-p.alpha * h) ** p.n) ** (-p.m)


def water_content(h, p: SoilParams, clamp: bool = False) -> np.ndarray:
    """Volumetric moisture (m/m) on the van Genuchten retention curve."""
    return (p.theta_s - p.theta_r) * effective_saturation(h, p, clamp) + p.theta_r


def _mualem(se, p: SoilParams) -> np.ndarray:
    m = p.m
    inner = 1.0 - (1.0 - se ** (1.0 / m)) ** m
    return p.k_sat * se**p.tortuosity * inner**2


def hydraulic_conductivity(h, p: SoilParams, clamp: bool = False) -> np.ndarray:
    """Unsaturated conductivity K(h) in m/s (Mualem closure)."""
    return _mualem(effective_saturation(h, p, clamp), p)


def conductivity_from_saturation(se, p: SoilParams) -> np.ndarray:
    se = np.asarray(se, dtype=float)
    if np.any((se < 0) | (se > 1)):
        raise SoilDomainError("effective saturation must lie in [0, 1]")
    return _mualem(se, p)


def capillary_capacity(h, p: SoilParams, clamp: bool = False) -> np.ndarray:
    """dθ/dh in 1/m."""
    h = _head(h, clamp)
    s = -p.alpha * h
    n, m = p.n, p.m
    return (
        n * p.alpha * (p.theta_s - p.theta_r) * m
        * s ** (n - 1.0) * (1.0 + s**n) ** (-(2.0 - 1.0 / n))
    )


def retention_jacobian(h, p: SoilParams, clamp: bool = False) -> RetentionJacobian:
    h = _head(h, clamp)
    n, m, alpha = p.n, p.m, p.alpha
    s = -alpha * h
    sn = s**n
    a = 1.0 + sn
    se = a ** (-m)
    span = p.theta_s - p.theta_r
    d_alpha = -span * m * n * sn * a ** (-m - 1.0) / alpha
    # d ln(Se)/dn = -ln(A)/n^2 - m s^n ln(s) / A
    d_n = span * se * (-np.log1p(sn) / n**2 - m * sn * np.log(s) / a)
    return RetentionJacobian(d_theta_s=se, d_theta_r=1.0 - se, d_alpha=d_alpha, d_n=d_n)


def inverse_retention(theta, p: SoilParams) -> np.ndarray:
    """Pressure head (m) giving moisture ``theta`` on the retention curve."""
    theta = np.asarray(theta, dtype=float)
    if np.any((theta <= p.theta_r) | (theta >= p.theta_s)):
        raise SoilDomainError(
            f"moisture must lie strictly inside ({p.theta_r}, {p.theta_s})"
        )
    se = (theta - p.theta_r) / (p.theta_s - p.theta_r)
    # expm1/log1p keep precision near saturation where Se^(-1/m) - 1 is tiny
    t = np.expm1(-np.log(se) / p.m)
    return -(t ** (1.0 / p.n)) / p.alpha
