"""Ideal metaprism: angle-frequency mapping, target phases and reactances,
far-field channel, bandwidth and multipath analysis."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.optimize import brentq

from .scenario import (
    SPEED_OF_LIGHT,
    BandPlan,
    Direction,
    MtpGeometry,
    ScenarioError,
    array_response,
    steering_matrix,
)


class OutOfBandError(ValueError):
    """The mapping argument left [-1, 1]: the frequency cannot be steered."""


@dataclass(frozen=True)
class AngleFrequencyMap:
    """Monotone map ``theta(f) = asin(alpha (f - f0) + gamma)`` of the band onto [theta_m, theta_M]."""

    theta_m: float
    theta_M: float
    f0: float
    bandwidth: float

    def __post_init__(self) -> None:
        if not (-math.pi / 2 <= self.theta_m < self.theta_M <= math.pi / 2):
            raise ScenarioError(f"invalid angular range [{self.theta_m}, {self.theta_M}]")
        if self.bandwidth <= 0 or self.f0 <= 0:
            raise ScenarioError("f0 and bandwidth must be positive")

    @classmethod
    def from_band(cls, band: BandPlan, theta_m: float, theta_M: float) -> "AngleFrequencyMap":
        return cls(theta_m, theta_M, band.f0, band.bandwidth)

    @property
    def alpha(self) -> float:
        return (math.sin(self.theta_M) - math.sin(self.theta_m)) / self.bandwidth

    @property
    def gamma(self) -> float:
        return (math.sin(self.theta_M) + math.sin(self.theta_m)) / 2

    def sine(self, f):
        """``sin(theta(f))``; affine in f."""
        return self.alpha * (np.asarray(f, dtype=float) - self.f0) + self.gamma

    def angle(self, f):
        s = self.sine(f)
        # endpoints land on +-1 up to rounding when theta_M = pi/2
        s = np.where(np.abs(s) - 1 < 1e-12, np.clip(s, -1, 1), s)
        if np.any(np.abs(s) > 1):
            raise OutOfBandError(f"mapping argument {s} outside [-1, 1]")
        out = np.arcsin(s)
        return float(out) if out.ndim == 0 else out

    def frequency(self, theta):
        """Inverse map: frequency steered toward elevation ``theta``."""
        return self.f0 + (np.sin(theta) - self.gamma) / self.alpha

    def edge_angles(self) -> tuple[float, float]:
        """Mapped angles at the two band edges (exact to rounding)."""
        return (self.angle(self.f0 - self.bandwidth / 2), self.angle(self.f0 + self.bandwidth / 2))


def uniform_map_angle(fmap: AngleFrequencyMap, f):
    """Uniform angle mapping, provided only for comparison with the sine mapping.

    Written so that the band edges land on theta_m and theta_M.
    """
    f_lo = fmap.f0 - fmap.bandwidth / 2
    f = np.asarray(f, dtype=float)
    return fmap.theta_m + (f - f_lo) / fmap.bandwidth * (fmap.theta_M - fmap.theta_m)


# --------------------------------------------------------------------------
# target phases


def _wavelength(f, f0: float, exact_lambda: bool):
    return SPEED_OF_LIGHT / (np.asarray(f, dtype=float) if exact_lambda else f0)


def ideal_phase(geom: MtpGeometry, fmap: AngleFrequencyMap, theta_inc: Direction, phi: float,
                f, n: int | None = None, psi0: float = 0.0, exact_lambda: bool = False):
    """Unwrapped target reflection phase of element ``n`` (1-based) at frequency ``f``.

    With ``n=None`` all elements are returned along the last axis.  By default the
    wavelength inside the coefficient is frozen at the carrier so the phase is
    exactly affine in f; ``exact_lambda`` uses c/f instead.
    """
    f = np.asarray(f, dtype=float)
    lam = _wavelength(f, fmap.f0, exact_lambda)
    s = fmap.sine(f)
    st_inc = math.sin(theta_inc.theta)
    u_nu_inc = st_inc * math.cos(theta_inc.phi)
    u_zeta_inc = st_inc * math.sin(theta_inc.phi)
    if n is None:
        nu = geom.nu_index * geom.delta_nu
        zeta = geom.zeta_index * geom.delta_zeta
        lam = np.asarray(lam)[..., None]
        s = np.asarray(s)[..., None]
    else:
        if not 1 <= n <= geom.N:
            raise IndexError(f"element index {n} outside 1..{geom.N}")
        nu = geom.nu_index[n - 1] * geom.delta_nu
        zeta = geom.zeta_index[n - 1] * geom.delta_zeta
    psi = (-2 * np.pi * nu / lam * (u_nu_inc + s * math.cos(phi))
           - 2 * np.pi * zeta / lam * (u_zeta_inc + s * math.sin(phi)) + psi0)
    return float(psi) if np.ndim(psi) == 0 else psi


def wrap_phase(psi):
    """Reduce to (-pi, pi]."""
    out = np.pi - np.mod(np.pi - np.asarray(psi, dtype=float), 2 * np.pi)
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class IdealPhaseProfile:
    psi: np.ndarray          # (K, N), unwrapped
    frequencies: np.ndarray  # (K,)
    psi0: float
    theta_inc: Direction

    @property
    def wrapped(self) -> np.ndarray:
        return wrap_phase(self.psi)

    @property
    def gamma(self) -> np.ndarray:
        return np.exp(1j * self.psi)


def ideal_phase_profile(geom: MtpGeometry, fmap: AngleFrequencyMap, theta_inc: Direction,
                        phi: float, frequencies, psi0: float = 0.0,
                        exact_lambda: bool = False) -> IdealPhaseProfile:
    freqs = np.asarray(frequencies, dtype=float)
    psi = ideal_phase(geom, fmap, theta_inc, phi, freqs, None, psi0, exact_lambda)
    return IdealPhaseProfile(np.atleast_2d(psi), freqs, psi0, theta_inc)


def ideal_linear_coefficients(geom: MtpGeometry, fmap: AngleFrequencyMap, theta_inc: Direction,
                              phi: float = 0.0, psi0: float = 0.0):
    """Per-element (slope rad/Hz, offset rad) of the ideal affine phase."""
    lam0 = SPEED_OF_LIGHT / fmap.f0
    st = math.sin(theta_inc.theta)
    a_nu = -2 * np.pi * geom.nu_index * geom.delta_nu / lam0
    a_zeta = -2 * np.pi * geom.zeta_index * geom.delta_zeta / lam0
    slope = fmap.alpha * (a_nu * math.cos(phi) + a_zeta * math.sin(phi))
    offset = (a_nu * (st * math.cos(theta_inc.phi) + fmap.gamma * math.cos(phi))
              + a_zeta * (st * math.sin(theta_inc.phi) + fmap.gamma * math.sin(phi)) + psi0)
    return slope, offset


# --------------------------------------------------------------------------
# loads


def ideal_reactance(psi, Z0: float = 50.0):
    """Reactance whose reflection coefficient has phase ``psi`` (mod 2 pi).

    Phases that are multiples of 2 pi need an open circuit and return ``+inf``.
    """
    if Z0 <= 0:
        raise ValueError("Z0 must be positive")
    psi = np.asarray(psi, dtype=float)
    half = np.mod((np.pi - psi) / 2, np.pi)  # tan has period pi
    at_pole = np.abs(half - np.pi / 2) < 1e-12
    with np.errstate(over="ignore"):
        x = Z0 * np.tan(np.where(at_pole, 0.0, half))
    x = np.where(at_pole, np.inf, x)
    return float(x) if x.ndim == 0 else x


def reflection_coefficient(X, Z0: float = 50.0):
    """``(jX - Z0) / (jX + Z0)``; an infinite reactance gives +1."""
    X = np.asarray(X, dtype=float)
    finite = np.isfinite(X)
    xs = np.where(finite, X, 0.0)
    gamma = np.where(finite, (1j * xs - Z0) / (1j * xs + Z0), 1.0 + 0j)
    return complex(gamma) if gamma.ndim == 0 else gamma


def reflection_phase(X, Z0: float = 50.0):
    """Phase of the reflection coefficient, ``pi - 2 atan(X / Z0)``."""
    X = np.asarray(X, dtype=float)
    out = np.pi - 2 * np.arctan(X / Z0)
    return float(out) if out.ndim == 0 else out


# --------------------------------------------------------------------------
# far-field channel


def ideal_channel_gain(geom: MtpGeometry, gamma, theta_inc: Direction, direction: Direction,
                       f: float, gain: float = 1.0) -> complex:
    """``a(Theta, f)^T Gamma a(Theta_inc, f)`` scaled by the link gain."""
    gamma = np.asarray(gamma)
    if gamma.ndim == 2:
        gamma = np.diag(gamma)
    a_out = array_response(geom, direction, f)
    a_in = array_response(geom, theta_inc, f)
    return complex(gain * np.sum(a_out * gamma * a_in))


def gain_pattern(geom: MtpGeometry, gamma, theta_inc: Direction, thetas, phi: float, f,
                 gain: float = 1.0) -> np.ndarray:
    """Vectorised :func:`ideal_channel_gain` over elevations (and optionally frequencies).

    ``gamma`` is (N,) for one frequency or (K, N) paired with ``f`` of length K;
    the result is (len(thetas),) or (K, len(thetas)).
    """
    gamma = np.asarray(gamma)
    thetas = np.asarray(thetas, dtype=float)
    if gamma.ndim == 1:
        a_out = steering_matrix(geom, thetas, phi, f)
        a_in = array_response(geom, theta_inc, float(f))
        return gain * (a_out @ (gamma * a_in))
    f = np.asarray(f, dtype=float)
    a_out = steering_matrix(geom, thetas[None, :], phi, f[:, None])         # (K, T, N)
    a_in = steering_matrix(geom, theta_inc.theta, theta_inc.phi, f)          # (K, N)
    return gain * np.einsum("ktn,kn->kt", a_out, gamma * a_in)


# --------------------------------------------------------------------------
# bandwidth


def _dirichlet(m: int, x):
    """sin(m x) / sin(x) with the removable singularities filled by their limit."""
    x = np.asarray(x, dtype=float)
    s = np.sin(x)
    small = np.abs(s) < 1e-12
    safe = np.where(small, 1.0, s)
    out = np.sin(m * x) / safe
    # at x = k pi the limit is m cos(m k pi) / cos(k pi)
    lim = m * np.cos(m * x) / np.cos(x)
    return np.where(small, lim, out)


def frequency_response_at_beam(geom: MtpGeometry, fmap: AngleFrequencyMap, delta_f, phi: float = 0.0):
    """Normalised response of any beam at detuning ``delta_f`` from its design frequency.

    Product of the two Dirichlet kernels along nu and zeta divided by N; equals
    1 at zero detuning and does not depend on which beam is considered.
    """
    lam0 = SPEED_OF_LIGHT / fmap.f0
    delta_f = np.asarray(delta_f, dtype=float)
    x = np.pi * fmap.alpha * geom.delta_nu * delta_f * math.cos(phi) / lam0
    y = np.pi * fmap.alpha * geom.delta_zeta * delta_f * math.sin(phi) / lam0
    out = _dirichlet(geom.I, x) * _dirichlet(geom.J, y) / geom.N
    return float(out) if out.ndim == 0 else out


def first_null(geom: MtpGeometry, fmap: AngleFrequencyMap, phi: float = 0.0) -> float:
    lam0 = SPEED_OF_LIGHT / fmap.f0
    cands = []
    if abs(math.cos(phi)) > 1e-15:
        cands.append(lam0 / (geom.I * fmap.alpha * geom.delta_nu * abs(math.cos(phi))))
    if abs(math.sin(phi)) > 1e-15:
        cands.append(lam0 / (geom.J * fmap.alpha * geom.delta_zeta * abs(math.sin(phi))))
    return min(cands)


@dataclass(frozen=True)
class BandwidthResult:
    exact: float    # Hz, root-found on the Dirichlet response
    approx: float   # Hz, small-omega Taylor expansion
    omega: float

    @property
    def relative_gap(self) -> float:
        return abs(self.approx - self.exact) / self.exact


def bandwidth(fmap: AngleFrequencyMap, geom: MtpGeometry, omega: float = 0.05,
              phi: float = 0.0, xtol: float = 1e-3) -> BandwidthResult:
    """Frequency span over which a beam stays above ``1 - omega`` of its peak amplitude."""
    if not 0 < omega < 1:
        raise ValueError("omega must lie in (0, 1)")
    target = 1 - omega
    null = first_null(geom, fmap, phi)

    def g(df):
        return abs(frequency_response_at_beam(geom, fmap, df, phi)) - target

    hi = null * (1 - 1e-9)
    if not (g(0.0) > 0 > g(hi)):
        raise ValueError("bandwidth root not bracketed inside the main lobe")
    df = brentq(g, 0.0, hi, xtol=xtol)
    lam0 = SPEED_OF_LIGHT / fmap.f0
    approx = math.sqrt(6 * omega) * 2 * fmap.bandwidth * lam0 / (
        math.pi * geom.I * geom.delta_nu * (math.sin(fmap.theta_M) - math.sin(fmap.theta_m)))
    return BandwidthResult(exact=2 * df, approx=approx, omega=omega)


def user_count(fmap: AngleFrequencyMap, geom: MtpGeometry, omega: float = 0.05, phi: float = 0.0) -> int:
    """Number of frequency-slotted users, ``ceil(W / Delta W)``."""
    return int(math.ceil(fmap.bandwidth / bandwidth(fmap, geom, omega, phi).exact))


# --------------------------------------------------------------------------
# multipath


@dataclass(frozen=True)
class MultipathSpec:
    """Rician MTP-to-receiver link with angular scattering gain ``s(theta)``.

    ``s`` must satisfy int s^2 = 1 over [-pi/2, pi/2]; use the preset
    constructors or :meth:`normalized` for user functions.
    """

    kappa_R: float
    s: Callable[[np.ndarray], np.ndarray]
    n_grid: int = 20001

    def __post_init__(self) -> None:
        if self.kappa_R < 0:
            raise ValueError("Rician factor must be non-negative")
        th, w = angular_grid(self.n_grid)
        norm = np.sum(w * self.s(th) ** 2)
        if abs(norm - 1) > 1e-6:
            raise ValueError(f"s^2 integrates to {norm:.8f}, expected 1")

    @classmethod
    def normalized(cls, kappa_R: float, shape: Callable, n_grid: int = 20001) -> "MultipathSpec":
        th, w = angular_grid(n_grid)
        scale = math.sqrt(np.sum(w * shape(th) ** 2))
        return cls(kappa_R, lambda t: shape(t) / scale, n_grid)

    @classmethod
    def isotropic(cls, kappa_R: float, n_grid: int = 20001) -> "MultipathSpec":
        c = 1 / math.sqrt(math.pi)
        return cls(kappa_R, lambda t: np.full_like(np.asarray(t, dtype=float), c), n_grid)

    @classmethod
    def von_mises(cls, kappa_R: float, center: float, concentration: float,
                  n_grid: int = 20001) -> "MultipathSpec":
        """Scattering power concentrated around ``center``; larger concentration is narrower."""
        def shape(t):
            return np.exp(concentration * (np.cos(np.asarray(t) - center) - 1) / 2)
        return cls.normalized(kappa_R, shape, n_grid)


def angular_grid(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Uniform nodes over [-pi/2, pi/2] with composite-Simpson weights (n odd)."""
    if n < 3:
        raise ValueError("angular grid needs at least 3 points")
    if n % 2 == 0:
        n += 1
    th = np.linspace(-np.pi / 2, np.pi / 2, n)
    h = th[1] - th[0]
    w = np.full(n, 2.0)
    w[1::2] = 4.0
    w[0] = w[-1] = 1.0
    return th, w * h / 3


def _beam_pattern(geom, fmap, f_k, theta_inc, psi0, thetas):
    psi = ideal_phase(geom, fmap, theta_inc, 0.0, f_k, None, psi0)
    h = gain_pattern(geom, np.exp(1j * psi), theta_inc, thetas, 0.0, f_k)
    theta_k = fmap.angle(f_k)
    h_max = ideal_channel_gain(geom, np.exp(1j * psi), theta_inc, Direction(theta_k, 0.0), f_k)
    return h, h_max


class QuadratureError(RuntimeError):
    pass


def diffuse_fraction(spec: MultipathSpec, geom: MtpGeometry, fmap: AngleFrequencyMap, f_k: float,
                     theta_inc: Direction = Direction(0.0), psi0: float = 0.0,
                     rtol: float = 1e-3) -> float:
    """``int s^2 |h / h_M|^2 dtheta``, the MTP-filtered share of diffuse power."""
    def integral(n):
        th, w = angular_grid(n)
        h, hm = _beam_pattern(geom, fmap, f_k, theta_inc, psi0, th)
        return float(np.sum(w * spec.s(th) ** 2 * np.abs(h) ** 2) / abs(hm) ** 2)

    fine = integral(spec.n_grid)
    coarse = integral(spec.n_grid // 2)
    if abs(fine - coarse) > rtol * abs(fine) + 1e-15:
        raise QuadratureError(
            f"quadrature not converged: {coarse:.6g} on {spec.n_grid // 2} points vs "
            f"{fine:.6g} on {spec.n_grid} points")
    return fine


def effective_rician_factor(spec: MultipathSpec, geom: MtpGeometry, fmap: AngleFrequencyMap,
                            f_k: float, theta_inc: Direction = Direction(0.0),
                            psi0: float = 0.0) -> float:
    """LOS-to-diffuse power ratio after the metaprism's angular filtering."""
    if spec.kappa_R == 0:
        return 0.0
    return spec.kappa_R / diffuse_fraction(spec, geom, fmap, f_k, theta_inc, psi0)


def multipath_channel_draw(spec: MultipathSpec, geom: MtpGeometry, fmap: AngleFrequencyMap,
                           f_k: float, seed=None, theta_inc: Direction = Direction(0.0),
                           psi0: float = 0.0, size: int | None = None):
    """Monte Carlo realisation(s) of the Rician end-to-end channel at the beam of ``f_k``.

    The white angular process z(theta) is sampled as independent unit complex
    Gaussians on the quadrature grid and weighted by sqrt of the node weights.
    """
    rng = np.random.default_rng(seed)
    th, w = angular_grid(spec.n_grid)
    h, hm = _beam_pattern(geom, fmap, f_k, theta_inc, psi0, th)
    if math.isinf(spec.kappa_R):
        return hm if size is None else np.full(size, hm)
    weights = np.sqrt(w) * spec.s(th) * h
    draws = 1 if size is None else size
    diffuse = np.empty(draws, dtype=complex)
    for start in range(0, draws, 256):
        m = min(256, draws - start)
        z = (rng.standard_normal((m, th.size)) + 1j * rng.standard_normal((m, th.size))) / math.sqrt(2)
        diffuse[start:start + m] = z @ weights
    k = spec.kappa_R
    out = math.sqrt(k / (k + 1)) * hm + math.sqrt(1 / (k + 1)) * diffuse
    return complex(out[0]) if size is None else out


def scenario_map(sc) -> AngleFrequencyMap:
    """Angle-frequency map of a :class:`~metaprism.scenario.Scenario`."""
    return AngleFrequencyMap.from_band(sc.band, sc.theta_min, sc.theta_max)
