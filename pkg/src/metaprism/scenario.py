"""Geometry, band plan and plane-wave primitives shared by the whole toolkit.

Coordinates follow the surface convention used throughout the package: the
metaprism lies in the (nu, zeta) plane, which by default is the (y, z) plane,
with the surface normal along x.  Element ``n`` (1-based) sits at column
``nu_n = (n - 1) mod I`` and row ``zeta_n = ceil(n / I) - 1``.
"""

from __future__ import annotations

import hashlib
import json
import math
import warnings
from dataclasses import asdict, dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Any, Mapping

import numpy as np

try:  # Python >= 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - exercised on 3.10
    import tomli as tomllib

SPEED_OF_LIGHT = 299_792_458.0

_AXES = {"x": 0, "y": 1, "z": 2}


class ScenarioError(ValueError):
    """Raised for malformed or inconsistent scenario descriptions."""


def _check_finite(**values: float) -> None:
    for name, value in values.items():
        if not np.all(np.isfinite(value)):
            raise ScenarioError(f"{name} must be finite, got {value!r}")


@dataclass(frozen=True)
class Direction:
    """Plane-wave direction: elevation from the surface normal and azimuth from the nu axis."""

    theta: float
    phi: float = 0.0

    def __post_init__(self) -> None:
        _check_finite(theta=self.theta, phi=self.phi)
        if not -math.pi / 2 - 1e-12 <= self.theta <= math.pi / 2 + 1e-12:
            raise ScenarioError(f"elevation {self.theta} outside [-pi/2, pi/2]")
        if not 0.0 <= self.phi <= 2 * math.pi:
            raise ScenarioError(f"azimuth {self.phi} outside [0, 2pi]")

    def unit_vector(self, geom: "MtpGeometry") -> np.ndarray:
        """3D unit vector pointing from the surface toward this direction."""
        st = math.sin(self.theta)
        u = np.zeros(3)
        u[geom.normal_axis] = math.cos(self.theta)
        u[geom.nu_axis] = st * math.cos(self.phi)
        u[geom.zeta_axis] = st * math.sin(self.phi)
        return u


@dataclass(frozen=True)
class BandPlan:
    f0: float
    bandwidth: float
    n_freq: int = 17

    def __post_init__(self) -> None:
        _check_finite(f0=self.f0, bandwidth=self.bandwidth)
        if self.f0 <= 0 or self.bandwidth <= 0:
            raise ScenarioError("carrier and bandwidth must be positive")
        if self.n_freq < 2:
            raise ScenarioError("need at least two sampled frequencies")
        if self.bandwidth / self.f0 >= 0.1:
            warnings.warn(
                f"fractional bandwidth {self.bandwidth / self.f0:.3f} is not narrowband",
                stacklevel=2,
            )

    @property
    def f_min(self) -> float:
        return self.f0 - self.bandwidth / 2

    @property
    def f_max(self) -> float:
        return self.f0 + self.bandwidth / 2

    @property
    def wavelength0(self) -> float:
        return SPEED_OF_LIGHT / self.f0

    @cached_property
    def frequencies(self) -> np.ndarray:
        # band edges included so the extreme beams sit at theta_m and theta_M
        return np.linspace(self.f_min, self.f_max, self.n_freq)

    def with_n_freq(self, n_freq: int) -> "BandPlan":
        return replace(self, n_freq=n_freq)


@dataclass(frozen=True)
class MtpGeometry:
    """Uniform I x J grid of scatterers.

    ``p0`` is the position of the element with the smallest (nu, zeta)
    coordinates.  When omitted, it is chosen so that the array is centred on
    the origin.
    """

    I: int
    J: int
    delta_nu: float
    delta_zeta: float
    axes: tuple[str, str] = ("y", "z")
    p0: tuple[float, float, float] | None = None

    def __post_init__(self) -> None:
        if self.I < 1 or self.J < 1:
            raise ScenarioError("element counts must be positive")
        _check_finite(delta_nu=self.delta_nu, delta_zeta=self.delta_zeta)
        if self.delta_nu <= 0 or self.delta_zeta <= 0:
            raise ScenarioError("element spacings must be positive")
        if len(self.axes) != 2 or self.axes[0] == self.axes[1] or set(self.axes) - set(_AXES):
            raise ScenarioError(f"invalid axis assignment {self.axes!r}")
        object.__setattr__(self, "axes", tuple(self.axes))
        if self.p0 is not None:
            object.__setattr__(self, "p0", tuple(float(v) for v in self.p0))

    @property
    def N(self) -> int:
        return self.I * self.J

    @property
    def nu_axis(self) -> int:
        return _AXES[self.axes[0]]

    @property
    def zeta_axis(self) -> int:
        return _AXES[self.axes[1]]

    @property
    def normal_axis(self) -> int:
        return ({0, 1, 2} - {self.nu_axis, self.zeta_axis}).pop()

    @cached_property
    def nu_index(self) -> np.ndarray:
        n = np.arange(1, self.N + 1)
        return np.mod(n - 1, self.I)

    @cached_property
    def zeta_index(self) -> np.ndarray:
        n = np.arange(1, self.N + 1)
        return -(-n // self.I) - 1

    @cached_property
    def origin(self) -> np.ndarray:
        if self.p0 is not None:
            return np.asarray(self.p0, dtype=float)
        p0 = np.zeros(3)
        p0[self.nu_axis] = -(self.I - 1) * self.delta_nu / 2
        p0[self.zeta_axis] = -(self.J - 1) * self.delta_zeta / 2
        return p0

    @cached_property
    def positions(self) -> np.ndarray:
        """(N, 3) element positions in metres."""
        p = np.tile(self.origin, (self.N, 1))
        p[:, self.nu_axis] += self.nu_index * self.delta_nu
        p[:, self.zeta_axis] += self.zeta_index * self.delta_zeta
        return p

    @cached_property
    def in_plane(self) -> np.ndarray:
        """(N, 2) element coordinates along (nu, zeta)."""
        return self.positions[:, [self.nu_axis, self.zeta_axis]]

    def position_from_indices(self, nu: int, zeta: int) -> np.ndarray:
        p = self.origin.copy()
        p[self.nu_axis] += nu * self.delta_nu
        p[self.zeta_axis] += zeta * self.delta_zeta
        return p

    @property
    def aperture_nu(self) -> float:
        return self.I * self.delta_nu


def wavenumber(direction: Direction, f: float) -> np.ndarray:
    """Transverse wavenumber ``(2 pi / lambda) [sin t cos p, sin t sin p]`` in rad/m."""
    _check_finite(f=f)
    if f <= 0:
        raise ScenarioError(f"frequency must be positive, got {f}")
    k = 2 * math.pi * f / SPEED_OF_LIGHT
    st = math.sin(direction.theta)
    return k * np.array([st * math.cos(direction.phi), st * math.sin(direction.phi)])


def array_response(geom: MtpGeometry, direction: Direction, f: float) -> np.ndarray:
    """Unit-modulus steering vector ``exp(j k^T p_n)`` of length N."""
    return np.exp(1j * (geom.in_plane @ wavenumber(direction, f)))


def steering_matrix(geom: MtpGeometry, thetas, phi: float, f) -> np.ndarray:
    """Broadcast version of :func:`array_response`.

    ``thetas`` and ``f`` broadcast against each other; the element axis is
    appended last.
    """
    thetas = np.asarray(thetas, dtype=float)
    f = np.asarray(f, dtype=float)
    k = 2 * np.pi * f / SPEED_OF_LIGHT * np.sin(thetas)
    proj = geom.in_plane[:, 0] * math.cos(phi) + geom.in_plane[:, 1] * math.sin(phi)
    return np.exp(1j * k[..., None] * proj)


# --------------------------------------------------------------------------
# scenario description


@dataclass(frozen=True)
class Scenario:
    """Fully resolved simulation scenario.  Defaults reproduce the reference setup."""

    geometry: MtpGeometry
    band: BandPlan
    theta_min: float
    theta_max: float
    theta_inc: Direction
    phi: float
    D_b: float
    D_u: float
    P_t_dbm: float = 0.0
    N0_dbm_hz: float = -165.37
    Z0: float = 50.0
    psi0: float = 0.0
    far_field_gain: float = 1.0
    dipole_length_wl: float = 0.46
    dipole_radius_wl: float = 1 / 500
    exact_lambda: bool = False
    n_freq_explicit: bool = False
    fit_points: int = 201
    n_theta: int = 1001
    n_alpha: int = 300
    n_gamma: int = 100
    epsilon: float = 1e-4
    max_iter: int = 50
    omega: float = 0.05
    seed: int = 0
    extras: Mapping[str, Any] = field(default_factory=dict)

    @property
    def wavelength0(self) -> float:
        return self.band.wavelength0

    @property
    def P_t(self) -> float:
        """Transmit power in watts."""
        return 10 ** (self.P_t_dbm / 10) * 1e-3

    @property
    def N0(self) -> float:
        """Noise power spectral density in W/Hz."""
        return 10 ** (self.N0_dbm_hz / 10) * 1e-3

    @property
    def tx_position(self) -> np.ndarray:
        return self.D_b * self.theta_inc.unit_vector(self.geometry)

    def user_position(self, theta: float) -> np.ndarray:
        return self.D_u * Direction(theta, self.phi).unit_vector(self.geometry)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["geometry"]["axes"] = list(self.geometry.axes)
        d["extras"] = dict(self.extras)
        return d

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=float).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


# reference aperture along nu: 16 elements at half-wavelength spacing
_REF_I = 16
_REF_DNU_WL = 0.5

DEFAULTS: dict[str, dict[str, Any]] = {
    "band": {"f0": 3.6e9, "bandwidth": 100e6},
    "mapping": {"theta_min": math.pi / 6, "theta_max": math.pi / 3, "phi": 0.0,
                "theta_inc": 0.0, "phi_inc": 0.0, "psi0": 0.0, "exact_lambda": False},
    "geometry": {"J": 4, "axes": ["y", "z"], "constant_aperture": True},
    "links": {"D_b": 10.0, "D_u": 20.0, "far_field_gain": 1.0},
    "power": {"P_t_dbm": 0.0, "N0_dbm_hz": -165.37},
    "circuit": {"Z0": 50.0, "fit_points": 201},
    "dipole": {"length_wl": 0.46, "radius_wl": 1 / 500},
    "sweep": {"n_theta": 1001, "omega": 0.05, "seed": 0},
    "optimizer": {"n_alpha": 300, "n_gamma": 100, "epsilon": 1e-4, "max_iter": 50},
}


def _merge(base: dict, over: Mapping) -> dict:
    out = {k: dict(v) for k, v in base.items()}
    for section, values in over.items():
        if not isinstance(values, Mapping):
            raise ScenarioError(f"section [{section}] must be a table")
        if section not in out:
            raise ScenarioError(f"unknown section [{section}]")
        out[section].update(values)
    return out


def _length(sec: Mapping, key: str, lam0: float, default_wl: float | None) -> float | None:
    if key in sec and f"{key}_wl" in sec:
        raise ScenarioError(f"give either {key} or {key}_wl, not both")
    if key in sec:
        return float(sec[key])
    if f"{key}_wl" in sec:
        return float(sec[f"{key}_wl"]) * lam0
    return None if default_wl is None else default_wl * lam0


def load_scenario(source: str | Path | Mapping | None = None,
                  overrides: Mapping | None = None) -> Scenario:
    """Build a validated :class:`Scenario` from a TOML file or nested mapping.

    Any omitted key falls back to the reference parameter set.  ``overrides``
    is merged on top of ``source`` section by section.
    """
    if source is None:
        raw: Mapping = {}
    elif isinstance(source, Mapping):
        raw = source
    else:
        with open(source, "rb") as fh:
            try:
                raw = tomllib.load(fh)
            except tomllib.TOMLDecodeError as exc:
                raise ScenarioError(f"{source}: {exc}") from exc
    cfg = _merge(DEFAULTS, raw)
    if overrides:
        cfg = _merge(cfg, overrides)

    b, m, g = cfg["band"], cfg["mapping"], cfg["geometry"]
    f0, W = float(b["f0"]), float(b["bandwidth"])
    if f0 <= 0 or W <= 0:
        raise ScenarioError("f0 and bandwidth must be positive")
    lam0 = SPEED_OF_LIGHT / f0

    th_m, th_M = float(m["theta_min"]), float(m["theta_max"])
    if not (-math.pi / 2 <= th_m < th_M <= math.pi / 2):
        raise ScenarioError(f"angular range requires -pi/2 <= theta_min < theta_max <= pi/2, "
                            f"got [{th_m}, {th_M}]")

    d_nu = _length(g, "delta_nu", lam0, _REF_DNU_WL)
    d_zeta = _length(g, "delta_zeta", lam0, 0.75)
    if "I" in g:
        I = int(g["I"])
    elif g.get("constant_aperture", True):
        I = int(round(_REF_I * _REF_DNU_WL * lam0 / d_nu))
    else:
        I = _REF_I
    J = int(g["J"])
    if I < 1 or J < 1 or d_nu <= 0 or d_zeta <= 0:
        raise ScenarioError("geometry dimensions must be positive")
    p0 = g.get("p0")
    geom = MtpGeometry(I=I, J=J, delta_nu=d_nu, delta_zeta=d_zeta,
                       axes=tuple(g["axes"]), p0=None if p0 is None else tuple(p0))

    n_freq = b.get("n_freq")
    band = BandPlan(f0=f0, bandwidth=W, n_freq=int(n_freq) if n_freq is not None else 17)

    links, power = cfg["links"], cfg["power"]
    if float(links["D_b"]) <= 0 or float(links["D_u"]) <= 0:
        raise ScenarioError("link distances must be positive")
    dip = cfg["dipole"]
    opt, sw, circ = cfg["optimizer"], cfg["sweep"], cfg["circuit"]
    if not 0 < float(sw["omega"]) < 1:
        raise ScenarioError("omega must lie in (0, 1)")
    if float(circ["Z0"]) <= 0:
        raise ScenarioError("Z0 must be positive")
    if int(sw["n_theta"]) < 3:
        raise ScenarioError("n_theta must be at least 3")

    return Scenario(
        geometry=geom,
        band=band,
        theta_min=th_m,
        theta_max=th_M,
        theta_inc=Direction(float(m["theta_inc"]), float(m["phi_inc"])),
        phi=float(m["phi"]),
        D_b=float(links["D_b"]),
        D_u=float(links["D_u"]),
        P_t_dbm=float(power["P_t_dbm"]),
        N0_dbm_hz=float(power["N0_dbm_hz"]),
        Z0=float(circ["Z0"]),
        psi0=float(m["psi0"]),
        far_field_gain=float(links["far_field_gain"]),
        dipole_length_wl=float(dip["length_wl"]),
        dipole_radius_wl=float(dip["radius_wl"]),
        exact_lambda=bool(m["exact_lambda"]),
        n_freq_explicit=n_freq is not None,
        fit_points=int(circ["fit_points"]),
        n_theta=int(sw["n_theta"]),
        n_alpha=int(opt["n_alpha"]),
        n_gamma=int(opt["n_gamma"]),
        epsilon=float(opt["epsilon"]),
        max_iter=int(opt["max_iter"]),
        omega=float(sw["omega"]),
        seed=int(sw["seed"]),
    )
