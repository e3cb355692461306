"""Multiport network model of a dipole metaprism.

Self and mutual impedances of parallel thin dipoles come from the induced-EMF
method with sinusoidal current distributions.  The EMF integral is evaluated in
closed form: every term reduces to differences of the exponential integral
E1(jx) = -Ci(x) + j(Si(x) - pi/2).  Impedances are referred to the feed
(input) current, i.e. divided by sin^2(k l).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.constants import epsilon_0, mu_0
from scipy.special import exp1

from .scenario import SPEED_OF_LIGHT, MtpGeometry, Scenario

log = logging.getLogger(__name__)

ETA0 = math.sqrt(mu_0 / epsilon_0)


class NumericalError(RuntimeError):
    """A matrix that must be inverted is singular or too ill-conditioned."""


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class DipoleSpec:
    """Centre-fed thin wire dipole: total length, wire radius and axis direction."""

    length: float
    radius: float
    orientation: tuple[float, float, float] = (0.0, 0.0, 1.0)

    def __post_init__(self) -> None:
        if self.length <= 0 or self.radius <= 0:
            raise GeometryError("dipole length and radius must be positive")
        if self.radius / self.length >= 0.05:
            raise GeometryError("thin-wire model needs radius/length < 0.05")
        o = np.asarray(self.orientation, dtype=float)
        object.__setattr__(self, "orientation", tuple(o / np.linalg.norm(o)))

    @classmethod
    def from_wavelength(cls, wavelength: float, length_wl: float = 0.46,
                        radius_wl: float = 1 / 500, axis: int = 2) -> "DipoleSpec":
        if not 0 < length_wl < 1:
            raise GeometryError("dipole length must lie in (0, lambda)")
        o = [0.0, 0.0, 0.0]
        o[axis] = 1.0
        return cls(length_wl * wavelength, radius_wl * wavelength, tuple(o))

    @classmethod
    def for_scenario(cls, sc: Scenario) -> "DipoleSpec":
        return cls.from_wavelength(sc.wavelength0, sc.dipole_length_wl, sc.dipole_radius_wl,
                                   sc.geometry.zeta_axis)


# --------------------------------------------------------------------------
# induced-EMF kernel


def _phase_integral(k, rho, t_a, t_b, sigma):
    """int_{t_a}^{t_b} exp(-jkR) / R * exp(j sigma k t) dt with R = hypot(rho, t).

    Substituting u = R - sigma t gives dt / R = -sigma du / u, hence the E1
    difference.  ``u`` is evaluated in a cancellation-free form.
    """
    def u(t):
        R = np.hypot(rho, t)
        st = sigma * t
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(st > 0, rho ** 2 / (R + st), R - st)

    return sigma * (exp1(1j * k * u(t_b)) - exp1(1j * k * u(t_a)))


def _emf_kernel(k, half, rho, h):
    """Mutual impedance (referred to the current maximum, without the j eta/4pi factor).

    Source dipole centred at the origin; receiving dipole centred at axial
    offset ``h`` and transverse distance ``rho``.  Arrays broadcast.
    """
    cos_kl = np.cos(k * half)
    total = np.zeros(np.broadcast(rho, h).shape, dtype=complex)
    for z_src, weight in ((half, 1.0), (-half, 1.0), (0.0, None)):
        w = -2 * cos_kl if weight is None else weight
        # receiver current: sin(k(l + s(z - h))) on the half where s(z - h) <= 0
        for za, zb, s in ((h - half, h, 1), (h, h + half, -1)):
            part = 0
            for sign in (1, -1):
                ph = np.exp(1j * sign * k * (half - s * h)) * np.exp(1j * sign * s * k * z_src)
                part = part + sign * ph * _phase_integral(k, rho, za - z_src, zb - z_src, sign * s)
            total = total + w * part / 2j
    return total


def _pair_impedance(spec: DipoleSpec, rho, h, f):
    k = 2 * np.pi * f / SPEED_OF_LIGHT
    half = spec.length / 2
    # field sampled on the receiving wire surface
    rho = np.maximum(rho, spec.radius)
    z = 1j * ETA0 / (4 * np.pi) * _emf_kernel(k, half, rho, h)
    return z / np.sin(k * half) ** 2


def _split(spec: DipoleSpec, d):
    o = np.asarray(spec.orientation)
    h = d @ o
    rho = np.linalg.norm(d - h[..., None] * o, axis=-1)
    return rho, h


def self_impedance(spec: DipoleSpec, f: float) -> complex:
    """Input impedance of an isolated dipole (field evaluated at the wire surface)."""
    return complex(_pair_impedance(spec, 0.0, 0.0, f))


def mutual_impedance(spec: DipoleSpec, p_a, p_b, f: float) -> complex:
    """Mutual impedance between two identical parallel dipoles centred at ``p_a`` and ``p_b``."""
    d = np.asarray(p_b, dtype=float) - np.asarray(p_a, dtype=float)
    rho, h = _split(spec, d)
    if rho == 0 and h == 0:
        raise GeometryError("mutual impedance needs two distinct dipoles")
    if rho < 2 * spec.radius and abs(h) < spec.length:
        raise GeometryError("dipole wire volumes overlap")
    # the kernel is symmetric in the pair; fix the sign of h to make that exact
    return complex(_pair_impedance(spec, rho, abs(h), f))


def impedance_block(spec: DipoleSpec, pos_a, pos_b, f: float, self_terms: bool = False) -> np.ndarray:
    """Matrix of impedances between every dipole at ``pos_a`` and every dipole at ``pos_b``.

    With ``self_terms`` coincident positions get the self impedance, otherwise they raise.
    """
    pos_a = np.atleast_2d(np.asarray(pos_a, dtype=float))
    pos_b = np.atleast_2d(np.asarray(pos_b, dtype=float))
    d = pos_b[None, :, :] - pos_a[:, None, :]
    rho, h = _split(spec, d)
    same = (rho == 0) & (h == 0)
    if np.any(same) and not self_terms:
        raise GeometryError("coincident dipoles")
    overlap = (rho < 2 * spec.radius) & (np.abs(h) < spec.length) & ~same
    if np.any(overlap):
        raise GeometryError("dipole wire volumes overlap")
    return _pair_impedance(spec, rho, np.abs(h), f)


@dataclass(frozen=True)
class ImpedanceMatrix:
    """(N+2)-port impedance matrix ordered (TX, MTP 1..N, RX)."""

    Z: np.ndarray
    positions: np.ndarray
    frequency: float
    labels: tuple[str, ...] = field(default=())

    @property
    def n_mtp(self) -> int:
        return self.Z.shape[0] - 2


def _mtp_labels(n: int) -> tuple[str, ...]:
    return ("TX", *(f"MTP{i}" for i in range(1, n + 1)), "RX")


def build_impedance_matrix(geom: MtpGeometry, tx_pos, rx_pos, spec: DipoleSpec, f: float,
                           direct_link: bool = False) -> ImpedanceMatrix:
    """Impedance matrix of transmitter, metaprism elements and receiver.

    The TX-RX entry is zeroed unless ``direct_link`` is set: the link is
    assumed to exist only through the surface.
    """
    pos = np.vstack([np.asarray(tx_pos, float)[None], geom.positions, np.asarray(rx_pos, float)[None]])
    Z = impedance_block(spec, pos, pos, f, self_terms=True)
    Z = (Z + Z.T) / 2
    if not direct_link:
        Z[0, -1] = Z[-1, 0] = 0.0
    return ImpedanceMatrix(Z, pos, f, _mtp_labels(geom.N))


# --------------------------------------------------------------------------
# scattering parameters


def _check_conditioning(M: np.ndarray, what: str) -> None:
    cond = np.linalg.cond(M)
    if not np.isfinite(cond) or cond > 1e15:
        raise NumericalError(f"{what} is singular (condition number {cond:.3e})")
    if cond > 1e8:
        log.warning("%s is ill-conditioned (condition number %.3e)", what, cond)


def z_to_s(Z: np.ndarray, Z0: float = 50.0) -> np.ndarray:
    """``S = (Z + Z0 I)^-1 (Z - Z0 I)``; works on stacks of matrices."""
    Z = np.asarray(Z, dtype=complex)
    eye = np.eye(Z.shape[-1])
    A = Z + Z0 * eye
    if A.ndim == 2:
        _check_conditioning(A, "Z + Z0 I")
    try:
        return np.linalg.solve(A, Z - Z0 * eye)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"Z + Z0 I is singular: {exc}") from exc


def s_to_z(S: np.ndarray, Z0: float = 50.0) -> np.ndarray:
    """``Z = Z0 (I + S)(I - S)^-1``."""
    S = np.asarray(S, dtype=complex)
    eye = np.eye(S.shape[-1])
    # (I+S)(I-S)^-1 == (I-S)^-1 (I+S) since both are functions of S
    return Z0 * np.linalg.solve(eye - S, eye + S)


@dataclass(frozen=True)
class MultiportNetwork:
    """Partitioned scattering blocks seen by one transmitter/receiver pair."""

    s_RT: complex
    s_RM: np.ndarray   # (N,) receiver row
    s_MT: np.ndarray   # (N,) transmitter column
    S_SS: np.ndarray   # (N, N)
    Z0: float = 50.0
    frequency: float | None = None

    @property
    def N(self) -> int:
        return self.S_SS.shape[0]

    def without_coupling(self) -> "MultiportNetwork":
        return replace(self, S_SS=np.zeros_like(self.S_SS))

    def without_structural(self) -> "MultiportNetwork":
        return replace(self, s_RT=0j)

    def full_matrix(self) -> np.ndarray:
        """Reassemble an (N+2)-port S with (TX, MTP, RX) ordering.

        TX/RX self terms and the RX->TX entry are not part of the partition
        and are filled with zero (matched ports) and the reciprocal s_RT.
        """
        n = self.N
        S = np.zeros((n + 2, n + 2), dtype=complex)
        S[1:-1, 1:-1] = self.S_SS
        S[1:-1, 0] = self.s_MT
        S[0, 1:-1] = self.s_MT
        S[-1, 1:-1] = self.s_RM
        S[1:-1, -1] = self.s_RM
        S[-1, 0] = S[0, -1] = self.s_RT
        return S


def partition(S: np.ndarray, Z0: float = 50.0, frequency: float | None = None,
              tx: int = 0, rx: int = -1) -> MultiportNetwork:
    """Split a full scattering matrix into the blocks used by the channel model."""
    S = np.asarray(S, dtype=complex)
    n = S.shape[0]
    tx %= n
    rx %= n
    mtp = [i for i in range(n) if i not in (tx, rx)]
    return MultiportNetwork(
        s_RT=complex(S[rx, tx]),
        s_RM=S[rx, mtp].copy(),
        s_MT=S[mtp, tx].copy(),
        S_SS=S[np.ix_(mtp, mtp)].copy(),
        Z0=Z0,
        frequency=frequency,
    )


def z_to_s_partition(Zm: ImpedanceMatrix, Z0: float = 50.0) -> MultiportNetwork:
    return partition(z_to_s(Zm.Z, Z0), Z0, Zm.frequency)


def _unit_modulus(gamma: np.ndarray) -> None:
    if np.any(np.abs(np.abs(gamma) - 1) > 1e-9):
        raise ValueError("reflection coefficients must have unit modulus")


def realistic_channel(net: MultiportNetwork, gamma, label=None) -> complex:
    """End-to-end gain ``s_RT + s_RM (Gamma^-1 - S_SS)^-1 s_MT`` for loads ``gamma`` (N,)."""
    gamma = np.asarray(gamma, dtype=complex)
    _unit_modulus(gamma)
    M = np.diag(1 / gamma) - net.S_SS
    try:
        y = np.linalg.solve(M, net.s_MT)
    except np.linalg.LinAlgError as exc:
        where = label if label is not None else net.frequency
        raise NumericalError(f"Gamma^-1 - S_SS singular at {where}") from exc
    return complex(net.s_RT + net.s_RM @ y)


@dataclass(frozen=True)
class NetworkStack:
    """The same partition for many receiver positions, stored as arrays.

    Shapes: s_RT (T,), s_RM (T, N), s_MT (T, N), S_SS (T, N, N).
    """

    s_RT: np.ndarray
    s_RM: np.ndarray
    s_MT: np.ndarray
    S_SS: np.ndarray
    Z0: float = 50.0
    frequency: float | None = None

    def __len__(self) -> int:
        return self.s_RT.shape[0]

    @property
    def N(self) -> int:
        return self.S_SS.shape[-1]

    def __getitem__(self, i) -> MultiportNetwork:
        return MultiportNetwork(complex(self.s_RT[i]), self.s_RM[i], self.s_MT[i], self.S_SS[i],
                                self.Z0, self.frequency)

    def subset(self, idx) -> "NetworkStack":
        idx = np.atleast_1d(idx)
        return NetworkStack(self.s_RT[idx], self.s_RM[idx], self.s_MT[idx], self.S_SS[idx],
                            self.Z0, self.frequency)

    @classmethod
    def from_networks(cls, nets) -> "NetworkStack":
        nets = list(nets)
        return cls(np.array([n.s_RT for n in nets]), np.stack([n.s_RM for n in nets]),
                   np.stack([n.s_MT for n in nets]), np.stack([n.S_SS for n in nets]),
                   nets[0].Z0, nets[0].frequency)

    def without_coupling(self) -> "NetworkStack":
        return replace(self, S_SS=np.zeros_like(self.S_SS))

    def without_structural(self) -> "NetworkStack":
        return replace(self, s_RT=np.zeros_like(self.s_RT))

    def channels(self, gamma) -> np.ndarray:
        """Gain for each stacked network; ``gamma`` is (N,) shared or (T, N) per network."""
        gamma = np.asarray(gamma, dtype=complex)
        _unit_modulus(gamma)
        gamma = np.broadcast_to(gamma, self.s_MT.shape)
        M = -self.S_SS.copy()
        idx = np.arange(self.N)
        M[:, idx, idx] += 1 / gamma
        try:
            y = np.linalg.solve(M, self.s_MT[..., None])[..., 0]
        except np.linalg.LinAlgError as exc:
            raise NumericalError("Gamma^-1 - S_SS singular") from exc
        return self.s_RT + np.einsum("tn,tn->t", self.s_RM, y)


def user_networks(sc: Scenario, thetas, f: float | None = None, spec: DipoleSpec | None = None,
                  direct_link: bool = False, chunk: int = 32) -> NetworkStack:
    """Networks for receivers at distance D_u along each elevation in ``thetas``.

    The transmitter and surface block of Z is assembled once; only the
    receiver row changes between positions.
    """
    geom = sc.geometry
    f = sc.band.f0 if f is None else f
    spec = DipoleSpec.for_scenario(sc) if spec is None else spec
    thetas = np.atleast_1d(np.asarray(thetas, dtype=float))
    base_pos = np.vstack([sc.tx_position[None], geom.positions])
    Zb = impedance_block(spec, base_pos, base_pos, f, self_terms=True)
    Zb = (Zb + Zb.T) / 2
    z_self = self_impedance(spec, f)
    rx = np.array([sc.user_position(t) for t in thetas])
    Zr = impedance_block(spec, rx, base_pos, f)           # (T, N+1)
    if not direct_link:
        Zr[:, 0] = 0.0
    n = base_pos.shape[0] + 1
    out = []
    for start in range(0, len(thetas), chunk):
        sl = slice(start, start + chunk)
        m = Zr[sl].shape[0]
        Z = np.empty((m, n, n), dtype=complex)
        Z[:, :-1, :-1] = Zb
        Z[:, -1, :-1] = Zr[sl]
        Z[:, :-1, -1] = Zr[sl]
        Z[:, -1, -1] = z_self
        out.append(z_to_s(Z, sc.Z0))
    S = np.concatenate(out)
    return NetworkStack(S[:, -1, 0].copy(), S[:, -1, 1:-1].copy(), S[:, 1:-1, 0].copy(),
                        S[:, 1:-1, 1:-1].copy(), sc.Z0, f)


# --------------------------------------------------------------------------
# file exchange


def write_touchstone(path, S: np.ndarray, frequency: float, Z0: float = 50.0,
                     comment: str | None = None) -> Path:
    """Write a single-frequency Touchstone v1 file (real/imag format)."""
    S = np.asarray(S, dtype=complex)
    n = S.shape[0]
    path = Path(path)
    lines = []
    if comment:
        lines += [f"! {c}" for c in comment.splitlines()]
    lines.append(f"# HZ S RI R {Z0:g}")
    for i in range(n):
        vals = [f"{v.real:.17g} {v.imag:.17g}" for v in S[i]]
        for j in range(0, n, 4):
            head = f"{frequency:.17g} " if (i == 0 and j == 0) else ""
            lines.append(head + " ".join(vals[j:j + 4]))
    path.write_text("\n".join(lines) + "\n")
    return path


def read_touchstone(path) -> tuple[np.ndarray, float, float]:
    """Read a single-frequency RI/MA/DB Touchstone v1 file. Returns (S, frequency, Z0)."""
    path = Path(path)
    n = None
    suffix = path.suffix.lower()
    if suffix.startswith(".s") and suffix.endswith("p") and suffix[2:-1].isdigit():
        n = int(suffix[2:-1])
    fmt, z0, unit = "MA", 50.0, 1e9
    nums: list[float] = []
    scale = {"HZ": 1.0, "KHZ": 1e3, "MHZ": 1e6, "GHZ": 1e9}
    for raw in path.read_text().splitlines():
        line = raw.split("!", 1)[0].strip()
        if not line:
            continue
        if line.startswith("#"):
            toks = line[1:].upper().split()
            for i, t in enumerate(toks):
                if t in scale:
                    unit = scale[t]
                elif t in ("RI", "MA", "DB"):
                    fmt = t
                elif t == "R":
                    z0 = float(toks[i + 1])
            continue
        nums.extend(float(t) for t in line.split())
    if n is None:
        n = int(round(math.sqrt((len(nums) - 1) / 2)))
    if len(nums) != 1 + 2 * n * n:
        raise ValueError(f"{path}: expected one {n}-port frequency point, got {len(nums)} numbers")
    freq = nums[0] * unit
    a = np.array(nums[1:]).reshape(n, n, 2)
    if fmt == "RI":
        S = a[..., 0] + 1j * a[..., 1]
    elif fmt == "MA":
        S = a[..., 0] * np.exp(1j * np.deg2rad(a[..., 1]))
    else:
        S = 10 ** (a[..., 0] / 20) * np.exp(1j * np.deg2rad(a[..., 1]))
    return S, freq, z0


def write_matrix_csv(path, M: np.ndarray) -> Path:
    """Complex matrix as CSV rows ``row,col,re,im`` (0-based indices)."""
    M = np.atleast_2d(np.asarray(M, dtype=complex))
    path = Path(path)
    with path.open("w") as fh:
        fh.write("row,col,re,im\n")
        for (i, j), v in np.ndenumerate(M):
            fh.write(f"{i},{j},{v.real:.17g},{v.imag:.17g}\n")
    return path


def read_matrix_csv(path) -> np.ndarray:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    rows = data[:, 0].astype(int)
    cols = data[:, 1].astype(int)
    M = np.zeros((rows.max() + 1, cols.max() + 1), dtype=complex)
    M[rows, cols] = data[:, 2] + 1j * data[:, 3]
    return M
