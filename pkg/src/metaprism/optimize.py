"""Alternating optimisation of the per-element linear phase profile.

Each element ``n`` reflects with ``psi_{k,n} = alpha_n (f_k - f0) + gamma_n``.
Elements are visited in turn; for each one the channel of every user becomes
a scalar Moebius function of ``exp(j psi_{k,n})`` by the Sherman-Morrison
identity, so the capacity can be scanned on a dense (alpha, gamma) grid
without any matrix inversion.
"""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ideal import AngleFrequencyMap, ideal_linear_coefficients
from .multiport import NetworkStack, NumericalError
from .scenario import Direction, MtpGeometry

log = logging.getLogger(__name__)

TWO_PI = 2 * math.pi


class ConvergenceWarning(UserWarning):
    pass


def slot_frequencies(f0: float, bandwidth: float, K: int) -> np.ndarray:
    """Centres of ``K`` equal frequency slots spanning the band."""
    if K < 1:
        raise ValueError("K must be positive")
    return f0 - bandwidth / 2 + (np.arange(K) + 0.5) * bandwidth / K


@dataclass(frozen=True)
class PhaseProfile:
    """Affine phase profile: slopes ``alpha`` (rad/Hz) and offsets ``gamma`` (rad) per element."""

    alpha: np.ndarray
    gamma: np.ndarray
    f0: float

    def __post_init__(self) -> None:
        a = np.asarray(self.alpha, dtype=float).copy()
        g = np.mod(np.asarray(self.gamma, dtype=float), TWO_PI)
        if a.shape != g.shape or a.ndim != 1:
            raise ValueError("alpha and gamma must be matching vectors")
        object.__setattr__(self, "alpha", a)
        object.__setattr__(self, "gamma", g)

    @property
    def N(self) -> int:
        return self.alpha.size

    def psi(self, f) -> np.ndarray:
        """Phase matrix, shape (K, N)."""
        f = np.atleast_1d(np.asarray(f, dtype=float))
        return self.alpha[None, :] * (f[:, None] - self.f0) + self.gamma[None, :]

    def gamma_matrix(self, f) -> np.ndarray:
        return np.exp(1j * self.psi(f))

    def with_element(self, n: int, alpha: float, gamma: float) -> "PhaseProfile":
        a, g = self.alpha.copy(), self.gamma.copy()
        a[n], g[n] = alpha, gamma
        return PhaseProfile(a, g, self.f0)

    @classmethod
    def ideal(cls, geom: MtpGeometry, fmap: AngleFrequencyMap, theta_inc: Direction,
              phi: float = 0.0, psi0: float = 0.0) -> "PhaseProfile":
        """Signed coefficients of the ideal metaprism profile."""
        slope, offset = ideal_linear_coefficients(geom, fmap, theta_inc, phi, psi0)
        return cls(slope, offset, fmap.f0)


@dataclass(frozen=True)
class SearchGrid:
    alphas: np.ndarray
    gammas: np.ndarray

    @classmethod
    def uniform(cls, alpha_min: float, alpha_max: float, n_alpha: int = 300,
                n_gamma: int = 100) -> "SearchGrid":
        if n_alpha < 1 or n_gamma < 1:
            raise ValueError("grid sizes must be positive")
        if alpha_max < alpha_min:
            raise ValueError("alpha_max < alpha_min")
        alphas = np.linspace(alpha_min, alpha_max, n_alpha) if n_alpha > 1 else np.array([alpha_min])
        return cls(alphas, np.arange(n_gamma) * TWO_PI / n_gamma)

    @classmethod
    def for_profile(cls, profile: PhaseProfile, n_alpha: int = 300, n_gamma: int = 100) -> "SearchGrid":
        """Slopes between the smallest and largest slope of ``profile`` (signed)."""
        return cls.uniform(float(profile.alpha.min()), float(profile.alpha.max()), n_alpha, n_gamma)

    def snap(self, alpha: float, gamma: float) -> tuple[int, int]:
        """Indices of the grid point nearest to (alpha, gamma)."""
        ia = int(np.argmin(np.abs(self.alphas - alpha)))
        d = np.abs(np.angle(np.exp(1j * (self.gammas - gamma))))
        return ia, int(np.argmin(d))


@dataclass
class CapacityReport:
    C_M: float
    rates: np.ndarray
    gains: np.ndarray
    P_t: float
    N0: float
    bandwidth: float
    trace: list[float] = field(default_factory=list)
    mu: float = float("nan")
    iterations: int = 0
    converged: bool = True

    @property
    def K(self) -> int:
        return self.rates.size

    @property
    def spectral_efficiency(self) -> float:
        return self.C_M / self.bandwidth


def capacity_from_gains(gains, P_t: float, N0: float, bandwidth: float) -> CapacityReport:
    """Equal-power full-load capacity ``sum_k W/K log2(1 + g_k P_t / (W N0))``."""
    gains = np.asarray(gains, dtype=float)
    K = gains.size
    rates = bandwidth / K * np.log2(1 + gains * P_t / (bandwidth * N0))
    return CapacityReport(float(rates.sum()), rates, gains, P_t, N0, bandwidth)


def capacity(nets: NetworkStack, gamma, P_t: float, N0: float, bandwidth: float) -> CapacityReport:
    """Capacity with user ``k`` served by network ``k`` under loads ``gamma[k]`` (K, N)."""
    gamma = np.asarray(gamma, dtype=complex)
    try:
        h = nets.channels(gamma)
    except NumericalError:
        # locate the offending user for the error message
        h = np.array([_single(nets, k, gamma[k]) for k in range(len(nets))])
    return capacity_from_gains(np.abs(h) ** 2, P_t, N0, bandwidth)


def _single(nets: NetworkStack, k: int, gamma_k) -> complex:
    net = nets[k]
    M = np.diag(1 / gamma_k) - net.S_SS
    try:
        y = np.linalg.solve(M, net.s_MT)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"Gamma^-1 - S_SS singular for user k={k}") from exc
    return complex(net.s_RT + net.s_RM @ y)


# --------------------------------------------------------------------------
# Sherman-Morrison machinery


@dataclass(frozen=True)
class RankOneSplit:
    """``(Gamma^-1 - S)^-1 = A - B / (exp(j psi_n) + c)`` with element ``n`` removed from the diagonal."""

    A: np.ndarray
    B: np.ndarray
    c: complex


def rank_one_split(gamma_inv_diag, S_SS: np.ndarray, n: int) -> RankOneSplit:
    """Direct (reference) computation of the split for element ``n`` (0-based)."""
    d = np.asarray(gamma_inv_diag, dtype=complex).copy()
    d[n] = 0
    M = np.diag(d) - S_SS
    try:
        A = np.linalg.inv(M)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"Delta_-n - S_SS singular for element {n}") from exc
    B = np.outer(A[:, n], A[n, :])
    return RankOneSplit(A, B, complex(A[n, n]))


@dataclass(frozen=True)
class Moebius:
    """Per-user bilinear map ``h(z) = (P z + Q) / (R z + T)`` of ``z = exp(j psi_n)``.

    Changing one load is a rank-one change of ``Gamma^-1 - S_SS``, so the
    channel is a Moebius function of that load.  Without coupling ``R``
    vanishes and the map is affine in ``z``.
    """

    P: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    T: np.ndarray

    def __call__(self, z):
        z = np.asarray(z)
        with np.errstate(divide="ignore", invalid="ignore"):
            return (self.P * z + self.Q) / (self.R * z + self.T)

    @classmethod
    def constant(cls, h) -> "Moebius":
        h = np.asarray(h, dtype=complex)
        return cls(np.zeros_like(h), h, np.zeros_like(h), np.ones_like(h))


class _State:
    """Per-user inverse ``G_k = (Gamma_k^-1 - S_SS)^-1`` and the vectors derived from it."""

    def __init__(self, nets: NetworkStack, gamma: np.ndarray):
        self.nets = nets
        self.delta = 1 / gamma                     # (K, N), entries exp(-j psi)
        self.refresh()

    def refresh(self) -> None:
        nets = self.nets
        K, N = self.delta.shape
        M = -np.broadcast_to(nets.S_SS, (K, N, N)).astype(complex)
        idx = np.arange(N)
        M[:, idx, idx] += self.delta
        try:
            self.G = np.linalg.inv(M)
        except np.linalg.LinAlgError as exc:
            raise NumericalError("Gamma^-1 - S_SS singular for some user") from exc
        self.x = np.einsum("kn,knm->km", nets.s_RM, self.G)
        self.y = np.einsum("knm,km->kn", self.G, nets.s_MT)
        self.h = nets.s_RT + np.einsum("kn,kn->k", self.x, nets.s_MT)

    def moebius(self, n: int) -> "Moebius":
        """Channel of every user as a function of ``exp(j psi_n)`` with the other loads fixed."""
        g_nn = self.G[:, n, n]
        xy = self.x[:, n] * self.y[:, n]
        d0 = self.delta[:, n]
        R = 1 - d0 * g_nn
        if np.any((np.abs(R) < 1e-14) & (np.abs(g_nn) < 1e-14)):
            raise NumericalError(f"channel does not depend regularly on element {n + 1}")
        return Moebius(self.h * R + d0 * xy, self.h * g_nn - xy, R, g_nn)

    def update(self, n: int, new_delta: np.ndarray) -> None:
        """Rank-one update of every G_k after element ``n`` changes its load."""
        t = new_delta - self.delta[:, n]
        g_col = self.G[:, :, n].copy()
        g_row = self.G[:, n, :].copy()
        den = 1 + t * self.G[:, n, n]
        if np.any(np.abs(den) < 1e-14):
            raise NumericalError(f"update of element {n + 1} hits a singular matrix")
        coef = (t / den)[:, None]
        self.G -= coef[:, :, None] * g_col[:, :, None] * g_row[:, None, :]
        self.x -= coef * self.x[:, n:n + 1] * g_row
        self.y -= coef * g_col * self.y[:, n:n + 1]
        self.delta[:, n] = new_delta
        self.h = self.nets.s_RT + np.einsum("kn,kn->k", self.x, self.nets.s_MT)


def _rates(h, snr: float, bandwidth: float, K: int):
    return bandwidth / K * np.log2(1 + np.abs(h) ** 2 * snr)


def element_subproblem(m: Moebius, df, grid: SearchGrid, snr: float, bandwidth: float,
                       incumbent: tuple[float, float] | None = None, chunk: int = 64):
    """Exhaustive maximisation of the capacity over the (alpha, gamma) grid for one element.

    ``m`` maps the element's reflection coefficient to each user's channel
    and ``df = f_k - f0``.  Among equal maximisers the lowest (alpha index,
    gamma index) wins.  With an ``incumbent`` (alpha, gamma) it is kept unless
    a grid point is strictly better.  Returns ``(alpha, gamma, C)``.
    """
    df = np.asarray(df)
    K = df.size
    e_g = np.exp(1j * grid.gammas)                              # (G,)
    best_val, best = -np.inf, (0, 0)
    for start in range(0, grid.alphas.size, chunk):
        a = grid.alphas[start:start + chunk]
        e_a = np.exp(1j * a[:, None] * df[None, :])             # (A, K)
        z = e_a[:, None, :] * e_g[None, :, None]                # (A, G, K)
        C = _rates(m(z), snr, bandwidth, K).sum(axis=-1)
        C = np.where(np.isfinite(C), C, -np.inf)
        idx = int(np.argmax(C))
        if C.flat[idx] > best_val:
            best_val = float(C.flat[idx])
            best = np.unravel_index(idx, C.shape)
            best = (best[0] + start, best[1])
    cand = (float(grid.alphas[best[0]]), float(grid.gammas[best[1]]), best_val)
    if incumbent is None:
        return cand
    a0, g0 = incumbent
    h0 = m(np.exp(1j * (a0 * df + g0)))
    C0 = float(_rates(h0, snr, bandwidth, K).sum())
    if cand[2] > C0 * (1 + 1e-12):
        return cand
    return (a0, g0, C0)


def optimize(nets: NetworkStack, frequencies, initial: PhaseProfile, grid: SearchGrid,
             P_t: float, N0: float, bandwidth: float, epsilon: float = 1e-4,
             max_iter: int = 50, check_every: int = 0) -> tuple[PhaseProfile, CapacityReport]:
    """Alternating optimisation of the affine phase profile.

    ``nets[k]`` is the network of the user served at ``frequencies[k]``.
    ``check_every > 0`` recomputes the capacity by full inversion every that
    many element updates and raises if it drifts from the tracked value.
    """
    freqs = np.asarray(frequencies, dtype=float)
    K = freqs.size
    if len(nets) != K:
        raise ValueError(f"{len(nets)} networks for {K} users")
    snr = P_t / (bandwidth * N0)
    df = freqs - initial.f0
    profile = initial
    state = _State(nets, profile.gamma_matrix(freqs))
    C_prev = float(_rates(state.h, snr, bandwidth, K).sum())
    trace = [C_prev]
    mu = float("nan")
    converged = False
    updates = 0
    for q in range(1, max_iter + 1):
        for n in range(profile.N):
            a, g, _ = element_subproblem(state.moebius(n), df, grid, snr, bandwidth,
                                         incumbent=(profile.alpha[n], profile.gamma[n]))
            if a != profile.alpha[n] or g != profile.gamma[n]:
                profile = profile.with_element(n, a, g)
                state.update(n, np.exp(-1j * (a * df + g)))
                updates += 1
                if check_every and updates % check_every == 0:
                    _check_drift(nets, profile, freqs, state, snr, bandwidth)
        state.refresh()
        C_q = _settle(float(_rates(state.h, snr, bandwidth, K).sum()), trace[-1])
        trace.append(C_q)
        mu = abs(C_q - C_prev) / abs(C_prev) if C_prev else (0.0 if C_q == 0 else float("inf"))
        log.info("iteration %d: C_M = %.6g bit/s, mu = %.3e", q, C_q, mu)
        C_prev = C_q
        if mu <= epsilon:
            converged = True
            break
    if not converged:
        warnings.warn(f"alternating optimisation stopped after {max_iter} iterations (mu={mu:.3e})",
                      ConvergenceWarning, stacklevel=2)
    report = capacity_from_gains(np.abs(state.h) ** 2, P_t, N0, bandwidth)
    report.trace, report.mu, report.iterations, report.converged = trace, mu, len(trace) - 1, converged
    return profile, report


def _settle(fresh: float, last: float) -> float:
    # the fresh inversion may differ from the tracked value in the last bits;
    # accepted moves never lower the capacity, so round-off is not a decrease
    if fresh < last and last - fresh <= 1e-10 * abs(last):
        return last
    return fresh


def _check_drift(nets, profile, freqs, state, snr, bandwidth) -> None:
    K = freqs.size
    fresh = nets.channels(profile.gamma_matrix(freqs))
    c_fresh = _rates(fresh, snr, bandwidth, K).sum()
    c_track = _rates(state.h, snr, bandwidth, K).sum()
    if abs(c_fresh - c_track) > 1e-8 * abs(c_fresh):
        raise NumericalError(f"tracked capacity {c_track} drifted from {c_fresh}")


def optimize_unconstrained(nets: NetworkStack, frequencies, initial_psi, n_psi: int,
                           P_t: float, N0: float, bandwidth: float, epsilon: float = 1e-4,
                           max_iter: int = 50) -> tuple[np.ndarray, CapacityReport]:
    """Same scheme with every ``psi_{k,n}`` free on a uniform grid of ``n_psi`` phases.

    ``initial_psi`` (K, N) is the starting point; it is kept unless a grid
    phase is strictly better, so starting from a constrained optimum can only
    improve on it.
    """
    freqs = np.asarray(frequencies, dtype=float)
    K = freqs.size
    psi = np.mod(np.array(initial_psi, dtype=float), TWO_PI)
    if psi.shape[0] != K:
        raise ValueError("initial_psi must have one row per user")
    snr = P_t / (bandwidth * N0)
    grid = np.arange(n_psi) * TWO_PI / n_psi
    e_grid = np.exp(1j * grid)
    state = _State(nets, np.exp(1j * psi))
    C_prev = float(_rates(state.h, snr, bandwidth, K).sum())
    trace = [C_prev]
    mu = float("nan")
    converged = False
    for q in range(1, max_iter + 1):
        for n in range(psi.shape[1]):
            m = state.moebius(n)
            # users decouple: each picks its own phase
            g = np.abs(m(e_grid[:, None])).T ** 2
            g = np.where(np.isfinite(g), g, -np.inf)
            best = np.argmax(g, axis=1)
            g_best = g[np.arange(K), best]
            g_inc = np.abs(m(np.exp(1j * psi[:, n]))) ** 2
            take = g_best > g_inc * (1 + 1e-12)
            if np.any(take):
                psi[take, n] = grid[best[take]]
                state.update(n, np.exp(-1j * psi[:, n]))
        state.refresh()
        C_q = _settle(float(_rates(state.h, snr, bandwidth, K).sum()), trace[-1])
        trace.append(C_q)
        mu = abs(C_q - C_prev) / abs(C_prev) if C_prev else (0.0 if C_q == 0 else float("inf"))
        C_prev = C_q
        if mu <= epsilon:
            converged = True
            break
    if not converged:
        warnings.warn(f"unconstrained optimisation stopped after {max_iter} iterations (mu={mu:.3e})",
                      ConvergenceWarning, stacklevel=2)
    report = capacity_from_gains(np.abs(state.h) ** 2, P_t, N0, bandwidth)
    report.trace, report.mu, report.iterations, report.converged = trace, mu, len(trace) - 1, converged
    return psi, report


# --------------------------------------------------------------------------
# files


def write_profile_csv(path, profile: PhaseProfile) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["n", "alpha_rad_per_hz", "gamma_rad"])
        for n, (a, g) in enumerate(zip(profile.alpha, profile.gamma), start=1):
            w.writerow([n, f"{a:.17g}", f"{g:.17g}"])
    return path


def read_profile_csv(path, f0: float) -> PhaseProfile:
    data = np.genfromtxt(path, delimiter=",", names=True)
    order = np.argsort(np.atleast_1d(data["n"]))
    return PhaseProfile(np.atleast_1d(data["alpha_rad_per_hz"])[order],
                        np.atleast_1d(data["gamma_rad"])[order], f0)


def write_trace_csv(path, trace) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["q", "C_M_bit_per_s"])
        for q, c in enumerate(trace):
            w.writerow([q, f"{c:.17g}"])
    return path


def write_psi_csv(path, psi: np.ndarray, frequencies) -> Path:
    """Unconstrained phases as rows ``k, f_hz, n, psi_rad``."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "f_hz", "n", "psi_rad"])
        for k, f in enumerate(np.asarray(frequencies, dtype=float), start=1):
            for n in range(psi.shape[1]):
                w.writerow([k, f"{f:.17g}", n + 1, f"{psi[k - 1, n]:.17g}"])
    return path
