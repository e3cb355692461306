"""Foster first-form synthesis of the element loads.

Each element must reflect with a phase that is affine in frequency.  The
matching reactance ``X(f) = Z0 tan((pi - psi(f)) / 2)`` diverges wherever the
phase crosses a multiple of 2 pi; those crossings become the poles of a series
chain of parallel LC sections whose inductances are fitted by least squares.
"""

from __future__ import annotations

import csv
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import linalg

from .ideal import (
    AngleFrequencyMap,
    ideal_linear_coefficients,
    ideal_reactance,
    reflection_phase,
    wrap_phase,
)
from .scenario import SPEED_OF_LIGHT, Direction, MtpGeometry

log = logging.getLogger(__name__)


class SynthesisError(RuntimeError):
    """The least-squares problem could not be solved."""


class NotRealizableError(ValueError):
    """A circuit with non-positive component values was asked for a netlist."""


@dataclass(frozen=True)
class PolePlan:
    """Poles of the target reactance of element ``n``.

    The target phase is ``slope * (f - f0) + offset``; pole ``p`` sits where it
    equals ``2 pi kappa_p``.  ``poles`` holds the in-band poles.  ``guard``
    holds the nearest pole on each side outside the band (or on its edge),
    which the fit may use as auxiliary sections.
    """

    n: int
    kappa: tuple[int, ...]
    poles: np.ndarray
    slope: float
    offset: float
    f0: float
    bandwidth: float
    guard: np.ndarray = field(default_factory=lambda: np.empty(0))

    @property
    def P(self) -> int:
        return len(self.kappa)

    @property
    def band(self) -> tuple[float, float]:
        return self.f0 - self.bandwidth / 2, self.f0 + self.bandwidth / 2

    def phase(self, f):
        return self.slope * (np.asarray(f, dtype=float) - self.f0) + self.offset

    @property
    def constant_open(self) -> bool:
        """Phase is identically a multiple of 2 pi: the load is an open circuit."""
        return self.slope == 0 and abs(wrap_phase(self.offset)) < 1e-12


def pole_count_bound(geom: MtpGeometry, fmap: AngleFrequencyMap, n: int) -> int:
    """Lower bound on the number of in-band poles for element ``n`` (1-based)."""
    lam0 = SPEED_OF_LIGHT / fmap.f0
    nu = geom.nu_index[n - 1] * geom.delta_nu
    return int(math.floor(nu / lam0 * (math.sin(fmap.theta_M) - math.sin(fmap.theta_m)) + 1e-12))


def plan_poles_linear(slope: float, offset: float, f0: float, bandwidth: float, n: int = 0) -> PolePlan:
    """Pole plan for an arbitrary affine phase ``slope (f - f0) + offset``."""
    lo, hi = f0 - bandwidth / 2, f0 + bandwidth / 2
    if slope == 0:
        return PolePlan(n, (), np.empty(0), 0.0, float(offset), f0, bandwidth)
    ends = sorted((slope * (lo - f0) + offset, slope * (hi - f0) + offset))
    k_min = math.ceil(ends[0] / (2 * math.pi))
    k_max = math.floor(ends[1] / (2 * math.pi))

    def at(k):
        return f0 + (2 * math.pi * k - offset) / slope

    kappa = [k for k in range(k_min, k_max + 1) if lo < at(k) < hi]
    if kappa:
        outer = (kappa[0] - 1, kappa[-1] + 1)
    else:
        # tolerance keeps a pole sitting on a band edge
        outer = (math.floor(ends[0] / (2 * math.pi) + 1e-9), math.ceil(ends[1] / (2 * math.pi) - 1e-9))
    guard = sorted({at(k) for k in outer if at(k) > 0})
    poles = np.array([at(k) for k in kappa])
    order = np.argsort(poles)
    return PolePlan(n, tuple(kappa[i] for i in order), poles[order], float(slope),
                    float(offset), f0, bandwidth, np.asarray(guard))


def plan_poles(geom: MtpGeometry, fmap: AngleFrequencyMap, theta_inc: Direction, n: int,
               phi: float = 0.0, psi0: float = 0.0) -> PolePlan:
    """Pole plan of element ``n`` (1-based) for the ideal phase profile."""
    if not 1 <= n <= geom.N:
        raise IndexError(f"element index {n} outside 1..{geom.N}")
    slope, offset = ideal_linear_coefficients(geom, fmap, theta_inc, phi, psi0)
    return plan_poles_linear(slope[n - 1], offset[n - 1], fmap.f0, fmap.bandwidth, n)


def reactance_basis(poles, f) -> np.ndarray:
    """``beta_p(f) = 2 pi f / (1 - (f / f_p)^2)``; shape (..., P).

    Exact pole hits evaluate to inf.
    """
    poles = np.asarray(poles, dtype=float)
    f = np.asarray(f, dtype=float)[..., None]
    den = 1 - (f / poles) ** 2
    with np.errstate(divide="ignore"):
        return np.where(den == 0, np.inf, 2 * np.pi * f / np.where(den == 0, 1.0, den))


@dataclass(frozen=True)
class FosterCircuit:
    """Series chain of parallel LC sections, optionally with a series inductor and capacitor.

    ``kind`` is ``"foster"`` for an LC realisation or ``"open"`` for an
    open-circuit stub (constant reflection phase of zero).  ``guard`` flags
    the sections that resonate outside the band.
    """

    n: int
    L: np.ndarray
    C: np.ndarray
    series_L: float | None = None
    series_C: float | None = None
    kind: str = "foster"
    guard: tuple[bool, ...] = ()
    diagnostics: tuple[str, ...] = ()

    @property
    def P(self) -> int:
        return len(self.L)

    @property
    def poles(self) -> np.ndarray:
        return 1 / (2 * np.pi * np.sqrt(self.L * self.C))

    @property
    def realizable(self) -> bool:
        if self.kind == "open":
            return True
        ok = bool(np.all(self.L > 0) and np.all(self.C > 0))
        for extra in (self.series_L, self.series_C):
            ok = ok and (extra is None or extra > 0)
        return ok


def open_stub(n: int) -> FosterCircuit:
    return FosterCircuit(n, np.empty(0), np.empty(0), kind="open")


def realized_reactance(circ: FosterCircuit, f):
    """Reactance of the circuit; ``inf`` at an exact pole and for open stubs."""
    f = np.asarray(f, dtype=float)
    if circ.kind == "open":
        out = np.full(f.shape, np.inf)
    else:
        w = 2 * np.pi * f[..., None]
        den = 1 - w ** 2 * circ.L * circ.C
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(den == 0, np.inf, w * circ.L / np.where(den == 0, 1.0, den))
        out = terms.sum(axis=-1)
        if circ.series_L is not None:
            out = out + 2 * np.pi * f * circ.series_L
        if circ.series_C is not None:
            out = out - 1 / (2 * np.pi * f * circ.series_C)
    return float(out) if out.ndim == 0 else out


def realized_phase(circ: FosterCircuit, f, Z0: float = 50.0):
    return reflection_phase(realized_reactance(circ, f), Z0)


def fit_grid(plan: PolePlan, n_points: int = 201, shift: float = 0.0) -> np.ndarray:
    """Uniform fit grid over the band; ``shift`` moves interior points by a fraction of a step."""
    lo, hi = plan.band
    f = np.linspace(lo, hi, n_points)
    if shift:
        f[1:-1] += shift * (f[1] - f[0])
    return f


def pole_mask(poles, f, half_width: float) -> np.ndarray:
    """True for samples farther than ``half_width`` from every pole."""
    poles = np.asarray(poles, dtype=float)
    f = np.asarray(f, dtype=float)
    if poles.size == 0:
        return np.ones(f.shape, dtype=bool)
    return np.all(np.abs(f[:, None] - poles[None, :]) > half_width, axis=1)


def solve_normal_equations(B: np.ndarray, x: np.ndarray, max_cond: float = 1e10) -> np.ndarray:
    """Least-squares coefficients from ``Q l = mu`` with ``Q = B^T B``, ``mu = B^T x``.

    Columns are equilibrated before a Cholesky factorisation; badly conditioned
    systems fall back to a column-pivoted least-squares solve on ``B``.
    """
    if B.shape[0] < B.shape[1]:
        raise SynthesisError(f"{B.shape[0]} samples cannot fit {B.shape[1]} coefficients")
    scale = np.linalg.norm(B, axis=0)
    if np.any(scale == 0):
        raise SynthesisError("basis column vanishes on the fit grid")
    Bs = B / scale
    Q = Bs.T @ Bs
    mu = Bs.T @ x
    cond = np.linalg.cond(Q)
    if not np.isfinite(cond):
        raise SynthesisError("normal matrix is singular")
    if cond > max_cond:
        log.info("normal matrix condition %.3e; using pivoted least squares", cond)
        sol, _, rank, _ = linalg.lstsq(Bs, x, lapack_driver="gelsy")
        if rank < B.shape[1]:
            raise SynthesisError("basis is rank deficient on the fit grid")
        return sol / scale
    try:
        cf = linalg.cho_factor(Q)
    except linalg.LinAlgError as exc:
        raise SynthesisError("normal matrix is not positive definite") from exc
    return linalg.cho_solve(cf, mu) / scale


def fit_inductances(plan: PolePlan, f, X, mask_width: float = 0.0, guard_poles: bool = True,
                    series: bool = True, retries: int = 3) -> FosterCircuit:
    """Least-squares Foster circuit for the planned poles from target samples ``X(f)``.

    The basis holds one section per in-band pole.  With ``guard_poles`` the
    nearest out-of-band poles add sections, and with ``series`` a series
    inductor and capacitor are added.  Auxiliary terms whose fitted value is
    not positive are dropped one at a time and the fit is repeated.  Samples
    within ``mask_width`` of any pole are ignored.  A basis left empty falls
    back to one section resonating at ``2 f0``.  On rank loss the fit is
    retried on a resampled grid.
    """
    f = np.asarray(f, dtype=float)
    X = np.asarray(X, dtype=float)
    if f.shape != X.shape:
        raise ValueError("frequency and reactance samples must align")
    if plan.constant_open:
        return open_stub(plan.n)
    aux_poles = plan.guard if guard_poles else np.empty(0)
    all_poles = np.concatenate([plan.poles, aux_poles])
    # term kinds: ("pole", f_p, guard?) / ("L",) / ("C",)
    terms = [("pole", p, False) for p in plan.poles] + [("pole", p, True) for p in aux_poles]
    if series:
        terms += [("L", None, True), ("C", None, True)]

    def column(term, fs):
        if term[0] == "pole":
            return reactance_basis([term[1]], fs)[:, 0]
        if term[0] == "L":
            return 2 * np.pi * fs
        return -1 / (2 * np.pi * fs)

    def one_fit(fs, Xs):
        keep = pole_mask(all_poles, fs, mask_width) & np.isfinite(Xs)
        fs, Xs = fs[keep], Xs[keep]
        active = list(terms)
        while True:
            if not active:
                active = [("pole", 2 * plan.f0, True)]
            B = np.stack([column(t, fs) for t in active], axis=1)
            coef = solve_normal_equations(B, Xs)
            scaled = coef * np.linalg.norm(B, axis=0)
            droppable = [i for i, t in enumerate(active) if t[2] and coef[i] <= 0]
            if not droppable or active == [("pole", 2 * plan.f0, True)]:
                break
            worst = min(droppable, key=lambda i: scaled[i])
            active.pop(worst)
        return _assemble(plan.n, active, coef)

    try:
        return one_fit(f, X)
    except SynthesisError as first:
        lo, hi = f.min(), f.max()
        for attempt in range(1, retries + 1):
            fs = np.linspace(lo, hi, f.size + attempt)
            Xs = np.interp(fs, f, X)
            try:
                return one_fit(fs, Xs)
            except SynthesisError:
                continue
        raise first


def _assemble(n: int, active, coef) -> FosterCircuit:
    secs = sorted((t[1], c, t[2]) for t, c in zip(active, coef) if t[0] == "pole")
    L = np.array([c for _, c, _ in secs])
    poles = np.array([p for p, _, _ in secs])
    # resonance 2 pi f_p = 1 / sqrt(L C)
    C = 1 / (L * (2 * np.pi * poles) ** 2) if secs else np.empty(0)
    series_L = next((c for t, c in zip(active, coef) if t[0] == "L"), None)
    el = next((c for t, c in zip(active, coef) if t[0] == "C"), None)
    circ = FosterCircuit(n, L, C, series_L, None if el is None else 1 / el,
                         guard=tuple(g for _, _, g in secs))
    notes = [f"element {n}: section at {poles[p]:.6g} Hz has non-positive inductance {L[p]:.4e} H"
             for p in np.flatnonzero(L <= 0)]
    if notes:
        circ = FosterCircuit(n, L, C, circ.series_L, circ.series_C, guard=circ.guard,
                             diagnostics=tuple(notes))
    return circ


@dataclass(frozen=True)
class FitReport:
    n: int
    reactance_rel_rms: float
    phase_rms: float
    samples: int


def fit_errors(circ: FosterCircuit, plan: PolePlan, f, mask_width: float, Z0: float = 50.0) -> FitReport:
    """Relative RMS reactance error and RMS phase error on the masked grid."""
    f = np.asarray(f, dtype=float)
    keep = pole_mask(plan.poles, f, mask_width)
    fs = f[keep]
    psi_t = plan.phase(fs)
    psi_r = realized_phase(circ, fs, Z0)
    phase_rms = float(np.sqrt(np.mean(wrap_phase(psi_r - psi_t) ** 2)))
    Xt = ideal_reactance(psi_t, Z0)
    Xr = realized_reactance(circ, fs)
    fin = np.isfinite(Xt) & np.isfinite(Xr)
    if circ.kind == "open" or not np.any(fin):
        rel = 0.0 if circ.kind == "open" and not np.any(np.isfinite(Xt)) else float("nan")
    else:
        rel = float(np.sqrt(np.sum((Xr[fin] - Xt[fin]) ** 2) / np.sum(Xt[fin] ** 2)))
    return FitReport(plan.n, rel, phase_rms, int(fs.size))


def synthesize_element(plan: PolePlan, n_points: int = 201, mask_width: float = 0.0,
                       Z0: float = 50.0, guard_poles: bool = True, series: bool = True) -> FosterCircuit:
    f = fit_grid(plan, n_points)
    X = ideal_reactance(plan.phase(f), Z0)
    return fit_inductances(plan, f, X, mask_width, guard_poles, series)


def synthesize_profile(slopes, offsets, f0: float, bandwidth: float, n_points: int = 201,
                       mask_width: float = 0.0, Z0: float = 50.0):
    """Plans and circuits for every element of an affine phase profile."""
    plans = [plan_poles_linear(s, o, f0, bandwidth, i + 1)
             for i, (s, o) in enumerate(zip(np.asarray(slopes, float), np.asarray(offsets, float)))]
    circuits = [synthesize_element(p, n_points, mask_width, Z0) for p in plans]
    return plans, circuits


def realized_gamma(circuits, f, Z0: float = 50.0) -> np.ndarray:
    """Reflection coefficients ``exp(j psi)`` of every circuit; shape (K, N)."""
    f = np.atleast_1d(np.asarray(f, dtype=float))
    psi = np.stack([realized_phase(c, f, Z0) for c in circuits], axis=-1)
    return np.exp(1j * psi)


# --------------------------------------------------------------------------
# netlists

_SUFFIXES = [(1e9, "g"), (1e6, "meg"), (1e3, "k"), (1.0, ""), (1e-3, "m"), (1e-6, "u"),
             (1e-9, "n"), (1e-12, "p"), (1e-15, "f")]
_PARSE = {"t": 1e12, "g": 1e9, "meg": 1e6, "k": 1e3, "m": 1e-3, "u": 1e-6, "n": 1e-9,
          "p": 1e-12, "f": 1e-15}
_NUM = re.compile(r"^([+-]?(?:\d+\.?\d*|\.\d+)(?:e[+-]?\d+)?)(meg|[tgkmunpf])?[a-z]*$", re.I)


def format_value(x: float, digits: int = 6) -> str:
    """Engineering notation with SPICE suffixes, e.g. ``1.5e-9 -> '1.5n'``."""
    if x == 0 or not np.isfinite(x):
        raise ValueError(f"cannot format component value {x}")
    ax = abs(x)
    for mult, suf in _SUFFIXES:
        if ax >= mult * (1 - 1e-12):
            break
    mant = float(f"{x / mult:.{digits}g}")
    if abs(mant) >= 1000 and suf != "g":
        # rounding pushed it into the next decade group
        idx = [s for _, s in _SUFFIXES].index(suf)
        mult, suf = _SUFFIXES[idx - 1]
        mant = float(f"{x / mult:.{digits}g}")
    return f"{mant:.{digits}g}{suf}"


def parse_value(token: str) -> float:
    m = _NUM.match(token.strip())
    if not m:
        raise ValueError(f"bad SPICE value {token!r}")
    return float(m.group(1)) * _PARSE.get((m.group(2) or "").lower(), 1.0)


def export_netlist(circ: FosterCircuit, digits: int = 6) -> str:
    """SPICE subcircuit ``E<n>`` between nodes ``port`` and ``gnd``.

    Values carry ``digits`` significant digits.  Rounding moves each pole by
    up to a few parts per million, so curves close to a pole change
    noticeably at the default precision.
    """
    if not circ.realizable:
        reason = "; ".join(circ.diagnostics) or "non-positive component values"
        raise NotRealizableError(f"element {circ.n} is not realizable: {reason}")
    name = f"E{circ.n}"
    lines = [f"* metaprism element {circ.n} load", f".SUBCKT {name} port gnd"]
    if circ.kind == "open":
        lines.append("* open-circuit stub: constant reflection phase 0")
    else:
        parts = [(f"L{p + 1}", f"C{p + 1}", p) for p in range(circ.P)]
        if circ.series_L is not None:
            parts.append(("LS", None, circ.series_L))
        if circ.series_C is not None:
            parts.append((None, "CS", circ.series_C))
        nodes = ["port"] + [f"n{i}" for i in range(1, len(parts))] + ["gnd"]
        for i, (lname, cname, ref) in enumerate(parts):
            a, b = nodes[i], nodes[i + 1]
            if lname and cname:
                lines.append(f"{lname} {a} {b} {format_value(circ.L[ref], digits)}")
                lines.append(f"{cname} {a} {b} {format_value(circ.C[ref], digits)}")
            else:
                lines.append(f"{lname or cname} {a} {b} {format_value(ref, digits)}")
    lines.append(f".ENDS {name}")
    return "\n".join(lines) + "\n"


def parse_netlist(text: str) -> FosterCircuit:
    """Inverse of :func:`export_netlist` for a single subcircuit."""
    n = None
    L: dict[int, float] = {}
    C: dict[int, float] = {}
    series_L = series_C = None
    is_open = False
    for raw in text.splitlines():
        line = raw.strip()
        if not line:
            continue
        if line.startswith("*"):
            is_open |= "open-circuit" in line
            continue
        tok = line.split()
        head = tok[0].upper()
        if head == ".SUBCKT":
            n = int(tok[1][1:])
        elif head == ".ENDS":
            break
        elif head == "LS":
            series_L = parse_value(tok[3])
        elif head == "CS":
            series_C = parse_value(tok[3])
        elif head[0] == "L":
            L[int(head[1:])] = parse_value(tok[3])
        elif head[0] == "C":
            C[int(head[1:])] = parse_value(tok[3])
        else:
            raise ValueError(f"unexpected netlist line {line!r}")
    if n is None:
        raise ValueError("no .SUBCKT found")
    if is_open and not L and series_L is None and series_C is None:
        return open_stub(n)
    idx = sorted(L)
    if idx != sorted(C):
        raise ValueError("every inductor needs a matching capacitor")
    return FosterCircuit(n, np.array([L[i] for i in idx], dtype=float),
                         np.array([C[i] for i in idx], dtype=float), series_L, series_C)


def write_netlists(circuits, plans, directory, digits: int = 6) -> list[Path]:
    """One ``E<n>.cir`` per realizable element plus ``manifest.csv``; returns the netlist paths."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for circ in circuits:
        if circ.realizable:
            p = directory / f"E{circ.n}.cir"
            p.write_text(export_netlist(circ, digits))
            paths.append(p)
    with (directory / "manifest.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["element", "P_n", "kind", "realizable", "pole_freqs_hz", "section_freqs_hz",
                    "guard_flags", "L_h", "C_f", "series_L_h", "series_C_f"])
        for circ, plan in zip(circuits, plans):
            w.writerow([circ.n, plan.P, circ.kind, int(circ.realizable),
                        ";".join(f"{x:.9g}" for x in plan.poles),
                        ";".join(f"{x:.9g}" for x in circ.poles),
                        ";".join(str(int(g)) for g in circ.guard),
                        ";".join(f"{x:.9g}" for x in circ.L),
                        ";".join(f"{x:.9g}" for x in circ.C),
                        "" if circ.series_L is None else f"{circ.series_L:.9g}",
                        "" if circ.series_C is None else f"{circ.series_C:.9g}"])
    return paths


def read_target_csv(path) -> tuple[np.ndarray, np.ndarray]:
    """Target reactance samples from a CSV with columns ``f_hz, X_ohm``."""
    data = np.genfromtxt(path, delimiter=",", names=True)
    names = data.dtype.names
    if names is None or "f_hz" not in names or "X_ohm" not in names:
        raise ValueError(f"{path}: expected columns f_hz, X_ohm")
    return np.atleast_1d(data["f_hz"]).astype(float), np.atleast_1d(data["X_ohm"]).astype(float)
