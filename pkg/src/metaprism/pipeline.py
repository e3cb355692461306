"""End-to-end runs behind the command line: every step writes CSV files plus one manifest."""

from __future__ import annotations

import csv
from contextlib import contextmanager
import hashlib
import json
import math
import platform
import sys
import time
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .foster import (
    fit_errors,
    fit_grid,
    realized_gamma,
    realized_reactance,
    synthesize_profile,
    write_netlists,
)
from .ideal import (
    bandwidth,
    gain_pattern,
    ideal_phase,
    ideal_reactance,
    scenario_map,
    user_count,
)
from .multiport import NetworkStack, user_networks
from .optimize import (
    ConvergenceWarning,
    PhaseProfile,
    SearchGrid,
    capacity,
    capacity_from_gains,
    optimize,
    optimize_unconstrained,
    read_profile_csv,
    slot_frequencies,
    write_profile_csv,
    write_psi_csv,
    write_trace_csv,
)
from .scenario import Scenario

DB_FLOOR = -200.0


def to_db(h) -> np.ndarray:
    """``10 log10 |h|^2`` floored at -200 dB."""
    p = np.abs(np.asarray(h)) ** 2
    with np.errstate(divide="ignore"):
        return np.maximum(10 * np.log10(p), DB_FLOOR)


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, str):
        return x
    return f"{float(x):.12g}"


def write_csv(path: Path, header, rows) -> Path:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])
    return path


class RunRecorder:
    """Collects outputs, timings and warnings of one run and writes ``manifest.json``."""

    def __init__(self, outdir, sc: Scenario, command: str, options: dict):
        self.outdir = Path(outdir)
        self.outdir.mkdir(parents=True, exist_ok=True)
        self.sc = sc
        self.command = command
        self.options = options
        self.outputs: list[Path] = []
        self.timings: dict[str, float] = {}
        self.notes: list[str] = []
        self.extra: dict = {}
        self._t0 = time.perf_counter()

    def path(self, name: str) -> Path:
        p = self.outdir / name
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def add(self, *paths: Path) -> None:
        self.outputs.extend(Path(p) for p in paths)

    def csv(self, name: str, header, rows) -> Path:
        p = write_csv(self.path(name), header, rows)
        self.add(p)
        return p

    @contextmanager
    def timed(self, label: str):
        t = time.perf_counter()
        try:
            yield
        finally:
            self.timings[label] = round(time.perf_counter() - t, 6)

    def write(self) -> Path:
        inventory = []
        for p in sorted(set(self.outputs)):
            data = p.read_bytes()
            inventory.append({"file": str(p.relative_to(self.outdir)),
                              "sha256": hashlib.sha256(data).hexdigest(), "bytes": len(data)})
        manifest = {
            "command": self.command,
            "options": self.options,
            "scenario_hash": self.sc.digest(),
            "scenario": self.sc.to_dict(),
            "seeds": {"sweep": self.sc.seed},
            "versions": {"metaprism": __version__, "numpy": np.__version__,
                         "scipy": scipy.__version__, "python": platform.python_version()},
            "outputs": inventory,
            "timings_s": {**self.timings, "total": round(time.perf_counter() - self._t0, 6)},
            "notes": self.notes,
            **self.extra,
        }
        p = self.outdir / "manifest.json"
        p.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=_json_default) + "\n")
        return p


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, float) and not math.isfinite(o):
        return str(o)
    return str(o)


# --------------------------------------------------------------------------
# shared set-up


@dataclass
class Context:
    sc: Scenario
    fmap: object
    delta_w: float
    delta_w_approx: float
    K: int
    user_freqs: np.ndarray
    sweep_freqs: np.ndarray
    thetas: np.ndarray
    ideal: PhaseProfile


def context(sc: Scenario, users: int | None = None, n_theta: int | None = None) -> Context:
    fmap = scenario_map(sc)
    bw = bandwidth(fmap, sc.geometry, sc.omega, sc.phi)
    K = users if users is not None else user_count(fmap, sc.geometry, sc.omega, sc.phi)
    n_theta = sc.n_theta if n_theta is None else n_theta
    return Context(
        sc=sc, fmap=fmap, delta_w=bw.exact, delta_w_approx=bw.approx, K=K,
        user_freqs=slot_frequencies(sc.band.f0, sc.band.bandwidth, K),
        sweep_freqs=sc.band.frequencies,
        thetas=np.linspace(-np.pi / 2, np.pi / 2, n_theta),
        ideal=PhaseProfile.ideal(sc.geometry, fmap, sc.theta_inc, sc.phi, sc.psi0),
    )


def foster_realization(ctx: Context, profile: PhaseProfile):
    sc = ctx.sc
    return synthesize_profile(profile.alpha, profile.gamma, sc.band.f0, sc.band.bandwidth,
                              sc.fit_points, ctx.delta_w / 4, sc.Z0)


# --------------------------------------------------------------------------
# sweep-ideal


def run_ideal_sweep(sc: Scenario, outdir, n_theta: int | None = None,
                    options: dict | None = None) -> RunRecorder:
    """Ideal gain map, beam peaks, reactance targets and bandwidth report."""
    rec = RunRecorder(outdir, sc, "sweep-ideal", options or {})
    ctx = context(sc, n_theta=n_theta)
    g, th, fk = sc.geometry, ctx.thetas, ctx.sweep_freqs
    with rec.timed("gain_map"):
        psi = ideal_phase(g, ctx.fmap, sc.theta_inc, sc.phi, fk, None, sc.psi0, sc.exact_lambda)
        h = gain_pattern(g, np.exp(1j * np.atleast_2d(psi)), sc.theta_inc, th, sc.phi, fk,
                         sc.far_field_gain)
    db = to_db(h)
    rec.csv("gain_map_ideal.csv", ["theta_deg", "f_hz", "gain_db"],
            ((np.rad2deg(t), f, db[k, i]) for k, f in enumerate(fk) for i, t in enumerate(th)))
    peaks = th[np.argmax(db, axis=1)]
    rec.csv("beam_peaks.csv", ["k", "f_hz", "theta_peak_deg", "theta_mapped_deg", "peak_gain_db"],
            ((k + 1, f, np.rad2deg(peaks[k]), np.rad2deg(ctx.fmap.angle(f)), db[k].max())
             for k, f in enumerate(fk)))
    f_fine = np.linspace(sc.band.f_min, sc.band.f_max, sc.fit_points)
    psi_f = ideal_phase(g, ctx.fmap, sc.theta_inc, sc.phi, f_fine, None, sc.psi0, sc.exact_lambda)
    X = ideal_reactance(psi_f, sc.Z0)
    rec.csv("reactance_ideal.csv", ["n", "f_hz", "psi_rad", "X_ohm"],
            ((n + 1, f, psi_f[j, n], X[j, n]) for n in range(g.N) for j, f in enumerate(f_fine)))
    rec.csv("bandwidth.csv", ["omega", "delta_w_exact_hz", "delta_w_approx_hz", "users_K"],
            [(sc.omega, ctx.delta_w, ctx.delta_w_approx, ctx.K)])
    rec.write()
    return rec


# --------------------------------------------------------------------------
# synth


def run_synthesis(sc: Scenario, outdir, profile: PhaseProfile | None = None,
                  options: dict | None = None) -> tuple[RunRecorder, list]:
    """Foster circuits, netlists and fit-error report.  Returns the non-realizable elements."""
    rec = RunRecorder(outdir, sc, "synth", options or {})
    ctx = context(sc)
    profile = ctx.ideal if profile is None else profile
    with rec.timed("synthesis"):
        plans, circuits = foster_realization(ctx, profile)
    paths = write_netlists(circuits, plans, rec.path("netlists"))
    rec.add(*paths, rec.path("netlists") / "manifest.csv")
    rows, curve, bad = [], [], []
    for plan, circ in zip(plans, circuits):
        f = fit_grid(plan, sc.fit_points)
        r = fit_errors(circ, plan, f, ctx.delta_w / 4, sc.Z0)
        rows.append((circ.n, plan.P, circ.P, circ.kind, int(circ.realizable), r.reactance_rel_rms,
                     r.phase_rms, r.samples))
        Xt = ideal_reactance(plan.phase(f), sc.Z0)
        Xr = realized_reactance(circ, f)
        curve.extend((circ.n, fj, Xt[j], Xr[j]) for j, fj in enumerate(f))
        if not circ.realizable:
            bad.append(circ.n)
            rec.notes.extend(circ.diagnostics or (f"element {circ.n} not realizable",))
    rec.csv("fit_errors.csv", ["n", "P_n", "sections", "kind", "realizable",
                               "reactance_rel_rms", "phase_rms_rad", "samples"], rows)
    rec.csv("reactance_fit.csv", ["n", "f_hz", "X_target_ohm", "X_realized_ohm"], curve)
    rec.write()
    return rec, bad


# --------------------------------------------------------------------------
# eval


def load_profile(ctx: Context, source: str):
    """Load matrix for the user and sweep frequencies from ``ideal``, ``foster`` or a profile CSV."""
    if source == "ideal":
        prof = ctx.ideal
    elif source == "foster":
        prof = ctx.ideal
        _, circuits = foster_realization(ctx, prof)
        return prof, (lambda f: realized_gamma(circuits, f, ctx.sc.Z0))
    else:
        prof = read_profile_csv(source, ctx.sc.band.f0)
        if prof.N != ctx.sc.geometry.N:
            raise ValueError(f"profile has {prof.N} elements, geometry has {ctx.sc.geometry.N}")
    return prof, prof.gamma_matrix


def _model_channels(nets: NetworkStack, gamma, model: str) -> np.ndarray:
    if model == "ideal":
        # cascade of the transfer vectors through the loads, no coupling and no specular term
        return np.einsum("tn,tn,tn->t", nets.s_RM, np.broadcast_to(gamma, nets.s_RM.shape), nets.s_MT)
    return nets.channels(gamma)


def run_realistic_eval(sc: Scenario, outdir, source: str = "foster", model: str = "multiport",
                       zero_coupling: bool = False, zero_structural: bool = False,
                       n_theta: int | None = None, users: int | None = None,
                       options: dict | None = None) -> RunRecorder:
    rec = RunRecorder(outdir, sc, "eval", options or {})
    ctx = context(sc, users=users, n_theta=n_theta)
    _, gamma_of = load_profile(ctx, source)

    def prep(nets):
        if zero_coupling:
            nets = nets.without_coupling()
        if zero_structural:
            nets = nets.without_structural()
        return nets

    with rec.timed("networks"):
        map_nets = prep(user_networks(sc, ctx.thetas))
        user_nets = prep(user_networks(sc, ctx.fmap.angle(ctx.user_freqs)))
    with rec.timed("gain_map"):
        G = gamma_of(ctx.sweep_freqs)
        db = np.stack([to_db(_model_channels(map_nets, G[k], model)) for k in range(len(G))])
    rec.csv("gain_map.csv", ["theta_deg", "f_hz", "gain_db"],
            ((np.rad2deg(t), f, db[k, i]) for k, f in enumerate(ctx.sweep_freqs)
             for i, t in enumerate(ctx.thetas)))
    Gu = gamma_of(ctx.user_freqs)
    h = np.array([_model_channels(user_nets.subset(k), Gu[k], model)[0] for k in range(ctx.K)])
    _capacity_csvs(rec, ctx, {"evaluated": np.abs(h) ** 2})
    rec.write()
    return rec


def _capacity_csvs(rec: RunRecorder, ctx: Context, schemes: dict, table: str = "capacity.csv"):
    sc = ctx.sc
    W = sc.band.bandwidth
    rows, per_user = [], []
    for name, gains in schemes.items():
        rep = capacity_from_gains(gains, sc.P_t, sc.N0, W)
        rows.append((name, rep.C_M, rep.C_M / W))
        per_user.extend((name, k + 1, f, np.rad2deg(ctx.fmap.angle(f)), to_db(np.sqrt(gains[k])),
                         rep.rates[k]) for k, f in enumerate(ctx.user_freqs))
    rec.csv(table, ["scheme", "C_M_bit_per_s", "C_M_over_W_bit_per_s_hz"], rows)
    rec.csv(table.replace(".csv", "_users.csv"),
            ["scheme", "k", "f_hz", "theta_deg", "gain_db", "rate_bit_per_s"], per_user)
    return rows


# --------------------------------------------------------------------------
# optimize


@dataclass
class OptimizeResult:
    non_opt: float
    mtp: float
    mtp_foster: float | None
    nc: float | None
    profile: PhaseProfile
    trace: list
    converged: bool


def run_optimize(sc: Scenario, outdir, mode: str = "both", users: int | None = None,
                 options: dict | None = None, recorder: RunRecorder | None = None,
                 prefix: str = "") -> tuple[RunRecorder, OptimizeResult]:
    """Non-optimised Foster loads versus optimised affine profile and the unconstrained baseline.

    With ``recorder`` the files go under ``prefix`` of that run and no
    manifest is written here.
    """
    rec = recorder or RunRecorder(outdir, sc, "optimize", options or {})
    pre = prefix
    ctx = context(sc, users=users)
    W = sc.band.bandwidth
    fk = ctx.user_freqs
    with rec.timed(pre + "networks"):
        nets = user_networks(sc, ctx.fmap.angle(fk))
    _, circuits = foster_realization(ctx, ctx.ideal)
    non_opt = capacity(nets, realized_gamma(circuits, fk, sc.Z0), sc.P_t, sc.N0, W)
    schemes = {"non_opt": non_opt.gains}
    grid = SearchGrid.for_profile(ctx.ideal, sc.n_alpha, sc.n_gamma)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", ConvergenceWarning)
        with rec.timed(pre + "optimize"):
            prof, rep = optimize(nets, fk, ctx.ideal, grid, sc.P_t, sc.N0, W, sc.epsilon, sc.max_iter)
        schemes["mtp"] = rep.gains
        write_profile_csv(rec.path(pre + "profile.csv"), prof)
        write_trace_csv(rec.path(pre + "trace.csv"), rep.trace)
        rec.add(rec.path(pre + "profile.csv"), rec.path(pre + "trace.csv"))
        mtp_foster = None
        _, opt_circuits = foster_realization(ctx, prof)
        if all(c.realizable for c in opt_circuits):
            r = capacity(nets, realized_gamma(opt_circuits, fk, sc.Z0), sc.P_t, sc.N0, W)
            schemes["mtp_foster"] = r.gains
            mtp_foster = r.C_M
        else:
            rec.notes.append("optimised profile has non-realizable Foster elements: "
                             + ", ".join(str(c.n) for c in opt_circuits if not c.realizable))
        nc = None
        if mode in ("both", "unconstrained"):
            with rec.timed(pre + "optimize_unconstrained"):
                psi, rnc = optimize_unconstrained(nets, fk, prof.psi(fk), sc.n_gamma, sc.P_t, sc.N0,
                                                  W, sc.epsilon, sc.max_iter)
            write_psi_csv(rec.path(pre + "psi_nc.csv"), psi, fk)
            write_trace_csv(rec.path(pre + "trace_nc.csv"), rnc.trace)
            rec.add(rec.path(pre + "psi_nc.csv"), rec.path(pre + "trace_nc.csv"))
            schemes["nc"] = rnc.gains
            nc = rnc.C_M
    for w in caught:
        rec.notes.append(str(w.message))
    _capacity_csvs(rec, ctx, schemes, pre + "capacity.csv")
    if recorder is None:
        rec.write()
    return rec, OptimizeResult(non_opt.C_M, rep.C_M, mtp_foster, nc, prof, rep.trace, rep.converged)


# --------------------------------------------------------------------------
# report


REPORT_SCENARIOS = {
    "TA_half": {"mapping": {"theta_min": math.pi / 4, "theta_max": math.pi / 2}, "geometry": {"delta_nu_wl": 0.5}},
    "TA_quarter": {"mapping": {"theta_min": math.pi / 4, "theta_max": math.pi / 2}, "geometry": {"delta_nu_wl": 0.25}},
    "TB_half": {"mapping": {"theta_min": math.pi / 6, "theta_max": math.pi / 3}, "geometry": {"delta_nu_wl": 0.5}},
    "TB_quarter": {"mapping": {"theta_min": math.pi / 6, "theta_max": math.pi / 3}, "geometry": {"delta_nu_wl": 0.25}},
}


def run_report(base: Scenario, outdir, loader, base_overrides: dict | None = None,
               options: dict | None = None) -> RunRecorder:
    """Capacity table over the two angular ranges and the two element spacings."""
    rec = RunRecorder(outdir, base, "report", options or {})
    rows, hashes = [], {}
    for name, over in REPORT_SCENARIOS.items():
        merged = {s: dict(v) for s, v in (base_overrides or {}).items()}
        for s, v in over.items():
            merged.setdefault(s, {}).update(v)
        sc = loader(merged)
        hashes[name] = sc.digest()
        _, res = run_optimize(sc, outdir, "both", recorder=rec, prefix=f"{name}/")
        W = sc.band.bandwidth
        rows.append((name, np.rad2deg(sc.theta_min), np.rad2deg(sc.theta_max),
                     sc.geometry.delta_nu / sc.wavelength0, sc.geometry.N, res.non_opt / W, res.mtp / W,
                     "" if res.mtp_foster is None else res.mtp_foster / W, res.nc / W,
                     int(res.nc >= res.mtp >= res.non_opt)))
    rec.extra["scenario_hashes"] = hashes
    rec.csv("capacity_table.csv", ["scenario", "theta_min_deg", "theta_max_deg", "delta_nu_wl", "N",
                                   "non_opt_bit_per_s_hz", "mtp_bit_per_s_hz",
                                   "mtp_foster_bit_per_s_hz", "nc_bit_per_s_hz", "ordering_holds"], rows)
    rec.write()
    return rec


def environment_summary() -> str:
    return f"metaprism {__version__} / numpy {np.__version__} / scipy {scipy.__version__} / {sys.version.split()[0]}"
