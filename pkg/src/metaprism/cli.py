"""Command line interface.

Exit codes: 0 success, 2 invalid input, 3 numerical failure, 4 synthesis
finished with non-realizable elements (outputs are still written).
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

from .scenario import ScenarioError, load_scenario, tomllib

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL, EXIT_NOT_REALIZABLE = 0, 2, 3, 4

log = logging.getLogger("metaprism")


def _parse_set(items) -> dict:
    """``section.key=value`` pairs; values are read as TOML scalars, bare words as strings."""
    out: dict = {}
    for item in items or ():
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ScenarioError(f"--set expects section.key=value, got {item!r}")
        key, raw = item.split("=", 1)
        section, name = key.strip().split(".", 1)
        try:
            value = tomllib.loads(f"v = {raw}")["v"]
        except tomllib.TOMLDecodeError:
            value = raw
        out.setdefault(section, {})[name] = value
    return out


def _overrides(args) -> dict:
    over = _parse_set(args.set)

    def put(section, key, value):
        if value is not None:
            over.setdefault(section, {})[key] = value

    if args.theta_range_deg is not None:
        lo, hi = args.theta_range_deg
        put("mapping", "theta_min", math.radians(lo))
        put("mapping", "theta_max", math.radians(hi))
    put("band", "f0", args.f0)
    put("band", "bandwidth", args.bandwidth)
    put("band", "n_freq", args.n_freq)
    put("geometry", "delta_nu_wl", args.delta_nu_wl)
    put("geometry", "I", args.elements_nu)
    put("geometry", "J", args.elements_zeta)
    put("optimizer", "n_alpha", args.n_alpha)
    put("optimizer", "n_gamma", args.n_gamma)
    put("optimizer", "epsilon", args.epsilon)
    put("optimizer", "max_iter", args.max_iter)
    put("sweep", "n_theta", args.n_theta)
    return over


def _common(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("scenario (defaults reproduce the reference setup)")
    g.add_argument("--scenario", type=Path, help="TOML scenario file")
    g.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                   help="override any scenario key, may be repeated")
    g.add_argument("--theta-range-deg", nargs=2, type=float, metavar=("MIN", "MAX"),
                   help="angular range covered by the band (default 30 60)")
    g.add_argument("--f0", type=float, help="carrier in Hz (default 3.6e9)")
    g.add_argument("--bandwidth", type=float, help="band in Hz (default 100e6)")
    g.add_argument("--n-freq", type=int, help="frequencies in sweeps and maps (default 17)")
    g.add_argument("--delta-nu-wl", type=float, help="element spacing along nu in carrier wavelengths (default 0.5)")
    g.add_argument("--elements-nu", type=int, help="elements along nu, I (default: 16 at half-wavelength spacing)")
    g.add_argument("--elements-zeta", type=int, help="elements along zeta, J (default 4)")
    g.add_argument("--n-theta", type=int, help="elevation samples in gain maps (default 1001)")
    g.add_argument("--n-alpha", type=int, help="slope grid size (default 300)")
    g.add_argument("--n-gamma", type=int, help="offset grid size (default 100)")
    g.add_argument("--epsilon", type=float, help="relative convergence threshold (default 1e-4)")
    g.add_argument("--max-iter", type=int, help="outer iteration cap (default 50)")
    p.add_argument("-o", "--out", type=Path, default=Path("out"), help="output directory (default ./out)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="metaprism", description="Frequency-selective metaprism toolkit.",
        epilog="exit codes: 0 success, 2 invalid input, 3 numerical failure, 4 non-realizable synthesis")
    parser.add_argument("--from-manifest", type=Path,
                        help="repeat the run recorded in a manifest.json (other arguments are ignored)")
    parser.add_argument("--into", type=Path, help="with --from-manifest: write to this directory instead")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("sweep-ideal", help="ideal gain map, beam peaks, target reactances, bandwidth")
    _common(p)

    p = sub.add_parser("synth", help="Foster synthesis: netlists and fit errors")
    _common(p)
    p.add_argument("--profile", type=Path, help="profile CSV (n, alpha_rad_per_hz, gamma_rad); default ideal")

    p = sub.add_parser("eval", help="realistic gain map and capacity for a load profile")
    _common(p)
    p.add_argument("--source", default="foster",
                   help="'ideal' (exact phases), 'foster' (synthesised loads) or a profile CSV path")
    p.add_argument("--model", choices=("multiport", "ideal"), default="multiport",
                   help="'ideal' cascades the transfer vectors through the loads only")
    p.add_argument("--zero-coupling", action="store_true", help="drop mutual coupling (S_SS = 0)")
    p.add_argument("--zero-structural", action="store_true", help="drop structural scattering (s_RT = 0)")
    p.add_argument("--users", type=int, help="number of users K (default ceil(W / delta W))")

    p = sub.add_parser("optimize", help="optimise the affine phase profile; capacity table")
    _common(p)
    p.add_argument("--mode", choices=("constrained", "unconstrained", "both"), default="both")
    p.add_argument("--users", type=int, help="number of users K (default ceil(W / delta W))")

    p = sub.add_parser("report", help="capacity table over both angular ranges and spacings")
    _common(p)
    return parser


def _invocation(args) -> dict:
    d = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items()
         if k not in ("from_manifest", "into", "verbose")}
    return d


def _args_from_manifest(path: Path, parser) -> argparse.Namespace:
    manifest = json.loads(Path(path).read_text())
    inv = manifest["options"]
    defaults = parser.parse_args([inv["command"]])
    for k, v in inv.items():
        setattr(defaults, k, Path(v) if k in ("scenario", "out", "profile") and v is not None else v)
    return defaults


def run(args) -> int:
    from . import pipeline
    from .optimize import read_profile_csv

    sc = load_scenario(args.scenario, _overrides(args))
    options = _invocation(args)
    if args.command == "sweep-ideal":
        pipeline.run_ideal_sweep(sc, args.out, options=options)
    elif args.command == "synth":
        profile = None if args.profile is None else read_profile_csv(args.profile, sc.band.f0)
        _, bad = pipeline.run_synthesis(sc, args.out, profile, options=options)
        if bad:
            log.error("non-realizable elements: %s", ", ".join(map(str, bad)))
            return EXIT_NOT_REALIZABLE
    elif args.command == "eval":
        pipeline.run_realistic_eval(sc, args.out, args.source, args.model, args.zero_coupling,
                                    args.zero_structural, users=args.users, options=options)
    elif args.command == "optimize":
        pipeline.run_optimize(sc, args.out, args.mode, users=args.users, options=options)
    elif args.command == "report":
        def loader(extra):
            merged = _overrides(args)
            for s, v in extra.items():
                merged.setdefault(s, {}).update(v)
            return load_scenario(args.scenario, merged)
        pipeline.run_report(sc, args.out, loader, options=options)
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.from_manifest is not None:
        into = args.into
        args = _args_from_manifest(args.from_manifest, parser)
        if into is not None:
            args.out = into
    if args.command is None:
        parser.print_help()
        return EXIT_INVALID
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from .foster import SynthesisError
    from .ideal import OutOfBandError, QuadratureError
    from .multiport import GeometryError, NumericalError

    try:
        return run(args)
    except (NumericalError, SynthesisError, QuadratureError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ScenarioError, GeometryError, OutOfBandError, ValueError, OSError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
