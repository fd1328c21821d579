"""Command line entry point.

Exit codes: 0 success, 2 config error, 3 solver failure, 4 verification
failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .benchmarks import BENCHMARKS, OUTPUT_ENV, benchmark_config, run_config
from .config import load_config
from .dump import load_dump
from .errors import ConfigError, MPMError, VerificationError
from .render import render_field

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_VERIFY = 0, 2, 3, 4
RENDER_FIELDS = ("s11", "s12", "s22", "d0", "material", "V")


def _parser():
    p = argparse.ArgumentParser(prog="mpmto", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE",
                        help="override a config key by dotted path, e.g. solver.n_steps=20")
        sp.add_argument("--out", help=f"output root (default ${OUTPUT_ENV} or ./runs)")

    r = sub.add_parser("run", help="run a config file (forward solve or optimization)")
    r.add_argument("config", type=Path)
    common(r)

    b = sub.add_parser("benchmark", help="run a shipped benchmark")
    b.add_argument("name", choices=sorted(BENCHMARKS))
    b.add_argument("--load", type=float, help="force magnitude in N")
    b.add_argument("--ci", action="store_true", help="reduced-resolution variant")
    common(b)

    g = sub.add_parser("grad-check", help="compare adjoint gradients with finite differences")
    g.add_argument("config", type=Path)
    common(g)

    d = sub.add_parser("render", help="render a particle dump to a PPM image")
    d.add_argument("dump", type=Path, help="dump directory or its manifest.json")
    d.add_argument("--field", default="s22", choices=RENDER_FIELDS)
    d.add_argument("--step", type=int, help="load step (default: last)")
    d.add_argument("--width", type=int, default=800)
    d.add_argument("--colors", help="comma-separated hex colours for --field material")
    d.add_argument("-o", "--output", type=Path, help="image path (default next to the dump)")
    return p


def _render(args):
    dump = load_dump(args.dump)
    if args.step is None:
        table = dump.final()
    else:
        match = [s for s in dump.steps if s.step == args.step]
        if not match:
            raise ConfigError("--step", f"dump has steps {[s.step for s in dump.steps]}")
        table = match[0]
    data = table.data
    l = np.stack([data["lx"], data["ly"]], axis=1)
    out = args.output
    if out is None:
        root = args.dump if args.dump.is_dir() else args.dump.parent
        out = root / f"{args.field}_step{table.step:04d}.ppm"
    if args.field == "material":
        cols = sorted((k for k in data if k.startswith("d") and k[1:].isdigit()),
                      key=lambda k: int(k[1:]))
        if not cols:
            raise ConfigError("--field", "dump carries no design values")
        values = np.stack([data[k] for k in cols], axis=1)
        colors = args.colors.split(",") if args.colors else None
        if colors is None or len(colors) != len(cols):
            raise ConfigError("--colors", f"need {len(cols)} colours for this dump")
        render_field(table.x, l, values, out, args.width, "material", colors=colors)
    else:
        if args.field not in data:
            raise ConfigError("--field", f"dump has no column {args.field!r}")
        mode = "linear" if args.field in ("d0", "V") else "diverging"
        render_field(table.x, l, data[args.field], out, args.width, mode)
    print(out)


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    level = (logging.WARNING, logging.INFO, logging.DEBUG)[min(args.verbose, 2)]
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "render":
            _render(args)
            return EXIT_OK
        if args.command == "benchmark":
            cfg = benchmark_config(args.name, args.overrides, args.load, args.ci)
            summary = run_config(cfg, args.out)
        else:
            cfg = load_config(args.config, args.overrides)
            summary = run_config(cfg, args.out, gradcheck=args.command == "grad-check")
    except ConfigError as exc:
        for path, msg in exc.errors or [(None, None)]:
            print(f"config error: {exc if path is None else f'{path}: {msg}'}", file=sys.stderr)
        return EXIT_CONFIG
    except VerificationError as exc:
        print(f"verification failed: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    except MPMError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    json.dump(summary, sys.stdout, indent=2, sort_keys=True)
    print()
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
