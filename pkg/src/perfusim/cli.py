"""Command-line interface.

``perfusim run <config.toml> [--output DIR] [--serial] [--heartbeats N]``
``perfusim ar-variant <config.toml> --orifice F --sys-scale S --dia-scale D -o OUT``
``perfusim check <config.toml>``

Exit codes: 0 success, 2 validation failure, 3 solver failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .scenario import ConfigError, SimulationError, apply_ar_modifications, load_config, run_scenario, validate, write_config

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_SOLVER = 3

logger = logging.getLogger("perfusim")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="perfusim", description="Coupled ventricle-perfusion scenario runner.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a scenario")
    run.add_argument("config")
    run.add_argument("--output", help="output directory (default: output.directory of the scenario)")
    run.add_argument("--serial", action="store_true", help="strict serial mode (assembly is always serial)")
    run.add_argument("--heartbeats", type=int, help="override the number of heartbeats")
    run.add_argument("--no-snapshots", action="store_true", help="skip VTU snapshots")

    ar = sub.add_parser("ar-variant", help="write the aortic-regurgitation variant of a scenario")
    ar.add_argument("config")
    ar.add_argument("--orifice", type=float, required=True, help="orifice area fraction of the aortic annulus")
    ar.add_argument("--sys-scale", type=float, default=1.0, help="aortic pressure factor during ejection")
    ar.add_argument("--dia-scale", type=float, default=1.0, help="aortic pressure factor outside ejection")
    ar.add_argument("-o", "--output", required=True, help="output TOML file")

    chk = sub.add_parser("check", help="validate a scenario without running it")
    chk.add_argument("config")
    return p


def _progress(step, n, rec):
    if step % 100 == 0 or step == n:
        logger.info("step %d/%d t=%.4f s Q=%s iterations=%d", step, n, rec.t, rec.Q, rec.iterations)


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        config = load_config(args.config)
        if args.command == "check":
            model = validate(config)
            print(f"ok: {model.fluid_mesh.n_cells} fluid cells, {model.perfusion_mesh.n_cells} perfusion cells, "
                  f"{model.partition.J} perfusion regions")
            return EXIT_OK
        if args.command == "ar-variant":
            variant = apply_ar_modifications(config, args.orifice, args.sys_scale, args.dia_scale)
            path = write_config(variant, args.output)
            print(f"wrote {path}")
            return EXIT_OK
        report = run_scenario(
            config,
            output_dir=args.output,
            heartbeats=args.heartbeats,
            serial=args.serial,
            progress=_progress if args.verbose else None,
            snapshots=False if args.no_snapshots else None,
        )
    except ConfigError as exc:
        print(f"invalid scenario: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except SimulationError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        if exc.history:
            print("residual history: " + " ".join(f"{r:.3e}" for r in exc.history), file=sys.stderr)
        return EXIT_SOLVER
    print(json.dumps(report.summary, indent=2, sort_keys=True))
    print(f"output written to {report.output_dir}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
