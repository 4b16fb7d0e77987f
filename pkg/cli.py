import argparse
import logging
import sys

from pydantic import ValidationError

from core.errors import ConfigError, NrolError
from core.settings import RunConfig

logger = logging.getLogger("nrol.cli")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_FLAGGED = 2
EXIT_CONFIG = 3


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="master seed (overrides the file)")
    common.add_argument("--workers", type=int, help="trajectory worker threads")
    common.add_argument("--out", dest="out_dir", help="output directory")
    common.add_argument("--verbose", action="store_true", help="debug logging")

    parser = argparse.ArgumentParser(
        prog="nrol-mc",
        description="Semi-classical Monte-Carlo of Sisyphus cooling in a 3D lin-perp-lin optical lattice.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    scan = sub.add_parser("field-scan", parents=[common], help="tabulate adiabatic potentials over a plane")
    scan.add_argument("--plane", choices=["xz", "xy", "yz"])
    scan.add_argument("--resolution", type=int, help="points per lattice constant")
    scan.add_argument("--all-levels", action="store_true", default=None, help="write every adiabatic level")

    sub.add_parser("run", parents=[common], help="simulate the configured sweep and write the result bundle")

    analyze = sub.add_parser("analyze", parents=[common], help="time-of-flight thermometry on stored snapshots")
    analyze.add_argument("--snapshots", help="snapshot directory (default <out>/snapshots)")
    analyze.add_argument("--tau", type=float, nargs="+", help="time-of-flight delays in ms")

    sub.add_parser("version", help="print the version")
    return parser


def setup_logging(verbose=False):
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s - %(levelname)s - %(message)s",
        force=True,
    )


def load_config(args):
    try:
        config = RunConfig.from_file(args.config) if args.config else RunConfig()
    except ValidationError as e:
        raise ConfigError(f"invalid configuration:\n{e}") from e
    return config.with_overrides(seed=args.seed, workers=args.workers, out_dir=args.out_dir)


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.command == "version":
        from orchestrator import __version__
        print(f"nrol-mc {__version__}")
        return EXIT_OK

    setup_logging(args.verbose)
    from orchestrator import Orchestrator

    orch = None
    try:
        config = load_config(args)
        orch = Orchestrator(config)
        orch.attach_log()
        if args.command == "field-scan":
            scan = orch.field_scan(args.plane, args.resolution, args.all_levels)
            print(scan.path)
            return EXIT_OK
        if args.command == "run":
            bundle = orch.run()
            for name, path in bundle.files.items():
                print(f"{name}: {path}")
            if bundle.flagged:
                logger.warning(f"{len(bundle.flagged)} flagged records")
                return EXIT_FLAGGED
            return EXIT_OK
        if args.command == "analyze":
            _, files = orch.analyze(args.snapshots, args.tau)
            for name, path in files.items():
                print(f"{name}: {path}")
            return EXIT_OK
    except ConfigError as e:
        logger.error(f"Configuration error: {e}")
        return EXIT_CONFIG
    except NrolError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return EXIT_ERROR
    except OSError as e:
        logger.error(f"I/O error: {e}")
        return EXIT_ERROR
    finally:
        if orch is not None:
            orch.detach_log()
    return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
