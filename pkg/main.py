import argparse
import logging
import sys
import time
from typing import Callable, Dict, List, Optional

from config import ExperimentConfig, load_config, log_level
from errors import EXIT_INVALID_CONFIG, EXIT_NOT_CONVERGED, ConfigurationError, ConvergenceError, ValidationError
from experiments import run_husimi, run_localization, run_pekar, run_sweep

COMMANDS: Dict[str, Callable[[ExperimentConfig], int]] = {
    "pekar-min": run_pekar,
    "alpha-sweep": run_sweep,
    "localize-check": run_localization,
    "husimi": run_husimi,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="polaron-lab",
        description="Quasi-classical limit experiments for the polaron: Pekar minimization, "
                    "alpha sweeps, localization checks and Husimi probes.",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub = subparsers.add_parser(name)
        sub.add_argument("--config", required=True, help="YAML experiment configuration")
        sub.add_argument("--out", default=None, help="output directory (overrides `output` in the config)")
        sub.add_argument("--verbose", action="store_true", help="log solver progress")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.DEBUG if args.verbose else getattr(logging, log_level(), logging.INFO)
    logging.basicConfig(level=level, format='%(asctime)s - %(levelname)s - %(message)s')
    start_time = time.time()

    try:
        config = load_config(args.config)
        if args.out is not None:
            config = config.with_output(args.out)
        code = COMMANDS[args.command](config)
    except ConfigurationError as e:
        logging.error(e.anchored(args.config))
        print(e.anchored(args.config), file=sys.stderr)
        return EXIT_INVALID_CONFIG
    except ValidationError as e:
        logging.error(f"{args.config}: {e}")
        print(f"{args.config}: {e}", file=sys.stderr)
        return EXIT_INVALID_CONFIG
    except ConvergenceError as e:
        logging.error(f"{e} (best residual {e.best_residual:.3e})")
        return EXIT_NOT_CONVERGED

    logging.info(f"{args.command} finished with exit code {code} in {time.time() - start_time:.2f} seconds")
    return code


# ------------------- SAFE ENTRY POINT -------------------
if __name__ == "__main__":
    sys.exit(main())
