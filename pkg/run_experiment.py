import argparse
import logging
import sys
from pathlib import Path

from dotenv import load_dotenv

from src.exceptions import ConfigError, NumericAbortError
from src.experiments import RunRecord, compare_variants, load_config, run_experiment, validate_config
from src.reporting import ReportGenerator

# Configure logging
logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(levelname)s - %(message)s')

EXIT_OK = 0
EXIT_CONFIG_ERROR = 2
EXIT_NUMERIC_ABORT = 3


def _seed_list(text: str):
    try:
        return [int(s) for s in text.split(',') if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got '{text}'") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description='Desk-scale contrastive pretraining experiments.')
    commands = parser.add_subparsers(dest='command', required=True)

    run = commands.add_parser('run', help='Run one experiment config')
    run.add_argument('config', type=Path)
    run.add_argument('--output', type=Path, default=None, help='Output root (overrides config and environment)')

    compare = commands.add_parser('compare', help='Compare variants by linear-probe accuracy across seeds')
    compare.add_argument('configs', type=Path, nargs='+')
    compare.add_argument('--seeds', type=_seed_list, default=[0, 1, 2])
    compare.add_argument('--output', type=Path, default=None)

    plot = commands.add_parser('plot', help='Re-render the figures of a finished run')
    plot.add_argument('run_dir', type=Path)

    validate = commands.add_parser('validate', help='Check a config without running it')
    validate.add_argument('config', type=Path)
    return parser


def main(argv=None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)

    try:
        if args.command == 'run':
            record = run_experiment(args.config, output_dir=args.output)
            logging.info(f"Run record: {Path(record.run_dir) / 'run_record.json'}")
        elif args.command == 'compare':
            table, _ = compare_variants(args.configs, args.seeds, output_dir=args.output)
            print(table.to_string(index=False))
        elif args.command == 'plot':
            record = RunRecord.load(args.run_dir)
            paths = ReportGenerator([record], args.run_dir / 'plots').emit_plots()
            logging.info(f"Rendered {len(paths)} figures")
        elif args.command == 'validate':
            config = validate_config(load_config(args.config))
            logging.info(f"Config '{config.name}' ({config.kind}) is valid")
    except ConfigError as e:
        logging.error(str(e))
        return EXIT_CONFIG_ERROR
    except NumericAbortError as e:
        logging.error(f"Numeric abort at index {e.index}: {e}")
        return EXIT_NUMERIC_ABORT
    return EXIT_OK


if __name__ == '__main__':
    sys.exit(main())
