#!/usr/bin/env python3
"""
Command-line entry point for the LSF pipeline.

    python cli.py ingest --data-dir mitdb --task arrhythmia
    python cli.py dataset build --data-dir mitdb --task arrhythmia --seed 7
    python cli.py train-lstm --config run.env --seed 7
    python cli.py synthetic --data-dir synthetic_records --seed 3

Exit codes: 0 success, 1 usage error, 2 data error, 3 SVM convergence warning.
"""

import argparse
import logging
import sys
from typing import List, Optional

from pipeline import STAGES, PipelineConfig, build_dataset, run_all, run_stage
from utils.config_loader import add_config_arguments, resolve_settings
from utils.errors import (DataError, LsfError, MissingArtifactError, ParameterError, TrainingError,
                          UndefinedMetricError)
from utils.synthetic_ecg import SyntheticSettings, synthesize_dataset, write_dataset

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_CONVERGENCE = 3


class LsfArgumentParser(argparse.ArgumentParser):
    """Argument errors are usage errors (exit 1), not argparse's default 2"""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise ParameterError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = LsfArgumentParser(prog="lsf", description="LSTM + SVM ECG arrhythmia / AFIB detection pipeline")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    commands = parser.add_subparsers(dest="command", required=True)

    for stage in STAGES:
        add_config_arguments(commands.add_parser(stage, help=f"run the {stage} stage"))
    add_config_arguments(commands.add_parser("all", help="run every stage through evaluate and report"))

    dataset = commands.add_parser("dataset", help="dataset utilities")
    dataset_commands = dataset.add_subparsers(dest="dataset_command", required=True)
    add_config_arguments(dataset_commands.add_parser("build", help="ingest, preprocess and split"))

    synthetic = commands.add_parser("synthetic", help="write a synthetic two-class record set")
    synthetic.add_argument("--data-dir", required=True, help="destination directory")
    synthetic.add_argument("--n-records", type=int, default=SyntheticSettings.n_records)
    synthetic.add_argument("--segments-per-record", type=int, default=SyntheticSettings.segments_per_record)
    synthetic.add_argument("--sampling-rate", type=float, default=SyntheticSettings.sampling_rate)
    synthetic.add_argument("--abnormal-fraction", type=float, default=SyntheticSettings.abnormal_fraction)
    synthetic.add_argument("--seed", type=int, default=SyntheticSettings.seed)
    return parser


def _run_synthetic(args: argparse.Namespace) -> int:
    settings = SyntheticSettings(n_records=args.n_records, segments_per_record=args.segments_per_record,
                                 sampling_rate=args.sampling_rate, abnormal_fraction=args.abnormal_fraction,
                                 seed=args.seed)
    paths = write_dataset(synthesize_dataset(settings), args.data_dir)
    logger.info(f"✅ Wrote {len(paths)} interchange records to {args.data_dir}")
    return EXIT_OK


def _run(args: argparse.Namespace) -> int:
    if args.command == "synthetic":
        return _run_synthetic(args)

    config = PipelineConfig.from_settings(resolve_settings(args))
    if args.command == "dataset":
        results = build_dataset(config)
    elif args.command == "all":
        results = run_all(config)
    else:
        results = [run_stage(args.command, config)]

    if "report" in (result.stage for result in results):
        with open(config.path("report.md"), encoding="utf-8") as handle:
            print(handle.read())
    if not all(result.converged for result in results):
        return EXIT_CONVERGENCE
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except ParameterError as e:
        logging.basicConfig(level=logging.INFO)
        logger.error(f"❌ {e}")
        return EXIT_USAGE

    logging.basicConfig(level=getattr(logging, args.log_level), format="%(levelname)s %(name)s: %(message)s")
    try:
        return _run(args)
    except (ParameterError, MissingArtifactError) as e:
        logger.error(f"❌ {e}")
        return EXIT_USAGE
    except (DataError, UndefinedMetricError, TrainingError) as e:
        logger.error(f"❌ {e}")
        return EXIT_DATA
    except LsfError as e:
        logger.error(f"❌ {e}")
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
