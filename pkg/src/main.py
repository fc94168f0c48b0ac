# %%
# Running Imports #

import argparse
import os
import sys
from dataclasses import replace

from dotenv import load_dotenv
from readable_utils.display_tools import print_logger

from config import parent_dir
from data_storage import RunStorage
from errors import ConfigError, PathCollisionError, TrainingDivergenceError
from experiments import (
    cmd_eval,
    cmd_simulate,
    cmd_sweep,
    cmd_switch_eval,
    cmd_train,
    load_experiment_config,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3

COMMANDS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "switch-eval": cmd_switch_eval,
}


# %%
# Environment #

dotenv_path = os.path.join(parent_dir, ".env")
if os.path.exists(dotenv_path):
    load_dotenv(dotenv_path)


# %%
# Functions #


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="Streaming audio-visual target speaker extraction experiments."
    )
    parser.add_argument("command", choices=sorted(COMMANDS), help="Experiment stage to run.")
    parser.add_argument("--config", type=str, default=None, help="KEY=value experiment file.")
    parser.add_argument("--run-name", type=str, default=None, help="Overrides RUN_NAME.")
    parser.add_argument(
        "--overwrite", action="store_true", help="Allow replacing existing run outputs."
    )
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_experiment_config(args.config)
        if args.run_name:
            cfg = replace(cfg, run_name=args.run_name)
        if args.overwrite:
            cfg = replace(cfg, overwrite=True)
        storage = RunStorage(cfg.run_name, overwrite=cfg.overwrite)
        print_logger(f"Running {args.command} in {storage.root}")
        COMMANDS[args.command](cfg, storage)
    except (ConfigError, PathCollisionError) as e:
        print_logger(f"{type(e).__name__}: {e}")
        return EXIT_CONFIG
    except TrainingDivergenceError as e:
        print_logger(f"Training diverged: {e}")
        return EXIT_DIVERGED
    finally:
        if "storage" in locals():
            storage.write_artifact_manifest()
    return EXIT_OK


# %%
# Main #

if __name__ == "__main__":
    sys.exit(main())


# %%
