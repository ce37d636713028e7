"""
Command-line entry point.

    python cli.py generate --out data/            write a synthetic PDA dataset
    python cli.py train --config configs/sspda.cfg
    python cli.py eval --config configs/sspda.cfg --checkpoint results/sspda_seed0_best.ckpt
    python cli.py perms --grid-side 3 --count 30 --out perms.txt

Exit codes: 0 success, 1 configuration error, 2 runtime failure.
"""
import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional

from dotenv import load_dotenv

from config import ExperimentConfig, parse_config
from errors import ConfigError, SspdaError
from experiment import evaluate_checkpoint, run_experiment
from jigsaw import min_pairwise_distance, save_permutations, select_permutations
from pda_data import SyntheticSpec, generate_synthetic, write_dataset

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2


def setup_logging():
    level = os.getenv('SSPDA_LOG_LEVEL', 'INFO').upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=[logging.StreamHandler(sys.stdout)],
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description='Self-supervised partial domain adaptation experiments')
    commands = parser.add_subparsers(dest='command', required=True)

    generate = commands.add_parser('generate', help='write the synthetic dataset to disk')
    generate.add_argument('--config', type=Path, help='experiment file with synthetic parameters')
    generate.add_argument('--seed', type=int, help='data seed')
    generate.add_argument('--out', type=Path, default=Path('data'), help='dataset directory')

    train = commands.add_parser('train', help='run an experiment from a config file')
    train.add_argument('--config', type=Path, required=True)
    train.add_argument('--seed', type=int, help='first repetition seed')
    train.add_argument('--out', type=Path, default=os.getenv('SSPDA_OUTPUT_DIR'), help='report directory')
    train.add_argument('--method', help='override the method selector')

    evaluate = commands.add_parser('eval', help='evaluate a checkpoint on the target domain')
    evaluate.add_argument('--config', type=Path, required=True)
    evaluate.add_argument('--checkpoint', type=Path, required=True)
    evaluate.add_argument('--seed', type=int, help='crop sampling seed')
    evaluate.add_argument('--method', help='override the method selector')

    perms = commands.add_parser('perms', help='write a jigsaw permutation set')
    perms.add_argument('--config', type=Path, help='take grid_side and P from an experiment file')
    perms.add_argument('--grid-side', type=int, default=3)
    perms.add_argument('--count', type=int, default=30)
    perms.add_argument('--out', type=Path, default=Path('permutations.txt'))
    return parser


def _load(args, extra: Optional[Dict[str, object]] = None) -> ExperimentConfig:
    overrides = {'method': getattr(args, 'method', None), 'seed': args.seed}
    overrides.update(extra or {})
    return parse_config(args.config, overrides)


def cmd_generate(args) -> int:
    if args.config is not None:
        spec = parse_config(args.config).synthetic
    else:
        spec = SyntheticSpec()
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    source, target = generate_synthetic(spec)
    manifest = write_dataset(args.out, [source, target])
    logger.info(f"wrote {len(source)} source and {len(target)} target images, manifest {manifest}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = _load(args, {'output_dir': args.out})
    reports = run_experiment(config)
    for name, path in reports.items():
        logger.info(f"{name}: {path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    config = _load(args)
    accuracy = evaluate_checkpoint(config, args.checkpoint, config.train.seed)
    logger.info(f"target accuracy ({config.eval_crops} crop(s)): {accuracy:.4f}")
    print(f"{accuracy:.6f}")
    return EXIT_OK


def cmd_perms(args) -> int:
    grid_side, count = args.grid_side, args.count
    if args.config is not None:
        train = parse_config(args.config).train
        grid_side, count = train.grid_side, train.num_permutations
    perm_set = select_permutations(grid_side, count)
    save_permutations(args.out, perm_set)
    logger.info(f"wrote {count} permutations of a {grid_side}x{grid_side} grid to {args.out} "
                f"(min Hamming distance {min_pairwise_distance(perm_set)})")
    return EXIT_OK


COMMANDS = {'generate': cmd_generate, 'train': cmd_train, 'eval': cmd_eval, 'perms': cmd_perms}


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as e:
        logger.error(f"configuration error: {e}")
        return EXIT_CONFIG
    except (SspdaError, OSError) as e:
        logger.error(f"{args.command} failed: {e}", exc_info=True)
        return EXIT_RUNTIME
    except Exception:
        logger.exception(f"{args.command} failed")
        return EXIT_RUNTIME


if __name__ == '__main__':
    sys.exit(main())
