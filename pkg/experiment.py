"""
Experiment orchestration: data loading, repeated training runs, target
evaluation (optionally multi-crop) and CSV reports.
"""
import logging
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from sklearn.metrics import accuracy_score, confusion_matrix

from config import ExperimentConfig, TrainConfig
from errors import ContractError, ParameterError
from network import SspdaModel, build_model, load_checkpoint, save_checkpoint
from pda_data import (SOURCE, TARGET, DomainDataset, generate_synthetic, load_directory,
                      random_crop_resize, split_validation)
from sspda_trainer import METRIC_COLUMNS, TrainingData, batched_proba, train

logger = logging.getLogger(__name__)

FLOAT_FORMAT = '%.8f'


def evaluate(model: SspdaModel, dataset: DomainDataset, crops: int = 1, seed: int = 0,
             fraction: float = 0.9) -> float:
    """
    Target accuracy; with crops > 1 the softmax is averaged over random
    square crops of `fraction` of the side, each resized back to full size.
    """
    if dataset.labels is None:
        raise ContractError("evaluation needs a labeled dataset")
    if crops < 1:
        raise ParameterError(f"crops must be >= 1, got {crops}")
    if len(dataset) == 0:
        return float('nan')
    if crops == 1:
        probs = batched_proba(model, dataset.images)
    else:
        rng = np.random.default_rng(seed)
        probs = np.zeros((len(dataset), model.num_classes))
        for _ in range(crops):
            cropped = np.stack([random_crop_resize(image, fraction, rng) for image in dataset.images])
            probs += batched_proba(model, cropped)
        probs /= crops
    return float(accuracy_score(dataset.labels, probs.argmax(axis=1)))


def outside_shared_rate(model: SspdaModel, target: DomainDataset) -> float:
    """Fraction of target images assigned to a class absent from the target label set."""
    if target.labels is None or len(target) == 0:
        return float('nan')
    predictions = batched_proba(model, target.images).argmax(axis=1)
    matrix = confusion_matrix(target.labels, predictions, labels=np.arange(model.num_classes))
    logger.debug(f"target confusion matrix:\n{matrix}")
    absent = ~np.isin(np.arange(model.num_classes), np.unique(target.labels))
    return float(matrix[:, absent].sum() / matrix.sum())


def load_datasets(config: ExperimentConfig) -> Tuple[DomainDataset, DomainDataset]:
    if config.uses_directories:
        train = config.train
        source = load_directory(config.source_dir, config.class_list, train.image_side, train.channels, SOURCE)
        target = load_directory(config.target_dir, config.class_list, train.image_side, train.channels, TARGET)
        return source, target
    return generate_synthetic(config.synthetic)


def run_config(config: ExperimentConfig, seed: int) -> TrainConfig:
    num_classes = len(config.class_list) if config.uses_directories else config.synthetic.num_classes
    return replace(config.train, seed=seed, num_classes=num_classes)


def aggregate_accuracies(accuracies: Sequence[float], std: str = 'sample') -> Tuple[float, float]:
    """Mean and standard deviation (ddof 1 for 'sample', 0 for 'population')."""
    values = pd.Series(list(accuracies), dtype=float)
    return float(values.mean()), float(values.std(ddof=1 if std == 'sample' else 0))


def _check_writable(output_dir: Path):
    output_dir.mkdir(parents=True, exist_ok=True)
    marker = output_dir / '.write_check'
    marker.write_text('')
    marker.unlink()


def run_single(config: ExperimentConfig, seed: int, source: DomainDataset,
               target: DomainDataset) -> Dict[str, float]:
    """Train one repetition, write its metrics, gamma dump and selected checkpoint."""
    output_dir = Path(config.output_dir)
    train_config = run_config(config, seed)
    train_split, validation = split_validation(source, train_config.val_fraction, seed)
    model = build_model(train_config, seed)
    result = train(model, TrainingData(train_split, target, validation), train_config)

    stem = f"{config.method}_seed{seed}"
    pd.DataFrame(result.history, columns=METRIC_COLUMNS).to_csv(
        output_dir / f"{stem}_metrics.csv", index=False, float_format=FLOAT_FORMAT)
    gamma_frame = pd.DataFrame(np.array(result.gamma_history),
                               columns=[f"gamma_{name}" for name in source.class_names])
    gamma_frame.insert(0, 'epoch', range(1, len(result.gamma_history) + 1))
    gamma_frame.to_csv(output_dir / f"{stem}_gamma.csv", index=False, float_format=FLOAT_FORMAT)

    model.load_state_dict(result.best_state)
    save_checkpoint(output_dir / f"{stem}_best.ckpt", model)
    target_acc = evaluate(model, target, config.eval_crops, seed, config.crop_fraction)
    logger.info(f"{config.method} seed {seed}: target accuracy {target_acc:.4f} "
                f"(epoch {result.selection.best_epoch})")
    return {
        'method': config.method,
        'seed': seed,
        'best_epoch': result.selection.best_epoch,
        'best_smoothed_val_acc': result.selection.best_smoothed,
        'target_acc': target_acc,
        'outside_shared_rate': outside_shared_rate(model, target),
    }


def run_experiment(config: ExperimentConfig) -> Dict[str, Path]:
    """
    Run config.repetitions seeds (config.train.seed, +1, ...) and write the
    per-run summary and the aggregate row next to the per-epoch files.

    Returns:
        dict: report name -> path
    """
    output_dir = Path(config.output_dir)
    _check_writable(output_dir)
    source, target = load_datasets(config)
    if len(source) == 0 or len(target) == 0:
        raise ParameterError(f"empty dataset: {len(source)} source and {len(target)} target images")
    seeds = [config.train.seed + r for r in range(config.repetitions)]
    logger.info(f"running {config.method} on {len(source)} source / {len(target)} target images, seeds {seeds}")

    rows: List[Dict[str, float]] = Parallel(n_jobs=config.n_jobs)(
        delayed(run_single)(config, seed, source, target) for seed in seeds)

    runs_path = output_dir / f"{config.method}_runs.csv"
    pd.DataFrame(rows).to_csv(runs_path, index=False, float_format=FLOAT_FORMAT)
    mean, std = aggregate_accuracies([row['target_acc'] for row in rows], config.std)
    aggregate_path = output_dir / f"{config.method}_aggregate.csv"
    pd.DataFrame([{
        'method': config.method,
        'repetitions': len(rows),
        'target_acc_mean': mean,
        'target_acc_std': std,
        'std': config.std,
        'outside_shared_rate_mean': float(np.mean([row['outside_shared_rate'] for row in rows])),
    }]).to_csv(aggregate_path, index=False, float_format=FLOAT_FORMAT)
    logger.info(f"{config.method}: target accuracy {mean:.4f} +- {std:.4f} over {len(rows)} runs")

    reports = {'runs': runs_path, 'aggregate': aggregate_path}
    for seed in seeds:
        reports[f'metrics_seed{seed}'] = output_dir / f"{config.method}_seed{seed}_metrics.csv"
    return reports


def evaluate_checkpoint(config: ExperimentConfig, checkpoint: Path, seed: int) -> float:
    """Accuracy of a saved model on the configured target domain."""
    _, target = load_datasets(config)
    model = build_model(run_config(config, seed), seed)
    load_checkpoint(checkpoint, model)
    return evaluate(model, target, config.eval_crops, seed, config.crop_fraction)
