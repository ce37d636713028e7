"""Desk-scale runs on the synthetic task. Minutes each; select with `pytest -m slow`."""
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from config import TrainConfig, apply_method, parse_config
from experiment import run_experiment
from network import build_model
from pda_data import SyntheticSpec, generate_synthetic, split_validation
from sspda_trainer import TrainingData, train

pytestmark = pytest.mark.slow

CONFIG_DIR = Path(__file__).resolve().parent.parent / 'configs'


def run_method(method, out_dir, **overrides):
    config = parse_config(CONFIG_DIR / f"{method}.cfg", dict(overrides, output_dir=str(out_dir)))
    return run_experiment(config)


def test_source_only_fits_two_separable_classes():
    spec = SyntheticSpec(num_classes=2, target_classes=2, samples_per_class=100, seed=2)
    source, target = generate_synthetic(spec)
    config = apply_method('source_only', TrainConfig(num_classes=2, lr=0.01, epochs=30))
    train_split, validation = split_validation(source, config.val_fraction, seed=0)
    result = train(build_model(config, seed=0), TrainingData(train_split, target, validation), config)
    assert max(row['val_acc'] for row in result.history) >= 0.95


def test_training_loss_falls_over_the_first_epochs(tmp_path):
    reports = run_method('sspda', tmp_path, epochs=5, repetitions=1)
    losses = pd.read_csv(reports['metrics_seed0'])['loss_total'].to_numpy()
    assert np.sum(np.diff(losses) >= 0) <= 1


def test_gamma_mass_leaves_absent_classes(tmp_path):
    run_method('sspda_gamma', tmp_path, repetitions=1)
    gamma = pd.read_csv(tmp_path / 'sspda_gamma_seed0_gamma.csv').set_index('epoch')
    absent = ['gamma_cross', 'gamma_checker', 'gamma_gradient']
    assert gamma.loc[gamma.index.max(), absent].mean() < gamma.loc[1, absent].mean()
    assert np.allclose(gamma.max(axis=1), 1.0)


def test_method_ordering_on_synthetic_task(tmp_path):
    means = {}
    for method in ('source_only', 'sspda', 'sspda_pada'):
        reports = run_method(method, tmp_path / method)
        means[method] = pd.read_csv(reports['aggregate']).loc[0, 'target_acc_mean']
    assert means['sspda'] >= means['source_only']
    assert means['sspda_pada'] >= means['sspda'] - 0.02
