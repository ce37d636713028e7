"""
SSPDA objectives, class-weight (gamma) estimation, the training loop and
smoothed model selection.
"""
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, NamedTuple, Optional

import numpy as np
from sklearn.metrics import accuracy_score
from tqdm import tqdm

from autodiff import Graph, SgdState, Tensor, sgd_step
from config import TrainConfig
from errors import ContractError, ParameterError, TrainingDivergedError
from jigsaw import PermutationSet, select_permutations, shuffle_batch
from network import LambdaSchedule, SspdaModel, lambda_at
from pda_data import DomainDataset, make_batches, random_hflip

logger = logging.getLogger(__name__)

PREDICT_BATCH = 128
METRIC_COLUMNS = ['epoch', 'loss_total', 'loss_cls', 'loss_jigsaw_t', 'loss_entropy', 'loss_domain',
                  'lambda', 'val_acc', 'smoothed_val_acc', 'target_acc_oracle']
LOSS_TERMS = ['loss_total', 'loss_cls', 'loss_jigsaw_t', 'loss_entropy', 'loss_domain']


class SourceBatch(NamedTuple):
    images: np.ndarray
    labels: np.ndarray


class PuzzleBatch(NamedTuple):
    images: np.ndarray
    perm_indices: np.ndarray


@dataclass
class GammaWeights:
    gamma: np.ndarray

    def __post_init__(self):
        self.gamma = np.asarray(self.gamma, dtype=np.float64)
        if self.gamma.ndim != 1 or np.any(self.gamma < 0) or np.any(self.gamma > 1):
            raise ParameterError("gamma must be a vector with entries in [0, 1]")

    @classmethod
    def uniform(cls, num_classes: int) -> 'GammaWeights':
        return cls(np.ones(num_classes))


@dataclass
class SelectionState:
    smoothed: float = 0.0
    best_smoothed: float = 0.0
    best_epoch: int = 0
    epoch: int = 0


@dataclass
class TrainingData:
    """Labeled source split for training and validation, target images for adaptation."""
    source: DomainDataset
    target: DomainDataset
    validation: DomainDataset


@dataclass
class TrainCallbacks:
    on_step: Optional[Callable[[Dict[str, float]], None]] = None
    on_epoch: Optional[Callable[[Dict[str, float]], None]] = None


@dataclass
class TrainResult:
    model: SspdaModel
    history: List[Dict[str, float]]
    gamma_history: List[np.ndarray]
    selection: SelectionState
    best_state: Dict[str, np.ndarray] = field(default_factory=dict)


def batched_proba(model: SspdaModel, images: np.ndarray, batch_size: int = PREDICT_BATCH) -> np.ndarray:
    if len(images) == 0:
        return np.zeros((0, model.num_classes))
    return np.concatenate([model.predict_proba(images[i:i + batch_size])
                           for i in range(0, len(images), batch_size)])


def accuracy_of(model: SspdaModel, dataset: DomainDataset) -> float:
    if dataset.labels is None or len(dataset) == 0:
        return float('nan')
    predictions = batched_proba(model, dataset.images).argmax(axis=1)
    return float(accuracy_score(dataset.labels, predictions))


def estimate_gamma(model: SspdaModel, target_images: np.ndarray) -> GammaWeights:
    """Mean softmax posterior over the target images, divided by its largest entry."""
    if len(target_images) == 0:
        raise ParameterError("gamma estimation needs at least one target image")
    probs = batched_proba(model, np.asarray(target_images))
    return gamma_from_posteriors(probs)


def gamma_from_posteriors(probs: np.ndarray) -> GammaWeights:
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2 or len(probs) == 0:
        raise ParameterError("posteriors must be a nonempty batch x classes array")
    # fsum keeps the mean independent of the image order
    mean = np.array([math.fsum(column) for column in probs.T]) / len(probs)
    return GammaWeights(mean / mean.max())


####### objectives

def _puzzle_term(model: SspdaModel, batch: PuzzleBatch, graph: Graph) -> Tensor:
    logits = model.forward_puzzle(model.forward_features(batch.images, graph), graph)
    return graph.softmax_cross_entropy(logits, batch.perm_indices)


def _record(terms: Optional[Dict[str, float]], **values: Tensor):
    if terms is None:
        return
    for name, tensor in values.items():
        terms[name] = tensor.item()


def loss_eq1(model: SspdaModel, source_batch: SourceBatch, target_batch: np.ndarray,
             shuffled_source: Optional[PuzzleBatch], shuffled_target: Optional[PuzzleBatch],
             config: TrainConfig, graph: Graph, terms: Optional[Dict[str, float]] = None) -> Tensor:
    """
    L_c(source) + alpha_s L_p(shuffled source) + eta H(target) + alpha_t L_p(shuffled target).

    Puzzle terms are skipped when their weight is 0; the shuffled batches
    may then be None.
    """
    class_logits = model.forward_class(model.forward_features(source_batch.images, graph), graph)
    loss_cls = graph.softmax_cross_entropy(class_logits, source_batch.labels)
    target_probs = graph.softmax(model.forward_class(model.forward_features(target_batch, graph), graph))
    loss_entropy = graph.entropy_loss(target_probs)

    total = loss_cls
    if config.alpha_s != 0:
        loss_jigsaw_s = _puzzle_term(model, shuffled_source, graph)
        total = graph.add(total, graph.scale(loss_jigsaw_s, config.alpha_s))
        _record(terms, loss_jigsaw_s=loss_jigsaw_s)
    total = graph.add(total, graph.scale(loss_entropy, config.eta))
    if config.alpha_t != 0:
        loss_jigsaw_t = _puzzle_term(model, shuffled_target, graph)
        total = graph.add(total, graph.scale(loss_jigsaw_t, config.alpha_t))
        _record(terms, loss_jigsaw_t=loss_jigsaw_t)
    elif terms is not None:
        terms['loss_jigsaw_t'] = 0.0
    _record(terms, loss_cls=loss_cls, loss_entropy=loss_entropy, loss_total=total)
    if terms is not None:
        terms['loss_domain'] = 0.0
    return total


def loss_eq2(model: SspdaModel, source_batch: SourceBatch, target_batch: np.ndarray,
             shuffled_target: Optional[PuzzleBatch], gamma: GammaWeights, lam: float,
             config: TrainConfig, graph: Graph, terms: Optional[Dict[str, float]] = None) -> Tensor:
    """
    Class-weighted objective with the adversarial domain head.

    Source rows weigh gamma[y], target rows gamma[argmax p] (or sum_l gamma_l p_l
    with per-class entropy weights when target_weighting is 'soft'). The
    domain term is lam times the binary cross-entropy of G_d (source = 1,
    target = 0); G_d sits behind a unit gradient reversal, so one backward
    pass descends it for theta_d and ascends it for theta_f.
    """
    if lam < 0:
        raise ParameterError(f"lambda must be >= 0, got {lam}")
    gamma_values = gamma.gamma
    if gamma_values.shape != (model.num_classes,):
        raise ParameterError(f"gamma has {gamma_values.shape[0]} entries, model has {model.num_classes} classes")
    labels = np.asarray(source_batch.labels).astype(np.int64)
    source_weights = gamma_values[np.clip(labels, 0, model.num_classes - 1)]
    source_feats = model.forward_features(source_batch.images, graph)
    loss_cls = graph.softmax_cross_entropy(model.forward_class(source_feats, graph), labels, weights=source_weights)
    source_domain = model.forward_domain(source_feats, 1.0, graph)
    loss_domain_s = graph.binary_cross_entropy(source_domain, np.ones(len(labels)), weights=source_weights)

    target_feats = model.forward_features(target_batch, graph)
    target_probs = graph.softmax(model.forward_class(target_feats, graph))
    if config.target_weighting == 'soft':
        target_weights = target_probs.data @ gamma_values
        loss_entropy = graph.entropy_loss(target_probs, class_weights=gamma_values)
    else:
        target_weights = gamma_values[target_probs.data.argmax(axis=1)]
        loss_entropy = graph.entropy_loss(target_probs, weights=target_weights)
    target_domain = model.forward_domain(target_feats, 1.0, graph)
    loss_domain_t = graph.binary_cross_entropy(target_domain, np.zeros(len(target_batch)), weights=target_weights)

    source_term = graph.add(loss_cls, graph.scale(loss_domain_s, lam))
    target_term = graph.add(graph.scale(loss_entropy, config.eta), graph.scale(loss_domain_t, lam))
    total = graph.add(source_term, target_term)
    if config.alpha_t != 0:
        loss_jigsaw_t = _puzzle_term(model, shuffled_target, graph)
        total = graph.add(total, graph.scale(loss_jigsaw_t, config.alpha_t))
        _record(terms, loss_jigsaw_t=loss_jigsaw_t)
    elif terms is not None:
        terms['loss_jigsaw_t'] = 0.0
    _record(terms, loss_cls=loss_cls, loss_entropy=loss_entropy, loss_total=total)
    if terms is not None:
        terms['loss_domain'] = loss_domain_s.item() + loss_domain_t.item()
    return total


def uses_eq2(config: TrainConfig) -> bool:
    return config.use_gamma or config.lambda_max > 0


####### selection

def update_selection(state: SelectionState, epoch_val_accuracy: float, w: float) -> SelectionState:
    """
    smoothed <- w * previous + (1 - w) * current, the raw value on the first
    epoch. The best epoch only moves on a strictly larger smoothed value.
    """
    if state.epoch == 0:
        smoothed = float(epoch_val_accuracy)
    else:
        smoothed = w * state.smoothed + (1.0 - w) * epoch_val_accuracy
    epoch = state.epoch + 1
    if state.best_epoch == 0 or smoothed > state.best_smoothed:
        return SelectionState(smoothed, smoothed, epoch, epoch)
    return replace(state, smoothed=smoothed, epoch=epoch)


####### training loop

def _check_finite(terms: Dict[str, float], epoch: int, step: int):
    bad = [name for name, value in terms.items() if not np.isfinite(value)]
    if bad:
        raise TrainingDivergedError(f"epoch {epoch} step {step}: non-finite {', '.join(bad)}", terms=bad)


def train(model: SspdaModel, datasets: TrainingData, config: TrainConfig,
          callbacks: Optional[TrainCallbacks] = None,
          perm_set: Optional[PermutationSet] = None) -> TrainResult:
    """
    Optimize the configured objective for config.epochs epochs.

    Randomness comes from independent streams spawned from config.seed:
    batch order, tile shuffling and augmentation. Methods that share a seed
    therefore see identical source batches.

    Args:
        model: freshly built or partially trained model, updated in place
        datasets: training / validation source splits and the target set
        config: hyperparameters
        callbacks: optional per-step and per-epoch hooks
        perm_set: puzzle permutations, selected from the config when absent

    Returns:
        TrainResult: per-epoch metrics, gamma dumps and the selected state
    """
    callbacks = callbacks or TrainCallbacks()
    config.validate()
    if datasets.source.labels is None:
        raise ParameterError("source dataset must be labeled")
    if perm_set is None:
        perm_set = select_permutations(config.grid_side, config.num_permutations)
    if len(perm_set) != model.num_permutations:
        raise ParameterError(f"{len(perm_set)} permutations for a puzzle head of width {model.num_permutations}")

    order_seq, shuffle_seq, augment_seq = np.random.SeedSequence(config.seed).spawn(3)
    order_rng = np.random.default_rng(order_seq)
    shuffle_rng = np.random.default_rng(shuffle_seq)
    augment_rng = np.random.default_rng(augment_seq)

    steps_per_epoch = max(math.ceil(len(datasets.source) / config.batch_source),
                          math.ceil(len(datasets.target) / config.batch_target))
    if config.lambda_granularity == 'epoch':
        schedule = LambdaSchedule(config.lambda_max, config.epochs)
    else:
        schedule = LambdaSchedule(config.lambda_max, config.epochs * steps_per_epoch)
    sgd_state = SgdState(config.lr, config.momentum, config.weight_decay)
    adversarial = uses_eq2(config)

    history: List[Dict[str, float]] = []
    gamma_history: List[np.ndarray] = []
    selection = SelectionState()
    best_state = model.state_dict()
    gamma = estimate_gamma(model, datasets.target.images) if config.use_gamma else None
    global_step = 0

    epochs = tqdm(range(1, config.epochs + 1), desc='training', disable=not config.progress)
    for epoch in epochs:
        sums = dict.fromkeys(LOSS_TERMS, 0.0)
        lam = 0.0
        steps = 0
        batches = make_batches(datasets.source, datasets.target, config.batch_source, config.batch_target,
                               seed=int(order_rng.integers(2 ** 63)))
        for batch in batches:
            source_images, target_images = batch.source_images, batch.target_images
            if config.hflip:
                source_images = random_hflip(source_images, augment_rng)
                target_images = random_hflip(target_images, augment_rng)
            shuffled_source = shuffled_target = None
            if config.alpha_t != 0:
                shuffled_target = PuzzleBatch(*shuffle_batch(target_images, perm_set, config.beta, shuffle_rng))
            if config.alpha_s != 0 and not adversarial:
                shuffled_source = PuzzleBatch(*shuffle_batch(source_images, perm_set, config.beta, shuffle_rng))
            step_index = epoch - 1 if config.lambda_granularity == 'epoch' else global_step
            lam = lambda_at(schedule, step_index)

            graph = Graph()
            model.zero_grad()
            terms: Dict[str, float] = {}
            source = SourceBatch(source_images, batch.source_labels)
            try:
                if adversarial:
                    weights = gamma if gamma is not None else GammaWeights.uniform(model.num_classes)
                    loss = loss_eq2(model, source, target_images, shuffled_target, weights, lam,
                                    config, graph, terms)
                else:
                    loss = loss_eq1(model, source, target_images, shuffled_source, shuffled_target,
                                    config, graph, terms)
            except ContractError as e:
                raise TrainingDivergedError(f"epoch {epoch} step {steps}: {e}", terms=['logits']) from e
            _check_finite(terms, epoch, steps)
            graph.backward(loss)
            sgd_step(model.params, model.grads(), sgd_state)

            for name in LOSS_TERMS:
                sums[name] += terms[name]
            if callbacks.on_step is not None:
                callbacks.on_step(dict(terms, epoch=epoch, step=steps, **{'lambda': lam}))
            steps += 1
            global_step += 1

        epoch_gamma = estimate_gamma(model, datasets.target.images)
        gamma_history.append(epoch_gamma.gamma)
        if config.use_gamma:
            gamma = epoch_gamma

        val_acc = accuracy_of(model, datasets.validation)
        selection = update_selection(selection, val_acc, config.selection_w)
        if selection.best_epoch == epoch:
            best_state = model.state_dict()
        row = {'epoch': epoch}
        row.update({name: sums[name] / steps for name in LOSS_TERMS})
        row.update({'lambda': lam, 'val_acc': val_acc, 'smoothed_val_acc': selection.smoothed,
                    'target_acc_oracle': accuracy_of(model, datasets.target)})
        history.append(row)
        logger.info(f"epoch {epoch}/{config.epochs}: loss {row['loss_total']:.4f}, "
                    f"val {val_acc:.4f} (smoothed {selection.smoothed:.4f}), lambda {lam:.5f}")
        if callbacks.on_epoch is not None:
            callbacks.on_epoch(row)

    logger.info(f"selected epoch {selection.best_epoch} (smoothed val {selection.best_smoothed:.4f})")
    return TrainResult(model, history, gamma_history, selection, best_state)
