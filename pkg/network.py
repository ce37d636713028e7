"""
Desk-scale SSPDA network: convolutional feature extractor, object head,
puzzle head and adversarial domain head, plus the lambda schedule and the
checkpoint codec.
"""
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from autodiff import Graph, Tensor
from config import TrainConfig
from errors import DataFormatError, DimensionError, ParameterError

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = 'SSPDA-CHECKPOINT 1'
CHECKPOINT_END = 'END'


def _backbone_sides(config: TrainConfig) -> List[int]:
    """Spatial side after every conv and pool, raising if a block does not fit."""
    side = config.image_side
    sides = [side]
    for block, kernel in enumerate(config.conv_kernels):
        if kernel < 1 or kernel > side:
            raise ParameterError(f"conv block {block}: kernel {kernel} does not fit a {side}x{side} input")
        side = side - kernel + 1
        if side % config.pool_window:
            raise ParameterError(f"conv block {block}: pool window {config.pool_window} does not divide side {side}")
        side //= config.pool_window
        if side < 1:
            raise ParameterError(f"conv block {block}: spatial side collapsed to {side}")
        sides.append(side)
    return sides


class SspdaModel:
    """
    G_f, G_c, G_p and G_d over one ordered parameter dictionary.

    Parameter names: conv{i}.weight / conv{i}.bias for the backbone, then
    class.*, puzzle.* and domain{0,1,2}.*. Dense weights are in x out.
    """

    def __init__(self, config: TrainConfig, params: Dict[str, Tensor]):
        self.config = config
        self.params = params
        self.num_blocks = len(config.conv_channels)

    @property
    def num_classes(self) -> int:
        return self.params['class.bias'].shape[0]

    @property
    def num_permutations(self) -> int:
        return self.params['puzzle.bias'].shape[0]

    @property
    def feature_dim(self) -> int:
        return self.params['class.weight'].shape[0]

    def parameter_count(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def group(self, prefix: str) -> Dict[str, Tensor]:
        return {name: p for name, p in self.params.items() if name.startswith(prefix)}

    def zero_grad(self):
        for param in self.params.values():
            param.zero_grad()

    def grads(self) -> Dict[str, np.ndarray]:
        return {name: p.grad for name, p in self.params.items()}

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]):
        missing = set(self.params) - set(state)
        unexpected = set(state) - set(self.params)
        if missing or unexpected:
            raise DimensionError(f"state mismatch, missing {sorted(missing)}, unexpected {sorted(unexpected)}")
        for name, param in self.params.items():
            values = np.asarray(state[name], dtype=np.float64)
            if values.shape != param.shape:
                raise DimensionError(f"{name}: stored shape {values.shape}, model expects {param.shape}")
            param.data[...] = values

    # ------------------------------------------------------------------
    # forward passes

    def forward_features(self, images, graph: Graph) -> Tensor:
        x = images if isinstance(images, Tensor) else Tensor(images)
        expected = (self.config.channels, self.config.image_side, self.config.image_side)
        if x.data.ndim != 4 or x.shape[1:] != expected:
            raise DimensionError(f"expected batch x {expected[0]} x {expected[1]} x {expected[2]} images, got {x.shape}")
        for block in range(self.num_blocks):
            x = graph.conv2d(x, self.params[f'conv{block}.weight'], bias=self.params[f'conv{block}.bias'])
            x = graph.relu(x)
            x = graph.max_pool2d(x, self.config.pool_window)
        return graph.global_avg_pool(x)

    def forward_class(self, feats: Tensor, graph: Graph) -> Tensor:
        return graph.dense(feats, self.params['class.weight'], self.params['class.bias'])

    def forward_puzzle(self, feats: Tensor, graph: Graph) -> Tensor:
        return graph.dense(feats, self.params['puzzle.weight'], self.params['puzzle.bias'])

    def forward_domain(self, feats: Tensor, lam: float, graph: Graph) -> Tensor:
        """
        Probability that each feature row comes from the source domain.

        `lam` only scales the reversed gradient into the backbone. The trainer
        passes 1.0 and multiplies the discriminator BCE by lambda instead, so
        the loss value carries +lambda * BCE, which is -lambda * ln G_d on
        source rows.
        """
        h = graph.gradient_reversal(feats, lam)
        h = graph.relu(graph.dense(h, self.params['domain0.weight'], self.params['domain0.bias']))
        h = graph.relu(graph.dense(h, self.params['domain1.weight'], self.params['domain1.bias']))
        return graph.sigmoid(graph.dense(h, self.params['domain2.weight'], self.params['domain2.bias']))

    def predict_proba(self, images: np.ndarray) -> np.ndarray:
        graph = Graph(record=False)
        return graph.softmax(self.forward_class(self.forward_features(images, graph), graph)).data


def parameter_shapes(config: TrainConfig) -> List[Tuple[str, Tuple[int, ...]]]:
    shapes = []
    in_channels = config.channels
    for block, (out_channels, kernel) in enumerate(zip(config.conv_channels, config.conv_kernels)):
        shapes.append((f'conv{block}.weight', (out_channels, in_channels, kernel, kernel)))
        shapes.append((f'conv{block}.bias', (out_channels,)))
        in_channels = out_channels
    features = config.feature_dim
    hidden = config.domain_hidden or max(1, features // 2)
    shapes += [
        ('class.weight', (features, config.num_classes)),
        ('class.bias', (config.num_classes,)),
        ('puzzle.weight', (features, config.num_permutations)),
        ('puzzle.bias', (config.num_permutations,)),
        ('domain0.weight', (features, hidden)),
        ('domain0.bias', (hidden,)),
        ('domain1.weight', (hidden, hidden)),
        ('domain1.bias', (hidden,)),
        ('domain2.weight', (hidden, 1)),
        ('domain2.bias', (1,)),
    ]
    return shapes


def build_model(config: TrainConfig, seed: int) -> SspdaModel:
    """
    Weights uniform in +-1/sqrt(fan_in), biases zero, deterministic in seed.
    """
    config.validate()
    _backbone_sides(config)
    rng = np.random.default_rng(seed)
    params: Dict[str, Tensor] = {}
    for name, shape in parameter_shapes(config):
        if name.endswith('.bias'):
            values = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            bound = 1.0 / math.sqrt(fan_in)
            values = rng.uniform(-bound, bound, size=shape)
        params[name] = Tensor(values, requires_grad=True, name=name)
    model = SspdaModel(config, params)
    logger.debug(f"built model with {model.parameter_count()} parameters (seed {seed})")
    return model


@dataclass
class LambdaSchedule:
    lambda_max: float
    total_steps: int

    def __post_init__(self):
        if self.lambda_max < 0:
            raise ParameterError(f"lambda_max must be >= 0, got {self.lambda_max}")
        if self.total_steps < 1:
            raise ParameterError(f"total_steps must be >= 1, got {self.total_steps}")


def lambda_at(schedule: LambdaSchedule, step: int) -> float:
    """lambda_max * (2 / (1 + exp(-10 q)) - 1) with q = step / total_steps."""
    if not 0 <= step <= schedule.total_steps:
        raise ParameterError(f"step {step} outside [0, {schedule.total_steps}]")
    progress = step / schedule.total_steps
    return schedule.lambda_max * (2.0 / (1.0 + math.exp(-10.0 * progress)) - 1.0)


####### checkpoints

def _format_shape(shape: Tuple[int, ...]) -> str:
    return ','.join(str(d) for d in shape) if shape else '-'


def _parse_shape(text: str) -> Tuple[int, ...]:
    return () if text == '-' else tuple(int(d) for d in text.split(','))


def save_checkpoint(path: Union[str, Path], state: Union[SspdaModel, Dict[str, np.ndarray]]):
    """
    Text header naming every parameter and its shape, then the values as
    little-endian float64 in header order.
    """
    if isinstance(state, SspdaModel):
        state = state.state_dict()
    header = [CHECKPOINT_MAGIC, f'params {len(state)}']
    header += [f'{name} {_format_shape(np.shape(values))}' for name, values in state.items()]
    header.append(CHECKPOINT_END)
    with Path(path).open('wb') as f:
        f.write(('\n'.join(header) + '\n').encode('ascii'))
        for values in state.values():
            f.write(np.ascontiguousarray(values, dtype='<f8').tobytes())
    logger.debug(f"wrote checkpoint with {len(state)} parameters to {path}")


def load_checkpoint(path: Union[str, Path], model: Optional[SspdaModel] = None) -> Dict[str, np.ndarray]:
    """Read a checkpoint; when a model is given its parameters are overwritten too."""
    path = Path(path)
    raw = path.read_bytes()
    offset = 0
    lines = []
    while True:
        end = raw.find(b'\n', offset)
        if end < 0:
            raise DataFormatError(f"{path}: truncated checkpoint header")
        line = raw[offset:end].decode('ascii', errors='replace')
        offset = end + 1
        if line == CHECKPOINT_END:
            break
        lines.append(line)
    if not lines or lines[0] != CHECKPOINT_MAGIC:
        raise DataFormatError(f"{path}: not an SSPDA checkpoint")
    try:
        count = int(lines[1].split()[1])
        entries = [(name, _parse_shape(shape)) for name, shape in (line.split() for line in lines[2:])]
    except (IndexError, ValueError) as e:
        raise DataFormatError(f"{path}: malformed checkpoint header ({e})") from e
    if len(entries) != count:
        raise DataFormatError(f"{path}: header announces {count} parameters, lists {len(entries)}")

    state: Dict[str, np.ndarray] = {}
    for name, shape in entries:
        size = int(np.prod(shape)) if shape else 1
        nbytes = 8 * size
        if offset + nbytes > len(raw):
            raise DataFormatError(f"{path}: data for {name} is truncated")
        state[name] = np.frombuffer(raw, dtype='<f8', count=size, offset=offset).astype(np.float64).reshape(shape)
        offset += nbytes
    if offset != len(raw):
        raise DataFormatError(f"{path}: {len(raw) - offset} trailing bytes after the last parameter")
    if model is not None:
        model.load_state_dict(state)
    return state
