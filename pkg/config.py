"""
Experiment configuration: training hyperparameters, method presets and the
`key = value` experiment file parser.
"""
import logging
from dataclasses import dataclass, field, replace
from math import factorial
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple, Union

from errors import ConfigError, ParameterError
from pda_data import SyntheticSpec

logger = logging.getLogger(__name__)

LAMBDA_GRANULARITIES = ('step', 'epoch')
TARGET_WEIGHTINGS = ('argmax', 'soft')
STD_CONVENTIONS = ('sample', 'population')


@dataclass
class TrainConfig:
    """Every hyperparameter of the SSPDA objectives. Defaults follow the fine-tuning protocol."""
    alpha_s: float = 0.0
    alpha_t: float = 1.0
    eta: float = 0.2
    beta: float = 0.7
    lambda_max: float = 0.0
    use_gamma: bool = False
    num_permutations: int = 30
    grid_side: int = 3
    batch_source: int = 32
    batch_target: int = 32
    lr: float = 0.0005
    momentum: float = 0.9
    weight_decay: float = 0.0005
    epochs: int = 30
    selection_w: float = 0.6
    seed: int = 0
    num_classes: int = 6
    image_side: int = 48
    channels: int = 3
    conv_channels: Tuple[int, ...] = (16, 64)
    conv_kernels: Tuple[int, ...] = (5, 3)
    pool_window: int = 2
    domain_hidden: int = 0
    lambda_granularity: str = 'step'
    target_weighting: str = 'argmax'
    hflip: bool = False
    val_fraction: float = 0.1
    progress: bool = False

    @property
    def feature_dim(self) -> int:
        return self.conv_channels[-1] if self.conv_channels else 0

    def field_errors(self) -> List[Tuple[str, str]]:
        """(key, message) for every violated invariant."""
        problems = []

        def check(ok, key, message):
            if not ok:
                problems.append((key, message))

        check(0.0 <= self.eta <= 1.0, 'eta', f"must lie in [0, 1], got {self.eta}")
        check(0.0 <= self.beta <= 1.0, 'beta', f"must lie in [0, 1], got {self.beta}")
        check(self.alpha_t >= 0, 'alpha_t', f"must be >= 0, got {self.alpha_t}")
        check(self.alpha_s >= 0, 'alpha_s', f"must be >= 0, got {self.alpha_s}")
        check(self.lambda_max >= 0, 'lambda_max', f"must be >= 0, got {self.lambda_max}")
        check(self.grid_side in (2, 3), 'grid_side', f"must be 2 or 3, got {self.grid_side}")
        if self.grid_side in (2, 3):
            limit = factorial(self.grid_side ** 2)
            check(1 <= self.num_permutations <= limit, 'num_permutations',
                  f"must lie in [1, {limit}], got {self.num_permutations}")
        check(self.batch_source >= 1, 'batch_source', f"must be >= 1, got {self.batch_source}")
        check(self.batch_target >= 1, 'batch_target', f"must be >= 1, got {self.batch_target}")
        check(self.lr >= 0, 'lr', f"must be >= 0, got {self.lr}")
        check(0.0 <= self.momentum < 1.0, 'momentum', f"must lie in [0, 1), got {self.momentum}")
        check(self.weight_decay >= 0, 'weight_decay', f"must be >= 0, got {self.weight_decay}")
        check(self.epochs >= 1, 'epochs', f"must be >= 1, got {self.epochs}")
        check(0.0 <= self.selection_w <= 1.0, 'selection_w', f"must lie in [0, 1], got {self.selection_w}")
        check(self.num_classes >= 1, 'num_classes', f"must be >= 1, got {self.num_classes}")
        check(self.channels >= 1, 'channels', f"must be >= 1, got {self.channels}")
        check(self.image_side >= 1 and self.image_side % max(self.grid_side, 1) == 0, 'image_side',
              f"{self.image_side} is not divisible by grid_side {self.grid_side}")
        check(len(self.conv_channels) >= 1 and len(self.conv_channels) == len(self.conv_kernels), 'conv_kernels',
              f"need one kernel size per conv block, got {len(self.conv_kernels)} for {len(self.conv_channels)}")
        check(all(c >= 1 for c in self.conv_channels), 'conv_channels', "channel counts must be >= 1")
        check(self.pool_window >= 1, 'pool_window', f"must be >= 1, got {self.pool_window}")
        check(self.domain_hidden >= 0, 'domain_hidden', f"must be >= 0, got {self.domain_hidden}")
        check(self.lambda_granularity in LAMBDA_GRANULARITIES, 'lambda_granularity',
              f"must be one of {LAMBDA_GRANULARITIES}, got {self.lambda_granularity!r}")
        check(self.target_weighting in TARGET_WEIGHTINGS, 'target_weighting',
              f"must be one of {TARGET_WEIGHTINGS}, got {self.target_weighting!r}")
        check(0.0 < self.val_fraction < 1.0, 'val_fraction', f"must lie in (0, 1), got {self.val_fraction}")
        return problems

    def validate(self):
        problems = self.field_errors()
        if problems:
            key, message = problems[0]
            raise ParameterError(f"{key}: {message}")


# (alpha_s, alpha_t, use_gamma, lambda_max) per method; source_only also silences entropy
METHOD_PRESETS: Dict[str, Dict[str, Any]] = {
    'source_only': {'alpha_s': 0.0, 'alpha_t': 0.0, 'eta': 0.0, 'use_gamma': False, 'lambda_max': 0.0},
    'jigen': {'alpha_s': 1.0, 'alpha_t': 1.0, 'use_gamma': False, 'lambda_max': 0.0},
    'sspda': {'alpha_s': 0.0, 'alpha_t': 1.0, 'use_gamma': False, 'lambda_max': 0.0},
    'sspda_gamma': {'alpha_s': 0.0, 'alpha_t': 1.0, 'use_gamma': True, 'lambda_max': 0.0},
    'sspda_pada': {'alpha_s': 0.0, 'alpha_t': 1.0, 'use_gamma': True, 'lambda_max': 0.1},
}


def method_errors(method: str, train: TrainConfig) -> List[Tuple[str, str]]:
    """Check that the training fields agree with the selected method."""
    if method not in METHOD_PRESETS:
        return [('method', f"unknown method {method!r}, expected one of {', '.join(METHOD_PRESETS)}")]
    problems = []
    if method == 'source_only':
        for key in ('alpha_s', 'alpha_t', 'eta', 'lambda_max'):
            if getattr(train, key) != 0:
                problems.append((key, "must be 0 for source_only"))
    elif method == 'jigen':
        for key in ('alpha_s', 'alpha_t'):
            if getattr(train, key) <= 0:
                problems.append((key, "must be > 0 for jigen"))
        if train.lambda_max != 0:
            problems.append(('lambda_max', "must be 0 for jigen"))
    else:
        if train.alpha_s != 0:
            problems.append(('alpha_s', f"must be 0 for {method}"))
        if method == 'sspda_pada':
            if train.lambda_max <= 0:
                problems.append(('lambda_max', "must be > 0 for sspda_pada"))
        elif train.lambda_max != 0:
            problems.append(('lambda_max', f"must be 0 for {method}"))
    wants_gamma = method in ('sspda_gamma', 'sspda_pada')
    if train.use_gamma != wants_gamma:
        problems.append(('use_gamma', f"must be {str(wants_gamma).lower()} for {method}"))
    return problems


def apply_method(method: str, train: TrainConfig) -> TrainConfig:
    if method not in METHOD_PRESETS:
        raise ParameterError(f"unknown method {method!r}")
    return replace(train, **METHOD_PRESETS[method])


@dataclass
class ExperimentConfig:
    method: str
    train: TrainConfig = field(default_factory=TrainConfig)
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    source_dir: Optional[str] = None
    target_dir: Optional[str] = None
    class_list: Tuple[str, ...] = ()
    output_dir: str = 'results'
    eval_crops: int = 1
    crop_fraction: float = 0.9
    repetitions: int = 3
    std: str = 'sample'
    n_jobs: int = 1

    @property
    def uses_directories(self) -> bool:
        return self.source_dir is not None

    def field_errors(self) -> List[Tuple[str, str]]:
        problems = method_errors(self.method, self.train) + self.train.field_errors()
        try:
            self.synthetic.validate()
        except ParameterError as e:
            problems.append(('synthetic', str(e)))
        if self.eval_crops < 1:
            problems.append(('eval_crops', f"must be >= 1, got {self.eval_crops}"))
        if not 0.0 < self.crop_fraction <= 1.0:
            problems.append(('crop_fraction', f"must lie in (0, 1], got {self.crop_fraction}"))
        if self.repetitions < 1:
            problems.append(('repetitions', f"must be >= 1, got {self.repetitions}"))
        if self.std not in STD_CONVENTIONS:
            problems.append(('std', f"must be one of {STD_CONVENTIONS}, got {self.std!r}"))
        if (self.source_dir is None) != (self.target_dir is None):
            problems.append(('target_dir' if self.target_dir is None else 'source_dir',
                             "source_dir and target_dir must be given together"))
        if self.source_dir is not None and not self.class_list:
            problems.append(('class_list', "required when loading directories"))
        return problems


####### value parsers

def _parse_bool(text: str) -> bool:
    lowered = text.lower()
    if lowered in ('true', '1', 'yes', 'y'):
        return True
    if lowered in ('false', '0', 'no', 'n'):
        return False
    raise ValueError(f"invalid boolean {text!r}")


def _parse_int_tuple(text: str) -> Tuple[int, ...]:
    return tuple(int(part) for part in text.replace(',', ' ').split())


def _parse_str_tuple(text: str) -> Tuple[str, ...]:
    return tuple(part.strip() for part in text.split(',') if part.strip())


# key -> (section, attribute, parser); keys listed twice feed both sections
_KEYS: Dict[str, List[Tuple[str, str, Callable[[str], Any]]]] = {}


def _key(name: str, section: str, parser: Callable[[str], Any], attribute: Optional[str] = None):
    _KEYS.setdefault(name, []).append((section, attribute or name, parser))


for _name in ('alpha_s', 'alpha_t', 'eta', 'beta', 'lambda_max', 'lr', 'momentum', 'weight_decay',
              'selection_w', 'val_fraction'):
    _key(_name, 'train', float)
for _name in ('num_permutations', 'batch_source', 'batch_target', 'epochs', 'seed', 'pool_window',
              'domain_hidden'):
    _key(_name, 'train', int)
for _name in ('use_gamma', 'hflip', 'progress'):
    _key(_name, 'train', _parse_bool)
for _name in ('lambda_granularity', 'target_weighting'):
    _key(_name, 'train', str)
for _name in ('conv_channels', 'conv_kernels'):
    _key(_name, 'train', _parse_int_tuple)
_key('P', 'train', int, 'num_permutations')
for _name in ('grid_side', 'image_side', 'channels', 'num_classes'):
    _key(_name, 'train', int)
    _key(_name, 'synthetic', int)
for _name in ('target_classes', 'samples_per_class'):
    _key(_name, 'synthetic', int)
for _name in ('color_shift', 'background_texture', 'noise_level'):
    _key(_name, 'synthetic', float)
_key('data_seed', 'synthetic', int, 'seed')
for _name in ('method', 'source_dir', 'target_dir', 'output_dir', 'std'):
    _key(_name, 'experiment', str)
for _name in ('eval_crops', 'repetitions', 'n_jobs'):
    _key(_name, 'experiment', int)
_key('crop_fraction', 'experiment', float)
_key('class_list', 'experiment', _parse_str_tuple)

CONFIG_KEYS = tuple(sorted(_KEYS))


def _targets(key: str) -> Tuple[Tuple[str, str], ...]:
    """Fields a key writes; an alias and its target share them."""
    return tuple(sorted((section, attribute) for section, attribute, _ in _KEYS[key]))


def _read_pairs(path: Path) -> List[Tuple[str, str, int]]:
    pairs = []
    seen: Dict[Tuple[Tuple[str, str], ...], Tuple[str, int]] = {}
    for number, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split('#', 1)[0].strip()
        if not line:
            continue
        if '=' not in line:
            raise ConfigError("expected 'key = value'", line=number)
        key, value = (part.strip() for part in line.split('=', 1))
        if key not in _KEYS:
            raise ConfigError("unknown key", key=key, line=number)
        targets = _targets(key)
        if targets in seen:
            first_key, first_line = seen[targets]
            raise ConfigError(f"duplicate key (first set as {first_key} on line {first_line})", key=key, line=number)
        seen[targets] = (key, number)
        pairs.append((key, value, number))
    return pairs


def parse_config(path: Union[str, Path], overrides: Optional[Dict[str, Any]] = None) -> ExperimentConfig:
    """
    Read a `key = value` experiment file.

    Absent keys take the defaults of TrainConfig / SyntheticSpec after the
    method preset is applied. `overrides` (from command-line flags) win over
    the file; their errors carry no line number.

    Args:
        path: experiment file ('#' starts a comment)
        overrides: raw values keyed like the file, e.g. {'seed': 3}

    Returns:
        ExperimentConfig: validated configuration
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    pairs = _read_pairs(path)
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in _KEYS:
            raise ConfigError("unknown key", key=key)
        pairs = [p for p in pairs if _targets(p[0]) != _targets(key)] + [(key, str(value), None)]

    lines = {key: number for key, _, number in pairs}
    parsed: Dict[str, Any] = {}
    for key, value, number in pairs:
        try:
            parsed[key] = [(section, attribute, parser(value)) for section, attribute, parser in _KEYS[key]]
        except ValueError as e:
            raise ConfigError(f"cannot parse {value!r} ({e})", key=key, line=number) from e

    if 'method' not in parsed:
        raise ConfigError("method missing", key='method')
    method = parsed['method'][0][2]
    if method not in METHOD_PRESETS:
        raise ConfigError(f"unknown method {method!r}, expected one of {', '.join(METHOD_PRESETS)}",
                          key='method', line=lines.get('method'))

    sections: Dict[str, Dict[str, Any]] = {'train': {}, 'synthetic': {}, 'experiment': {}}
    for assignments in parsed.values():
        for section, attribute, value in assignments:
            sections[section][attribute] = value

    train = replace(apply_method(method, TrainConfig()), **sections['train'])
    synthetic = replace(SyntheticSpec(), **sections['synthetic'])
    experiment = sections['experiment']
    experiment.pop('method')
    config = ExperimentConfig(method=method, train=train, synthetic=synthetic, **experiment)

    problems = config.field_errors()
    if problems:
        key, message = problems[0]
        attribute_to_key = {'num_permutations': 'P' if 'P' in lines else 'num_permutations'}
        key = attribute_to_key.get(key, key)
        raise ConfigError(message, key=key, line=lines.get(key))
    logger.info(f"loaded {method} configuration from {path}")
    return config
