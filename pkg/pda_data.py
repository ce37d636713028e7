"""
Partial-domain-shift data: a synthetic shape generator, a PPM/PGM directory
loader and the mixed source/target batch iterator.

The target label set is always a subset of the source label set. Target
labels are kept on the dataset for oracle evaluation only; batches handed to
the trainer never carry them.
"""
import logging
from dataclasses import dataclass, field
from math import ceil
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from sklearn.model_selection import train_test_split

from errors import DataFormatError, ParameterError

logger = logging.getLogger(__name__)

SHAPE_NAMES = ['bar', 'blob', 'ring', 'cross', 'checker', 'gradient']
NETPBM_SUFFIXES = {'.ppm', '.pgm', '.pnm'}
SOURCE, TARGET = 'source', 'target'

FOREGROUND_COLOR = np.array([0.9, 0.55, 0.25])
BACKGROUND_LEVEL = 0.1


@dataclass
class Sample:
    image: np.ndarray
    label: Optional[int]
    domain: str


@dataclass
class DomainDataset:
    """Images (n x c x h x w, values in [0, 1]) of one domain."""
    images: np.ndarray
    labels: Optional[np.ndarray]
    domain: str
    class_names: List[str] = field(default_factory=list)

    def __len__(self):
        return len(self.images)

    def __getitem__(self, index: int) -> Sample:
        label = None if self.labels is None else int(self.labels[index])
        return Sample(self.images[index], label, self.domain)

    def subset(self, indices) -> 'DomainDataset':
        indices = np.asarray(indices, dtype=np.int64)
        labels = None if self.labels is None else self.labels[indices]
        return DomainDataset(self.images[indices], labels, self.domain, list(self.class_names))


@dataclass
class SyntheticSpec:
    num_classes: int = 6
    target_classes: int = 3
    image_side: int = 48
    channels: int = 3
    samples_per_class: int = 200
    grid_side: int = 3
    color_shift: float = 1.0
    background_texture: float = 0.3
    noise_level: float = 0.05
    seed: int = 0

    def validate(self):
        if self.num_classes < 1:
            raise ParameterError(f"num_classes must be >= 1, got {self.num_classes}")
        if not 1 <= self.target_classes <= self.num_classes:
            raise ParameterError(f"target_classes must lie in [1, {self.num_classes}], got {self.target_classes}")
        if self.image_side % self.grid_side:
            raise ParameterError(f"image_side {self.image_side} is not divisible by grid_side {self.grid_side}")
        if self.channels not in (1, 3):
            raise ParameterError(f"channels must be 1 or 3, got {self.channels}")
        if self.samples_per_class < 1:
            raise ParameterError(f"samples_per_class must be >= 1, got {self.samples_per_class}")
        if not 0.0 <= self.color_shift <= 1.0:
            raise ParameterError(f"color_shift must lie in [0, 1], got {self.color_shift}")
        if self.background_texture < 0 or self.noise_level < 0:
            raise ParameterError("background_texture and noise_level must be >= 0")


@dataclass
class MixedBatch:
    source_images: np.ndarray
    source_labels: np.ndarray
    target_images: np.ndarray
    source_indices: np.ndarray
    target_indices: np.ndarray


def class_names_for(num_classes: int) -> List[str]:
    names = []
    for class_id in range(num_classes):
        variant = class_id // len(SHAPE_NAMES)
        name = SHAPE_NAMES[class_id % len(SHAPE_NAMES)]
        names.append(name if variant == 0 else f"{name}{variant}")
    return names


####### shape rendering

def _shape_mask(class_id: int, side: int, rng: np.random.Generator) -> np.ndarray:
    """Foreground coverage in [0, 1] of one randomly placed, scaled glyph."""
    kind = class_id % len(SHAPE_NAMES)
    variant = class_id // len(SHAPE_NAMES)
    coords = (np.arange(side) + 0.5) / side * 2.0 - 1.0
    y, x = np.meshgrid(coords, coords, indexing='ij')
    x = x - rng.uniform(-0.25, 0.25)
    y = y - rng.uniform(-0.25, 0.25)
    scale = rng.uniform(0.8, 1.2)
    theta = np.deg2rad(30.0 + 45.0 * variant + rng.uniform(-10.0, 10.0))
    u = x * np.cos(theta) + y * np.sin(theta)
    v = (-x * np.sin(theta) + y * np.cos(theta)) * (1.0 + 0.5 * variant)
    r = np.sqrt(u ** 2 + v ** 2)

    if kind == 0:
        mask = (np.abs(u) < 0.6 * scale) & (np.abs(v) < 0.12 * scale)
    elif kind == 1:
        return np.exp(-r ** 2 / (2.0 * (0.35 * scale) ** 2))
    elif kind == 2:
        mask = np.abs(r - 0.5 * scale) < 0.1 * scale
    elif kind == 3:
        mask = (((np.abs(u) < 0.6 * scale) & (np.abs(v) < 0.1 * scale))
                | ((np.abs(v) < 0.6 * scale) & (np.abs(u) < 0.1 * scale)))
    elif kind == 4:
        half = 0.55 * scale
        cell = 2.0 * half / 3.0
        inside = (np.abs(u) < half) & (np.abs(v) < half)
        parity = (np.floor((u + half) / cell) + np.floor((v + half) / cell)) % 2 == 0
        mask = inside & parity
    else:
        half = 0.5 * scale
        inside = (np.abs(u) < half) & (np.abs(v) < half)
        return np.where(inside, np.clip((u + half) / (2.0 * half), 0.0, 1.0), 0.0)
    return mask.astype(np.float64)


def _render_domain(spec: SyntheticSpec, class_ids: Sequence[int], domain: str,
                   rng: np.random.Generator) -> DomainDataset:
    side, channels = spec.image_side, spec.channels
    color = FOREGROUND_COLOR if channels == 3 else FOREGROUND_COLOR[:1]
    if domain == TARGET and channels == 3:
        color = (1.0 - spec.color_shift) * color + spec.color_shift * color[[2, 0, 1]]
    coords = np.arange(side) / side
    stripes = coords[:, None] + coords[None, :]

    images, labels = [], []
    for class_id in class_ids:
        for _ in range(spec.samples_per_class):
            mask = _shape_mask(class_id, side, rng)
            background = np.full((side, side), BACKGROUND_LEVEL)
            if domain == TARGET and spec.background_texture > 0:
                phase = rng.uniform(0.0, 2.0 * np.pi)
                background = background + spec.background_texture * 0.5 * (1.0 + np.sin(2.0 * np.pi * 4.0 * stripes + phase))
            image = background[None] * (1.0 - mask[None]) + color[:, None, None] * mask[None]
            if spec.noise_level > 0:
                image = image + rng.normal(0.0, spec.noise_level, size=image.shape)
            images.append(np.clip(image, 0.0, 1.0))
            labels.append(class_id)
    return DomainDataset(np.stack(images), np.array(labels, dtype=np.int64), domain,
                         class_names_for(spec.num_classes))


def generate_synthetic(spec: SyntheticSpec) -> Tuple[DomainDataset, DomainDataset]:
    """
    Render a source domain over all C classes and a target domain over the
    first k class ids. The target differs by a channel permutation of the
    foreground colour, a striped background texture and its own noise draw.
    """
    spec.validate()
    source_rng, target_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(spec.seed).spawn(2))
    source = _render_domain(spec, range(spec.num_classes), SOURCE, source_rng)
    target = _render_domain(spec, range(spec.target_classes), TARGET, target_rng)
    logger.info(f"generated {len(source)} source and {len(target)} target images "
                f"({spec.target_classes} of {spec.num_classes} classes in target)")
    return source, target


####### netpbm codec

def _header_tokens(raw: bytes, path: Path) -> Tuple[List[bytes], int]:
    tokens: List[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(raw):
            raise DataFormatError(f"{path}: truncated header")
        if raw[pos:pos + 1] == b'#':
            while pos < len(raw) and raw[pos:pos + 1] not in (b'\n', b'\r'):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace() and raw[pos:pos + 1] != b'#':
            pos += 1
        tokens.append(raw[start:pos])
    # exactly one whitespace byte separates maxval from the raster
    return tokens, pos + 1


def read_netpbm(path: Union[str, Path]) -> np.ndarray:
    """Decode a binary PPM (P6) or PGM (P5) file into a c x h x w array in [0, 1]."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise DataFormatError(f"{path}: cannot read file ({e})") from e
    tokens, offset = _header_tokens(raw, path)
    magic = tokens[0]
    if magic not in (b'P5', b'P6'):
        raise DataFormatError(f"{path}: unsupported format {magic!r}, expected P5 or P6")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as e:
        raise DataFormatError(f"{path}: malformed header ({e})") from e
    if width < 1 or height < 1 or not 1 <= maxval <= 65535:
        raise DataFormatError(f"{path}: invalid header values {width}x{height} maxval {maxval}")
    channels = 3 if magic == b'P6' else 1
    dtype = np.dtype(np.uint8) if maxval < 256 else np.dtype('>u2')
    expected = width * height * channels * dtype.itemsize
    body = raw[offset:offset + expected]
    if len(body) != expected:
        raise DataFormatError(f"{path}: raster has {len(body)} bytes, expected {expected}")
    pixels = np.frombuffer(body, dtype=dtype).reshape(height, width, channels)
    return pixels.transpose(2, 0, 1).astype(np.float64) / maxval


def write_netpbm(path: Union[str, Path], image: np.ndarray):
    """Encode a c x h x w image in [0, 1] as P6 (c = 3) or P5 (c = 1), maxval 255."""
    image = np.asarray(image)
    channels, height, width = image.shape
    magic = {3: b'P6', 1: b'P5'}.get(channels)
    if magic is None:
        raise DataFormatError(f"{path}: cannot encode {channels} channels")
    pixels = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)
    header = magic + f"\n{width} {height}\n255\n".encode('ascii')
    Path(path).write_bytes(header + pixels.tobytes())


def resize_nearest(image: np.ndarray, side: int) -> np.ndarray:
    """Nearest-neighbour resize of a c x h x w image to c x side x side."""
    _, height, width = image.shape
    rows = (np.arange(side) * height) // side
    cols = (np.arange(side) * width) // side
    return image[:, rows][:, :, cols]


def _match_channels(image: np.ndarray, channels: int, path: Path) -> np.ndarray:
    if image.shape[0] == channels:
        return image
    if image.shape[0] == 1:
        return np.repeat(image, channels, axis=0)
    if channels == 1:
        return image.mean(axis=0, keepdims=True)
    raise DataFormatError(f"{path}: cannot map {image.shape[0]} channels to {channels}")


def load_directory(path: Union[str, Path], class_list: Sequence[str], image_side: int = 48,
                   channels: int = 3, domain: str = SOURCE) -> DomainDataset:
    """
    Load one subdirectory of PPM/PGM images per class.

    Args:
        path: root directory holding one folder per class
        class_list: class folder names; class ids follow this order
        image_side: every image is resized (nearest neighbour) to this side
        channels: grayscale files are replicated to 3 channels when needed
        domain: tag stored on the dataset

    Returns:
        DomainDataset: possibly empty
    """
    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {root}")
    known = set(class_list)
    unknown = sorted(p.name for p in root.iterdir() if p.is_dir() and p.name not in known)
    if unknown:
        logger.warning(f"skipping class directories not in the class list: {', '.join(unknown)}")

    images, labels = [], []
    for class_id, name in enumerate(class_list):
        class_dir = root / name
        if not class_dir.is_dir():
            continue
        for file in sorted(class_dir.iterdir()):
            if file.suffix.lower() not in NETPBM_SUFFIXES:
                logger.warning(f"skipping unsupported file {file}")
                continue
            image = _match_channels(read_netpbm(file), channels, file)
            images.append(resize_nearest(image, image_side))
            labels.append(class_id)

    stacked = np.stack(images) if images else np.zeros((0, channels, image_side, image_side))
    logger.info(f"loaded {len(stacked)} {domain} images from {root}")
    return DomainDataset(stacked, np.array(labels, dtype=np.int64), domain, list(class_list))


def write_dataset(out_dir: Union[str, Path], datasets: Sequence[DomainDataset]) -> Path:
    """Write datasets as <domain>/<class>/<index>.ppm plus a manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    lines = []
    for dataset in datasets:
        if dataset.labels is None:
            raise ParameterError(f"cannot write unlabeled {dataset.domain} images into class folders")
        for index in range(len(dataset)):
            sample = dataset[index]
            relative = Path(sample.domain) / dataset.class_names[sample.label] / f"{index:05d}.ppm"
            (out_dir / relative).parent.mkdir(parents=True, exist_ok=True)
            write_netpbm(out_dir / relative, sample.image)
            lines.append(f"{relative.as_posix()} {sample.label} {sample.domain}")
    manifest = out_dir / 'manifest.txt'
    manifest.write_text('\n'.join(lines) + '\n')
    return manifest


####### batching and splits

def _epoch_order(size: int, needed: int, rng: np.random.Generator) -> np.ndarray:
    order = [rng.permutation(size)]
    while sum(len(o) for o in order) < needed:
        order.append(rng.permutation(size))
    return np.concatenate(order)[:needed]


def make_batches(source: DomainDataset, target: DomainDataset, batch_source: int, batch_target: int,
                 seed) -> Iterator[MixedBatch]:
    """
    Yield fixed-size mixed batches for one epoch.

    The epoch length is set by the domain needing more batches; the other
    domain is reshuffled and recycled. Target labels are never yielded.
    """
    if len(source) == 0 or len(target) == 0:
        raise ParameterError("make_batches needs nonempty source and target datasets")
    if batch_source < 1 or batch_target < 1:
        raise ParameterError(f"batch sizes must be >= 1, got {batch_source} and {batch_target}")
    if source.labels is None:
        raise ParameterError("source dataset must be labeled")
    rng = np.random.default_rng(seed)
    num_batches = max(ceil(len(source) / batch_source), ceil(len(target) / batch_target))
    source_order = _epoch_order(len(source), num_batches * batch_source, rng)
    target_order = _epoch_order(len(target), num_batches * batch_target, rng)
    for b in range(num_batches):
        s_idx = source_order[b * batch_source:(b + 1) * batch_source]
        t_idx = target_order[b * batch_target:(b + 1) * batch_target]
        yield MixedBatch(source.images[s_idx], source.labels[s_idx], target.images[t_idx], s_idx, t_idx)


def split_validation(dataset: DomainDataset, fraction: float, seed: int) -> Tuple[DomainDataset, DomainDataset]:
    """
    Stratified (train, validation) split holding out `fraction` of every class.
    Classes with a single sample stay in the training split.
    """
    if not 0.0 < fraction < 1.0:
        raise ParameterError(f"validation fraction must lie in (0, 1), got {fraction}")
    classes, counts = np.unique(dataset.labels, return_counts=True)
    singletons = classes[counts < 2]
    if len(singletons):
        logger.warning(f"classes {singletons.tolist()} have a single {dataset.domain} sample; "
                       f"kept out of the validation split")
    keep_idx = np.flatnonzero(np.isin(dataset.labels, singletons))
    split_idx = np.flatnonzero(~np.isin(dataset.labels, singletons))
    if len(split_idx) < 2:
        raise ParameterError(f"cannot hold out a validation split from {len(dataset)} samples")

    num_classes = len(classes) - len(singletons)
    held_out = min(max(num_classes, int(ceil(fraction * len(split_idx)))), len(split_idx) - num_classes)
    if held_out < 1:
        raise ParameterError(f"cannot hold out a validation split from {len(dataset)} samples")
    train_idx, val_idx = train_test_split(split_idx, test_size=held_out,
                                          stratify=dataset.labels[split_idx], random_state=seed)
    train_idx = np.concatenate([train_idx, keep_idx])
    return dataset.subset(np.sort(train_idx)), dataset.subset(np.sort(val_idx))


def random_hflip(images: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    flip = rng.random(len(images)) < 0.5
    out = images.copy()
    out[flip] = out[flip][..., ::-1]
    return out


def random_crop_resize(image: np.ndarray, fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Crop a square of `fraction` of the side at a random offset and resize it back."""
    _, height, width = image.shape
    crop = max(1, int(round(fraction * min(height, width))))
    top = int(rng.integers(0, height - crop + 1))
    left = int(rng.integers(0, width - crop + 1))
    patch = image[:, top:top + crop, left:left + crop]
    rows = (np.arange(height) * crop) // height
    cols = (np.arange(width) * crop) // width
    return patch[:, rows][:, :, cols]
