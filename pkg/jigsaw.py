"""
Jigsaw puzzle pretext task.
Selects tile permutations by maximal reciprocal Hamming distance and
scrambles image tiles with them.
"""
import logging
from dataclasses import dataclass
from functools import lru_cache
from itertools import permutations
from math import factorial
from pathlib import Path
from typing import List, Sequence, Tuple, Union

import numpy as np

from errors import DataFormatError, DimensionError, ParameterError

logger = logging.getLogger(__name__)

SUPPORTED_GRID_SIDES = (2, 3)


@dataclass
class PermutationSet:
    """P permutations of the g*g tile indices; row 0 is the identity."""
    grid_side: int
    perms: np.ndarray

    def __post_init__(self):
        self.perms = np.asarray(self.perms, dtype=np.int64)
        tiles = self.grid_side * self.grid_side
        if self.perms.ndim != 2 or self.perms.shape[1] != tiles:
            raise DimensionError(f"permutations must be P x {tiles}, got shape {self.perms.shape}")
        reference = np.arange(tiles)
        for row in self.perms:
            if not np.array_equal(np.sort(row), reference):
                raise ParameterError(f"{row.tolist()} is not a permutation of 0..{tiles - 1}")
        if len({tuple(row) for row in self.perms.tolist()}) != len(self.perms):
            raise ParameterError("permutation set contains duplicates")

    def __len__(self):
        return len(self.perms)


@dataclass
class TileGrid:
    """g*g image patches in row-major order, each c x (h/g) x (w/g)."""
    grid_side: int
    tiles: np.ndarray

    def reassemble(self) -> np.ndarray:
        g = self.grid_side
        _, channels, tile_h, tile_w = self.tiles.shape
        return (self.tiles.reshape(g, g, channels, tile_h, tile_w)
                .transpose(2, 0, 3, 1, 4)
                .reshape(channels, g * tile_h, g * tile_w))


def hamming(a: Sequence[int], b: Sequence[int]) -> int:
    """Number of positions where two permutations place different tiles."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise DimensionError(f"permutations differ in length: {a.shape} vs {b.shape}")
    return int(np.count_nonzero(a != b))


@lru_cache(maxsize=None)
def _all_permutations(size: int) -> np.ndarray:
    # itertools yields lexicographic order, identity first
    return np.array(list(permutations(range(size))), dtype=np.int8)


def select_permutations(grid_side: int, count: int, seed: int = 0) -> PermutationSet:
    """
    Greedy max-min Hamming selection over the full enumeration.

    Starts from the identity and repeatedly adds the permutation whose
    minimum distance to the selected set is largest, lexicographically
    smallest on ties. The result depends only on (grid_side, count);
    seed is accepted for sampling modes and unused here.

    Args:
        grid_side: tiles per side, 2 or 3
        count: number P of permutations to return
        seed: ignored by the exact enumeration

    Returns:
        PermutationSet: identity first, then the greedy picks in order
    """
    if grid_side not in SUPPORTED_GRID_SIDES:
        raise ParameterError(f"grid side must be one of {SUPPORTED_GRID_SIDES}, got {grid_side}")
    tiles = grid_side * grid_side
    available = factorial(tiles)
    if not 1 <= count <= available:
        raise ParameterError(f"P must lie in [1, {available}] for a {grid_side}x{grid_side} grid, got {count}")

    candidates = _all_permutations(tiles)
    chosen = [0]
    min_distance = np.count_nonzero(candidates != candidates[0], axis=1)
    min_distance[0] = -1
    while len(chosen) < count:
        # argmax returns the first maximum, i.e. the lexicographically smallest
        pick = int(np.argmax(min_distance))
        chosen.append(pick)
        min_distance = np.minimum(min_distance, np.count_nonzero(candidates != candidates[pick], axis=1))
        min_distance[chosen] = -1

    perms = candidates[chosen].astype(np.int64)
    logger.debug(f"selected {count} permutations for a {grid_side}x{grid_side} grid")
    return PermutationSet(grid_side, perms)


def min_pairwise_distance(perm_set: PermutationSet) -> int:
    perms = perm_set.perms
    if len(perms) < 2:
        return perms.shape[1]
    distances = np.count_nonzero(perms[:, None, :] != perms[None, :, :], axis=2)
    np.fill_diagonal(distances, perms.shape[1] + 1)
    return int(distances.min())


def save_permutations(path: Union[str, Path], perm_set: PermutationSet):
    """Write "g P" followed by one space-separated permutation per line."""
    lines = [f"{perm_set.grid_side} {len(perm_set)}"]
    lines += [' '.join(str(int(i)) for i in row) for row in perm_set.perms]
    Path(path).write_text('\n'.join(lines) + '\n')


def load_permutations(path: Union[str, Path]) -> PermutationSet:
    lines = [line for line in Path(path).read_text().splitlines() if line.strip()]
    if not lines:
        raise DataFormatError(f"{path}: empty permutation file")
    try:
        grid_side, count = (int(v) for v in lines[0].split())
        rows = [[int(v) for v in line.split()] for line in lines[1:]]
    except ValueError as e:
        raise DataFormatError(f"{path}: {e}") from e
    if len(rows) != count:
        raise DataFormatError(f"{path}: header announces {count} permutations, found {len(rows)}")
    return PermutationSet(grid_side, np.array(rows, dtype=np.int64).reshape(count, grid_side * grid_side))


def split_tiles(image: np.ndarray, grid_side: int) -> TileGrid:
    """Cut a c x h x w image into grid_side**2 row-major tiles."""
    image = np.asarray(image)
    if image.ndim != 3:
        raise DimensionError(f"expected a c x h x w image, got shape {image.shape}")
    channels, height, width = image.shape
    if grid_side < 1 or height % grid_side or width % grid_side:
        raise DimensionError(f"grid side {grid_side} does not divide image size {height}x{width}")
    tile_h, tile_w = height // grid_side, width // grid_side
    tiles = (image.reshape(channels, grid_side, tile_h, grid_side, tile_w)
             .transpose(1, 3, 0, 2, 4)
             .reshape(grid_side * grid_side, channels, tile_h, tile_w))
    return TileGrid(grid_side, tiles)


def shuffle_image(image: np.ndarray, perm_set: PermutationSet, perm_index: int) -> np.ndarray:
    """Output tile i is input tile perms[perm_index][i]."""
    if not 0 <= perm_index < len(perm_set):
        raise ParameterError(f"permutation index {perm_index} outside [0, {len(perm_set)})")
    grid = split_tiles(image, perm_set.grid_side)
    return TileGrid(grid.grid_side, grid.tiles[perm_set.perms[perm_index]]).reassemble()


def maybe_shuffle(image: np.ndarray, perm_set: PermutationSet, beta: float,
                  rng: np.random.Generator) -> Tuple[np.ndarray, int]:
    """
    Keep the image with probability beta, otherwise scramble it with a
    permutation drawn uniformly from [1, P).
    """
    if not 0.0 <= beta <= 1.0:
        raise ParameterError(f"beta must lie in [0, 1], got {beta}")
    if rng.random() < beta or len(perm_set) < 2:
        return image, 0
    perm_index = int(rng.integers(1, len(perm_set)))
    return shuffle_image(image, perm_set, perm_index), perm_index


def shuffle_batch(images: np.ndarray, perm_set: PermutationSet, beta: float,
                  rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    shuffled: List[np.ndarray] = []
    indices: List[int] = []
    for image in images:
        out, index = maybe_shuffle(image, perm_set, beta, rng)
        shuffled.append(out)
        indices.append(index)
    return np.stack(shuffled), np.array(indices, dtype=np.int64)
