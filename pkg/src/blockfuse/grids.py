"""Gridded spatial domains, disjoint block partitions and field containers.

Conventions fixed here and relied on by the file formats:

- locations are unit-indexed lattice points ``(1 + ix*spacing, 1 + iy*spacing)``
  stored row-major (x varies fastest);
- partitions are exact axis-aligned tilings, blocks ordered row-major by tile
  position, indices within a block row-major.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

_DACF_MAGIC = b"DACF"
_DACF_VERSION = 1


@dataclass(frozen=True)
class GridDomain:
    """Regular lattice of nx*ny locations with a fixed grid step."""

    nx: int
    ny: int
    spacing: float = 1.0

    def __post_init__(self):
        if self.nx < 1 or self.ny < 1:
            raise ValueError(f"grid dimensions must be positive, got {self.nx}x{self.ny}")
        if not (self.spacing > 0):
            raise ValueError(f"grid spacing must be positive, got {self.spacing}")

    @property
    def d(self) -> int:
        return self.nx * self.ny

    def locations(self) -> np.ndarray:
        """(d, 2) array of coordinates in row-major order."""
        ix = np.arange(self.nx)
        iy = np.arange(self.ny)
        xx, yy = np.meshgrid(1.0 + ix * self.spacing, 1.0 + iy * self.spacing)
        return np.column_stack([xx.ravel(), yy.ravel()])


@dataclass(frozen=True, eq=False)
class BlockPartition:
    """Exact tiling of a parent grid into K disjoint rectangular blocks."""

    parent: GridDomain
    block_nx: int
    block_ny: int
    index_map: tuple = field(repr=False)

    @property
    def K(self) -> int:
        return len(self.index_map)

    @property
    def block_domain(self) -> GridDomain:
        return GridDomain(self.block_nx, self.block_ny, self.parent.spacing)


@dataclass(frozen=True, eq=False)
class Field:
    """One real-valued observation of the process on a grid, row-major."""

    domain: GridDomain
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.shape != (self.domain.d,):
            raise ValueError(f"expected {self.domain.d} values, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("field values must be finite")
        object.__setattr__(self, "values", v)

    def as_image(self) -> np.ndarray:
        """(ny, nx) view of the values."""
        return self.values.reshape(self.domain.ny, self.domain.nx)


def make_grid(nx: int, ny: int, spacing: float = 1.0) -> GridDomain:
    return GridDomain(int(nx), int(ny), float(spacing))


def pairwise_distances(domain: GridDomain) -> np.ndarray:
    """Symmetric d x d matrix of Euclidean distances between locations."""
    loc = domain.locations()
    diff = loc[:, None, :] - loc[None, :, :]
    return np.hypot(diff[..., 0], diff[..., 1])


def partition(domain: GridDomain, block_nx: int, block_ny: int) -> BlockPartition:
    """Tile the domain into (nx/block_nx)*(ny/block_ny) disjoint blocks."""
    if block_nx < 1 or block_ny < 1:
        raise ValueError("block dimensions must be positive")
    if domain.nx % block_nx != 0:
        raise ValueError(f"block_nx={block_nx} does not divide nx={domain.nx}")
    if domain.ny % block_ny != 0:
        raise ValueError(f"block_ny={block_ny} does not divide ny={domain.ny}")
    tiles_x = domain.nx // block_nx
    tiles_y = domain.ny // block_ny
    index_map = []
    for ty in range(tiles_y):
        for tx in range(tiles_x):
            rows = ty * block_ny + np.arange(block_ny)
            cols = tx * block_nx + np.arange(block_nx)
            idx = (rows[:, None] * domain.nx + cols[None, :]).ravel()
            index_map.append(idx)
    return BlockPartition(domain, block_nx, block_ny, tuple(index_map))


def extract_block(field: Field, part: BlockPartition, k: int) -> Field:
    """Field restricted to block k (1-based), on its own block-sized grid."""
    if field.domain != part.parent:
        raise ValueError("field domain does not match the partition parent")
    if not 1 <= k <= part.K:
        raise ValueError(f"block index {k} out of range 1..{part.K}")
    return Field(part.block_domain, field.values[part.index_map[k - 1]])


def scatter_blocks(blocks: list[Field], part: BlockPartition) -> Field:
    """Inverse of extract_block over all k: reassemble the parent field."""
    if len(blocks) != part.K:
        raise ValueError(f"expected {part.K} blocks, got {len(blocks)}")
    values = np.empty(part.parent.d)
    for k, blk in enumerate(blocks):
        values[part.index_map[k]] = blk.values
    return Field(part.parent, values)


def write_field(field: Field, path) -> None:
    """Serialize a field in the DACF v1 format."""
    with open(path, "wb") as fh:
        fh.write(_DACF_MAGIC)
        fh.write(struct.pack("<III", _DACF_VERSION, field.domain.nx, field.domain.ny))
        fh.write(struct.pack("<d", field.domain.spacing))
        fh.write(field.values.astype("<f8").tobytes())


def read_field(path) -> Field:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _DACF_MAGIC:
            raise ValueError(f"{path}: not a DACF file (magic {magic!r})")
        version, nx, ny = struct.unpack("<III", fh.read(12))
        if version != _DACF_VERSION:
            raise ValueError(f"{path}: unsupported DACF version {version}")
        (spacing,) = struct.unpack("<d", fh.read(8))
        domain = GridDomain(nx, ny, spacing)
        values = np.frombuffer(fh.read(8 * domain.d), dtype="<f8")
        if values.size != domain.d:
            raise ValueError(f"{path}: truncated payload")
        return Field(domain, values.copy())
