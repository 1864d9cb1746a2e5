"""Spatial operators: downsampling, index upsampling, partitioning, composition.

All orderings are scan-line (row-major) and deterministic, so every operation
is bit-reproducible across runs. Divisibility is enforced strictly; callers
that need padding must pad before calling in.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .tensor import ImageTensor


@dataclass(frozen=True)
class IndexStructure:
    """An ordered collection of (row, col) spatial coordinates.

    grid_shape is set only when the coordinates form a dense rectangular
    block enumerated in scan-line order.
    """

    coords: np.ndarray  # (k, 2) int64
    grid_shape: tuple[int, int] | None = None

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.int64)
        if coords.ndim != 2 or coords.shape[1] != 2:
            raise ShapeError(f"coords must be (k, 2), got {coords.shape}")
        if coords.size and coords.min() < 0:
            raise ShapeError("coordinates must be nonnegative")
        if len(np.unique(coords, axis=0)) != len(coords):
            raise ShapeError("index structure contains duplicate coordinates")
        object.__setattr__(self, "coords", coords)
        if self.grid_shape is not None:
            gh, gw = self.grid_shape
            if len(coords) != gh * gw:
                raise ShapeError(f"grid_shape {self.grid_shape} does not match {len(coords)} coords")
            r0, c0 = coords[0]
            expected = _block_coords(int(r0), int(c0), gh, gw)
            if not np.array_equal(coords, expected):
                raise ShapeError("coords are not a scan-line rectangular block")

    def __len__(self) -> int:
        return len(self.coords)

    def flat(self, width: int) -> np.ndarray:
        """Flat scan-line indices r * width + c for a grid of the given width."""
        return self.coords[:, 0] * width + self.coords[:, 1]

    def as_set(self) -> set[tuple[int, int]]:
        return {(int(r), int(c)) for r, c in self.coords}

    @classmethod
    def from_pairs(cls, pairs, grid_shape=None) -> "IndexStructure":
        arr = np.asarray(list(pairs), dtype=np.int64).reshape(-1, 2)
        return cls(arr, grid_shape)

    @classmethod
    def from_flat(cls, flat_indices, width: int, grid_shape=None) -> "IndexStructure":
        flat = np.asarray(flat_indices, dtype=np.int64)
        return cls(np.stack([flat // width, flat % width], axis=1), grid_shape)

    @classmethod
    def full_grid(cls, h: int, w: int) -> "IndexStructure":
        return cls(_block_coords(0, 0, h, w), (h, w))


def _block_coords(r0: int, c0: int, gh: int, gw: int) -> np.ndarray:
    rr, cc = np.meshgrid(np.arange(r0, r0 + gh), np.arange(c0, c0 + gw), indexing="ij")
    return np.stack([rr.ravel(), cc.ravel()], axis=1).astype(np.int64)


@dataclass(frozen=True)
class Partitioning:
    """m cells of (tensor, indices) covering a source tensor disjointly."""

    cells: tuple[tuple[ImageTensor, IndexStructure], ...]
    source_shape: tuple[int, int, int]
    grid: tuple[int, int]
    cell_shape: tuple[int, int]

    @property
    def m(self) -> int:
        return len(self.cells)


def downsample(x: ImageTensor, d: int) -> ImageTensor:
    """Average-pool by factor d: each output pixel is the mean of its d x d block.

    Accumulation runs over block offsets in scan-line order, so results are
    bit-identical to a scalar loop that sums the block the same way.
    """
    if d < 1:
        raise ShapeError(f"downsampling factor must be positive, got {d}")
    if x.h % d or x.w % d:
        raise ShapeError(f"downsampling factor {d} does not divide shape {x.h}x{x.w}")
    if d == 1:
        return ImageTensor(x.data.copy())
    acc = np.zeros((x.c, x.h // d, x.w // d), dtype=x.dtype)
    for dh in range(d):
        for dw in range(d):
            acc += x.data[:, dh::d, dw::d]
    acc /= np.asarray(d * d, dtype=x.dtype)
    return ImageTensor(acc)


def upsample_indices(indices: IndexStructure, d: int) -> IndexStructure:
    """Expand every (i, j) to the d x d block {(i*d + dh, j*d + dw)}.

    Ordering is input order on the outside, (dh, dw) scan-line on the inside;
    output size is exactly len(indices) * d**2.
    """
    if d < 1:
        raise ShapeError(f"upsampling factor must be positive, got {d}")
    if d == 1:
        return IndexStructure(indices.coords.copy(), indices.grid_shape)
    deltas = _block_coords(0, 0, d, d)
    out = (indices.coords[:, None, :] * d + deltas[None, :, :]).reshape(-1, 2)
    return IndexStructure(out)


def partition_square(x: ImageTensor, m_h: int, m_w: int) -> Partitioning:
    """Clip a tensor into an m_h x m_w grid of equal cells, scan-line ordered."""
    cells_idx = partition_grid_indices(x.h, x.w, m_h, m_w)
    ch, cw = x.h // m_h, x.w // m_w
    cells = []
    for idx in cells_idx:
        r0, c0 = idx.coords[0]
        cell = ImageTensor(np.ascontiguousarray(x.data[:, r0 : r0 + ch, c0 : c0 + cw]))
        cells.append((cell, idx))
    return Partitioning(tuple(cells), x.shape, (m_h, m_w), (ch, cw))


def partition_grid_indices(h: int, w: int, m_h: int, m_w: int) -> list[IndexStructure]:
    """The index sets of the square partitioning of an h x w grid."""
    if m_h < 1 or m_w < 1:
        raise ShapeError(f"partition grid must be positive, got {m_h}x{m_w}")
    if h % m_h or w % m_w:
        raise ShapeError(f"partition grid {m_h}x{m_w} does not divide shape {h}x{w}")
    ch, cw = h // m_h, w // m_w
    out = []
    for gr in range(m_h):
        for gc in range(m_w):
            out.append(IndexStructure(_block_coords(gr * ch, gc * cw, ch, cw), (ch, cw)))
    return out


def compose(p: Partitioning) -> ImageTensor:
    """Scatter cells back by their indices; inverse of partition_square.

    Cell order is irrelevant: placement is governed entirely by each cell's
    index structure. Overlaps, gaps, and shape mismatches are rejected.
    """
    c, h, w = p.source_shape
    out = None
    filled = np.zeros((h, w), dtype=bool)
    for cell, idx in p.cells:
        if cell.c != c:
            raise ShapeError(f"cell has {cell.c} channels, source has {c}")
        if cell.h * cell.w != len(idx):
            raise ShapeError(f"cell shape {cell.h}x{cell.w} does not match {len(idx)} indices")
        rows, cols = idx.coords[:, 0], idx.coords[:, 1]
        if rows.max() >= h or cols.max() >= w:
            raise ShapeError("cell indices fall outside the source shape")
        if filled[rows, cols].any():
            raise ShapeError("cells overlap: an index is covered twice")
        filled[rows, cols] = True
        if out is None:
            out = np.empty((c, h, w), dtype=cell.dtype)
        out[:, rows, cols] = cell.data.reshape(c, -1)
    if out is None or not filled.all():
        raise ShapeError("cells do not cover the full source index set")
    return ImageTensor(out)


def consistent_index_sets(low_cells, high_cells, d: int) -> bool:
    """Whether upsampling each low-resolution cell index set reproduces, as a
    set, the corresponding high-resolution cell index set."""
    if len(low_cells) != len(high_cells):
        return False
    for lo, hi in zip(low_cells, high_cells):
        if upsample_indices(lo, d).as_set() != hi.as_set():
            return False
    return True


def check_consistency(d: int, m_h: int, m_w: int, shape_low: tuple[int, int]) -> bool:
    """Whether the square m_h x m_w partitioning is consistent across factor d.

    True iff for every cell the upsampled low-resolution index set equals the
    high-resolution index set obtained by partitioning the d-times larger
    grid with the same cell arrangement. Non-divisible combinations are not
    partitionable at all and report False.
    """
    h_lo, w_lo = shape_low
    try:
        low = partition_grid_indices(h_lo, w_lo, m_h, m_w)
        high = partition_grid_indices(h_lo * d, w_lo * d, m_h, m_w)
    except ShapeError:
        return False
    return consistent_index_sets(low, high, d)
