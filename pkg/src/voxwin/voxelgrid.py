"""Hierarchical sparse voxel grids and window partitions.

Voxel coordinates are signed integers ``floor(position / voxel_size)``.  Each
occupied cell keeps one representative point: chosen uniformly at random among
the cell's points at the finest level (one PRNG draw per cell, cells visited
in lexicographic coordinate order), and at coarser levels the child
representative closest to the centroid of the child representatives (ties
broken by the lexicographically smallest child coordinate).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .pointcloud import PointCloud


@dataclass
class SparseVoxelLevel:
    """One resolution level: occupied cells only, in lexicographic order."""

    level: int
    voxel_size: float
    coords: np.ndarray  # (K, 3) int64
    rep_points: np.ndarray  # (K, 3) float64
    rep_signals: np.ndarray  # (K, m) float64
    rep_indices: np.ndarray  # (K,) int64 row of the representative in the raw cloud
    children: list = field(default_factory=list)  # per cell: (n_i, 3) int64 child coords
    _coord_map: dict | None = field(default=None, repr=False, compare=False)

    @property
    def num_voxels(self) -> int:
        return self.coords.shape[0]

    @property
    def num_channels(self) -> int:
        return self.rep_signals.shape[1]

    def coord_map(self) -> dict:
        """coord tuple -> row index."""
        if self._coord_map is None:
            self._coord_map = {tuple(c): i for i, c in enumerate(self.coords)}
        return self._coord_map

    def centers(self) -> np.ndarray:
        return (self.coords.astype(np.float64) + 0.5) * self.voxel_size


@dataclass
class VoxelHierarchy:
    levels: list[SparseVoxelLevel]
    strides: list[int]

    @property
    def num_levels(self) -> int:
        return len(self.levels)


@dataclass
class WindowPartition:
    """Non-overlapping M^3 windows over one level's occupied voxels."""

    window_size: int
    shifted: bool
    window_height: float  # M * voxel_size, meters
    windows: dict  # window coord tuple -> (n,) int64 voxel row indices, lexicographic

    @property
    def num_windows(self) -> int:
        return len(self.windows)


def voxelize(pc: PointCloud, voxel_size: float, seed: int) -> SparseVoxelLevel:
    """Bin points into occupied cells and pick one representative per cell."""
    if voxel_size <= 0:
        raise ValueError("voxel_size must be positive")
    if pc.num_points == 0:
        raise ValueError("cannot voxelize an empty point cloud")
    coords = np.floor(pc.positions / voxel_size).astype(np.int64)
    # np.unique sorts rows lexicographically, which fixes the cell order.
    unique, inverse = np.unique(coords, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    members: list[list[int]] = [[] for _ in range(unique.shape[0])]
    for point_idx, cell_idx in enumerate(inverse):
        members[cell_idx].append(point_idx)
    rng = np.random.default_rng(seed)
    rep_rows = np.empty(unique.shape[0], dtype=np.int64)
    for cell_idx, point_rows in enumerate(members):
        rep_rows[cell_idx] = point_rows[rng.integers(len(point_rows))]
    return SparseVoxelLevel(
        level=1,
        voxel_size=float(voxel_size),
        coords=unique,
        rep_points=pc.positions[rep_rows].copy(),
        rep_signals=pc.signals[rep_rows].copy(),
        rep_indices=rep_rows,
        children=[np.empty((0, 3), dtype=np.int64)] * unique.shape[0],
    )


def coarsen(level: SparseVoxelLevel, stride: int) -> SparseVoxelLevel:
    """One coarsening step: parent coordinate = floor(child coord / stride)."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    parent_coords = np.floor_divide(level.coords, stride)
    unique, inverse = np.unique(parent_coords, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    n_parent = unique.shape[0]
    rep_points = np.empty((n_parent, 3), dtype=np.float64)
    rep_signals = np.empty((n_parent, level.rep_signals.shape[1]), dtype=np.float64)
    rep_indices = np.empty(n_parent, dtype=np.int64)
    children: list[np.ndarray] = []
    for p in range(n_parent):
        rows = np.flatnonzero(inverse == p)
        reps = level.rep_points[rows]
        centroid = reps.mean(axis=0)
        dist = np.linalg.norm(reps - centroid, axis=1)
        best = dist.min()
        tied = rows[dist <= best + 0.0]
        if tied.size > 1:
            # smallest child coordinate, lexicographic
            order = np.lexsort(
                (level.coords[tied, 2], level.coords[tied, 1], level.coords[tied, 0])
            )
            chosen = tied[order[0]]
        else:
            chosen = tied[0]
        rep_points[p] = level.rep_points[chosen]
        rep_signals[p] = level.rep_signals[chosen]
        rep_indices[p] = level.rep_indices[chosen]
        children.append(level.coords[rows].copy())
    return SparseVoxelLevel(
        level=level.level + 1,
        voxel_size=level.voxel_size * stride,
        coords=unique,
        rep_points=rep_points,
        rep_signals=rep_signals,
        rep_indices=rep_indices,
        children=children,
    )


def build_hierarchy(base: SparseVoxelLevel, levels: int, strides) -> VoxelHierarchy:
    strides = [int(s) for s in strides]
    if levels < 1:
        raise ValueError("levels must be >= 1")
    if len(strides) != levels - 1:
        raise ValueError(f"need {levels - 1} strides for {levels} levels, got {len(strides)}")
    out = [base]
    for stride in strides:
        out.append(coarsen(out[-1], stride))
    return VoxelHierarchy(levels=out, strides=strides)


def partition_windows(level: SparseVoxelLevel, window_size: int, shifted: bool) -> WindowPartition:
    """Assign voxel at coord c to window floor((c + offset) / M)."""
    if window_size < 1:
        raise ValueError("window size must be >= 1")
    offset = window_size // 2 if shifted else 0
    wcoords = np.floor_divide(level.coords + offset, window_size)
    # lexicographic order of voxel coords inside each window
    order = np.lexsort((level.coords[:, 2], level.coords[:, 1], level.coords[:, 0]))
    windows: dict = {}
    for row in order:
        key = tuple(wcoords[row])
        windows.setdefault(key, []).append(row)
    windows = {k: np.array(v, dtype=np.int64) for k, v in windows.items()}
    return WindowPartition(
        window_size=window_size,
        shifted=shifted,
        window_height=window_size * level.voxel_size,
        windows=windows,
    )


def write_hierarchy_dump(hier: VoxelHierarchy, fh) -> None:
    """Per level, one line per cell: ``level cx cy cz rx ry rz``."""
    for lvl in hier.levels:
        for coord, rep in zip(lvl.coords, lvl.rep_points):
            fh.write(
                f"{lvl.level} {coord[0]} {coord[1]} {coord[2]} "
                f"{rep[0]:.10g} {rep[1]:.10g} {rep[2]:.10g}\n"
            )
