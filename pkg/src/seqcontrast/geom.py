"""Point-cloud primitives: similarity transforms, voxelization, 2D occupancy maps.

All geometry is float64 internally and in meters. The up axis is +z.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyInputError

# Provenance ids at or above this value identify object points; below, scene
# points. Keeps the two id ranges disjoint within one composited frame while
# still fitting the u32 on-disk encoding.
OBJECT_ID_OFFSET = 1 << 31

DEFAULT_MAP_CELL = 0.10     # 2D occupancy map resolution (m)
FLOOR_BAND = 0.20           # max height above floor for a traversable cell (m)
FLOOR_QUANTILE = 0.25       # fraction of lowest columns used for the floor fit


@dataclass(frozen=True)
class PointCloud:
    """Points with optional per-point provenance ids.

    Provenance identifies the canonical source point (scene or object) so that
    exact correspondences across frames can be recovered; ``None`` for raw
    input clouds.
    """

    points: np.ndarray                   # (N, 3) float64
    provenance: np.ndarray | None = None  # (N,) int64 or None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must be (N, 3), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("points contain non-finite coordinates")
        object.__setattr__(self, "points", pts)
        if self.provenance is not None:
            prov = np.asarray(self.provenance, dtype=np.int64)
            if prov.shape != (len(pts),):
                raise ValueError("provenance length must match points")
            object.__setattr__(self, "provenance", prov)

    def __len__(self) -> int:
        return len(self.points)


def rotation_about_up(yaw: float) -> np.ndarray:
    """3x3 rotation by ``yaw`` radians about the +z axis."""
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class SimilarityTransform:
    """p' = scale * R @ p + translation."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        if R.shape == ():  # yaw shorthand
            R = rotation_about_up(float(self.rotation))
        if R.shape != (3, 3):
            raise ValueError("rotation must be a 3x3 matrix or a yaw scalar")
        if abs(np.linalg.det(R) - 1.0) > 1e-9 or not np.allclose(R @ R.T, np.eye(3), atol=1e-9):
            raise ValueError("rotation must be orthonormal with determinant +1")
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))
        object.__setattr__(self, "scale", float(self.scale))

    @classmethod
    def from_yaw(cls, yaw: float, translation=(0.0, 0.0, 0.0), scale: float = 1.0) -> "SimilarityTransform":
        return cls(rotation_about_up(yaw), np.asarray(translation, dtype=np.float64), scale)

    @classmethod
    def identity(cls) -> "SimilarityTransform":
        return cls()

    @property
    def yaw(self) -> float:
        return float(np.arctan2(self.rotation[1, 0], self.rotation[0, 0]))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * points @ self.rotation.T + self.translation

    def inverse(self) -> "SimilarityTransform":
        Rinv = self.rotation.T
        return SimilarityTransform(Rinv, -(Rinv @ self.translation) / self.scale, 1.0 / self.scale)

    def compose(self, other: "SimilarityTransform") -> "SimilarityTransform":
        """Transform equivalent to applying ``other`` first, then ``self``."""
        return SimilarityTransform(
            self.rotation @ other.rotation,
            self.scale * self.rotation @ other.translation + self.translation,
            self.scale * other.scale,
        )

    def is_identity(self, tol: float = 0.0) -> bool:
        return (
            np.all(np.abs(self.rotation - np.eye(3)) <= tol)
            and np.all(np.abs(self.translation) <= tol)
            and abs(self.scale - 1.0) <= tol
        )


def apply_transform(cloud: PointCloud, transform: SimilarityTransform) -> PointCloud:
    """Apply a similarity transform to every point; provenance is preserved."""
    return PointCloud(transform.apply(cloud.points), cloud.provenance)


def voxel_indices(points: np.ndarray, cell_size: float) -> np.ndarray:
    """Integer cell index floor(p / cell_size) per point, shape (N, d)."""
    return np.floor(np.asarray(points, dtype=np.float64) / cell_size).astype(np.int64)


def voxelize(cloud: PointCloud, cell_size: float) -> set[tuple[int, int, int]]:
    """Set of unique occupied integer cells at ``cell_size`` resolution."""
    if cell_size <= 0:
        raise ValueError("cell_size must be positive")
    if len(cloud) == 0:
        raise EmptyInputError("cannot voxelize an empty cloud")
    idx = voxel_indices(cloud.points, cell_size)
    return {tuple(int(v) for v in row) for row in np.unique(idx, axis=0)}


@dataclass
class OccupancyMap2D:
    """Per-column summary of occupied voxels, used to find valid placements.

    ``accumulation[cell]`` counts distinct occupied 3D voxels in the column;
    ``max_height[cell]`` is the top of the highest occupied voxel. The floor
    height is the mean of the lowest-voxel heights over the quarter of columns
    with the lowest minima (robust against furniture).
    """

    origin: np.ndarray
    cell_size: float
    accumulation: dict[tuple[int, int], int]
    max_height: dict[tuple[int, int], float]
    min_height: dict[tuple[int, int], float]
    floor_height: float

    def cell_of(self, xy: np.ndarray) -> tuple[int, int]:
        i = int(np.floor((xy[0] - self.origin[0]) / self.cell_size))
        j = int(np.floor((xy[1] - self.origin[1]) / self.cell_size))
        return (i, j)

    def cell_center(self, cell: tuple[int, int]) -> np.ndarray:
        return self.origin + (np.asarray(cell, dtype=np.float64) + 0.5) * self.cell_size


def height_accumulate(
    scene: PointCloud,
    cell_size: float = DEFAULT_MAP_CELL,
    floor_quantile: float = FLOOR_QUANTILE,
) -> OccupancyMap2D:
    """Accumulate occupied surface voxels along the height axis into a 2D map."""
    if len(scene) == 0:
        raise EmptyInputError("cannot build an occupancy map from an empty scene")
    vox = voxel_indices(scene.points, cell_size)
    vox = np.unique(vox, axis=0)  # binary occupancy per 3D voxel

    accumulation: dict[tuple[int, int], int] = {}
    max_h: dict[tuple[int, int], float] = {}
    min_h: dict[tuple[int, int], float] = {}
    for ix, iy, iz in vox:
        cell = (int(ix), int(iy))
        accumulation[cell] = accumulation.get(cell, 0) + 1
        top = (iz + 1) * cell_size    # top face of the voxel
        bottom = iz * cell_size
        if cell not in max_h or top > max_h[cell]:
            max_h[cell] = top
        if cell not in min_h or bottom < min_h[cell]:
            min_h[cell] = bottom

    minima = np.sort(np.array(list(min_h.values())))
    k = max(1, int(np.ceil(floor_quantile * len(minima))))
    floor = float(np.mean(minima[:k]))

    return OccupancyMap2D(
        origin=np.zeros(2),
        cell_size=cell_size,
        accumulation=accumulation,
        max_height=max_h,
        min_height=min_h,
        floor_height=floor,
    )
