"""Point clouds, cylindrical range images and file formats.

Range images use row 0 for the highest elevation. Column ``c`` covers the
azimuth interval ``[-pi + c * dphi, -pi + (c + 1) * dphi)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class PointCloud:
    """Unordered set of sensor-relative points, shape (N, 3), meters."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.size == 0:
            pts = pts.reshape(0, 3)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"expected (N, 3) points, got shape {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        object.__setattr__(self, "points", _frozen(pts))

    def __len__(self) -> int:
        return self.points.shape[0]

    @classmethod
    def empty(cls) -> "PointCloud":
        return cls(np.zeros((0, 3)))


@dataclass(frozen=True)
class ProjectionModel:
    """Cylindrical binning grid.

    Elevation bins are spaced linearly between ``elevation_min`` and
    ``elevation_max`` (radians); azimuth always spans a full revolution.
    """

    H: int = 32
    W: int = 128
    elevation_min: float = math.radians(-25.0)
    elevation_max: float = math.radians(3.0)
    invalid_depth: float = 0.0

    def __post_init__(self):
        if self.H < 1 or self.W < 1:
            raise ValueError("H and W must be >= 1")
        if not self.elevation_min < self.elevation_max:
            raise ValueError("elevation_min must be < elevation_max")

    @property
    def d_elevation(self) -> float:
        return (self.elevation_max - self.elevation_min) / self.H

    @property
    def d_azimuth(self) -> float:
        return 2.0 * math.pi / self.W

    def row_elevations(self) -> np.ndarray:
        """Cell-center elevation of every row, top row first."""
        return self.elevation_max - (np.arange(self.H) + 0.5) * self.d_elevation

    def col_azimuths(self) -> np.ndarray:
        return -math.pi + (np.arange(self.W) + 0.5) * self.d_azimuth

    def ray_directions(self) -> np.ndarray:
        """Unit vectors through every cell center, shape (H, W, 3)."""
        el = self.row_elevations()[:, None]
        az = self.col_azimuths()[None, :]
        return np.stack(
            np.broadcast_arrays(
                np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)
            ),
            axis=-1,
        )

    def with_rows(self, H: int) -> "ProjectionModel":
        return ProjectionModel(H, self.W, self.elevation_min, self.elevation_max, self.invalid_depth)

    def to_dict(self) -> dict:
        return {
            "H": self.H,
            "W": self.W,
            "elevation_min": self.elevation_min,
            "elevation_max": self.elevation_max,
            "invalid_depth": self.invalid_depth,
        }


@dataclass(frozen=True)
class RangeImage:
    depth: np.ndarray
    valid: np.ndarray
    model: ProjectionModel
    dropped: int = field(default=0, compare=False)

    def __post_init__(self):
        depth = np.asarray(self.depth, dtype=np.float64)
        valid = np.asarray(self.valid, dtype=bool)
        shape = (self.model.H, self.model.W)
        if depth.shape != shape or valid.shape != shape:
            raise ValueError(f"depth/valid must have shape {shape}")
        if not np.all(np.isfinite(depth)):
            raise ValueError("depth must be finite")
        if np.any(depth[valid] <= 0):
            raise ValueError("valid depths must be positive")
        depth = np.where(valid, depth, self.model.invalid_depth)
        object.__setattr__(self, "depth", _frozen(depth))
        object.__setattr__(self, "valid", _frozen(valid))

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth.shape


def cell_indices(points: np.ndarray, model: ProjectionModel):
    """Return (row, col, r, in_range) for every point."""
    points = np.asarray(points, dtype=np.float64)
    r = np.linalg.norm(points, axis=1)
    if np.any(r == 0):
        raise ValueError("point at the sensor origin has no direction")
    az = np.arctan2(points[:, 1], points[:, 0])
    el = np.arcsin(np.clip(points[:, 2] / r, -1.0, 1.0))
    col = np.floor((az + math.pi) / model.d_azimuth).astype(np.int64) % model.W
    rowf = np.floor((model.elevation_max - el) / model.d_elevation).astype(np.int64)
    in_range = (el <= model.elevation_max) & (el >= model.elevation_min)
    # the bottom edge (and rounding at either edge) stays inside the grid
    rowf = np.clip(rowf, 0, model.H - 1)
    return rowf, col, r, in_range


def project_cylindrical(cloud: PointCloud, model: ProjectionModel) -> RangeImage:
    """Bin points into a range image, keeping the nearest return per cell."""
    depth = np.full((model.H, model.W), model.invalid_depth, dtype=np.float64)
    valid = np.zeros((model.H, model.W), dtype=bool)
    if len(cloud) == 0:
        return RangeImage(depth, valid, model)
    row, col, r, ok = cell_indices(cloud.points, model)
    dropped = int(np.count_nonzero(~ok))
    row, col, r = row[ok], col[ok], r[ok]
    if r.size:
        cell = row * model.W + col
        order = np.lexsort((r, cell))
        _, first = np.unique(cell[order], return_index=True)
        keep = order[first]
        depth.flat[cell[keep]] = r[keep]
        valid.flat[cell[keep]] = True
    return RangeImage(depth, valid, model, dropped=dropped)


def backproject(image: RangeImage) -> PointCloud:
    """One point per valid cell, along the cell-center ray."""
    dirs = image.model.ray_directions()
    pts = dirs[image.valid] * image.depth[image.valid][:, None]
    return PointCloud(pts)


def normalize_neighborhood(neighbors: np.ndarray, query: np.ndarray) -> np.ndarray:
    """Translate neighborhood coordinates so the query sits at the origin."""
    neighbors = np.asarray(neighbors)
    return neighbors - np.asarray(query, dtype=neighbors.dtype)[..., None, :]


# --- file formats -----------------------------------------------------------


def read_kitti_bin(path) -> PointCloud:
    """Load a KITTI velodyne scan (float32 x, y, z, intensity)."""
    raw = np.fromfile(path, dtype="<f4")
    if raw.size % 4:
        raise ValueError(f"{path}: size is not a multiple of 4 floats")
    return PointCloud(raw.reshape(-1, 4)[:, :3].astype(np.float64))


def write_kitti_bin(cloud: PointCloud, path, intensity: float = 0.0) -> None:
    out = np.empty((len(cloud), 4), dtype="<f4")
    out[:, :3] = cloud.points
    out[:, 3] = intensity
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    out.tofile(tmp)
    tmp.replace(path)


def write_ply(path, points: np.ndarray, colors: np.ndarray) -> None:
    """ASCII PLY with per-vertex uchar red/green/blue."""
    points = np.asarray(points, dtype=np.float64)
    colors = np.clip(np.rint(np.asarray(colors, dtype=np.float64)), 0, 255).astype(int)
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(points)}",
        "property float x",
        "property float y",
        "property float z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "end_header",
    ]
    lines += [
        f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f} {c[0]} {c[1]} {c[2]}"
        for p, c in zip(points, colors)
    ]
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("\n".join(lines) + "\n")
    tmp.replace(path)


def read_ply(path) -> tuple[np.ndarray, np.ndarray]:
    lines = Path(path).read_text().splitlines()
    n = next(int(l.split()[-1]) for l in lines if l.startswith("element vertex"))
    start = lines.index("end_header") + 1
    data = np.array([l.split() for l in lines[start : start + n]], dtype=np.float64).reshape(n, 6)
    return data[:, :3], data[:, 3:].astype(int)


def save_range_image(path, image: RangeImage) -> None:
    """``.npz`` with depth, valid mask and the projection model (as JSON)."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp.npz")
    np.savez(tmp, depth=image.depth, valid=image.valid, model=np.array(json.dumps(image.model.to_dict())),
             dropped=np.array(image.dropped))
    tmp.replace(path)


def load_range_image(path) -> RangeImage:
    with np.load(path) as z:
        model = ProjectionModel(**json.loads(str(z["model"])))
        return RangeImage(z["depth"], z["valid"], model, int(z["dropped"]))
