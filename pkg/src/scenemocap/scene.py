"""Scene depth: disparity-to-depth conversion, temporal aggregation, point cloud.

Normalized disparity follows the near-is-one convention: d=1 maps to z_near,
d=0 to z_far. The static background depth is the per-pixel median over frames
where the pixel is background; the resulting point cloud answers exact
nearest-neighbor queries through a uniform-grid index.
"""

import itertools
import warnings
from dataclasses import dataclass

import numpy as np
import torch

from .camera import back_project_map
from .fileio import write_ply_points


class SceneError(ValueError):
    pass


@dataclass
class FrameDepthParams:
    z_near: float
    z_far: float

    def __post_init__(self):
        if not (0 < self.z_near < self.z_far):
            raise SceneError("need 0 < z_near < z_far, got (%r, %r)" % (self.z_near, self.z_far))


def disparity_to_depth(disparity, z_near, z_far):
    """Affine disparity calibration: D = zf*zn / (d*(zf - zn) + zn).

    Maps d=1 -> z_near and d=0 -> z_far; differentiable w.r.t. z_near/z_far
    when they are torch scalars. Raises if the ordering constraint is violated.
    """
    if isinstance(disparity, torch.Tensor) or isinstance(z_near, torch.Tensor):
        disparity = torch.as_tensor(disparity)
        zn = torch.as_tensor(z_near, dtype=disparity.dtype)
        zf = torch.as_tensor(z_far, dtype=disparity.dtype)
        if not bool((zn > 0).all() and (zf > zn).all()):
            raise SceneError("need 0 < z_near < z_far")
        return zf * zn / (disparity * (zf - zn) + zn)
    disparity = np.asarray(disparity, dtype=np.float64)
    if not (0 < z_near < z_far):
        raise SceneError("need 0 < z_near < z_far")
    return z_far * z_near / (disparity * (z_far - z_near) + z_near)


def depth_to_disparity(depth, z_near, z_far):
    """Inverse of disparity_to_depth on (0, inf); exact round trip inside [zn, zf]."""
    depth = np.asarray(depth, dtype=np.float64)
    return (z_far * z_near / depth - z_near) / (z_far - z_near)


def flip_disparity_polarity(disparity):
    """Convert a near-is-zero map to the near-is-one convention used here."""
    return 1.0 - np.asarray(disparity, dtype=np.float64)


def aggregate_background(depth_maps, background_masks):
    """Per-pixel median depth over the frames where the pixel is background.

    Returns (static_depth, valid); pixels never observed as background are
    invalid and excluded from the point cloud. Even counts use the mean of the
    two central values.
    """
    depth_maps = np.asarray(depth_maps, dtype=np.float64)
    masks = np.asarray(background_masks, dtype=bool)
    if depth_maps.ndim != 3 or depth_maps.shape != masks.shape:
        raise SceneError("need stacked (T, H, W) depth maps and masks of equal shape")
    data = np.where(masks, depth_maps, np.nan)
    valid = masks.any(axis=0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")  # all-NaN columns are expected
        med = np.nanmedian(data, axis=0)
    med = np.where(valid, med, 0.0)
    return med, valid


class UniformGridIndex:
    """Exact nearest-neighbor queries over 3D points hashed into cubic cells."""

    def __init__(self, points, cell_size=0.25):
        points = np.asarray(points, dtype=np.float64)
        if points.ndim != 2 or points.shape[1] != 3 or len(points) == 0:
            raise SceneError("index needs a non-empty (M, 3) point array")
        self.points = points
        self.cell_size = float(cell_size)
        cells = np.floor(points / self.cell_size).astype(np.int64)
        order = np.lexsort((cells[:, 2], cells[:, 1], cells[:, 0]))
        sorted_cells = cells[order]
        boundaries = np.nonzero(np.any(np.diff(sorted_cells, axis=0) != 0, axis=1))[0] + 1
        starts = np.concatenate([[0], boundaries, [len(points)]])
        self._cells = {}
        for i in range(len(starts) - 1):
            key = tuple(sorted_cells[starts[i]])
            self._cells[key] = np.sort(order[starts[i]:starts[i + 1]])
        self._lo = points.min(axis=0)
        self._hi = points.max(axis=0)

    def _shell_offsets(self, r):
        if r == 0:
            yield (0, 0, 0)
            return
        rng = range(-r, r + 1)
        for dx, dy, dz in itertools.product(rng, rng, rng):
            if max(abs(dx), abs(dy), abs(dz)) == r:
                yield (dx, dy, dz)

    def nearest_index(self, query):
        """Index of the exact nearest point; ties break to the lowest index."""
        query = np.asarray(query, dtype=np.float64)
        base = np.floor(query / self.cell_size).astype(np.int64)
        # beyond this shell every cell is empty
        span = max(np.abs(self._lo - query).max(), np.abs(self._hi - query).max())
        max_r = int(np.ceil(span / self.cell_size)) + 1
        best_d2, best_idx = np.inf, -1
        r = 0
        while True:
            for off in self._shell_offsets(r):
                key = (base[0] + off[0], base[1] + off[1], base[2] + off[2])
                idx = self._cells.get(key)
                if idx is None:
                    continue
                diff = self.points[idx] - query
                d2 = np.einsum("ij,ij->i", diff, diff)
                k = np.argmin(d2)
                if d2[k] < best_d2 or (d2[k] == best_d2 and idx[k] < best_idx):
                    best_d2, best_idx = d2[k], idx[k]
            # any point in shell s >= r+1 lies at least r*cell away
            if best_idx >= 0 and (best_d2 <= (r * self.cell_size) ** 2 or r > max_r):
                break
            r += 1
        return int(best_idx), float(np.sqrt(best_d2))


@dataclass
class ScenePointCloud:
    points: np.ndarray         # (M, 3) meters
    source_pixels: np.ndarray  # (M, 2) full-resolution (col, row)
    index: UniformGridIndex

    def __len__(self):
        return len(self.points)

    def nearest_point(self, query):
        """Exact nearest neighbor: returns (point (3,), distance)."""
        if len(self.points) == 0:
            raise SceneError("empty point cloud")
        idx, dist = self.index.nearest_index(query)
        return self.points[idx], dist

    def nearest_points(self, queries):
        """Vector of nearest cloud points for (Q, 3) queries."""
        out = np.empty((len(queries), 3))
        for i, q in enumerate(np.asarray(queries, dtype=np.float64)):
            out[i] = self.nearest_point(q)[0]
        return out

    def save_ply(self, path):
        write_ply_points(path, self.points)


def build_point_cloud(static_depth, valid, cam, voxel_size=0.05, cell_size=0.25):
    """Back-project valid background pixels and index them.

    voxel_size > 0 keeps one representative point per voxel (the first in pixel
    order) so every retained point still back-projects to a real pixel.
    """
    static_depth = np.asarray(static_depth, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool) & (static_depth > 0)
    if not valid.any():
        raise SceneError("no valid background pixels; degenerate scene")
    points, pixels = back_project_map(cam, static_depth, valid)
    if voxel_size and voxel_size > 0:
        cells = np.floor(points / voxel_size).astype(np.int64)
        _, first = np.unique(cells, axis=0, return_index=True)
        first = np.sort(first)
        points, pixels = points[first], pixels[first]
    return ScenePointCloud(points=points, source_pixels=pixels,
                           index=UniformGridIndex(points, cell_size))
