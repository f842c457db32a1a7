"""Pinhole camera: perspective projection and back-projection.

Pixel convention: pixel (row i, col j) has its center at continuous
coordinates (u, v) = (j, i). Principal ray projects to (cx, cy).
"""

from dataclasses import dataclass

import numpy as np
import torch

MIN_DEPTH = 1e-6


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def diagonal(self):
        return float(np.hypot(self.width, self.height))

    def downsampled(self, factor):
        """Intrinsics of the image subsampled by an integer factor.

        Downsampled pixel (i, j) covers full-res pixels [i*f, (i+1)*f) and its
        center sits at full-res (j*f + (f-1)/2, i*f + (f-1)/2).
        """
        factor = int(factor)
        if factor < 1 or self.width % factor or self.height % factor:
            raise ValueError("downsample factor must divide both image dimensions")
        off = (factor - 1) / 2.0
        return CameraIntrinsics(
            fx=self.fx / factor,
            fy=self.fy / factor,
            cx=(self.cx - off) / factor,
            cy=(self.cy - off) / factor,
            width=self.width // factor,
            height=self.height // factor,
        )

    def to_dict(self):
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(fx=d["fx"], fy=d["fy"], cx=d["cx"], cy=d["cy"],
                   width=int(d["width"]), height=int(d["height"]))


def project(cam, points):
    """Perspective projection of (..., 3) camera-frame points to (..., 2) pixels.

    Returns (pixels, valid) where valid flags points with z > MIN_DEPTH;
    invalid points are projected at clamped depth and must be excluded by the
    caller. Differentiable w.r.t. points when given a torch tensor.
    """
    if isinstance(points, torch.Tensor):
        z = points[..., 2]
        valid = z > MIN_DEPTH
        zc = torch.clamp(z, min=MIN_DEPTH)
        u = cam.fx * points[..., 0] / zc + cam.cx
        v = cam.fy * points[..., 1] / zc + cam.cy
        return torch.stack([u, v], dim=-1), valid
    points = np.asarray(points, dtype=np.float64)
    z = points[..., 2]
    valid = z > MIN_DEPTH
    zc = np.maximum(z, MIN_DEPTH)
    u = cam.fx * points[..., 0] / zc + cam.cx
    v = cam.fy * points[..., 1] / zc + cam.cy
    return np.stack([u, v], axis=-1), valid


def back_project(cam, pixels, depth):
    """Inverse of project at known depth: (..., 2) pixels + (...) depths -> (..., 3)."""
    if isinstance(pixels, torch.Tensor) or isinstance(depth, torch.Tensor):
        pixels = torch.as_tensor(pixels)
        depth = torch.as_tensor(depth, dtype=pixels.dtype)
        if (depth <= 0).any():
            raise ValueError("back_project requires positive depth")
        x = (pixels[..., 0] - cam.cx) * depth / cam.fx
        y = (pixels[..., 1] - cam.cy) * depth / cam.fy
        return torch.stack([x, y, depth], dim=-1)
    pixels = np.asarray(pixels, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    if (depth <= 0).any():
        raise ValueError("back_project requires positive depth")
    x = (pixels[..., 0] - cam.cx) * depth / cam.fx
    y = (pixels[..., 1] - cam.cy) * depth / cam.fy
    return np.stack([x, y, np.broadcast_to(depth, x.shape)], axis=-1)


def back_project_map(cam, depth_map, valid=None):
    """Back-project a dense (H, W) depth map; returns (points (M,3), pixels (M,2))."""
    depth_map = np.asarray(depth_map, dtype=np.float64)
    h, w = depth_map.shape
    if valid is None:
        valid = depth_map > 0
    ii, jj = np.nonzero(valid)
    pix = np.stack([jj.astype(np.float64), ii.astype(np.float64)], axis=-1)
    pts = back_project(cam, pix, depth_map[ii, jj])
    return pts, np.stack([jj, ii], axis=-1)
