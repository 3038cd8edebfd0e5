"""Pinhole cameras, ray generation, projection and bilinear lookup.

Conventions
-----------
* Camera frame: x right, y down, z forward (looking along +z).
* ``Camera.pose`` is the 3x4 world-from-camera transform ``[R | c]``:
  ``x_world = R @ x_cam + c``; ``c`` is the camera centre.
* Pixel ``(i, j)`` (column, row) sits at continuous coordinate ``(i, j)``;
  there is no half-pixel offset anywhere in the package.
"""
from dataclasses import dataclass

import numpy as np

from . import kernels

MIN_DEPTH = 1e-9


class BehindCameraError(ValueError):
    pass


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    pose: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        pose = np.asarray(self.pose, dtype=np.float64).reshape(3, 4)
        object.__setattr__(self, "pose", pose)
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width < 1 or self.height < 1:
            raise ValueError(f"image extents must be >= 1, got {self.width}x{self.height}")
        r = pose[:, :3]
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-9) or abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise ValueError("pose rotation block is not a proper rotation")

    @property
    def rotation(self):
        return self.pose[:, :3]

    @property
    def center(self):
        return self.pose[:, 3]

    @classmethod
    def from_extrinsic(cls, R, t, fx, fy, cx, cy, width, height):
        """Build from a camera-from-world extrinsic ``x_cam = R x_world + t``."""
        R = np.asarray(R, dtype=np.float64)
        t = np.asarray(t, dtype=np.float64)
        pose = np.concatenate([R.T, (-R.T @ t)[:, None]], axis=1)
        return cls(fx, fy, cx, cy, pose, width, height)

    def extrinsic(self):
        """Camera-from-world (R, t), the explicit inverse of ``pose``."""
        R = self.rotation.T
        return R, -R @ self.center

    def to_dict(self):
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height,
                "pose": [float(v) for v in self.pose.reshape(-1)]}

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   np.asarray(d["pose"], dtype=np.float64).reshape(3, 4),
                   int(d["width"]), int(d["height"]))


def look_at(eye, target, up=(0.0, 0.0, 1.0)):
    """World-from-camera pose for a camera at ``eye`` looking at ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-9:
        raise ValueError("look_at: up vector parallel to viewing direction")
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd], axis=1)
    return np.concatenate([R, eye[:, None]], axis=1)


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_near: float
    t_far: float

    def at(self, t):
        return self.origin + np.multiply.outer(t, self.direction)


# --------------------------------------------------------------- projection
def project_points(camera, points):
    """Vectorised projection: points (..., 3) -> (uv (..., 2), depth (...)).

    No error for points behind the camera; their depth is <= MIN_DEPTH and
    their uv is computed with the depth clamped, so callers mask on depth.
    """
    points = np.asarray(points, dtype=np.float64)
    xc = (points - camera.center) @ camera.rotation
    z = xc[..., 2]
    zs = np.where(z > MIN_DEPTH, z, MIN_DEPTH)
    u = camera.fx * xc[..., 0] / zs + camera.cx
    v = camera.fy * xc[..., 1] / zs + camera.cy
    return np.stack([u, v], axis=-1), z


def project(camera, x):
    uv, z = project_points(camera, np.asarray(x, dtype=np.float64).reshape(1, 3))
    if z[0] <= MIN_DEPTH:
        raise BehindCameraError(f"point {tuple(np.ravel(x))} has camera depth {z[0]:.3g}")
    return uv[0], float(z[0])


def pixel_directions(camera, uv):
    """Unit world-space directions for pixel coordinates uv (..., 2)."""
    uv = np.asarray(uv, dtype=np.float64)
    d_cam = np.stack([(uv[..., 0] - camera.cx) / camera.fx,
                      (uv[..., 1] - camera.cy) / camera.fy,
                      np.ones(uv.shape[:-1])], axis=-1)
    d = d_cam @ camera.rotation.T
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def ray_for_pixel(camera, pixel, t_near, t_far):
    if not (0 <= t_near < t_far):
        raise ValueError(f"invalid ray bounds [{t_near}, {t_far}]")
    d = pixel_directions(camera, np.asarray(pixel, dtype=np.float64))
    return Ray(camera.center.copy(), d, float(t_near), float(t_far))


def rays_for_pixels(camera, uv):
    """Batched ray generation: (origins (P, 3), directions (P, 3))."""
    d = pixel_directions(camera, uv)
    return np.broadcast_to(camera.center, d.shape).copy(), d


# ------------------------------------------------------------- interpolation
def in_bounds(xy, height, width):
    return ((xy[..., 0] >= 0) & (xy[..., 0] <= width - 1)
            & (xy[..., 1] >= 0) & (xy[..., 1] <= height - 1))


def bilinear(grid, pixel, scale=1.0):
    """Interpolate ``grid`` (H, W, C) at image pixel coordinates (..., 2) times ``scale``.

    Returns ``(values (..., C), inside (...))``. Lookups outside the grid are
    clamped to the border and flagged ``inside=False``.
    """
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim == 2:
        grid = grid[..., None]
    pixel = np.asarray(pixel, dtype=np.float64)
    lead = pixel.shape[:-1]
    xy = pixel.reshape(-1, 2) * scale
    vals = kernels.bilinear_gather(grid, xy)
    inside = in_bounds(xy, grid.shape[0], grid.shape[1])
    return vals.reshape(lead + (grid.shape[2],)), inside.reshape(lead)


def adjacent_pixel(pixel, max_offset, rng, width=None, height=None):
    """Pixel displaced by a uniform non-zero integer offset with |offset|_inf <= max_offset.

    With image extents given, offsets leaving the image are rejected and redrawn.
    """
    if max_offset < 1:
        raise ValueError("max_offset must be >= 1")
    pixel = np.asarray(pixel)
    while True:
        off = rng.integers(-max_offset, max_offset + 1, size=2)
        if off[0] == 0 and off[1] == 0:
            continue
        q = pixel + off
        if width is not None and not (0 <= q[0] <= width - 1 and 0 <= q[1] <= height - 1):
            continue
        return q


def adjacent_ray(reference_pixel, camera, max_offset, rng, t_near, t_far):
    """Neighbouring ray from the same camera centre; returns (ray, pixel)."""
    q = adjacent_pixel(reference_pixel, max_offset, rng, camera.width, camera.height)
    return ray_for_pixel(camera, q, t_near, t_far), q
