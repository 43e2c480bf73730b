"""Rays, boxes and pinhole cameras.

Convention: right-handed camera frame, the camera looks down -z with +y up,
pixel (0, 0) is the top-left corner and pixel centers sit at half-integer
image coordinates.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

SLAB_EPS = 1e-9


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    ray_id: int = 0

    def at(self, t: float) -> np.ndarray:
        return self.origin + t * self.direction


@dataclass(frozen=True)
class Aabb:
    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.min, dtype=np.float64)
        hi = np.asarray(self.max, dtype=np.float64)
        if lo.shape != (3,) or hi.shape != (3,):
            raise ValueError("box corners must be 3-vectors")
        if np.any(lo > hi):
            raise ValueError(f"invalid box: min {lo} exceeds max {hi}")
        object.__setattr__(self, "min", lo)
        object.__setattr__(self, "max", hi)

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.min + self.max)

    @property
    def extent(self) -> np.ndarray:
        return self.max - self.min

    def contains(self, p, eps: float = 0.0) -> np.ndarray:
        p = np.asarray(p)
        return np.all((p >= self.min - eps) & (p <= self.max + eps), axis=-1)

    def to_json(self) -> dict:
        return {"min": self.min.tolist(), "max": self.max.tolist()}

    @classmethod
    def from_json(cls, d: dict) -> "Aabb":
        return cls(np.array(d["min"], float), np.array(d["max"], float))


@dataclass(frozen=True)
class Camera:
    """Pinhole camera with a camera-to-world ``pose``."""

    pose: np.ndarray
    focal: float
    width: int
    height: int
    z_near: float = 0.05
    z_far: float = 100.0

    def __post_init__(self):
        pose = np.asarray(self.pose, dtype=np.float64).reshape(4, 4)
        object.__setattr__(self, "pose", pose)
        rot = pose[:3, :3]
        if not np.allclose(rot.T @ rot, np.eye(3), atol=1e-6):
            raise ValueError("camera rotation is not orthonormal")
        if abs(np.linalg.det(rot) - 1.0) > 1e-6:
            raise ValueError("camera rotation must have det +1")
        if not 0 < self.z_near < self.z_far:
            raise ValueError("need 0 < z_near < z_far")
        if self.width < 1 or self.height < 1 or self.focal <= 0:
            raise ValueError("invalid camera intrinsics")

    @property
    def rotation(self) -> np.ndarray:
        return self.pose[:3, :3]

    @property
    def origin(self) -> np.ndarray:
        return self.pose[:3, 3]

    @property
    def forward(self) -> np.ndarray:
        return -self.pose[:3, 2]

    @property
    def n_pixels(self) -> int:
        return self.width * self.height

    def pixel_directions(self, pixel_ids=None) -> np.ndarray:
        """Unit world-space directions for row-major pixel ids."""
        if pixel_ids is None:
            pixel_ids = np.arange(self.n_pixels)
        pixel_ids = np.asarray(pixel_ids)
        row, col = np.divmod(pixel_ids, self.width)
        x = (col + 0.5 - 0.5 * self.width) / self.focal
        y = -(row + 0.5 - 0.5 * self.height) / self.focal
        d_cam = np.stack([x, y, -np.ones_like(x, dtype=np.float64)], axis=-1)
        d_cam /= np.linalg.norm(d_cam, axis=-1, keepdims=True)
        return d_cam @ self.rotation.T

    def depth_of(self, points) -> np.ndarray:
        """Camera-space depth (distance along the viewing axis)."""
        return (np.asarray(points) - self.origin) @ self.forward

    def to_json(self) -> dict:
        return {
            "pose": self.pose.reshape(-1).tolist(),
            "focal": float(self.focal),
            "width": int(self.width),
            "height": int(self.height),
            "z_near": float(self.z_near),
            "z_far": float(self.z_far),
        }

    @classmethod
    def from_json(cls, d: dict) -> "Camera":
        return cls(
            pose=np.array(d["pose"], dtype=np.float64).reshape(4, 4),
            focal=float(d["focal"]),
            width=int(d["width"]),
            height=int(d["height"]),
            z_near=float(d["z_near"]),
            z_far=float(d["z_far"]),
        )


@dataclass
class RayBatch:
    """Columnar rays; indexing yields :class:`Ray` objects."""

    origins: np.ndarray
    directions: np.ndarray
    ray_ids: np.ndarray

    def __len__(self) -> int:
        return len(self.ray_ids)

    def __getitem__(self, k: int) -> Ray:
        return Ray(self.origins[k], self.directions[k], int(self.ray_ids[k]))

    def __iter__(self) -> Iterator[Ray]:
        for k in range(len(self)):
            yield self[k]


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world pose for a camera at ``eye`` looking at ``target``."""
    eye = np.asarray(eye, float)
    fwd = np.asarray(target, float) - eye
    fwd /= np.linalg.norm(fwd)
    up = np.asarray(up, float)
    right = np.cross(fwd, up)
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(fwd, np.array([0.0, 1.0, 0.0]))
    right /= np.linalg.norm(right)
    true_up = np.cross(right, fwd)
    pose = np.eye(4)
    pose[:3, 0] = right
    pose[:3, 1] = true_up
    pose[:3, 2] = -fwd
    pose[:3, 3] = eye
    return pose


def generate_rays(camera: Camera) -> RayBatch:
    ids = np.arange(camera.n_pixels)
    dirs = camera.pixel_directions(ids)
    origins = np.broadcast_to(camera.origin, dirs.shape).copy()
    return RayBatch(origins, dirs, ids)


def intersect_boxes(origins, directions, box_min, box_max):
    """Slab test of every ray against every box.

    Returns ``(t_enter, t_exit, hit)`` with shape ``(n_rays, n_boxes)``;
    intervals are clipped to ``t >= 0``.
    """
    o = np.asarray(origins, dtype=np.float64)[:, None, :]
    d = np.asarray(directions, dtype=np.float64)[:, None, :]
    lo = np.asarray(box_min, dtype=np.float64)[None, :, :]
    hi = np.asarray(box_max, dtype=np.float64)[None, :, :]
    parallel = np.abs(d) < 1e-300
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / np.where(parallel, 1.0, d)
        t0 = (lo - SLAB_EPS - o) * inv
        t1 = (hi + SLAB_EPS - o) * inv
    tmin = np.minimum(t0, t1)
    tmax = np.maximum(t0, t1)
    inside = (o >= lo - SLAB_EPS) & (o <= hi + SLAB_EPS)
    tmin = np.where(parallel, -np.inf, tmin)
    tmax = np.where(parallel, np.inf, tmax)
    t_enter = np.maximum(tmin.max(axis=-1), 0.0)
    t_exit = tmax.min(axis=-1)
    blocked = np.any(parallel & ~inside, axis=-1)
    hit = (t_exit >= t_enter) & ~blocked
    return t_enter, t_exit, hit


def ray_aabb_intersect(ray: Ray, box: Aabb) -> Optional[tuple[float, float]]:
    t0, t1, hit = intersect_boxes(
        ray.origin[None], ray.direction[None], box.min[None], box.max[None]
    )
    if not hit[0, 0]:
        return None
    return float(t0[0, 0]), float(t1[0, 0])


def project_points(camera: Camera, points):
    """Vectorized projection.

    Returns ``(row, col, depth, valid)``; rows/cols are nearest-neighbor pixel
    indices (ties round toward the larger index).
    """
    p = np.asarray(points, dtype=np.float64)
    p_cam = (p - camera.origin) @ camera.rotation
    depth = -p_cam[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = camera.focal * p_cam[..., 0] / depth + 0.5 * camera.width - 0.5
        v = -camera.focal * p_cam[..., 1] / depth + 0.5 * camera.height - 0.5
    col = np.floor(u + 0.5)
    row = np.floor(v + 0.5)
    valid = (
        (depth > 0)
        & (col >= 0)
        & (col < camera.width)
        & (row >= 0)
        & (row < camera.height)
    )
    row = np.where(valid, row, -1).astype(np.int64)
    col = np.where(valid, col, -1).astype(np.int64)
    return row, col, depth, valid


def project(camera: Camera, p) -> Optional[tuple[int, int, float]]:
    row, col, depth, valid = project_points(camera, np.asarray(p, float)[None])
    if not valid[0]:
        return None
    return int(row[0]), int(col[0]), float(depth[0])


def save_cameras(path, cameras: Sequence[Camera]) -> None:
    Path(path).write_text(json.dumps([c.to_json() for c in cameras], indent=1))


def load_cameras(path) -> list[Camera]:
    return [Camera.from_json(d) for d in json.loads(Path(path).read_text())]
