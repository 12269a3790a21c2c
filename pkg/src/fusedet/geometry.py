"""Rigid transforms, pinhole cameras, 3D box parameterization, and the
world-to-BEV / world-to-image projections used by all feature sampling."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class Pose:
    """Rigid transform mapping points from the source frame into the target
    frame: p_target = R @ p_source + t."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        err = np.abs(self.rotation.T @ self.rotation - np.eye(3)).max()
        if err > 1e-9:
            raise ValueError(f"rotation is not orthonormal (max |R^T R - I| = {err:.3e})")
        if abs(np.linalg.det(self.rotation) - 1.0) > 1e-9:
            raise ValueError("rotation determinant is not +1")

    def apply(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))


def rot_z(yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass
class CameraModel:
    """Pinhole camera: intrinsics in pixels plus the ego->camera extrinsic.

    Camera frame convention: +z forward (depth), +x right, +y down.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    image_size: tuple  # (W, H) pixels
    extrinsic: Pose = field(default_factory=Pose.identity)

    def __post_init__(self):
        w, h = self.image_size
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < w and 0 < self.cy < h):
            raise ValueError("principal point outside image")


def project_to_image(p, cam: CameraModel):
    """Project ego-frame point(s) through the pinhole model.

    Accepts a 3-vector or an (N, 3) array; returns (u, v, valid) with the
    same leading shape. valid requires positive depth and the pixel inside
    the image; invalid entries never produce NaN (u, v forced to 0).
    """
    p = np.asarray(p, dtype=np.float64)
    single = p.ndim == 1
    pc = cam.extrinsic.apply(np.atleast_2d(p))
    z = pc[:, 2]
    safe_z = np.where(z > 0, z, 1.0)
    u = cam.fx * pc[:, 0] / safe_z + cam.cx
    v = cam.fy * pc[:, 1] / safe_z + cam.cy
    w, h = cam.image_size
    valid = (z > 0) & (u >= 0) & (u < w) & (v >= 0) & (v < h)
    u = np.where(z > 0, u, 0.0)
    v = np.where(z > 0, v, 0.0)
    if single:
        return float(u[0]), float(v[0]), bool(valid[0])
    return u, v, valid


def _wrap_angle(a: float) -> float:
    """Wrap to the principal branch (-pi, pi]."""
    a = (a + np.pi) % (2.0 * np.pi) - np.pi
    if a == -np.pi:
        a = np.pi
    return float(a)


@dataclass
class Box3D:
    """Upright 3D bounding box in the ego frame."""

    center: np.ndarray  # (x, y, z) meters
    size: np.ndarray    # (w, l, h) meters
    yaw: float          # radians, (-pi, pi]
    class_id: int

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.size = np.asarray(self.size, dtype=np.float64).reshape(3)
        if np.any(self.size <= 0):
            raise ValueError(f"box size must be positive, got {self.size}")
        self.yaw = _wrap_angle(float(self.yaw))
        self.class_id = int(self.class_id)

    def bev_corners(self) -> np.ndarray:
        """4 corners of the footprint in the BEV (x, y) plane."""
        w, l, _ = self.size
        local = np.array(
            [[l / 2, w / 2], [l / 2, -w / 2], [-l / 2, -w / 2], [-l / 2, w / 2]]
        )
        c, s = np.cos(self.yaw), np.sin(self.yaw)
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + self.center[:2]

    def corners(self) -> np.ndarray:
        """All 8 corners in the ego frame, shape (8, 3)."""
        w, l, h = self.size
        sx = np.array([1, 1, -1, -1, 1, 1, -1, -1]) * l / 2
        sy = np.array([1, -1, -1, 1, 1, -1, -1, 1]) * w / 2
        sz = np.array([-1, -1, -1, -1, 1, 1, 1, 1]) * h / 2
        local = np.stack([sx, sy, sz], axis=1)
        return local @ rot_z(self.yaw).T + self.center


@dataclass
class BevGridSpec:
    """Uniform X-by-Y lattice of candidate locations at one fixed height."""

    x_range: tuple  # (min, max) meters
    y_range: tuple
    nx: int
    ny: int
    fixed_z: float = 0.0

    def __post_init__(self):
        if self.x_range[1] <= self.x_range[0] or self.y_range[1] <= self.y_range[0]:
            raise ValueError("degenerate BEV range")
        if not np.isfinite(self.fixed_z):
            raise ValueError("fixed_z must be finite")

    @property
    def m_dense(self) -> int:
        return self.nx * self.ny

    @property
    def pitch(self) -> tuple:
        return (
            (self.x_range[1] - self.x_range[0]) / self.nx,
            (self.y_range[1] - self.y_range[0]) / self.ny,
        )


def world_to_bev(p, spec: BevGridSpec):
    """Continuous grid coordinates for ego point(s); no clamping, a validity
    flag marks out-of-range points instead.

    Grid coordinate gx in [0, nx-1] maps cell centers to integer coords.
    """
    p = np.asarray(p, dtype=np.float64)
    single = p.ndim == 1
    p2 = np.atleast_2d(p)
    px, py = spec.pitch
    gx = (p2[:, 0] - spec.x_range[0]) / px - 0.5
    gy = (p2[:, 1] - spec.y_range[0]) / py - 0.5
    valid = (
        (p2[:, 0] >= spec.x_range[0])
        & (p2[:, 0] <= spec.x_range[1])
        & (p2[:, 1] >= spec.y_range[0])
        & (p2[:, 1] <= spec.y_range[1])
    )
    if single:
        return float(gx[0]), float(gy[0]), bool(valid[0])
    return gx, gy, valid


def grid_proposal_locations(spec: BevGridSpec) -> np.ndarray:
    """Cell-center proposal locations, shape (nx*ny, 3), all at fixed_z.

    Row-major order, y-major then x: index = iy * nx + ix. This index is the
    canonical tie-break order everywhere downstream.
    """
    px, py = spec.pitch
    xs = spec.x_range[0] + (np.arange(spec.nx) + 0.5) * px
    ys = spec.y_range[0] + (np.arange(spec.ny) + 0.5) * py
    gx, gy = np.meshgrid(xs, ys)  # gy varies along rows
    locs = np.stack([gx.reshape(-1), gy.reshape(-1), np.full(spec.m_dense, spec.fixed_z)], axis=1)
    return locs


# regression layout: (dx, dy, dz, log w, log l, log h, sin yaw, cos yaw)
BOX_REG_DIM = 8


def encode_box(box: Box3D, anchor) -> np.ndarray:
    anchor = np.asarray(anchor, dtype=np.float64).reshape(3)
    return np.concatenate(
        [
            box.center - anchor,
            np.log(box.size),
            [np.sin(box.yaw), np.cos(box.yaw)],
        ]
    )


def decode_box(reg, anchor, class_id: int = 0) -> Box3D:
    reg = np.asarray(reg, dtype=np.float64).reshape(BOX_REG_DIM)
    anchor = np.asarray(anchor, dtype=np.float64).reshape(3)
    yaw = np.arctan2(reg[6], reg[7])
    return Box3D(
        center=anchor + reg[:3],
        size=np.exp(reg[3:6]),
        yaw=yaw,
        class_id=class_id,
    )


def decode_centers(reg: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Vectorized center decode: anchors (N,3) + predicted offsets (N,8)[:, :3]."""
    return np.asarray(anchors, dtype=np.float64) + np.asarray(reg, dtype=np.float64)[:, :3]
