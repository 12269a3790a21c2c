"""Feature sampling at 3D query locations, multi-camera aggregation, the
fusion MLP, and the sine positional embedding.

Query locations are treated as non-differentiable sampling coordinates:
gradients flow into feature-map values and fusion weights, never into the
coordinates themselves (locations are moved by the explicit offset update,
not by gradient descent).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from . import tensor as T
from .config import RunConfig
from .geometry import world_to_bev
from .nn import Linear, Mlp, ParamStore
from .scene import FeatureMapSet
from .tensor import Tensor, active_tape


def bilinear_sample(fmap: Tensor, gx, gy, valid=None) -> Tensor:
    """Differentiable batched bilinear interpolation of fmap (H, W, C) at N
    continuous grid coordinates; returns (N, C). Rows with valid=False are
    zero. Coordinates marked valid must lie inside [0, W-1] x [0, H-1]."""
    gx = np.atleast_1d(np.asarray(gx, dtype=np.float64))
    gy = np.atleast_1d(np.asarray(gy, dtype=np.float64))
    h, w, _ = fmap.data.shape
    if valid is None:
        valid = np.ones(gx.shape, dtype=bool)
    else:
        valid = np.atleast_1d(np.asarray(valid, dtype=bool)).copy()
    bad = valid & ((gx < 0) | (gx > w - 1) | (gy < 0) | (gy > h - 1))
    if bad.any():
        raise ValueError(
            f"bilinear_sample: {int(bad.sum())} coordinates marked valid fall outside "
            f"the {h}x{w} map"
        )
    out_data = kernels.bilinear_gather(fmap.data, gx, gy, valid)
    out = Tensor(out_data)
    out.requires_grad = fmap.requires_grad
    tape = active_tape()
    if tape is not None and fmap.requires_grad:

        def bwd():
            fmap.ensure_grad()
            fmap.grad += kernels.bilinear_scatter(out.grad, gx, gy, valid, h, w)

        tape.record(bwd)
    return out


def sine_positional_embedding(locs: np.ndarray, d: int, cfg: RunConfig) -> np.ndarray:
    """Interleaved sin/cos embedding of 3D locations, shape (N, d).

    Each axis gets a d/3 block; coordinates are first normalized to [0, 1]
    over the detection range, then scaled by 2*pi and modulated at geometric
    frequencies (base temperature 10000), following the DETR convention.
    """
    if d % 6 != 0:
        raise ValueError(f"embedding width must be divisible by 6, got {d}")
    locs = np.atleast_2d(np.asarray(locs, dtype=np.float64))
    ranges = (cfg.x_range, cfg.y_range, cfg.z_range)
    block = d // 3
    n_freq = block // 2
    k = np.arange(n_freq)
    inv_freq = 1.0 / (10000.0 ** (2.0 * k / block))
    parts = []
    for axis in range(3):
        lo, hi = ranges[axis]
        norm = (locs[:, axis] - lo) / (hi - lo)
        ang = 2.0 * np.pi * norm[:, None] * inv_freq[None, :]
        inter = np.empty((locs.shape[0], block))
        inter[:, 0::2] = np.sin(ang)
        inter[:, 1::2] = np.cos(ang)
        parts.append(inter)
    return np.concatenate(parts, axis=1)


@dataclass
class SampledFeatures:
    """Per-modality sampled feature rows plus validity flags (N queries)."""

    lidar: Tensor | None   # (N, d_L) or None when modality inactive
    camera: Tensor | None  # (N, d_C)
    lidar_valid: np.ndarray | None
    camera_valid: np.ndarray | None


def _camera_map_coords(cam_entry, locs):
    from .geometry import project_to_image

    cam = cam_entry.cam
    u, v, valid = project_to_image(locs, cam)
    gu = u / cam_entry.stride - 0.5
    gv = v / cam_entry.stride - 0.5
    h, w, _ = cam_entry.fmap.data.shape
    valid = valid & (gu >= 0) & (gu <= w - 1) & (gv >= 0) & (gv <= h - 1)
    return gu, gv, valid


def _sample_once(locs: np.ndarray, maps: FeatureMapSet, active) -> SampledFeatures:
    n = locs.shape[0]
    lid = lid_valid = cam = cam_valid = None
    if "lidar" in active:
        gx, gy, lid_valid = world_to_bev(locs, maps.lidar_spec)
        # the outer half-cell ring is range-valid but has no 4-neighborhood
        spec = maps.lidar_spec
        lid_valid = lid_valid & (gx >= 0) & (gx <= spec.nx - 1) & (gy >= 0) & (gy <= spec.ny - 1)
        lid = bilinear_sample(maps.lidar_bev, gx, gy, lid_valid)
    if "camera" in active:
        total = None
        counts = np.zeros(n)
        for entry in maps.cameras:
            gu, gv, ok = _camera_map_coords(entry, locs)
            s = bilinear_sample(entry.fmap, gu, gv, ok)
            counts += ok
            total = s if total is None else total + s
        # mean over the cameras that actually see each location
        scale = np.where(counts > 0, 1.0 / np.maximum(counts, 1.0), 0.0)
        cam = total * Tensor(scale[:, None])
        cam_valid = counts > 0
    return SampledFeatures(lid, cam, lid_valid, cam_valid)


def sample_all_modalities(locs, maps: FeatureMapSet, active,
                          pattern: str = "single", cross_radius: float = 0.5) -> SampledFeatures:
    """Sample every active modality at N 3D locations.

    LiDAR: bilinear read of the BEV map. Camera: project into every camera,
    bilinear-sample each valid projection, average over valid cameras.
    ``pattern="cross"`` averages a 4-point cross around each location.
    """
    active = tuple(active)
    if not active:
        raise ValueError("active modality set must be nonempty")
    locs = np.atleast_2d(np.asarray(locs, dtype=np.float64))
    if pattern == "single":
        return _sample_once(locs, maps, active)
    offsets = np.array(
        [[cross_radius, 0, 0], [-cross_radius, 0, 0], [0, cross_radius, 0], [0, -cross_radius, 0]]
    )
    parts = [_sample_once(locs + off, maps, active) for off in offsets]
    lid = cam = None
    lid_valid = cam_valid = None
    if "lidar" in active:
        lid = parts[0].lidar
        for p in parts[1:]:
            lid = lid + p.lidar
        lid = lid * 0.25
        lid_valid = np.any([p.lidar_valid for p in parts], axis=0)
    if "camera" in active:
        cam = parts[0].camera
        for p in parts[1:]:
            cam = cam + p.camera
        cam = cam * 0.25
        cam_valid = np.any([p.camera_valid for p in parts], axis=0)
    return SampledFeatures(lid, cam, lid_valid, cam_valid)


class FusionMlp:
    """The fusion network: a 2-layer MLP (d_L + d_C -> d -> d) when both
    modalities are active, a single linear projection in the unimodal case.
    Concatenation order is fixed as (lidar, camera)."""

    def __init__(self, store: ParamStore, name: str, rng, cfg: RunConfig, active):
        self.active = tuple(active)
        d_in = ("lidar" in self.active) * cfg.d_lidar + ("camera" in self.active) * cfg.d_camera
        self.d_in = d_in
        if len(self.active) > 1:
            self.net = Mlp(store, name, rng, (d_in, cfg.d_model, cfg.d_model))
        else:
            self.net = Linear(store, name, rng, d_in, cfg.d_model)

    def __call__(self, sf: SampledFeatures) -> Tensor:
        parts = []
        if "lidar" in self.active:
            parts.append(sf.lidar)
        if "camera" in self.active:
            parts.append(sf.camera)
        x = parts[0] if len(parts) == 1 else T.concat(parts, axis=1)
        if x.data.shape[1] != self.d_in:
            raise ValueError(
                f"fusion input width {x.data.shape[1]} does not match configured {self.d_in}"
            )
        return self.net(x)
