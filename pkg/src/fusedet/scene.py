"""Deterministic synthetic scenes and stub backbones.

A Scene is ground-truth boxes + LiDAR point cloud + camera rig. The stub
backbones turn raw scene data into per-modality feature grids (one BEV map
for LiDAR, one downsampled perspective map per camera), standing in for the
deep backbones of a real detector. Everything is a pure function of
(config, seed).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import cv2
import numpy as np
from shapely.geometry import Polygon

from .config import CLASS_SIZES, RunConfig
from .geometry import BevGridSpec, Box3D, CameraModel, Pose, project_to_image
from .tensor import Tensor

SCENE_SCHEMA = "fusedet.scene/v1"

# seeds of the fixed random channel projections; part of the stub-backbone
# definition, never varied per scene
_LIDAR_PROJ_SEED = 12345
_CAMERA_PROJ_SEED = 54321

_LIDAR_BASE_CHANNELS = 5  # log1p(count), mean z, max z, var z, occupancy


class GenerationError(RuntimeError):
    pass


@dataclass
class Scene:
    id: str
    gt_boxes: list
    lidar_points: np.ndarray  # (N, 3)
    rig: list  # CameraModel
    rng_seed: int

    def to_dict(self) -> dict:
        return {
            "schema": SCENE_SCHEMA,
            "id": self.id,
            "rng_seed": self.rng_seed,
            "gt_boxes": [
                {
                    "center": box.center.tolist(),
                    "size": box.size.tolist(),
                    "yaw": box.yaw,
                    "class_id": box.class_id,
                }
                for box in self.gt_boxes
            ],
            "lidar_points": self.lidar_points.tolist(),
            "rig": [
                {
                    "fx": cam.fx,
                    "fy": cam.fy,
                    "cx": cam.cx,
                    "cy": cam.cy,
                    "image_size": list(cam.image_size),
                    "rotation": cam.extrinsic.rotation.tolist(),
                    "translation": cam.extrinsic.translation.tolist(),
                }
                for cam in self.rig
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        if d.get("schema") != SCENE_SCHEMA:
            raise ValueError(f"unsupported scene schema {d.get('schema')!r}")
        boxes = [
            Box3D(b["center"], b["size"], b["yaw"], b["class_id"]) for b in d["gt_boxes"]
        ]
        rig = [
            CameraModel(
                c["fx"], c["fy"], c["cx"], c["cy"], tuple(c["image_size"]),
                Pose(np.array(c["rotation"]), np.array(c["translation"])),
            )
            for c in d["rig"]
        ]
        return cls(d["id"], boxes, np.asarray(d["lidar_points"], dtype=np.float64),
                   rig, int(d["rng_seed"]))

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f)
            f.write("\n")

    @classmethod
    def load(cls, path) -> "Scene":
        with open(path) as f:
            return cls.from_dict(json.load(f))


@dataclass
class CameraFeatureMap:
    cam: CameraModel
    fmap: Tensor  # (H_map, W_map, d_C)
    stride: int


@dataclass
class FeatureMapSet:
    lidar_bev: Tensor  # (ny, nx, d_L)
    lidar_spec: BevGridSpec
    cameras: list  # CameraFeatureMap


def build_rig(cfg: RunConfig) -> list:
    """Forward-facing cameras fanned over the front sector with overlapping
    frustums. Camera frame: +z forward, +x right, +y down."""
    cams = []
    n = cfg.n_cameras
    for i in range(n):
        yaw = 0.0 if n == 1 else (i - (n - 1) / 2.0) * np.deg2rad(50.0)
        fwd = np.array([np.cos(yaw), np.sin(yaw), 0.0])
        right = np.array([np.sin(yaw), -np.cos(yaw), 0.0])
        down = np.array([0.0, 0.0, -1.0])
        r_cam_to_ego = np.stack([right, down, fwd], axis=1)
        pos = np.array([0.2, 0.8 * (i - (n - 1) / 2.0), 1.8])
        ego_to_cam = Pose(r_cam_to_ego.T, -r_cam_to_ego.T @ pos)
        cams.append(
            CameraModel(
                fx=cfg.cam_focal,
                fy=cfg.cam_focal,
                cx=cfg.image_w / 2.0,
                cy=cfg.image_h / 2.0,
                image_size=(cfg.image_w, cfg.image_h),
                extrinsic=ego_to_cam,
            )
        )
    return cams


def bev_iou(a: Box3D, b: Box3D) -> float:
    pa = Polygon(a.bev_corners())
    pb = Polygon(b.bev_corners())
    inter = pa.intersection(pb).area
    if inter == 0.0:
        return 0.0
    return inter / (pa.area + pb.area - inter)


def _sample_box_surface(rng, box: Box3D, n: int) -> np.ndarray:
    """Uniform-ish samples on the 4 vertical faces and the top face."""
    w, l, h = box.size
    areas = np.array([l * h, l * h, w * h, w * h, w * l])
    faces = rng.choice(5, size=n, p=areas / areas.sum())
    u = rng.random(n)
    v = rng.random(n)
    t = rng.random(n)
    pts = np.empty((n, 3))
    # local frame: x along length l, y along width w, z up from box bottom
    for f in range(5):
        m = faces == f
        if not m.any():
            continue
        if f == 0:  # +y side
            pts[m] = np.stack([(u[m] - 0.5) * l, np.full(m.sum(), w / 2), v[m] * h], axis=1)
        elif f == 1:  # -y side
            pts[m] = np.stack([(u[m] - 0.5) * l, np.full(m.sum(), -w / 2), v[m] * h], axis=1)
        elif f == 2:  # +x side
            pts[m] = np.stack([np.full(m.sum(), l / 2), (u[m] - 0.5) * w, v[m] * h], axis=1)
        elif f == 3:  # -x side
            pts[m] = np.stack([np.full(m.sum(), -l / 2), (u[m] - 0.5) * w, v[m] * h], axis=1)
        else:  # top
            pts[m] = np.stack([(u[m] - 0.5) * l, (t[m] - 0.5) * w, np.full(m.sum(), h)], axis=1)
    c, s = np.cos(box.yaw), np.sin(box.yaw)
    rot = np.array([[c, -s], [s, c]])
    out = np.empty_like(pts)
    out[:, :2] = pts[:, :2] @ rot.T + box.center[:2]
    out[:, 2] = pts[:, 2] + box.center[2] - box.size[2] / 2.0
    return out


def generate_scene(cfg: RunConfig, seed: int) -> Scene:
    """Sample a scene: non-overlapping boxes (BEV IoU <= 0.1), surface-sampled
    LiDAR returns with range-dependent density, and ground clutter."""
    rng = np.random.default_rng(seed)
    n_obj = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    margin = 2.0
    boxes = []
    attempts = 0
    while len(boxes) < n_obj:
        attempts += 1
        if attempts > 200 * max(n_obj, 1):
            raise GenerationError(
                f"could not place {n_obj} non-overlapping boxes in the detection range"
            )
        k = int(rng.integers(0, cfg.num_classes))
        w0, l0, h0 = CLASS_SIZES[k]
        size = np.array([w0, l0, h0]) * rng.uniform(0.9, 1.1, size=3)
        center = np.array(
            [
                rng.uniform(cfg.x_range[0] + margin, cfg.x_range[1] - margin),
                rng.uniform(cfg.y_range[0] + margin, cfg.y_range[1] - margin),
                size[2] / 2.0,
            ]
        )
        cand = Box3D(center, size, rng.uniform(-np.pi, np.pi), k)
        if all(bev_iou(cand, b) <= 0.1 for b in boxes):
            boxes.append(cand)

    pts = []
    for box in boxes:
        dist = np.linalg.norm(box.center[:2])
        n_pts = max(10, int(cfg.points_per_box / (1.0 + dist / 20.0)))
        pts.append(_sample_box_surface(rng, box, n_pts))
    # ground clutter, thinned with range
    cand = np.stack(
        [
            rng.uniform(cfg.x_range[0], cfg.x_range[1], cfg.clutter_points),
            rng.uniform(cfg.y_range[0], cfg.y_range[1], cfg.clutter_points),
            rng.normal(0.0, 0.05, cfg.clutter_points),
        ],
        axis=1,
    )
    r = np.linalg.norm(cand[:, :2], axis=1)
    keep = rng.random(cfg.clutter_points) < 1.0 / (1.0 + r / 15.0)
    pts.append(cand[keep])
    pts.append(np.array([[0.1, 0.1, 0.0]]))  # never-empty guarantee
    points = np.concatenate(pts, axis=0)
    return Scene(f"scene-{seed:06d}", boxes, points, build_rig(cfg), seed)


def _conv3x3(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Same-padded 3x3 convolution of an (H, W, C_in) map with a
    (3, 3, C_in, C_out) kernel."""
    pad = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(pad, (3, 3), axis=(0, 1))
    # win: (H, W, C_in, 3, 3) -> flatten against the kernel
    h, w = x.shape[:2]
    cols = win.transpose(0, 1, 3, 4, 2).reshape(h * w, -1)
    k = kernel.reshape(-1, kernel.shape[-1])
    return (cols @ k).reshape(h, w, kernel.shape[-1])


def _conv_stack(x: np.ndarray, seed: int, widths) -> np.ndarray:
    """Fixed random-weight conv stack (He-scaled 3x3 kernels, ReLU between
    layers). Stands in for a deep backbone: genuinely spatial computation with
    a multi-cell receptive field, deterministic in the seed."""
    rng = np.random.default_rng(seed)
    c_in = x.shape[2]
    for c_out in widths:
        k = rng.normal(size=(3, 3, c_in, c_out)) * np.sqrt(2.0 / (9.0 * c_in))
        x = np.maximum(_conv3x3(x, k), 0.0)
        c_in = c_out
    return x


def _lidar_projection(d: int) -> np.ndarray:
    rng = np.random.default_rng(_LIDAR_PROJ_SEED)
    return rng.normal(size=(_LIDAR_BASE_CHANNELS, d)) / np.sqrt(_LIDAR_BASE_CHANNELS)


_LIDAR_CONV_WIDTHS = (64, 64, 64, 64)


def _lidar_conv_head(d: int) -> np.ndarray:
    rng = np.random.default_rng(_LIDAR_PROJ_SEED + 1)
    c = _LIDAR_CONV_WIDTHS[-1]
    return rng.normal(size=(c, d)) / np.sqrt(c)


def lidar_stub_backbone(scene: Scene, spec: BevGridSpec, d_l: int) -> np.ndarray:
    """Per-cell point statistics through a two-branch stub backbone, shape
    (ny, nx, d_l): a pointwise projection of the raw statistics plus a fixed
    random-weight conv stack that gives the features a multi-cell receptive
    field (and the backbone a realistic share of the pipeline cost).

    Permutation-invariant in the input point order; cells farther than the
    conv receptive field from every point are exactly zero (no biases
    anywhere).
    """
    p = scene.lidar_points
    px, py = spec.pitch
    ix = np.floor((p[:, 0] - spec.x_range[0]) / px).astype(np.intp)
    iy = np.floor((p[:, 1] - spec.y_range[0]) / py).astype(np.intp)
    ok = (ix >= 0) & (ix < spec.nx) & (iy >= 0) & (iy < spec.ny)
    ix, iy, z = ix[ok], iy[ok], p[ok, 2]
    flat = iy * spec.nx + ix
    ncell = spec.nx * spec.ny
    count = np.bincount(flat, minlength=ncell).astype(np.float64)
    zsum = np.bincount(flat, weights=z, minlength=ncell)
    zsq = np.bincount(flat, weights=z * z, minlength=ncell)
    zmax = np.full(ncell, -np.inf)
    np.maximum.at(zmax, flat, z)
    occ = (count > 0).astype(np.float64)
    safe = np.maximum(count, 1.0)
    zmean = zsum / safe
    zvar = np.maximum(zsq / safe - zmean**2, 0.0)
    zmax = np.where(occ > 0, zmax, 0.0)
    base = np.stack([np.log1p(count), zmean * occ, zmax, zvar, occ], axis=1)
    stats = base.reshape(spec.ny, spec.nx, _LIDAR_BASE_CHANNELS)
    d_a = d_l // 2
    direct = stats @ _lidar_projection(d_a)
    conv = _conv_stack(stats, _LIDAR_PROJ_SEED + 2, _LIDAR_CONV_WIDTHS)
    return np.concatenate([direct, conv @ _lidar_conv_head(d_l - d_a)], axis=2)


def _camera_projection(k_classes: int, d: int) -> np.ndarray:
    rng = np.random.default_rng(_CAMERA_PROJ_SEED)
    return rng.normal(size=(k_classes + 1, d)) / np.sqrt(k_classes + 1)


_CAMERA_CONV_WIDTHS = (16, 16)


def _camera_conv_head(d: int) -> np.ndarray:
    rng = np.random.default_rng(_CAMERA_PROJ_SEED + 1)
    c = _CAMERA_CONV_WIDTHS[-1]
    return rng.normal(size=(c, d)) / np.sqrt(c)


def camera_stub_backbone(scene: Scene, cam: CameraModel, stride: int, d_c: int,
                         k_classes: int) -> np.ndarray:
    """Render gt boxes as class silhouettes with inverse-depth intensity into
    the downsampled raster, painter's algorithm (nearest box wins), then run
    the same two-branch projection + fixed conv stack as the LiDAR stub.
    Shape (H_img/stride, W_img/stride, d_c)."""
    w_img, h_img = cam.image_size
    wm, hm = w_img // stride, h_img // stride
    raster = np.zeros((hm, wm, k_classes + 1))
    order = []
    for box in scene.gt_boxes:
        pc = cam.extrinsic.apply(box.center)
        order.append((pc[2], box))
    order.sort(key=lambda t: -t[0])  # far to near; near overwrites
    for depth, box in order:
        if depth <= 0:
            continue
        corners = box.corners()
        pc = cam.extrinsic.apply(corners)
        if np.any(pc[:, 2] <= 1e-6):
            continue
        u = cam.fx * pc[:, 0] / pc[:, 2] + cam.cx
        v = cam.fy * pc[:, 1] / pc[:, 2] + cam.cy
        mu = u / stride - 0.5
        mv = v / stride - 0.5
        if mu.max() < 0 or mu.min() > wm - 1 or mv.max() < 0 or mv.min() > hm - 1:
            continue
        poly = np.stack([np.round(mu), np.round(mv)], axis=1).astype(np.int32)
        hull = cv2.convexHull(poly)
        mask = np.zeros((hm, wm), dtype=np.uint8)
        cv2.fillConvexPoly(mask, hull, 1)
        m = mask.astype(bool)
        intensity = 1.0 / depth
        raster[m] = 0.0
        raster[m, box.class_id] = intensity
        raster[m, k_classes] = intensity
    d_a = d_c // 2
    direct = raster @ _camera_projection(k_classes, d_a)
    conv = _conv_stack(raster, _CAMERA_PROJ_SEED + 2, _CAMERA_CONV_WIDTHS)
    return np.concatenate([direct, conv @ _camera_conv_head(d_c - d_a)], axis=2)


def build_feature_maps(scene: Scene, cfg: RunConfig, requires_grad: bool = False) -> FeatureMapSet:
    """Run both stub backbones; deterministic in (scene, cfg)."""
    spec = BevGridSpec(cfg.x_range, cfg.y_range, cfg.lidar_map_nx, cfg.lidar_map_ny,
                       cfg.fixed_z)
    lidar = Tensor(lidar_stub_backbone(scene, spec, cfg.d_lidar), requires_grad=requires_grad)
    cams = []
    for cam in scene.rig:
        fmap = camera_stub_backbone(scene, cam, cfg.cam_stride, cfg.d_camera, cfg.num_classes)
        cams.append(CameraFeatureMap(cam, Tensor(fmap, requires_grad=requires_grad), cfg.cam_stride))
    return FeatureMapSet(lidar_bev=lidar, lidar_spec=spec, cameras=cams)
