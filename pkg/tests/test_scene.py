import json

import numpy as np
import pytest

from fusedet.config import RunConfig
from fusedet.geometry import BevGridSpec, Box3D, project_to_image
from fusedet.scene import (
    SCENE_SCHEMA,
    Scene,
    bev_iou,
    build_feature_maps,
    build_rig,
    camera_stub_backbone,
    generate_scene,
    lidar_stub_backbone,
)


@pytest.fixture(scope="module")
def cfg():
    return RunConfig()


@pytest.fixture(scope="module")
def scene(cfg):
    return generate_scene(cfg, 7)


class TestBevIou:
    def test_identical_boxes(self):
        b = Box3D([0, 0, 0], [2, 4, 1], 0.0, 0)
        assert bev_iou(b, b) == pytest.approx(1.0)

    def test_disjoint(self):
        a = Box3D([0, 0, 0], [2, 2, 1], 0.0, 0)
        b = Box3D([10, 0, 0], [2, 2, 1], 0.0, 0)
        assert bev_iou(a, b) == 0.0

    def test_half_overlap_hand_value(self):
        # two unit-height 2x2 squares shifted by 1 in x: inter 2, union 6
        a = Box3D([0, 0, 0], [2, 2, 1], 0.0, 0)
        b = Box3D([1, 0, 0], [2, 2, 1], 0.0, 0)
        assert bev_iou(a, b) == pytest.approx(2.0 / 6.0)

    def test_rotation_invariant_to_shared_yaw(self):
        a = Box3D([0, 0, 0], [2, 4, 1], 0.3, 0)
        b = Box3D([1, 0.5, 0], [2, 3, 1], 0.3, 0)
        base = bev_iou(a, b)
        # rotating both boxes about the origin preserves IoU
        for extra in (0.5, 1.2):
            c, s = np.cos(extra), np.sin(extra)
            rot = np.array([[c, -s], [s, c]])
            a2 = Box3D([*rot @ a.center[:2], 0], a.size, a.yaw + extra, 0)
            b2 = Box3D([*rot @ b.center[:2], 0], b.size, b.yaw + extra, 0)
            assert bev_iou(a2, b2) == pytest.approx(base, abs=1e-9)


class TestGeneration:
    def test_deterministic(self, cfg):
        a, b = generate_scene(cfg, 3), generate_scene(cfg, 3)
        assert a.to_dict() == b.to_dict()

    def test_different_seeds_differ(self, cfg):
        assert generate_scene(cfg, 1).to_dict() != generate_scene(cfg, 2).to_dict()

    def test_object_count_and_ranges(self, cfg):
        for seed in range(20):
            s = generate_scene(cfg, seed)
            assert cfg.min_objects <= len(s.gt_boxes) <= cfg.max_objects
            for box in s.gt_boxes:
                assert cfg.x_range[0] < box.center[0] < cfg.x_range[1]
                assert cfg.y_range[0] < box.center[1] < cfg.y_range[1]

    def test_pairwise_iou_bounded(self, cfg):
        for seed in range(20):
            boxes = generate_scene(cfg, seed).gt_boxes
            for i in range(len(boxes)):
                for j in range(i + 1, len(boxes)):
                    assert bev_iou(boxes[i], boxes[j]) <= 0.1 + 1e-12

    def test_never_empty_point_cloud(self, cfg):
        assert generate_scene(cfg, 0).lidar_points.shape[0] > 0

    def test_points_cluster_near_boxes(self, cfg, scene):
        """Most non-clutter points must sit within the padded box footprints."""
        pts = scene.lidar_points
        near_ground = np.abs(pts[:, 2]) < 0.3
        elevated = pts[~near_ground]
        if len(elevated) == 0:
            pytest.skip("no elevated points this seed")
        close = np.zeros(len(elevated), dtype=bool)
        for box in scene.gt_boxes:
            d = np.hypot(*(elevated[:, :2] - box.center[:2]).T)
            close |= d <= np.hypot(*box.size[:2]) / 2 + 0.01
        assert close.mean() > 0.99


class TestSceneIo:
    def test_roundtrip(self, cfg, scene, tmp_path):
        path = tmp_path / "a.scene.json"
        scene.save(path)
        loaded = Scene.load(path)
        assert loaded.to_dict() == scene.to_dict()
        assert np.array_equal(loaded.lidar_points, scene.lidar_points)

    def test_schema_rejected(self, scene):
        d = scene.to_dict()
        d["schema"] = "fusedet.scene/v999"
        with pytest.raises(ValueError, match="schema"):
            Scene.from_dict(d)

    def test_schema_tag_present(self, scene, tmp_path):
        path = tmp_path / "b.scene.json"
        scene.save(path)
        with open(path) as f:
            assert json.load(f)["schema"] == SCENE_SCHEMA


class TestRig:
    def test_camera_count(self, cfg):
        assert len(build_rig(cfg)) == cfg.n_cameras

    def test_forward_point_visible_to_some_camera(self, cfg):
        rig = build_rig(cfg)
        seen = [project_to_image([10.0, 0.0, 0.5], cam)[2] for cam in rig]
        assert any(seen)

    def test_frustums_overlap(self, cfg):
        """Adjacent cameras share some visible ground points."""
        rig = build_rig(cfg)
        if len(rig) < 2:
            pytest.skip("single-camera rig")
        xs, ys = np.meshgrid(np.linspace(1, 24, 40), np.linspace(-24, 24, 80))
        pts = np.stack([xs.ravel(), ys.ravel(), np.zeros(xs.size)], axis=1)
        masks = [project_to_image(pts, cam)[2] for cam in rig]
        for a, b in zip(masks, masks[1:]):
            assert np.any(a & b)


class TestLidarStub:
    def spec(self, cfg):
        return BevGridSpec(cfg.x_range, cfg.y_range, cfg.lidar_map_nx, cfg.lidar_map_ny)

    def test_shape(self, cfg, scene):
        out = lidar_stub_backbone(scene, self.spec(cfg), cfg.d_lidar)
        assert out.shape == (cfg.lidar_map_ny, cfg.lidar_map_nx, cfg.d_lidar)

    def test_point_permutation_invariance(self, cfg, scene):
        spec = self.spec(cfg)
        a = lidar_stub_backbone(scene, spec, cfg.d_lidar)
        rng = np.random.default_rng(0)
        shuffled = Scene(scene.id, scene.gt_boxes,
                         scene.lidar_points[rng.permutation(len(scene.lidar_points))],
                         scene.rig, scene.rng_seed)
        b = lidar_stub_backbone(shuffled, spec, cfg.d_lidar)
        assert np.allclose(a, b, atol=1e-12)

    def test_cells_beyond_receptive_field_exactly_zero(self, cfg, scene):
        """No biases anywhere: cells farther than the conv receptive field
        from every occupied cell are exactly zero. The direct-projection
        channels are zero on every unoccupied cell."""
        spec = self.spec(cfg)
        out = lidar_stub_backbone(scene, spec, cfg.d_lidar)
        p = scene.lidar_points
        px, py = spec.pitch
        ix = np.floor((p[:, 0] - spec.x_range[0]) / px).astype(int)
        iy = np.floor((p[:, 1] - spec.y_range[0]) / py).astype(int)
        ok = (ix >= 0) & (ix < spec.nx) & (iy >= 0) & (iy < spec.ny)
        occupied = np.zeros((spec.ny, spec.nx), dtype=bool)
        occupied[iy[ok], ix[ok]] = True
        assert np.all(out[~occupied][:, : cfg.d_lidar // 2] == 0.0)
        # dilate by the receptive field (one cell per conv layer)
        from fusedet.scene import _LIDAR_CONV_WIDTHS
        r = len(_LIDAR_CONV_WIDTHS)
        reach = occupied.copy()
        for _ in range(r):
            tmp = reach.copy()
            tmp[1:] |= reach[:-1]
            tmp[:-1] |= reach[1:]
            grown = tmp.copy()
            grown[:, 1:] |= tmp[:, :-1]
            grown[:, :-1] |= tmp[:, 1:]
            reach = grown
        assert np.all(out[~reach] == 0.0)
        assert np.any(out[occupied] != 0.0)

    def test_deterministic(self, cfg, scene):
        spec = self.spec(cfg)
        a = lidar_stub_backbone(scene, spec, cfg.d_lidar)
        b = lidar_stub_backbone(scene, spec, cfg.d_lidar)
        assert np.array_equal(a, b)


class TestCameraStub:
    def test_shape(self, cfg, scene):
        cam = scene.rig[0]
        out = camera_stub_backbone(scene, cam, cfg.cam_stride, cfg.d_camera, cfg.num_classes)
        assert out.shape == (cfg.image_h // cfg.cam_stride,
                             cfg.image_w // cfg.cam_stride, cfg.d_camera)

    def test_empty_scene_renders_zero(self, cfg, scene):
        empty = Scene("empty", [], scene.lidar_points, scene.rig, 0)
        out = camera_stub_backbone(empty, scene.rig[0], cfg.cam_stride,
                                   cfg.d_camera, cfg.num_classes)
        assert np.all(out == 0.0)

    def test_painters_order_near_wins(self, cfg):
        """Two boxes on the same ray: the nearer one owns the shared pixels."""
        rig = build_rig(cfg)
        cam = rig[len(rig) // 2] if len(rig) % 2 else rig[0]
        near = Box3D([6.0, 0.0, 0.9], [1.8, 4.2, 1.8], 0.0, 0)
        far = Box3D([14.0, 0.0, 0.9], [1.8, 4.2, 1.8], 0.0, 1)
        scene2 = Scene("two", [near, far], np.zeros((1, 3)), rig, 0)
        raw = camera_stub_backbone(scene2, cam, cfg.cam_stride, 4, cfg.num_classes)
        # recover the class raster via the known projection inverse is overkill;
        # instead render each box alone and check the composite equals
        # "far first, then near overwrites"
        only_near = camera_stub_backbone(Scene("n", [near], np.zeros((1, 3)), rig, 0),
                                         cam, cfg.cam_stride, 4, cfg.num_classes)
        near_mask = np.any(only_near != 0, axis=2)
        assert near_mask.any()
        assert np.allclose(raw[near_mask], only_near[near_mask], atol=1e-12)

    def test_closer_box_brighter(self, cfg):
        rig = build_rig(cfg)
        cam = rig[len(rig) // 2] if len(rig) % 2 else rig[0]
        box_near = Box3D([6.0, 0.0, 0.9], [1.8, 4.2, 1.8], 0.0, 0)
        box_far = Box3D([18.0, 0.0, 0.9], [1.8, 4.2, 1.8], 0.0, 0)
        f_near = camera_stub_backbone(Scene("a", [box_near], np.zeros((1, 3)), rig, 0),
                                      cam, cfg.cam_stride, 4, cfg.num_classes)
        f_far = camera_stub_backbone(Scene("b", [box_far], np.zeros((1, 3)), rig, 0),
                                     cam, cfg.cam_stride, 4, cfg.num_classes)
        assert np.abs(f_near).max() > np.abs(f_far).max()


class TestLinearProbe:
    def test_lidar_features_separate_occupied_cells(self, cfg):
        """Sanity gate: a least-squares probe on stub features must recover
        box-center occupancy far better than chance."""
        spec = BevGridSpec(cfg.x_range, cfg.y_range, cfg.lidar_map_nx, cfg.lidar_map_ny)
        feats, labels = [], []
        for seed in range(15):
            s = generate_scene(cfg, seed)
            fmap = lidar_stub_backbone(s, spec, cfg.d_lidar).reshape(-1, cfg.d_lidar)
            lab = np.zeros(spec.m_dense)
            px, py = spec.pitch
            for box in s.gt_boxes:
                ix = int((box.center[0] - spec.x_range[0]) / px)
                iy = int((box.center[1] - spec.y_range[0]) / py)
                lab[iy * spec.nx + ix] = 1.0
            feats.append(fmap)
            labels.append(lab)
        x = np.concatenate(feats)
        y = np.concatenate(labels)
        x1 = np.concatenate([x, np.ones((len(x), 1))], axis=1)
        w, *_ = np.linalg.lstsq(x1, y, rcond=None)
        score = x1 @ w
        pos, neg = score[y == 1], score[y == 0]
        # AUC via the rank statistic
        order = np.argsort(np.concatenate([pos, neg]))
        ranks = np.empty(len(order))
        ranks[order] = np.arange(1, len(order) + 1)
        auc = (ranks[: len(pos)].sum() - len(pos) * (len(pos) + 1) / 2) / (len(pos) * len(neg))
        assert auc > 0.9


def test_build_feature_maps_deterministic(cfg, scene):
    a = build_feature_maps(scene, cfg)
    b = build_feature_maps(scene, cfg)
    assert np.array_equal(a.lidar_bev.data, b.lidar_bev.data)
    for ca, cb in zip(a.cameras, b.cameras):
        assert np.array_equal(ca.fmap.data, cb.fmap.data)
    assert len(a.cameras) == cfg.n_cameras
