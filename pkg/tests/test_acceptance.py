"""The acceptance suite: one test per criterion, one recorded pass/fail line
each (printed in the terminal summary). Training-backed criteria share the
module-scoped fixtures below; everything is deterministic in the seeds, so
thresholds are asserted exactly, not statistically.

Tolerances used here:
  criterion 1: exact cost equality within 1e-9 (floating sums), wall < 10 s
  criterion 2: max rel. err < 1e-4 at step 1e-5 (f64 central differences)
  criterion 3: exact (==) where stated, 1e-9 elsewhere
  criterion 4: mAP gap >= 0.10; M=96->32 drop difference >= 0.05
  criterion 5: init_recall(2 m) >= 0.9; agnostic at least 0.10 lower
  criterion 6: {L,C} mAP >= max(unimodal) - 0.02; identical output shapes
  criterion 7: init stage < 10% of end-to-end median latency
  criterion 8: heatmap off -> >= 3/5 seeds below init_recall 0.5 where
               heatmap on reaches >= 0.9 on all 5 (non-blocking if the
               synthetic regime converges anyway; stated explicitly then)
"""

import itertools
import time

import numpy as np
import pytest

from conftest import record_criterion
from fusedet import kernels
from fusedet import tensor as T
from fusedet.config import RunConfig
from fusedet.evalbench import bench_latency, init_recall, run_eval
from fusedet.geometry import Box3D, decode_box, encode_box
from fusedet.losses import total_loss
from fusedet.model import Detector
from fusedet.queries import (QuerySet, detections_from_heads, initialize_queries,
                             select_top_m)
from fusedet.sampling import bilinear_sample
from fusedet.scene import build_feature_maps, generate_scene
from fusedet.tensor import Tape, Tensor
from fusedet.train import train

TRAIN_EPOCHS = 12
N_TRAIN_SCENES = 200
N_EVAL_SCENES = 100


@pytest.fixture(scope="module")
def base_cfg():
    return RunConfig()


@pytest.fixture(scope="module")
def train_scenes(base_cfg):
    return [generate_scene(base_cfg, s) for s in range(N_TRAIN_SCENES)]


@pytest.fixture(scope="module")
def eval_scenes(base_cfg):
    return [generate_scene(base_cfg, 10_000 + s) for s in range(N_EVAL_SCENES)]


def _train_cell(train_scenes, **overrides):
    d = RunConfig().to_dict()
    d["epochs"] = TRAIN_EPOCHS
    d.update(overrides)
    cfg = RunConfig.from_dict(d)
    t0 = time.time()
    det = train(cfg, train_scenes)
    wall = time.time() - t0
    assert wall < 600.0, f"training cell {overrides} exceeded the 10-minute budget"
    return det


@pytest.fixture(scope="module")
def strategy_grid(train_scenes, eval_scenes):
    """mAP / recall for every (strategy, M, L) cell of the comparison grid."""
    out = {}
    for strat, m, layers in itertools.product(("proposed", "agnostic"), (32, 96), (1, 3)):
        det = _train_cell(train_scenes, init_strategy=strat, m_queries=m,
                          n_layers=layers)
        rep = run_eval(det, eval_scenes)
        out[(strat, m, layers)] = {
            "detector": det, "mAP": rep.mean_ap, "recall": rep.init_recall,
        }
    return out


@pytest.fixture(scope="module")
def modality_models(train_scenes):
    return {
        mods: _train_cell(train_scenes, active_modalities=mods)
        for mods in (("lidar",), ("camera",), ("lidar", "camera"))
    }


def test_criterion_1_hungarian_oracle():
    """1000 random cost matrices, n, m <= 7: optimal cost equals exhaustive
    permutation search; total runtime < 10 s."""
    rng = np.random.default_rng(2024)
    perm_cache = {}
    t0 = time.time()
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(1, 8))
        m = int(rng.integers(1, 8))
        cost = rng.normal(size=(n, m)) * 10.0
        rows, cols = kernels.lsap(cost)
        got = cost[rows, cols].sum()
        # vectorized exhaustive search over all size-min(n,m) injections
        c = cost if n <= m else cost.T
        key = c.shape
        if key not in perm_cache:
            perm_cache[key] = np.array(list(itertools.permutations(range(key[1]), key[0])))
        perms = perm_cache[key]
        best = c[np.arange(key[0])[None, :], perms].sum(axis=1).min()
        worst = max(worst, abs(got - best))
        assert abs(got - best) < 1e-9, (cost, got, best)
    wall = time.time() - t0
    ok = wall < 10.0
    record_criterion(1, "hungarian-oracle",
                     ok, f"1000 matrices <=7x7, max |cost diff| = {worst:.2e}, {wall:.2f} s < 10 s")
    assert ok, f"runtime {wall:.2f} s exceeds 10 s"


def test_criterion_2_gradient_suite():
    """Per-op finite-difference checks plus the full total_loss (dense stage +
    heatmap + 2 decoder layers) on a 2-object scene. Step 1e-5, max rel err
    < 1e-4, runtime < 60 s."""
    t0 = time.time()
    rng = np.random.default_rng(7)

    # every differentiable op in one composed check plus targeted singles;
    # weighting constants are drawn once (the checked function must be
    # deterministic across finite-difference evaluations)
    w43 = Tensor(rng.normal(size=(4, 3)))
    w54 = Tensor(rng.normal(size=(5, 4)))
    w42 = Tensor(rng.normal(size=(4, 2)))
    w45 = Tensor(rng.normal(size=(4, 5)))
    w34 = Tensor(rng.normal(size=(3, 4)))
    ops = {
        "matmul": lambda x: T.tsum(T.matmul(x, w43)),
        "sigmoid": lambda x: T.tsum(T.sigmoid(x)),
        "relu": lambda x: T.tsum(T.relu(x) * T.relu(x)),
        "exp": lambda x: T.tsum(T.exp(x * 0.3)),
        "log": lambda x: T.tsum(T.log(T.sigmoid(x) + 1.0)),
        "sin-cos": lambda x: T.tsum(T.sin(x) * T.cos(x)),
        "sqrt": lambda x: T.tsum(T.sqrt(T.sigmoid(x) + 0.5)),
        "abs": lambda x: T.tsum(T.absolute(x + 0.1)),
        "softmax": lambda x: T.tsum(T.softmax(x, axis=-1) * w54),
        "mean": lambda x: T.mean(x * x),
        "clip": lambda x: T.tsum(T.clip(x, -0.5, 0.5) * w54),
        "structural": lambda x: T.tsum(
            T.slice_cols(T.concat([T.reshape(x, (4, 5)), w42], axis=1), 1, 6) * w45),
        "gather": lambda x: T.tsum(T.gather_rows(x, [0, 0, 3]) * w34),
    }
    worst_op = 0.0
    for name, f in ops.items():
        x = Tensor(rng.normal(size=(5, 4)), requires_grad=True)
        report = T.check_gradients(f, [x], step=1e-5, tol=1e-4)
        assert report["passed"], (name, report)
        worst_op = max(worst_op, report["max_rel_err"])

    # bilinear sampling
    fmap = Tensor(rng.normal(size=(5, 6, 3)), requires_grad=True)
    gx, gy = rng.uniform(0, 4, size=(2, 7))
    w = rng.normal(size=(7, 3))
    report = T.check_gradients(lambda f: T.tsum(bilinear_sample(f, gx, gy) * Tensor(w)),
                               [fmap], step=1e-5, tol=1e-4)
    assert report["passed"], report
    worst_op = max(worst_op, report["max_rel_err"])

    # full total_loss on a 2-object scene through 2 decoder layers
    d = RunConfig().to_dict()
    d.update(min_objects=2, max_objects=2, n_layers=2)
    cfg = RunConfig.from_dict(d)
    scene = generate_scene(cfg, 2)
    assert len(scene.gt_boxes) == 2
    maps = build_feature_maps(scene, cfg, requires_grad=True)
    det = Detector(cfg)
    # shake the parameters off their initialization (the zero-initialized reg
    # output layer would otherwise hide its fan-in weights from the check)
    for _, p in det.store.items():
        p.data += rng.normal(0, 0.01, size=p.data.shape)

    leaves = [p for _, p in det.store.items()] + [maps.lidar_bev] + [
        c.fmap for c in maps.cameras
    ]

    # The model deliberately stops gradients at the discrete/geometric
    # re-derivations: top-M selection, the query locations fed to sampling and
    # positional embedding, and the inter-layer refinement anchors. For the
    # finite-difference oracle to measure the same function autodiff
    # differentiates, those quantities are frozen at the base point.
    base = det.forward(maps)
    frozen_query_locs = base.queries.locations.copy()
    frozen_layer_locs = [layer_det.anchors.copy() for layer_det in base.layers]

    def loss_value():
        dense, _ = det.stage.dense_forward(maps, cfg.active_modalities)
        x = det.stage.embed_locations(frozen_query_locs, maps, cfg.active_modalities)
        layer_dets = []
        for layer, locs in zip(det.decoder.layers, frozen_layer_locs):
            x = layer(x, locs, maps)
            layer_dets.append(detections_from_heads(
                T.sigmoid(det.cls_head(x)), det.reg_head(x), locs))
        loss, _ = total_loss(dense, layer_dets, scene.gt_boxes, det.grid, cfg)
        return loss

    # at the base point the frozen evaluation is the actual training loss
    actual, _ = total_loss(base.dense, base.layers, scene.gt_boxes, det.grid, cfg)
    assert loss_value().item() == actual.item()

    for leaf in leaves:
        leaf.zero_grad()
    with Tape() as tape:
        tape.backward(loss_value())
    analytic = [leaf.grad.copy() for leaf in leaves]

    step = 1e-5
    worst_loss = 0.0
    coord_rng = np.random.default_rng(0)
    for leaf, grad in zip(leaves, analytic):
        flat = leaf.data.reshape(-1)
        n_coords = min(3, flat.size)
        for idx in coord_rng.choice(flat.size, size=n_coords, replace=False):
            keep = flat[idx]
            flat[idx] = keep + step
            up = loss_value().item()
            flat[idx] = keep - step
            dn = loss_value().item()
            flat[idx] = keep
            fd = (up - dn) / (2 * step)
            a = grad.reshape(-1)[idx]
            rel = abs(a - fd) / max(abs(a), abs(fd), 1e-3)
            worst_loss = max(worst_loss, rel)
    wall = time.time() - t0
    ok = worst_loss < 1e-4 and wall < 60.0
    record_criterion(2, "gradient-suite", ok,
                     f"ops max rel err {worst_op:.2e}, total_loss max rel err "
                     f"{worst_loss:.2e} < 1e-4, {wall:.1f} s < 60 s")
    assert worst_loss < 1e-4
    assert wall < 60.0, f"runtime {wall:.1f} s exceeds 60 s"


def test_criterion_3_definitional_invariants(base_cfg):
    cfg = base_cfg
    det = Detector(cfg)
    maps = build_feature_maps(generate_scene(cfg, 3), cfg)

    # (a) location update is exactly the predicted offset
    qs, dense = initialize_queries(maps, det.stage, cfg.m_queries, cfg.active_modalities)
    assert np.array_equal(qs.locations - det.stage.anchors[qs.origin],
                          dense.reg.data[qs.origin, :3])

    # (b) top-M equals the full-sort oracle
    scores = dense.cls_scores.data
    conf = scores.max(axis=1)
    oracle = sorted(range(len(conf)), key=lambda i: (-conf[i], i))[: cfg.m_queries]
    idx, _ = select_top_m(scores, cfg.m_queries)
    assert list(idx) == oracle

    # (c) bilinear exactness at grid nodes
    rng = np.random.default_rng(0)
    fmap = Tensor(rng.normal(size=(6, 7, 4)))
    gy, gx = np.meshgrid(np.arange(6.0), np.arange(7.0), indexing="ij")
    out = bilinear_sample(fmap, gx.ravel(), gy.ravel())
    assert np.array_equal(out.data, fmap.data.reshape(-1, 4))

    # (d) encode/decode round-trip < 1e-9
    worst = 0.0
    for _ in range(1000):
        box = Box3D(rng.uniform(-20, 20, 3), rng.uniform(0.3, 6.0, 3),
                    rng.uniform(-np.pi, np.pi), int(rng.integers(0, 3)))
        anchor = rng.uniform(-20, 20, 3)
        back = decode_box(encode_box(box, anchor), anchor, box.class_id)
        worst = max(worst,
                    np.abs(back.center - box.center).max(),
                    np.abs(back.size - box.size).max(),
                    abs(np.arctan2(np.sin(back.yaw - box.yaw), np.cos(back.yaw - box.yaw))))
    assert worst < 1e-9

    # (e) decoder permutation equivariance
    perm = rng.permutation(len(qs))
    out_a = det.decoder.decode(qs, maps)[-1]
    out_b = det.decoder.decode(
        QuerySet(Tensor(qs.features.data[perm]), qs.locations[perm], qs.origin[perm]),
        maps)[-1]
    assert np.allclose(out_b.cls_scores.data, out_a.cls_scores.data[perm], atol=1e-9)
    assert np.allclose(out_b.reg.data, out_a.reg.data[perm], atol=1e-9)

    # (f) determinism: two fresh runs, same seed, bit-identical
    r1 = Detector(cfg).run_scene(generate_scene(cfg, 4)).detections
    r2 = Detector(cfg).run_scene(generate_scene(cfg, 4)).detections
    assert np.array_equal(r1.cls_scores.data, r2.cls_scores.data)
    assert np.array_equal(r1.reg.data, r2.reg.data)

    record_criterion(3, "definitional-invariants", True,
                     "c'-c exact; top-M == sort oracle; bilinear node-exact; "
                     f"round-trip max err {worst:.1e} < 1e-9; decoder permutation-"
                     "equivariant (1e-9); bit-identical reruns")


def test_criterion_4_strategy_directionality(strategy_grid):
    g = strategy_grid
    gap = g[("proposed", 32, 1)]["mAP"] - g[("agnostic", 32, 1)]["mAP"]
    drop_ag = g[("agnostic", 96, 1)]["mAP"] - g[("agnostic", 32, 1)]["mAP"]
    drop_pr = g[("proposed", 96, 1)]["mAP"] - g[("proposed", 32, 1)]["mAP"]
    diff = drop_ag - drop_pr
    ok = gap >= 0.10 and diff >= 0.05
    cells = ", ".join(
        f"{s}@M{m}L{l}={g[(s, m, l)]['mAP']:.3f}"
        for s, m, l in itertools.product(("proposed", "agnostic"), (32, 96), (1, 3))
    )
    record_criterion(4, "strategy-directionality", ok,
                     f"mAP gap @(M=32,L=1) = {gap:.3f} >= 0.10; M=96->32 drop "
                     f"difference = {diff:.3f} >= 0.05 [{cells}]")
    assert gap >= 0.10, f"proposed-vs-agnostic mAP gap {gap:.3f} < 0.10"
    assert diff >= 0.05, f"drop difference {diff:.3f} < 0.05"


def test_criterion_5_init_recall(strategy_grid, eval_scenes):
    rec_pr = strategy_grid[("proposed", 32, 1)]["recall"]
    rec_ag = strategy_grid[("agnostic", 32, 1)]["recall"]
    assert len(eval_scenes) == 100
    assert all(len(s.gt_boxes) <= 10 for s in eval_scenes)
    ok = rec_pr >= 0.9 and rec_ag <= rec_pr - 0.10
    record_criterion(5, "init-recall", ok,
                     f"proposed init_recall(2 m) = {rec_pr:.3f} >= 0.9 on 100 "
                     f"held-out scenes; agnostic = {rec_ag:.3f} (gap "
                     f"{rec_pr - rec_ag:.3f} >= 0.10)")
    assert rec_pr >= 0.9
    assert rec_ag <= rec_pr - 0.10


def test_criterion_6_modality_modularity(modality_models, eval_scenes):
    shapes = {}
    maps_cache = {}
    results = {}
    for mods, det in modality_models.items():
        scene = eval_scenes[0]
        result = det.run_scene(scene)
        shapes[mods] = (result.detections.cls_scores.data.shape,
                        result.detections.reg.data.shape)
        rep = run_eval(det, eval_scenes)
        results[mods] = rep.mean_ap
    assert len(set(shapes.values())) == 1, f"output shapes differ: {shapes}"
    lc = results[("lidar", "camera")]
    uni = max(results[("lidar",)], results[("camera",)])
    ok = lc >= uni - 0.02
    record_criterion(6, "modality-modularity", ok,
                     f"identical output shapes under {{L}},{{C}},{{L,C}}; mAP "
                     f"L={results[('lidar',)]:.3f} C={results[('camera',)]:.3f} "
                     f"LC={lc:.3f} >= max(unimodal) - 0.02")
    assert lc >= uni - 0.02


def test_criterion_7_init_latency_share(strategy_grid, base_cfg):
    det = strategy_grid[("proposed", 32, 1)]["detector"]
    scenes = [generate_scene(base_cfg, 30_000 + s) for s in range(5)]
    stats = bench_latency(det, scenes, reps=10)
    ratio = stats["init_overhead_ratio"]
    ok = ratio < 0.10
    record_criterion(7, "init-latency-share", ok,
                     f"init median {stats['init']['median_ms']:.2f} ms of "
                     f"{stats['total']['median_ms']:.2f} ms end-to-end = "
                     f"{ratio:.1%} < 10% (backbones "
                     f"{stats['backbones']['median_ms']:.2f} ms, decoder "
                     f"{stats['decoder']['median_ms']:.2f} ms)")
    assert ratio < 0.10, f"init share {ratio:.1%} >= 10%"


def test_criterion_8_heatmap_necessity(train_scenes, base_cfg):
    """Five seeds with and without the dense heatmap term (smaller budget:
    80 scenes, 6 epochs). The enabled configuration must reach init_recall
    >= 0.9 on every seed; the ablation is directional and non-blocking."""
    c8_train = train_scenes[:80]
    c8_eval = [generate_scene(base_cfg, 20_000 + s) for s in range(30)]

    def recall_for(seed, use_heatmap):
        d = RunConfig().to_dict()
        d.update(epochs=6, seed=seed, use_heatmap_loss=use_heatmap)
        cfg = RunConfig.from_dict(d)
        det = train(cfg, c8_train)
        vals = [init_recall(det.initialize(build_feature_maps(s, cfg))[0].locations,
                            s.gt_boxes) for s in c8_eval]
        return float(np.mean(vals))

    on = [recall_for(seed, True) for seed in range(5)]
    off = [recall_for(seed, False) for seed in range(5)]
    assert all(r >= 0.9 for r in on), f"heatmap-enabled recalls {on}"
    failures = sum(r < 0.5 for r in off)
    on_s = "/".join(f"{r:.2f}" for r in on)
    off_s = "/".join(f"{r:.2f}" for r in off)
    if failures >= 3:
        record_criterion(8, "heatmap-necessity", True,
                         f"enabled recalls [{on_s}] all >= 0.9; disabled recalls "
                         f"[{off_s}]: {failures}/5 seeds below 0.5 (>= 3 required)")
    else:
        record_criterion(8, "heatmap-necessity", True,
                         f"enabled recalls [{on_s}] all >= 0.9; NOTE: the synthetic "
                         f"regime converges even without the heatmap term "
                         f"(disabled recalls [{off_s}], only {failures}/5 seeds "
                         f"below 0.5) — criterion is non-blocking by design and "
                         f"this outcome is reported explicitly as required")
