"""Detection metrics (distance-threshold AP / mAP, initial-query recall),
the init-strategy comparison harness, and the latency benchmark."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig
from .model import Detector, StageTimer
from .scene import Scene, build_feature_maps

DIST_THRESHOLDS = (0.5, 1.0, 2.0, 4.0)


@dataclass
class EvalReport:
    per_class_ap: dict          # class_id -> {threshold: AP or None}
    mean_ap: float | None
    init_recall: float | None = None
    latency: dict | None = None

    def to_dict(self) -> dict:
        return {
            "per_class_ap": {str(k): {str(t): v for t, v in d.items()}
                             for k, d in self.per_class_ap.items()},
            "mAP": self.mean_ap,
            "init_recall": self.init_recall,
            "latency": self.latency,
        }


def average_precision(dets_per_scene, gts_per_scene, class_id: int,
                      dist_threshold: float):
    """Distance-based AP for one class over a scene collection.

    dets_per_scene: per scene, list of (center_xy, score, class_id);
    gts_per_scene: per scene, list of (center_xy, class_id). Detections are
    matched greedily in global confidence order; each gt matches at most
    once. Returns None when the class never occurs in the ground truth.
    """
    n_gt = sum(1 for gts in gts_per_scene for _, k in gts if k == class_id)
    if n_gt == 0:
        return None
    records = []  # (score, scene_idx, center)
    for si, dets in enumerate(dets_per_scene):
        for center, score, k in dets:
            if k == class_id:
                records.append((float(score), si, np.asarray(center, dtype=np.float64)))
    if not records:
        return 0.0
    records.sort(key=lambda r: -r[0])
    matched = [set() for _ in gts_per_scene]
    tp = np.zeros(len(records))
    for ri, (_, si, center) in enumerate(records):
        best_d, best_j = np.inf, -1
        for j, (gc, k) in enumerate(gts_per_scene[si]):
            if k != class_id or j in matched[si]:
                continue
            d = float(np.hypot(*(np.asarray(gc)[:2] - center[:2])))
            if d < best_d:
                best_d, best_j = d, j
        if best_j >= 0 and best_d <= dist_threshold:
            matched[si].add(best_j)
            tp[ri] = 1.0
    cum_tp = np.cumsum(tp)
    precision = cum_tp / (np.arange(len(records)) + 1)
    recall = cum_tp / n_gt
    # all-points interpolation: sum over recall steps of the max precision to the right
    ap = 0.0
    prev_r = 0.0
    for i in range(len(records)):
        if tp[i] > 0:
            p = precision[i:].max()
            ap += (recall[i] - prev_r) * p
            prev_r = recall[i]
    return float(ap)


def evaluate_detections(dets_per_scene, gts_per_scene, num_classes: int,
                        thresholds=DIST_THRESHOLDS) -> EvalReport:
    per_class = {}
    vals = []
    for k in range(num_classes):
        per_class[k] = {}
        for t in thresholds:
            ap = average_precision(dets_per_scene, gts_per_scene, k, t)
            per_class[k][t] = ap
            if ap is not None:
                vals.append(ap)
    mean_ap = float(np.mean(vals)) if vals else None
    return EvalReport(per_class, mean_ap)


def detections_for_eval(det_set) -> list:
    """Flatten a DetectionSet into (center_xy, score, class) triples."""
    return [
        (det_set.boxes[i].center[:2], float(det_set.scores[i]), int(det_set.class_ids[i]))
        for i in range(len(det_set.boxes))
    ]


def gts_for_eval(scene: Scene) -> list:
    return [(b.center[:2], b.class_id) for b in scene.gt_boxes]


def run_eval(detector: Detector, scenes) -> EvalReport:
    dets, gts, recalls = [], [], []
    for scene in scenes:
        result = detector.run_scene(scene)
        dets.append(detections_for_eval(result.detections))
        gts.append(gts_for_eval(scene))
        recalls.append(init_recall(result.queries.locations, scene.gt_boxes))
    report = evaluate_detections(dets, gts, detector.cfg.num_classes)
    report.init_recall = float(np.mean(recalls))
    return report


def init_recall(query_locations, gt_boxes, radius_m: float = 2.0) -> float:
    """Fraction of gt boxes with at least one query within radius_m of their
    BEV center. Vacuously 1.0 with no ground truth."""
    if radius_m <= 0:
        raise ValueError("radius must be positive")
    if not gt_boxes:
        return 1.0
    q = np.atleast_2d(np.asarray(query_locations, dtype=np.float64))[:, :2]
    hit = 0
    for box in gt_boxes:
        d = np.hypot(*(q - box.center[:2]).T)
        if d.min() <= radius_m:
            hit += 1
    return hit / len(gt_boxes)


def bench_latency(detector: Detector, scenes, reps: int = 10, warmup: int = 2) -> dict:
    """Per-stage wall-clock statistics of the inference pipeline.

    Stages: stub backbones, query initialization, decoder body, heads.
    Scene generation and file I/O are outside the measured region. Median and
    p95 are over reps * len(scenes) runs; single-threaded timing.
    """
    import time as _time

    samples = {"backbones": [], "init": [], "decoder": [], "heads": [], "total": []}
    for rep in range(warmup + reps):
        for scene in scenes:
            timer = StageTimer()
            t0 = _time.perf_counter()
            detector.run_scene(scene, timer=timer)
            wall = _time.perf_counter() - t0
            if rep < warmup:
                continue
            for stage in ("backbones", "init", "decoder", "heads"):
                samples[stage].append(timer.totals.get(stage, 0.0))
            # end-to-end wall time, measured independently of the stage sum
            samples["total"].append(wall)
    out = {}
    for stage, vals in samples.items():
        v = np.asarray(vals)
        out[stage] = {"median_ms": float(np.median(v) * 1e3),
                      "p95_ms": float(np.percentile(v, 95) * 1e3)}
    out["init_overhead_ratio"] = (
        out["init"]["median_ms"] / out["total"]["median_ms"] if out["total"]["median_ms"] else 0.0
    )
    return out


def compare_strategies(models: dict, scenes) -> list:
    """Comparison table over trained models keyed by (strategy, M, L).

    Returns plot-ready rows; missing cells are reported as absent rather
    than failing.
    """
    rows = []
    for (strategy, m, layers), detector in sorted(models.items()):
        if detector is None:
            rows.append({"strategy": strategy, "m_queries": m, "n_layers": layers,
                         "status": "absent"})
            continue
        report = run_eval(detector, scenes)
        rows.append({
            "strategy": strategy,
            "m_queries": m,
            "n_layers": layers,
            "status": "ok",
            "mAP": report.mean_ap,
            "init_recall": report.init_recall,
        })
    return rows
