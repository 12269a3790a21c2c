"""Command-line entry point: scene generation, toy training, detection,
evaluation, latency benchmarking, and the init-strategy comparison."""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig
from .evalbench import bench_latency, compare_strategies, detections_for_eval, run_eval
from .model import Detector
from .scene import Scene, generate_scene
from .train import TrainingDiverged, train
from .weights_io import load_tensors, save_tensors

_MODALITY_FLAGS = {"l": ("lidar",), "c": ("camera",), "lc": ("lidar", "camera")}


def worker_count(default_serial: bool = False) -> int:
    """Thread count; FUSEDET_THREADS is the only environment override."""
    env = os.environ.get("FUSEDET_THREADS")
    if env:
        return max(1, int(env))
    return 1 if default_serial else (os.cpu_count() or 1)


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if getattr(args, "modalities", None):
        d = cfg.to_dict()
        d["active_modalities"] = list(_MODALITY_FLAGS[args.modalities])
        cfg = RunConfig.from_dict(d)
    if getattr(args, "print_config", False):
        json.dump(cfg.to_dict(), sys.stdout, indent=2, sort_keys=True)
        print()
    return cfg


def _load_scenes(scene_dir) -> list:
    paths = sorted(Path(scene_dir).glob("*.scene.json"))
    if not paths:
        raise SystemExit(f"no *.scene.json files in {scene_dir}")
    return [Scene.load(p) for p in paths]


def _sidecar(weights_path) -> Path:
    return Path(str(weights_path) + ".json")


def _save_model(path, detector: Detector):
    save_tensors(path, detector.store.state_dict())
    meta = {"config": detector.cfg.to_dict(), "config_hash": detector.cfg.config_hash()}
    with open(_sidecar(path), "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
        f.write("\n")


def _load_model(path, requested_modalities=None) -> Detector:
    with open(_sidecar(path)) as f:
        meta = json.load(f)
    cfg = RunConfig.from_dict(meta["config"])
    if requested_modalities is not None:
        trained = tuple(cfg.active_modalities)
        wanted = _MODALITY_FLAGS[requested_modalities]
        if tuple(wanted) != trained:
            raise SystemExit(
                f"weights at {path} were trained for modalities {trained}; "
                f"requested {tuple(wanted)} is incompatible with the fusion input width"
            )
    detector = Detector(cfg)
    detector.store.load_state_dict(load_tensors(path))
    return detector


def cmd_scenegen(args):
    cfg = _load_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seeds = list(range(args.seed, args.seed + args.n))
    workers = worker_count()

    def gen(seed):
        return generate_scene(cfg, seed)

    if workers > 1 and len(seeds) > 1:
        with ThreadPoolExecutor(workers) as pool:
            scenes = list(pool.map(gen, seeds))
    else:
        scenes = [gen(s) for s in seeds]
    files = []
    for scene in scenes:
        path = out / f"{scene.id}.scene.json"
        scene.save(path)
        files.append(path.name)
    manifest = {"config_hash": cfg.config_hash(), "n": args.n, "seeds": seeds,
                "files": files}
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    print(f"wrote {len(files)} scenes to {out} (config {cfg.config_hash()})")


def cmd_train(args):
    cfg = _load_config(args)
    scenes = _load_scenes(args.scenes)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    ckpt = Path(str(out) + ".ckpt")
    log_path = Path(str(out) + ".log.jsonl")
    mode = "a" if args.resume else "w"
    with open(log_path, mode) as log_file:
        try:
            detector = train(cfg, scenes, log_file=log_file,
                             resume_from=ckpt if args.resume else None,
                             checkpoint_path=ckpt)
        except TrainingDiverged as e:
            print(f"training diverged: {e}", file=sys.stderr)
            print(f"last good checkpoint: {ckpt}", file=sys.stderr)
            raise SystemExit(2)
    _save_model(out, detector)
    print(f"wrote weights to {out} (config {cfg.config_hash()})")


def cmd_detect(args):
    detector = _load_model(args.weights, args.modalities)
    scenes = _load_scenes(args.scenes)
    out_f = open(args.out, "w") if args.out else sys.stdout
    for scene in scenes:
        result = detector.run_scene(scene)
        dets = result.detections
        rec = {
            "scene": scene.id,
            "detections": [
                {
                    "center": dets.boxes[i].center.tolist(),
                    "size": dets.boxes[i].size.tolist(),
                    "yaw": dets.boxes[i].yaw,
                    "class_id": int(dets.class_ids[i]),
                    "score": float(dets.scores[i]),
                }
                for i in range(len(dets.boxes))
            ],
        }
        out_f.write(json.dumps(rec) + "\n")
    if args.out:
        out_f.close()
        print(f"wrote detections to {args.out}")


def cmd_eval(args):
    detector = _load_model(args.weights, args.modalities)
    scenes = _load_scenes(args.scenes)
    report = run_eval(detector, scenes)
    payload = report.to_dict()
    payload["config_hash"] = detector.cfg.config_hash()
    json.dump(payload, sys.stdout, indent=2, sort_keys=True)
    print()
    if args.out:
        with open(args.out, "w") as f:
            json.dump(payload, f, indent=2, sort_keys=True)
            f.write("\n")


def cmd_bench(args):
    if args.weights:
        detector = _load_model(args.weights, args.modalities)
    else:
        cfg = _load_config(args)
        detector = Detector(cfg)
    scenes = _load_scenes(args.scenes)[: args.max_scenes]
    stats = bench_latency(detector, scenes, reps=args.reps)
    json.dump(stats, sys.stdout, indent=2, sort_keys=True)
    print()


def cmd_compare(args):
    cfg = _load_config(args)
    train_scenes = _load_scenes(args.scenes)
    eval_scenes = _load_scenes(args.eval_scenes) if args.eval_scenes else train_scenes
    models = {}
    base = cfg.to_dict()
    for strategy in ("proposed", "agnostic"):
        for m in args.m_list:
            for layers in args.l_list:
                d = dict(base)
                d.update(init_strategy=strategy, m_queries=m, n_layers=layers)
                cell_cfg = RunConfig.from_dict(d)
                print(f"training {strategy} M={m} L={layers} ...", file=sys.stderr)
                models[(strategy, m, layers)] = train(cell_cfg, train_scenes)
    rows = compare_strategies(models, eval_scenes)
    for row in rows:
        print(json.dumps(row))
    if args.csv:
        cols = ["strategy", "m_queries", "n_layers", "status", "mAP", "init_recall"]
        with open(args.csv, "w") as f:
            f.write(",".join(cols) + "\n")
            for row in rows:
                f.write(",".join(str(row.get(c, "")) for c in cols) + "\n")
        print(f"wrote {args.csv}", file=sys.stderr)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fusedet")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, modalities=False):
        sp.add_argument("--config", help="JSON config file (defaults otherwise)")
        sp.add_argument("--print-config", action="store_true",
                        help="print the fully resolved config")
        if modalities:
            sp.add_argument("--modalities", choices=sorted(_MODALITY_FLAGS),
                            help="active sensor set: l, c, or lc")

    sp = sub.add_parser("scenegen", help="generate deterministic synthetic scenes")
    common(sp)
    sp.add_argument("--n", type=int, required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_scenegen)

    sp = sub.add_parser("train", help="train the toy model")
    common(sp, modalities=True)
    sp.add_argument("--scenes", required=True)
    sp.add_argument("--out", required=True, help="output weights file")
    sp.add_argument("--resume", action="store_true")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("detect", help="run detection with trained weights")
    common(sp, modalities=True)
    sp.add_argument("--weights", required=True)
    sp.add_argument("--scenes", required=True)
    sp.add_argument("--out")
    sp.set_defaults(fn=cmd_detect)

    sp = sub.add_parser("eval", help="evaluate detections against ground truth")
    common(sp, modalities=True)
    sp.add_argument("--weights", required=True)
    sp.add_argument("--scenes", required=True)
    sp.add_argument("--out")
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("bench", help="latency benchmark per pipeline stage")
    common(sp, modalities=True)
    sp.add_argument("--weights")
    sp.add_argument("--scenes", required=True)
    sp.add_argument("--reps", type=int, default=10)
    sp.add_argument("--max-scenes", type=int, default=5)
    sp.set_defaults(fn=cmd_bench)

    sp = sub.add_parser("compare", help="train and compare init strategies")
    common(sp)
    sp.add_argument("--scenes", required=True)
    sp.add_argument("--eval-scenes")
    sp.add_argument("--m-list", type=int, nargs="+", default=[32, 96])
    sp.add_argument("--l-list", type=int, nargs="+", default=[1, 3])
    sp.add_argument("--csv")
    sp.set_defaults(fn=cmd_compare)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.fn(args)
    except ConfigError as e:
        raise SystemExit(f"config error: {e}")


if __name__ == "__main__":
    main()
