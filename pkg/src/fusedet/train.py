"""Toy training loop: one Adam step per scene, append-only structured log,
deterministic checkpoint/resume."""

from __future__ import annotations

import json
import time

import numpy as np

from .config import RunConfig
from .losses import total_loss
from .model import Detector
from .nn import Adam
from .scene import build_feature_maps
from .tensor import Tape
from .weights_io import load_tensors, save_tensors


class TrainingDiverged(RuntimeError):
    def __init__(self, step, detail):
        super().__init__(f"non-finite loss at step {step}: {detail}")
        self.step = step


def _epoch_order(n_scenes: int, epoch: int, seed: int) -> np.ndarray:
    return np.random.default_rng(seed * 100003 + epoch).permutation(n_scenes)


def save_checkpoint(path, detector: Detector, opt: Adam, epoch: int):
    blob = {f"param.{k}": v for k, v in detector.store.state_dict().items()}
    for k, v in opt.state_dict().items():
        if k == "t":
            blob["adam.t"] = np.array(float(v))
        else:
            blob[f"adam.{k}"] = v
    blob["epoch"] = np.array(float(epoch))
    save_tensors(path, blob)


def load_checkpoint(path, detector: Detector, opt: Adam) -> int:
    blob = load_tensors(path)
    params = {k[len("param."):]: v for k, v in blob.items() if k.startswith("param.")}
    detector.store.load_state_dict(params)
    opt_state = {"t": int(blob["adam.t"])}
    for k, v in blob.items():
        if k.startswith("adam.") and k != "adam.t":
            opt_state[k[len("adam."):]] = v
    opt.load_state_dict(opt_state)
    return int(blob["epoch"])


def train(cfg: RunConfig, scenes, log_file=None, epochs: int | None = None,
          resume_from=None, checkpoint_path=None) -> Detector:
    """Train a Detector on the given scenes. Fully determined by (cfg, scenes).

    Feature maps are precomputed once (stub backbones are frozen). One scene
    per optimizer step; scene order is reshuffled deterministically per epoch.
    On divergence the last epoch checkpoint (when configured) is left on disk
    and TrainingDiverged is raised.
    """
    detector = Detector(cfg)
    opt = Adam(detector.store, lr=cfg.lr)
    start_epoch = 0
    if resume_from is not None:
        start_epoch = load_checkpoint(resume_from, detector, opt)
    maps_cache = [build_feature_maps(s, cfg) for s in scenes]
    epochs = cfg.epochs if epochs is None else epochs
    step = opt.t
    for epoch in range(start_epoch, epochs):
        for si in _epoch_order(len(scenes), epoch, cfg.seed):
            scene = scenes[si]
            maps = maps_cache[si]
            t0 = time.perf_counter()
            with Tape() as tape:
                result = detector.forward(maps)
                loss, breakdown = total_loss(result.dense, result.layers,
                                             scene.gt_boxes, detector.grid, cfg)
                if not np.isfinite(loss.data).all():
                    raise TrainingDiverged(step, breakdown)
                detector.store.zero_grad()
                tape.backward(loss)
            opt.step()
            step += 1
            if log_file is not None:
                rec = {"step": step, "epoch": epoch, "scene": scene.id,
                       "lr": cfg.lr, "wall_s": round(time.perf_counter() - t0, 6)}
                rec.update({k: round(v, 6) for k, v in breakdown.items()})
                log_file.write(json.dumps(rec) + "\n")
        if checkpoint_path is not None:
            save_checkpoint(checkpoint_path, detector, opt, epoch + 1)
    return detector
