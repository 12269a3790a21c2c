"""Full detector assembly: stub backbones -> query initialization ->
modality-balanced decoder -> detections, with per-stage timing hooks."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig
from .decoder import DecoderStack
from .nn import Mlp, ParamStore
from .queries import AgnosticQueries, DetectionSet, ProposalStage, QuerySet, initialize_queries
from .sampling import FusionMlp
from .scene import FeatureMapSet, Scene, build_feature_maps

# sigmoid prior for the classification head bias: start rare-positive
_CLS_PRIOR = 0.05


@dataclass
class StageTimer:
    """Accumulates wall-clock seconds per named pipeline stage."""

    totals: dict = field(default_factory=dict)

    def add(self, stage: str, seconds: float):
        self.totals[stage] = self.totals.get(stage, 0.0) + seconds


@dataclass
class ForwardResult:
    dense: DetectionSet | None  # None for the input-agnostic strategy
    queries: QuerySet
    layers: list                # DetectionSet per decoder layer

    @property
    def detections(self) -> DetectionSet:
        return self.layers[-1]


class Detector:
    """The trainable model. All learnable state lives in ``self.store``;
    Phi_reg / Phi_cls are shared by identity between the proposal stage and
    every decoder layer."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.store = ParamStore()
        rng = np.random.default_rng(cfg.seed)
        d = cfg.d_model
        self.cls_head = Mlp(self.store, "cls_head", rng, (d, d, cfg.num_classes))
        # rare-positive prior keeps early focal/heatmap losses sane
        self.cls_head.layers[-1].b.data[:] = np.log(_CLS_PRIOR / (1 - _CLS_PRIOR))
        # zero-init the final reg layer: initial boxes sit exactly on anchors
        self.reg_head = Mlp(self.store, "reg_head", rng, (d, d, 8), zero_init_last=True)
        self.fusion = FusionMlp(self.store, "fusion", rng, cfg, cfg.active_modalities)
        self.stage = ProposalStage(cfg, self.fusion, self.reg_head, self.cls_head)
        self.decoder = DecoderStack(self.store, "decoder", rng, cfg,
                                    cfg.active_modalities, self.reg_head, self.cls_head)
        self.agnostic = None
        if cfg.init_strategy == "agnostic":
            self.agnostic = AgnosticQueries(self.store, "agnostic", rng, cfg)

    @property
    def grid(self):
        return self.stage.grid

    def initialize(self, maps: FeatureMapSet):
        """Build the initial QuerySet; the proposed strategy also returns the
        dense proposal predictions for supervision."""
        if self.cfg.init_strategy == "agnostic":
            return self.agnostic(), None
        qs, dense = initialize_queries(maps, self.stage, self.cfg.m_queries,
                                       self.cfg.active_modalities)
        return qs, dense

    def forward(self, maps: FeatureMapSet, timer: StageTimer | None = None) -> ForwardResult:
        t0 = time.perf_counter()
        qs, dense = self.initialize(maps)
        t1 = time.perf_counter()
        if timer is not None:
            timer.add("init", t1 - t0)
        layer_dets = self.decoder.decode(qs, maps, timer=timer)
        return ForwardResult(dense, qs, layer_dets)

    def run_scene(self, scene: Scene, timer: StageTimer | None = None) -> ForwardResult:
        t0 = time.perf_counter()
        maps = build_feature_maps(scene, self.cfg)
        t1 = time.perf_counter()
        if timer is not None:
            timer.add("backbones", t1 - t0)
        return self.forward(maps, timer=timer)
