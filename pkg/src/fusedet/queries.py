"""Dense proposal scoring over the BEV grid, top-M selection, location
update, and re-sampling into the initial query set, plus the input-agnostic
baseline initializer."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .config import RunConfig
from .geometry import BevGridSpec, Box3D, decode_box, grid_proposal_locations
from .nn import Mlp, ParamStore
from .sampling import FusionMlp, sample_all_modalities, sine_positional_embedding
from .scene import FeatureMapSet
from .tensor import Tensor


@dataclass
class QuerySet:
    """M object queries: feature vectors plus 3D locations.

    ``origin`` holds the dense-grid index each query came from (-1 for the
    input-agnostic baseline). ``loc_param`` is the learnable location tensor
    of the baseline, kept so the first-layer regression loss can pull the
    learned locations toward objects.
    """

    features: Tensor          # (M, d)
    locations: np.ndarray     # (M, 3)
    origin: np.ndarray        # (M,) int
    loc_param: Tensor | None = None

    def __len__(self):
        return self.features.data.shape[0]


@dataclass
class DetectionSet:
    """Classified boxes with confidences, plus the raw differentiable
    prediction tensors needed for supervision.

    Box decoding is lazy: the dense proposal stage produces hundreds of
    candidates per forward pass but only the final layer's boxes are ever
    consumed as geometry.
    """

    scores: np.ndarray        # (N,) best-class confidence
    class_ids: np.ndarray     # (N,)
    cls_scores: Tensor        # (N, K) sigmoid scores
    reg: Tensor               # (N, 8) raw regression
    anchors: np.ndarray       # (N, 3) decode anchors
    anchor_tensor: Tensor | None = None  # differentiable anchors, when learnable
    _boxes: list | None = field(default=None, repr=False, compare=False)

    def __len__(self):
        return self.reg.data.shape[0]

    @property
    def boxes(self) -> list:
        if self._boxes is None:
            self._boxes = [
                decode_box(self.reg.data[i], self.anchors[i], int(self.class_ids[i]))
                for i in range(len(self))
            ]
        return self._boxes


def detections_from_heads(cls_scores: Tensor, reg: Tensor, anchors: np.ndarray,
                          anchor_tensor: Tensor | None = None) -> DetectionSet:
    scores = cls_scores.data
    class_ids = scores.argmax(axis=1)
    best = scores.max(axis=1)
    return DetectionSet(best, class_ids, cls_scores, reg, np.array(anchors),
                        anchor_tensor)


class ProposalStage:
    """Dense grid of proposals scored by the shared heads.

    The heads passed in are the same parameter objects used by the decoder
    layers; sharing is by identity, not by copy.
    """

    def __init__(self, cfg: RunConfig, fusion: FusionMlp, reg_head: Mlp, cls_head: Mlp):
        self.cfg = cfg
        self.grid = BevGridSpec(cfg.x_range, cfg.y_range, cfg.grid_nx, cfg.grid_ny,
                                cfg.fixed_z)
        self.anchors = grid_proposal_locations(self.grid)
        self.pe = sine_positional_embedding(self.anchors, cfg.d_model, cfg)
        self.fusion = fusion
        self.reg_head = reg_head
        self.cls_head = cls_head

    def embed_locations(self, locs: np.ndarray, maps: FeatureMapSet, active,
                        pe: np.ndarray | None = None) -> Tensor:
        """sample -> fuse -> add positional embedding, for arbitrary locations."""
        sf = sample_all_modalities(locs, maps, active, pattern=self.cfg.sample_pattern)
        fused = self.fusion(sf)
        if pe is None:
            pe = sine_positional_embedding(locs, self.cfg.d_model, self.cfg)
        return fused + Tensor(pe)

    def dense_forward(self, maps: FeatureMapSet, active):
        """Score every grid proposal. Returns (DetectionSet over all M_dense
        proposals, query embeddings tensor). Class scores reshape to the
        (ny, nx, K) dense heatmap."""
        q = self.embed_locations(self.anchors, maps, active, pe=self.pe)
        cls_scores = T.sigmoid(self.cls_head(q))
        reg = self.reg_head(q)
        return detections_from_heads(cls_scores, reg, self.anchors), q


def select_top_m(scores: np.ndarray, m: int):
    """Indices of the m proposals with the highest per-proposal confidence
    (max over classes), sorted by descending confidence; ties break by
    ascending canonical grid index."""
    scores = np.asarray(scores)
    n = scores.shape[0]
    if m > n:
        raise ValueError(f"cannot select top {m} out of {n} proposals")
    conf = scores.max(axis=1)
    order = np.lexsort((np.arange(n), -conf))
    idx = order[:m]
    return idx, scores[idx].argmax(axis=1)


def initialize_queries(maps: FeatureMapSet, stage: ProposalStage, m: int, active):
    """The input-dependent initializer: dense scoring, top-M selection,
    location update by the predicted center offset, and feature re-sampling
    at the updated locations.

    Returns (QuerySet, dense DetectionSet) so the dense predictions can be
    supervised.
    """
    dense, _ = stage.dense_forward(maps, active)
    idx, _ = select_top_m(dense.cls_scores.data, m)
    # c' = c + predicted offset; exactly the decoded box center
    delta = dense.reg.data[idx, :3]
    locations = stage.anchors[idx] + delta
    features = stage.embed_locations(locations, maps, active)
    return QuerySet(features, locations, idx.astype(np.intp)), dense


class AgnosticQueries:
    """Input-agnostic baseline: learned embeddings plus learned 3D locations
    squashed into the detection range by a sigmoid."""

    def __init__(self, store: ParamStore, name: str, rng, cfg: RunConfig):
        self.cfg = cfg
        self.embed = store.register(f"{name}.embed", rng.normal(0, 0.5, (cfg.m_queries, cfg.d_model)))
        self.loc_logits = store.register(f"{name}.loc", rng.normal(0, 1.0, (cfg.m_queries, 3)))
        self.lo = np.array([cfg.x_range[0], cfg.y_range[0], cfg.z_range[0]])
        self.hi = np.array([cfg.x_range[1], cfg.y_range[1], cfg.z_range[1]])

    def locations_tensor(self) -> Tensor:
        span = Tensor(self.hi - self.lo)
        return T.sigmoid(self.loc_logits) * span + Tensor(self.lo)

    def __call__(self) -> QuerySet:
        loc_t = self.locations_tensor()
        return QuerySet(
            features=self.embed,
            locations=np.array(loc_t.data),
            origin=np.full(self.cfg.m_queries, -1, dtype=np.intp),
            loc_param=loc_t,
        )
