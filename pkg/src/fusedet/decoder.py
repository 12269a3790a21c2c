"""Modality-balanced transformer decoder: per layer, self-attention among
queries, location-conditioned cross-modal feature gathering, feed-forward
update, and box prediction through the shared heads, with optional
inter-layer location refinement."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .config import RunConfig
from .nn import LayerNorm, Linear, Mlp, ParamStore
from .queries import DetectionSet, QuerySet, detections_from_heads
from .sampling import sample_all_modalities, sine_positional_embedding
from .scene import FeatureMapSet
from .tensor import Tensor


class DecoderLayer:
    """Pre-normalization decoder layer over a query set of width d."""

    def __init__(self, store: ParamStore, name: str, rng, cfg: RunConfig, active):
        d = cfg.d_model
        h = cfg.n_heads
        if d % h != 0:
            raise ValueError(f"d_model {d} not divisible by n_heads {h}")
        self.cfg = cfg
        self.active = tuple(active)
        self.n_heads = h
        self.d_head = d // h
        self.wq, self.wk, self.wv = [], [], []
        scale = np.sqrt(6.0 / (d + self.d_head))
        for i in range(h):
            self.wq.append(store.register(f"{name}.attn.q{i}", rng.uniform(-scale, scale, (d, self.d_head))))
            self.wk.append(store.register(f"{name}.attn.k{i}", rng.uniform(-scale, scale, (d, self.d_head))))
            self.wv.append(store.register(f"{name}.attn.v{i}", rng.uniform(-scale, scale, (d, self.d_head))))
        self.wo = Linear(store, f"{name}.attn.o", rng, d, d)
        d_in = ("lidar" in self.active) * cfg.d_lidar + ("camera" in self.active) * cfg.d_camera
        self.cross_proj = Linear(store, f"{name}.cross", rng, d_in, d)
        self.ffn = Mlp(store, f"{name}.ffn", rng, (d, 4 * d, d))
        self.ln_attn = LayerNorm(store, f"{name}.ln_attn", rng, d)
        self.ln_ffn = LayerNorm(store, f"{name}.ln_ffn", rng, d)

    def self_attention(self, x: Tensor, pe: np.ndarray) -> Tensor:
        """Multi-head scaled dot-product attention over the query set, with
        PE-augmented keys/queries; residual included."""
        xn = self.ln_attn(x)
        qk = xn + Tensor(pe)
        heads = []
        inv = 1.0 / np.sqrt(self.d_head)
        for i in range(self.n_heads):
            q = T.matmul(qk, self.wq[i])
            k = T.matmul(qk, self.wk[i])
            v = T.matmul(xn, self.wv[i])
            attn = T.softmax(T.matmul(q, T.transpose(k)) * inv, axis=-1)
            heads.append(T.matmul(attn, v))
        out = self.wo(T.concat(heads, axis=1))
        return x + out

    def cross_modal_update(self, x: Tensor, locations: np.ndarray,
                           maps: FeatureMapSet) -> Tensor:
        """Gather all active modalities at the query locations and residual-add
        the projected features into the queries."""
        sf = sample_all_modalities(locations, maps, self.active,
                                   pattern=self.cfg.sample_pattern)
        parts = []
        if "lidar" in self.active:
            parts.append(sf.lidar)
        if "camera" in self.active:
            parts.append(sf.camera)
        gathered = parts[0] if len(parts) == 1 else T.concat(parts, axis=1)
        return x + self.cross_proj(gathered)

    def feed_forward(self, x: Tensor) -> Tensor:
        return x + self.ffn(self.ln_ffn(x))

    def __call__(self, x: Tensor, locations: np.ndarray, maps: FeatureMapSet) -> Tensor:
        pe = sine_positional_embedding(locations, self.cfg.d_model, self.cfg)
        x = self.self_attention(x, pe)
        x = self.cross_modal_update(x, locations, maps)
        return self.feed_forward(x)


class DecoderStack:
    """L decoder layers sharing one pair of prediction heads with the
    proposal stage. Per-layer outputs are kept for per-layer supervision."""

    def __init__(self, store: ParamStore, name: str, rng, cfg: RunConfig, active,
                 reg_head: Mlp, cls_head: Mlp):
        self.cfg = cfg
        self.active = tuple(active)
        self.layers = [
            DecoderLayer(store, f"{name}.{i}", rng, cfg, active) for i in range(cfg.n_layers)
        ]
        self.reg_head = reg_head
        self.cls_head = cls_head

    def decode(self, qs: QuerySet, maps: FeatureMapSet, timer=None) -> list:
        """Run the stack; returns one DetectionSet per layer (the last one is
        the model output). Locations are refined between layers by each
        layer's predicted center when cfg.refine_locations is set."""
        import time as _time

        x = qs.features
        locations = np.array(qs.locations)
        loc_tensor = qs.loc_param
        outputs = []
        for li, layer in enumerate(self.layers):
            t0 = _time.perf_counter()
            x = layer(x, locations, maps)
            t1 = _time.perf_counter()
            cls_scores = T.sigmoid(self.cls_head(x))
            reg = self.reg_head(x)
            if timer is not None:
                timer.add("decoder", t1 - t0)
                timer.add("heads", _time.perf_counter() - t1)
            det = detections_from_heads(cls_scores, reg, locations,
                                        anchor_tensor=loc_tensor if li == 0 else None)
            outputs.append(det)
            if self.cfg.refine_locations:
                locations = locations + reg.data[:, :3]
                loc_tensor = None
        return outputs
