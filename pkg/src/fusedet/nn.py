"""Small neural-net building blocks on top of the tensor engine: parameter
store, linear layers, MLPs, layer norm, and the Adam optimizer."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


class ParamStore:
    """Flat registry of named learnable tensors.

    Names are hierarchical ("decoder.0.attn.wq"); the store is the single
    source of truth for optimization and serialization.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def register(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)
        self._params[name] = t
        return t

    def items(self):
        return self._params.items()

    def names(self):
        return list(self._params)

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __len__(self):
        return len(self._params)

    def zero_grad(self):
        for t in self._params.values():
            t.zero_grad()

    def state_dict(self) -> dict:
        return {k: np.array(v.data) for k, v in self._params.items()}

    def load_state_dict(self, state: dict):
        missing = set(self._params) - set(state)
        extra = set(state) - set(self._params)
        if missing or extra:
            raise ValueError(f"weight mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for k, v in state.items():
            arr = np.asarray(v, dtype=np.float64)
            if arr.shape != self._params[k].data.shape:
                raise ValueError(
                    f"shape mismatch for {k!r}: {arr.shape} vs {self._params[k].data.shape}"
                )
            self._params[k].data = arr.copy()


def _glorot(rng, fan_in, fan_out):
    s = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, size=(fan_in, fan_out))


class Linear:
    def __init__(self, store: ParamStore, name: str, rng, d_in: int, d_out: int,
                 zero_init: bool = False):
        w = np.zeros((d_in, d_out)) if zero_init else _glorot(rng, d_in, d_out)
        self.w = store.register(f"{name}.w", w)
        self.b = store.register(f"{name}.b", np.zeros(d_out))

    def __call__(self, x: Tensor) -> Tensor:
        return T.matmul(x, self.w) + self.b


class Mlp:
    """ReLU MLP; ``dims`` includes input and output widths."""

    def __init__(self, store, name, rng, dims, zero_init_last: bool = False):
        self.layers = []
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            zero = zero_init_last and i == len(dims) - 2
            self.layers.append(Linear(store, f"{name}.{i}", rng, a, b, zero_init=zero))

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = T.relu(x)
        return x


class LayerNorm:
    def __init__(self, store, name, rng, d: int, eps: float = 1e-6):
        self.g = store.register(f"{name}.g", np.ones(d))
        self.b = store.register(f"{name}.b", np.zeros(d))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        mu = T.mean(x, axis=-1, keepdims=True)
        xc = x - mu
        var = T.mean(xc * xc, axis=-1, keepdims=True)
        return xc / T.sqrt(var + self.eps) * self.g + self.b


class Adam:
    """Deterministic Adam over a ParamStore."""

    def __init__(self, store: ParamStore, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.store = store
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v.data) for k, v in store.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in store.items()}

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, p in self.store.items():
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mhat = m / (1 - b1 ** self.t)
            vhat = v / (1 - b2 ** self.t)
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def state_dict(self) -> dict:
        out = {"t": self.t}
        for k in self.m:
            out[f"m.{k}"] = self.m[k]
            out[f"v.{k}"] = self.v[k]
        return out

    def load_state_dict(self, state: dict):
        self.t = int(state["t"])
        for k in self.m:
            self.m[k] = np.asarray(state[f"m.{k}"], dtype=np.float64).copy()
            self.v[k] = np.asarray(state[f"v.{k}"], dtype=np.float64).copy()
