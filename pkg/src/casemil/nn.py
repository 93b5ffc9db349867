"""Parameter registry and the few layers the model is built from."""
from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor

COMPONENTS = ("global", "local", "heads", "image_att", "view_att", "side_att")


class ComponentRegistry:
    """Owns every Parameter and the component each one belongs to."""

    def __init__(self):
        self._params: dict[str, Parameter] = {}
        self._by_component: dict[str, list[str]] = {}

    def new(self, name: str, component_id: str, data: np.ndarray) -> Parameter:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        if component_id not in COMPONENTS:
            raise ValueError(f"unknown component {component_id!r}")
        p = Parameter(np.array(data, dtype=np.float64), name, component_id)
        self._params[name] = p
        self._by_component.setdefault(component_id, []).append(name)
        return p

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self):
        return len(self._params)

    def parameters(self, component: str | None = None) -> list[Parameter]:
        if component is None:
            return list(self._params.values())
        return [self._params[n] for n in self._by_component.get(component, [])]

    @property
    def components(self) -> list[str]:
        return list(self._by_component)

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self._params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(state)
        extra = set(state) - set(self._params)
        if missing or extra:
            raise ValueError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for n, arr in state.items():
            p = self._params[n]
            if p.data.shape != arr.shape:
                raise ValueError(f"{n}: shape {arr.shape} != {p.data.shape}")
            p.data = np.array(arr, dtype=np.float64)


def he_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    lim = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape)


class Conv2d:
    def __init__(self, reg, name, component, c_in, c_out, kernel, stride, padding, rng):
        self.w = reg.new(f"{name}.weight", component,
                         he_normal(rng, (c_out, c_in, kernel, kernel), c_in * kernel * kernel))
        self.b = reg.new(f"{name}.bias", component, np.zeros((1, c_out, 1, 1)))
        self.stride, self.padding = stride, padding

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.w, self.stride, self.padding) + self.b


class Linear:
    def __init__(self, reg, name, component, d_in, d_out, rng, init="glorot"):
        if init == "he":
            w = he_normal(rng, (d_in, d_out), d_in)
        else:
            w = glorot_uniform(rng, (d_in, d_out), d_in, d_out)
        self.w = reg.new(f"{name}.weight", component, w)
        self.b = reg.new(f"{name}.bias", component, np.zeros(d_out))

    def __call__(self, x: Tensor) -> Tensor:
        return T.matmul(x, self.w) + self.b


class AttentionBlock:
    """Attention scorer  w^T tanh(V h)  or, gated,  w^T (tanh(V h) * sigmoid(U h))."""

    def __init__(self, reg, name, component, embed_dim, hidden_dim, gated, rng):
        self.gated = gated
        self.V = reg.new(f"{name}.V", component, glorot_uniform(rng, (embed_dim, hidden_dim), embed_dim, hidden_dim))
        self.U = (reg.new(f"{name}.U", component, glorot_uniform(rng, (embed_dim, hidden_dim), embed_dim, hidden_dim))
                  if gated else None)
        self.w = reg.new(f"{name}.w", component, glorot_uniform(rng, (hidden_dim, 1), hidden_dim, 1))

    def logits(self, h: Tensor) -> Tensor:
        """h: (..., M, D) -> (..., M)."""
        z = T.tanh(T.matmul(h, self.V))
        if self.gated:
            z = z * T.sigmoid(T.matmul(h, self.U))
        s = T.matmul(z, self.w)
        return T.reshape(s, s.shape[:-1])

    def weights(self, h: Tensor) -> Tensor:
        return T.softmax(self.logits(h), axis=-1)
