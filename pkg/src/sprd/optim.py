"""Parameter storage, Adam, and global-norm gradient clipping."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .tensor import ConvParams, Tensor, default_dtype

log = logging.getLogger(__name__)

REFERENCE_LR = 1e-5
REFERENCE_CLIP = 1e-3


class ParamStore:
    """Named parameters plus per-parameter Adam state.

    Parameter paths are unique; ``conv()`` creates a conv layer's weight and
    bias on first use and returns the same tensors on every later call, which
    is how heads and the mask decoder share weights across pyramid levels.
    """

    def __init__(self, seed: int = 0, dtype=None):
        self.params: dict[str, Tensor] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.steps: dict[str, int] = {}
        self.dtype = np.dtype(dtype or default_dtype()).type
        self.rng = np.random.default_rng(seed)

    def __contains__(self, name):
        return name in self.params

    def __getitem__(self, name) -> Tensor:
        return self.params[name]

    def __len__(self):
        return len(self.params)

    def names(self):
        return list(self.params)

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter path {name!r}")
        t = Tensor(np.asarray(value, dtype=self.dtype), requires_grad=True, name=name)
        self.params[name] = t
        self.m[name] = np.zeros_like(t.data)
        self.v[name] = np.zeros_like(t.data)
        self.steps[name] = 0
        return t

    def get_or_create(self, name: str, init) -> Tensor:
        if name not in self.params:
            self.add(name, init())
        return self.params[name]

    def conv(self, name: str, c_in: int, c_out: int, k: int, *, stride: int = 1, padding: int = 0,
             dilation: int = 1, bias: bool = True, init: str = "he", std: float = 0.01,
             bias_value: float = 0.0, transpose: bool = False, depthwise: bool = False) -> ConvParams:
        if depthwise:
            shape = (c_in, 1, k, k)
            fan_in = k * k
        elif transpose:
            shape = (c_in, c_out, k, k)
            fan_in = c_in  # each output tap sees c_in inputs once when k == stride
        else:
            shape = (c_out, c_in, k, k)
            fan_in = c_in * k * k

        def winit():
            if init == "he":
                return self.rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)
            if init == "xavier":
                return self.rng.normal(0.0, math.sqrt(1.0 / fan_in), size=shape)
            if init == "normal":
                return self.rng.normal(0.0, std, size=shape)
            if init == "zeros":
                return np.zeros(shape)
            raise ValueError(f"unknown init {init!r}")

        w = self.get_or_create(name + ".weight", winit)
        b = None
        if bias:
            n_b = c_in if depthwise else c_out
            b = self.get_or_create(name + ".bias", lambda: np.full(n_b, bias_value))
        return ConvParams(w, b, stride=stride, padding=padding, dilation=dilation)

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def num_parameters(self, prefix: str = "") -> int:
        return int(sum(t.data.size for n, t in self.params.items() if n.startswith(prefix)))

    def grad_norm(self) -> float:
        sq = 0.0
        for t in self.params.values():
            if t.grad is not None:
                sq += float(np.sum(np.square(t.grad, dtype=np.float64)))
        return math.sqrt(sq)

    def state_dict(self) -> dict:
        return {n: t.data.copy() for n, t in self.params.items()}


@dataclass
class OptimConfig:
    lr: float = REFERENCE_LR
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip: float = REFERENCE_CLIP


def clip_gradients(store: ParamStore, max_norm: float = REFERENCE_CLIP) -> float:
    """Rescale all gradients so the global 2-norm is at most ``max_norm``.

    Returns the norm measured before clipping.
    """
    norm = store.grad_norm()
    if norm > max_norm and norm > 0:
        factor = max_norm / norm
        for t in store.params.values():
            if t.grad is not None:
                t.grad = t.grad * t.grad.dtype.type(factor)
    return norm


def adam_step(store: ParamStore, lr: float = REFERENCE_LR, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8, warn_missing: bool = True) -> ParamStore:
    """Bias-corrected Adam update of every parameter that has a gradient."""
    missing = []
    for name, t in store.params.items():
        g = t.grad
        if g is None:
            missing.append(name)
            continue
        step = store.steps[name] + 1
        store.steps[name] = step
        m = store.m[name]
        v = store.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** step)
        v_hat = v / (1.0 - beta2 ** step)
        t.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(t.data.dtype)
    if missing and warn_missing:
        log.warning("adam_step: %d parameter(s) without gradient skipped (e.g. %s)", len(missing), missing[0])
    return store
