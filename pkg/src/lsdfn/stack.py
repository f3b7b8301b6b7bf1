"""Composable forward/backward stages.

Minimal layer plumbing shared by the receptive-field prober and the flow
training harness: plain convolution, ReLU, an LS-DFN block, and a
concatenating skip wrapper, chained by Stack. Each stage keeps the saved
state of its most recent forward call, so one forward/backward pair must be
completed before the next forward (single-slot autodiff, no tape).
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from .tensor import _conv2d, _conv2d_backward
from .layer import LsDfnConfig, LsDfnParams, lsdfn_forward, lsdfn_backward


class Conv2dStage:
    """Shared-kernel convolution with bias, shape preserving by default."""

    def __init__(self, weight: np.ndarray, bias: np.ndarray, pad: Optional[int] = None):
        self.weight = np.asarray(weight)
        self.bias = np.asarray(bias)
        self.pad = self.weight.shape[2] // 2 if pad is None else pad
        self._x = None
        self._grads = {}

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._x = x
        return _conv2d(x, self.weight.astype(x.dtype, copy=False),
                       self.bias.astype(x.dtype, copy=False), self.pad)

    def backward(self, grad_y: np.ndarray) -> np.ndarray:
        if self._x is None:
            raise RuntimeError("backward before forward")
        gx, gw, gb = _conv2d_backward(grad_y, self._x,
                                      self.weight.astype(self._x.dtype, copy=False), self.pad)
        self._grads = {"weight": gw, "bias": gb}
        return gx

    def parameters(self) -> dict:
        return {"weight": self.weight, "bias": self.bias}

    def grads(self) -> dict:
        return self._grads


class ReluStage:
    """max(x, 0); the subgradient at 0 is 0."""

    def __init__(self):
        self._mask = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._mask = x > 0
        return np.where(self._mask, x, 0)

    def backward(self, grad_y: np.ndarray) -> np.ndarray:
        if self._mask is None:
            raise RuntimeError("backward before forward")
        return np.where(self._mask, grad_y, 0)

    def parameters(self) -> dict:
        return {}

    def grads(self) -> dict:
        return {}


class LsDfnStage:
    """One dynamic filtering block as a stage."""

    def __init__(self, params: LsDfnParams, config: LsDfnConfig):
        self.params = params
        self.config = config
        self._saved = None
        self._grads = {}

    def forward(self, x: np.ndarray) -> np.ndarray:
        y, self._saved = lsdfn_forward(x, self.params, self.config)
        return y

    def backward(self, grad_y: np.ndarray) -> np.ndarray:
        if self._saved is None:
            raise RuntimeError("backward before forward")
        g = lsdfn_backward(grad_y, self._saved, self.params, self.config)
        self._grads = g.named()
        return g.x

    def parameters(self) -> dict:
        return self.params.named()

    def grads(self) -> dict:
        return self._grads


class ConcatSkipStage:
    """Concatenate the stage input with an inner stage's output on channels.

    y = concat([x, inner(x)]); the gradient to x is the skip slice plus the
    inner stage's input gradient.
    """

    def __init__(self, inner):
        self.inner = inner
        self._in_channels = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._in_channels = x.shape[1]
        return np.concatenate([x, self.inner.forward(x)], axis=1)

    def backward(self, grad_y: np.ndarray) -> np.ndarray:
        c = self._in_channels
        if c is None:
            raise RuntimeError("backward before forward")
        return grad_y[:, :c] + self.inner.backward(grad_y[:, c:])

    def parameters(self) -> dict:
        return {f"inner.{k}": v for k, v in self.inner.parameters().items()}

    def grads(self) -> dict:
        return {f"inner.{k}": v for k, v in self.inner.grads().items()}


class Stack:
    """Sequential stage chain with flat, prefixed parameter naming."""

    def __init__(self, stages):
        self.stages = list(stages)

    def forward(self, x: np.ndarray) -> np.ndarray:
        for st in self.stages:
            x = st.forward(x)
        return x

    def backward(self, grad_y: np.ndarray) -> np.ndarray:
        for st in reversed(self.stages):
            grad_y = st.backward(grad_y)
        return grad_y

    def named_parameters(self) -> dict:
        out = {}
        for idx, st in enumerate(self.stages):
            for k, v in st.parameters().items():
                out[f"s{idx}.{k}"] = v
        return out

    def named_grads(self) -> dict:
        out = {}
        for idx, st in enumerate(self.stages):
            for k, v in st.grads().items():
                out[f"s{idx}.{k}"] = v
        return out

    def count_params(self) -> int:
        return sum(int(v.size) for v in self.named_parameters().values())
