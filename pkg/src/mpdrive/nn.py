"""Minimal neural-network layer kit on top of the autodiff engine.

Layers are plain objects holding Parameter tensors; there is no implicit
training/eval mode. Dropout is applied explicitly by callers with named
mask objects, so a full set of masks identifies one model sample.
"""

from __future__ import annotations

from typing import Dict, Iterable, List, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .seeding import substream

__all__ = [
    "Parameter", "Module", "Linear", "Conv2d", "ConvTranspose2d",
    "Adam", "clip_global_norm",
]


class Parameter(Tensor):
    """Trainable leaf tensor."""

    def __init__(self, data):
        super().__init__(data, requires_grad=True)


class Module:
    """Base class: children and parameters discovered from attributes."""

    def named_parameters(self, prefix="") -> List[Tuple[str, Parameter]]:
        out = []
        for name, val in vars(self).items():
            full = f"{prefix}{name}" if not prefix else f"{prefix}.{name}"
            if isinstance(val, Parameter):
                out.append((full, val))
            elif isinstance(val, Module):
                out.extend(val.named_parameters(full))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.extend(item.named_parameters(f"{full}.{i}"))
                    elif isinstance(item, Parameter):
                        out.append((f"{full}.{i}", item))
        return out

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]):
        params = dict(self.named_parameters())
        missing = sorted(set(params) - set(state))
        unexpected = sorted(set(state) - set(params))
        if missing or unexpected:
            raise ValueError(f"state mismatch: missing={missing}, unexpected={unexpected}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise ValueError(f"shape mismatch for '{name}': "
                                 f"checkpoint {arr.shape} vs model {p.data.shape}")
            p.data = arr.copy()
            p.grad = None


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        # He init; networks here are relu/tanh MLP heads
        std = np.sqrt(2.0 / n_in)
        self.w = Parameter(rng.normal(0.0, std, (n_in, n_out)))
        self.b = Parameter(np.zeros(n_out))

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.w + self.b


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel=3, stride=2, padding=1,
                 rng: np.random.Generator = None):
        kh, kw = (kernel, kernel) if isinstance(kernel, int) else kernel
        std = np.sqrt(2.0 / (c_in * kh * kw))
        self.w = Parameter(rng.normal(0.0, std, (c_out, c_in, kh, kw)))
        self.b = Parameter(np.zeros(c_out))
        self.stride, self.padding = stride, padding

    def __call__(self, x: Tensor) -> Tensor:
        y = ad.conv2d(x, self.w, self.stride, self.padding)
        return y + self.b.reshape(1, -1, 1, 1)


class ConvTranspose2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel=3, stride=2, padding=1,
                 output_padding=0, rng: np.random.Generator = None):
        kh, kw = (kernel, kernel) if isinstance(kernel, int) else kernel
        std = np.sqrt(2.0 / (c_in * kh * kw))
        self.w = Parameter(rng.normal(0.0, std, (c_in, c_out, kh, kw)))
        self.b = Parameter(np.zeros(c_out))
        self.stride, self.padding, self.output_padding = stride, padding, output_padding

    def __call__(self, x: Tensor, output_padding=None) -> Tensor:
        op = self.output_padding if output_padding is None else output_padding
        y = ad.conv_transpose2d(x, self.w, self.stride, self.padding, op)
        return y + self.b.reshape(1, -1, 1, 1)


class Adam:
    """Adam with optional global-norm gradient clipping."""

    def __init__(self, params: Iterable[Parameter], lr=1e-4, betas=(0.9, 0.999),
                 eps=1e-8, clip_norm=None):
        self.params = list(params)
        self.lr, self.betas, self.eps, self.clip_norm = lr, betas, eps, clip_norm
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        if self.clip_norm is not None:
            clip_global_norm(self.params, self.clip_norm)
        self.t += 1
        b1, b2 = self.betas
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g
            p.data = p.data - self.lr * (self.m[i] / bc1) / (np.sqrt(self.v[i] / bc2) + self.eps)


def clip_global_norm(params, max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most max_norm."""
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = np.sqrt(total)
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


def init_rng(seed: int, *scope: str) -> np.random.Generator:
    """Parameter-init substream helper, one stream per layer scope."""
    return substream(seed, "init", *scope)
