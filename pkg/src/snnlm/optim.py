"""Adam with parameter groups, warmup+cosine schedule, global-norm clipping.

The neuron group (decay logits, thresholds, modulation biases, halting
heads) trains at a multiple of the base learning rate.  The decoupled
weight-decay variant applies decay to the weight group only (matrices),
never to neuron parameters or gains.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from snnlm.model import PARAM_GROUP_NEURON, ParamStore


def lr_at(step: int, peak_lr: float, warmup_steps: int, total_steps: int) -> float:
    """1-indexed step -> learning rate (linear warmup, cosine decay to 0)."""
    if step < 1:
        raise ValueError("schedule steps are 1-indexed")
    if warmup_steps >= total_steps:
        raise ValueError("warmup_steps must be below total_steps")
    if step <= warmup_steps:
        return peak_lr * step / warmup_steps
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return 0.5 * peak_lr * (1.0 + math.cos(math.pi * min(progress, 1.0)))


def clip_global_norm(grads: Dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients in place so the joint L2 norm is <= max_norm.

    Returns the pre-clip norm; accumulation runs in float64 over a fixed
    name order.
    """
    total = 0.0
    for name in sorted(grads):
        g = grads[name]
        total += float(np.dot(g.reshape(-1).astype(np.float64),
                              g.reshape(-1).astype(np.float64)))
    norm = math.sqrt(total)
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= np.asarray(scale, dtype=g.dtype)
    return norm


class Adam:
    """Adam / decoupled-decay Adam over a ParamStore."""

    def __init__(self, store: ParamStore, *, peak_lr: float,
                 neuron_lr_mult: float = 10.0, warmup_steps: int = 100,
                 total_steps: int = 1000, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.store = store
        self.peak_lr = peak_lr
        self.neuron_lr_mult = neuron_lr_mult
        self.warmup_steps = warmup_steps
        self.total_steps = total_steps
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self._m = {name: np.zeros_like(t.data) for name, t in store.items()}
        self._v = {name: np.zeros_like(t.data) for name, t in store.items()}

    def current_lr(self, step: Optional[int] = None) -> float:
        return lr_at(step if step is not None else self.step_count + 1,
                     self.peak_lr, self.warmup_steps, self.total_steps)

    def step(self, grads: Dict[str, np.ndarray]) -> float:
        """Apply one update from the given gradient map; returns the LR used."""
        self.step_count += 1
        lr = self.current_lr(self.step_count)
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.step_count
        bc2 = 1.0 - b2 ** self.step_count
        for name, tensor in self.store.items():
            if name not in grads:
                continue
            g = grads[name]
            group_mult = self.neuron_lr_mult \
                if self.store.group_of(name) == PARAM_GROUP_NEURON else 1.0
            lr_p = lr * group_mult
            m = self._m[name]
            v = self._v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay and self.store.group_of(name) != PARAM_GROUP_NEURON:
                update = update + self.weight_decay * tensor.data
            tensor.data = tensor.data - np.asarray(lr_p, tensor.dtype) * \
                update.astype(tensor.dtype)
        return lr
