"""Training stabilizers: centering, divisive normalization, gradient compensation.

Residual centering removes the per-vector channel mean before a sublayer
output joins the residual stream, killing DC drift across deep stacks.
Lateral inhibition divides by the root-mean-square over channels with a
learnable gain; the same kernel serves as the pre-sublayer norm.

Gradient compensation runs between backward and clipping, in two phases:
saturation correction for the modulation biases (descent in the
activation's natural space), then cross-layer equalization of each
modulation type's gradient norms to their geometric mean.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Dict, Mapping

import numpy as np

from snnlm import numcore as nc
from snnlm.numcore import Tensor

DEFAULT_EPS = 1e-6
_LAYER_RE = re.compile(r"layers\.(\d+)\.")


def center(x: Tensor) -> Tensor:
    """Subtract the channel mean (last axis), per token/frame."""
    return nc.sub(x, nc.mean_along(x, axis=-1, keepdims=True))


def lateral_inhibition(h: Tensor, gamma: Tensor,
                       eps: float = DEFAULT_EPS) -> Tensor:
    """gamma * h / sqrt(mean_d(h_d^2) + eps) over the channel (last) axis."""
    if eps <= 0:
        raise ValueError("lateral_inhibition requires eps > 0")
    ms = nc.mean_along(nc.mul(h, h), axis=-1, keepdims=True)
    return nc.mul(nc.div(h, nc.sqrt(nc.add(ms, eps))), gamma)


def rmsnorm(h: Tensor, gamma: Tensor, eps: float = DEFAULT_EPS) -> Tensor:
    """Identical math to lateral_inhibition; separate parameter instances."""
    return lateral_inhibition(h, gamma, eps)


@dataclass
class CompensationConfig:
    c_max: float = 100.0
    alpha_floor: float = 0.1
    # Suffixes of the modulation biases; phase 2 equalizes each type across
    # the layers it appears in (biases only).
    beta_suffix: str = ".b_beta"
    alpha_suffix: str = ".b_alpha"
    theta_suffix: str = ".b_th"
    norm_floor: float = 1e-12

    def __post_init__(self):
        if self.c_max < 1:
            raise ValueError(f"c_max must be >= 1, got {self.c_max}")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def compensate_gradients(params: Mapping[str, Tensor],
                         config: CompensationConfig = CompensationConfig()
                         ) -> Dict[str, float]:
    """Rescale modulation-bias gradients in place; returns post norms.

    Phase 1 divides each beta-bias gradient by max(beta*(1-beta), 1/C_max)
    and each alpha-bias gradient by max(sigmoid(b_alpha), alpha_floor),
    elementwise; signs never change.  Phase 2 rescales every layer's
    gradient of one bias type to the geometric mean of their L2 norms
    (layers below the norm floor are skipped).  Parameters without
    gradients are ignored.
    """
    items = [(name, t) for name, t in params.items() if t.grad is not None]

    for name, t in items:
        if name.endswith(config.beta_suffix):
            beta = _sigmoid(t.data.astype(np.float64))
            t.grad /= np.maximum(beta * (1.0 - beta),
                                 1.0 / config.c_max).astype(t.grad.dtype)
        elif name.endswith(config.alpha_suffix):
            t.grad /= np.maximum(_sigmoid(t.data.astype(np.float64)),
                                 config.alpha_floor).astype(t.grad.dtype)

    post_norms: Dict[str, float] = {}
    for suffix in (config.beta_suffix, config.alpha_suffix, config.theta_suffix):
        group = [(name, t) for name, t in items if name.endswith(suffix)]
        norms = {name: float(np.linalg.norm(t.grad.astype(np.float64)))
                 for name, t in group}
        live = [n for n in norms.values() if n >= config.norm_floor]
        if not live:
            continue
        geomean = float(np.exp(np.mean(np.log(live))))
        for name, t in group:
            if norms[name] >= config.norm_floor:
                t.grad *= np.asarray(geomean / norms[name], dtype=t.grad.dtype)
                post_norms[name] = geomean
            else:
                post_norms[name] = norms[name]
    return post_norms
