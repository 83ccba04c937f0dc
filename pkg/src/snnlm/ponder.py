"""Adaptive-depth aggregation of per-token frame stacks.

Each token owns K consecutive frames.  A learned halting head turns every
frame into a halt probability; the truncated-geometric weights
``lambda_k = p_k * prod_{j<k}(1 - p_j)``, renormalized over the K frames,
collapse the stack to one vector per token.  The expected halting step
E[K] doubles as a differentiable computation-cost signal.

Survival probabilities are computed as ``exp(cumsum(log(1 - p)))`` with
``log(1 - sigmoid(z)) = -softplus(z)``, which stays finite even when a
halt probability saturates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from snnlm import numcore as nc
from snnlm.numcore import Tensor

HALT_BIAS_INIT = -3.5
HALT_WEIGHT_SHRINK = 0.01
DEFAULT_PONDER_WEIGHT = 0.01


@dataclass
class PonderParams:
    w_halt: Tensor   # (D, 1)
    b_halt: Tensor   # (1,)


def init_ponder(d_model: int, rng: np.random.Generator) -> PonderParams:
    """Near-uniform start: tiny halting weights, bias at -3.5."""
    limit = math.sqrt(6.0 / (d_model + 1)) * HALT_WEIGHT_SHRINK
    w = rng.uniform(-limit, limit, (d_model, 1))
    return PonderParams(Tensor(w), Tensor(np.array([HALT_BIAS_INIT])))


@dataclass
class PonderWeights:
    """Per-token halting quantities; all tensors stay on the tape."""

    p: Tensor            # (T, K, B) halt probabilities
    survival: Tensor     # (T, K, B) prod_{j<k} (1 - p_j), row k=0 is 1
    lam_hat: Tensor      # (T, K, B) normalized weights, sums to 1 over K
    expected_k: Tensor   # (T, B)


def ponder_aggregate(frames: Tensor, params: PonderParams
                     ) -> Tuple[Tensor, PonderWeights]:
    """Collapse (T, K, B, D) frames to (T, B, D) with learned halt weights."""
    if frames.ndim != 4:
        raise nc.DimensionError(f"frames must be 4-D, got {frames.shape}")
    T, K, B, D = frames.shape
    if K < 1:
        raise nc.DimensionError("ponder_aggregate needs at least one frame")

    z = nc.add(nc.reshape(nc.matmul(nc.reshape(frames, (T * K * B, D)),
                                    params.w_halt), (T, K, B)),
               params.b_halt)
    p = nc.sigmoid(z)
    log_one_minus_p = nc.neg(nc.softplus(z))
    survival = nc.exp(nc.cumsum_exclusive(log_one_minus_p, axis=1))
    lam = nc.mul(p, survival)
    lam_hat = nc.div(lam, nc.sum_along(lam, axis=1, keepdims=True))

    weighted = nc.mul(nc.reshape(lam_hat, (T, K, B, 1)), frames)
    output = nc.sum_along(weighted, axis=1)

    steps = np.arange(1, K + 1, dtype=np.float64).reshape(1, K, 1)
    expected_k = nc.sum_along(nc.mul(lam_hat, steps), axis=1)

    return output, PonderWeights(p=p, survival=survival, lam_hat=lam_hat,
                                 expected_k=expected_k)


def ponder_cost(all_weights: Sequence[PonderWeights],
                ponder_weight: float = DEFAULT_PONDER_WEIGHT) -> Tensor:
    """Scaled mean of E[K] over every aggregation point, token and batch row."""
    if not all_weights:
        raise ValueError("ponder_cost needs at least one aggregation point")
    acc = nc.mean_all(all_weights[0].expected_k)
    for w in all_weights[1:]:
        acc = nc.add(acc, nc.mean_all(w.expected_k))
    return nc.mul(acc, ponder_weight / len(all_weights))


def equal_p_expected_k(p: float, k_max: int) -> float:
    """Closed-form E[K] when every frame halts with the same probability."""
    q = 1.0 - p
    weights = np.array([p * q ** (k - 1) for k in range(1, k_max + 1)])
    weights /= weights.sum()
    return float(np.sum(weights * np.arange(1, k_max + 1)))
