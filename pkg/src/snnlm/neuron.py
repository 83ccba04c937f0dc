"""Leaky integrate-and-fire dynamics: fused sequential scans and oracles.

Two neuron variants share one charge-fire-reset cycle:

* fixed-parameter nodes -- per-channel decay ``beta = sigmoid(w)`` and
  threshold, with the input scaled by ``(1 - beta)``;
* selective nodes -- decay, input gain and threshold supplied per step.

Firing is Heaviside with the boundary firing (``V_pre >= V_th`` spikes);
reset is soft (subtract the threshold).  The backward pass replaces the
Heaviside derivative with a sigmoid surrogate of sharpness 4 and lets
gradient flow through the reset term.  A smooth mode replaces the hard
spike by the surrogate's antiderivative everywhere, which makes the whole
scan differentiable so finite differences can validate the backward.

The sequential kernels are compiled single-pass loops (one sweep over
time, parameters read once per channel in the fixed variant).  An
independent three-phase oracle recomputes the same scan via prefix
composition of affine maps plus a spike fixed-point iteration; it shares
no code with the kernels and exists to cross-check them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from numba import njit

from snnlm import numcore as nc
from snnlm.numcore import Tensor

SURROGATE_SHARPNESS = 4.0

__all__ = [
    "SURROGATE_SHARPNESS",
    "PlifParams",
    "SelectiveInputs",
    "ScanTrace",
    "ScanGrads",
    "PrefixScanResult",
    "surrogate_grad",
    "plif_scan_fixed",
    "plif_scan_selective",
    "plif_scan_smooth",
    "plif_backward",
    "leakage",
    "scan_fixed",
    "scan_selective",
    "prefix_scan_fixed",
    "prefix_scan_selective",
    "prefix_fallback_count",
]


def surrogate_grad(x, sharpness: float = SURROGATE_SHARPNESS):
    """Sigmoid surrogate a*sig(a*x)*(1-sig(a*x)); peaks at sharpness/4."""
    x = np.asarray(x)
    with np.errstate(over="ignore"):
        s = 1.0 / (1.0 + np.exp(-sharpness * x))
    return sharpness * s * (1.0 - s)


# ---------------------------------------------------------------------------
# Parameter / trace containers
# ---------------------------------------------------------------------------


@dataclass
class PlifParams:
    """Fixed-node parameters: pre-sigmoid decay logits and thresholds."""

    w: Tensor
    v_th: Tensor

    def __post_init__(self):
        if self.w.shape != self.v_th.shape or self.w.ndim != 1:
            raise nc.DimensionError("PlifParams expects matching 1-D w/v_th")
        if np.any(self.v_th.data <= 0):
            raise ValueError("PlifParams requires v_th > 0")

    @property
    def channels(self) -> int:
        return self.w.shape[0]

    def beta(self) -> Tensor:
        return nc.sigmoid(self.w)


@dataclass
class SelectiveInputs:
    """Per-step decay/gain/threshold/current, each shaped like the scan input."""

    beta_t: Tensor
    alpha_t: Tensor
    vth_t: Tensor
    current: Tensor

    def __post_init__(self):
        shape = self.current.shape
        for field in (self.beta_t, self.alpha_t, self.vth_t):
            if field.shape != shape:
                raise nc.DimensionError("SelectiveInputs fields must share one shape")

    def validate(self, v_min: float) -> None:
        if float(self.vth_t.data.min()) < v_min:
            raise ValueError(f"selective thresholds fell below v_min={v_min}")


@dataclass
class ScanTrace:
    """Forward intermediates one backward scan needs (raw arrays, 3-D)."""

    mode: str                      # "fixed" | "selective"
    smooth: bool
    sharpness: float
    v_pre: np.ndarray              # (S, R, C)
    s: np.ndarray
    v_post: np.ndarray
    v0: np.ndarray                 # (R, C)
    x: np.ndarray                  # input current, (S, R, C)
    beta: np.ndarray               # (C,) fixed / (S, R, C) selective
    vth: np.ndarray                # (C,) fixed / (S, R, C) selective
    alpha: Optional[np.ndarray] = None   # selective only

    @property
    def spike_rate(self) -> float:
        return float(self.s.mean(dtype=np.float64))


@dataclass
class ScanGrads:
    """Gradients returned by ``plif_backward`` (shapes mirror the inputs)."""

    d_input: np.ndarray
    d_beta: np.ndarray
    d_vth: np.ndarray
    d_v0: np.ndarray
    d_alpha: Optional[np.ndarray] = None


# ---------------------------------------------------------------------------
# Compiled sequential kernels
# ---------------------------------------------------------------------------


@njit(cache=True, inline="always")
def _sig(x):
    if x >= 0.0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


@njit(cache=True, inline="always")
def _sg(u, sharpness):
    s = _sig(sharpness * u)
    return sharpness * s * (1.0 - s)


@njit(cache=True)
def _fwd_fixed(x, beta, vth, v0, sharpness, smooth, v_pre, s, v_post):
    S, R, C = x.shape
    v = v0.astype(np.float64)
    for t in range(S):
        for r in range(R):
            for c in range(C):
                b = np.float64(beta[c])
                vv = b * v[r, c] + (1.0 - b) * np.float64(x[t, r, c])
                v_pre[t, r, c] = vv
                u = vv - np.float64(vth[c])
                if smooth:
                    fire = _sig(sharpness * u)
                else:
                    fire = 1.0 if u >= 0.0 else 0.0
                s[t, r, c] = fire
                vv = vv - np.float64(vth[c]) * fire
                v_post[t, r, c] = vv
                v[r, c] = vv


@njit(cache=True)
def _fwd_selective(beta, alpha, vth, cur, v0, sharpness, smooth, v_pre, s, v_post):
    S, R, C = cur.shape
    v = v0.astype(np.float64)
    for t in range(S):
        for r in range(R):
            for c in range(C):
                vv = np.float64(beta[t, r, c]) * v[r, c] \
                    + np.float64(alpha[t, r, c]) * np.float64(cur[t, r, c])
                v_pre[t, r, c] = vv
                u = vv - np.float64(vth[t, r, c])
                if smooth:
                    fire = _sig(sharpness * u)
                else:
                    fire = 1.0 if u >= 0.0 else 0.0
                s[t, r, c] = fire
                vv = vv - np.float64(vth[t, r, c]) * fire
                v_post[t, r, c] = vv
                v[r, c] = vv


@njit(cache=True)
def _bwd_fixed(x, beta, vth, v0, v_pre, s, v_post, g_out, sharpness, reset_sign,
               dx, dbeta, dvth, dv0):
    S, R, C = x.shape
    carry = np.zeros((R, C), np.float64)
    for t in range(S - 1, -1, -1):
        for r in range(R):
            for c in range(C):
                b = np.float64(beta[c])
                th = np.float64(vth[c])
                g_post = np.float64(g_out[t, r, c]) + carry[r, c]
                u = np.float64(v_pre[t, r, c]) - th
                sg = _sg(u, sharpness)
                # reset path: dV_post/dV_pre = 1 - V_th*sg, dV_post/dV_th = -s + V_th*sg
                g_pre = g_post * (1.0 - reset_sign * th * sg)
                dvth[c] += g_post * (-np.float64(s[t, r, c]) + reset_sign * th * sg)
                dx[t, r, c] = g_pre * (1.0 - b)
                vprev = v0[r, c] if t == 0 else v_post[t - 1, r, c]
                dbeta[c] += g_pre * (np.float64(vprev) - np.float64(x[t, r, c]))
                carry[r, c] = g_pre * b
    for r in range(R):
        for c in range(C):
            dv0[r, c] = carry[r, c]


@njit(cache=True)
def _bwd_selective(beta, alpha, vth, cur, v0, v_pre, s, v_post, g_out, sharpness,
                   reset_sign, dcur, dbeta, dalpha, dvth, dv0):
    S, R, C = cur.shape
    carry = np.zeros((R, C), np.float64)
    for t in range(S - 1, -1, -1):
        for r in range(R):
            for c in range(C):
                b = np.float64(beta[t, r, c])
                th = np.float64(vth[t, r, c])
                g_post = np.float64(g_out[t, r, c]) + carry[r, c]
                u = np.float64(v_pre[t, r, c]) - th
                sg = _sg(u, sharpness)
                g_pre = g_post * (1.0 - reset_sign * th * sg)
                dvth[t, r, c] = g_post * (-np.float64(s[t, r, c]) + reset_sign * th * sg)
                dcur[t, r, c] = g_pre * np.float64(alpha[t, r, c])
                dalpha[t, r, c] = g_pre * np.float64(cur[t, r, c])
                vprev = v0[r, c] if t == 0 else v_post[t - 1, r, c]
                dbeta[t, r, c] = g_pre * np.float64(vprev)
                carry[r, c] = g_pre * b
    for r in range(R):
        for c in range(C):
            dv0[r, c] = carry[r, c]


# ---------------------------------------------------------------------------
# Scan wrappers (tape-integrated)
# ---------------------------------------------------------------------------


def _canon3(data: np.ndarray) -> np.ndarray:
    if data.ndim == 2:
        return data[:, None, :]
    if data.ndim == 3:
        return data
    raise nc.DimensionError(f"scan input must be 2-D or 3-D, got {data.shape}")


def _check_steps_finite(arrays, label: str) -> None:
    for name, arr in arrays:
        finite = np.isfinite(arr)
        if not finite.all():
            bad = int(np.argmin(finite.reshape(arr.shape[0], -1).all(axis=1)))
            raise nc.NumericError(f"{label}: non-finite {name} at step {bad}")


def _canon_v0(v0: Optional[Tensor], R: int, C: int, dtype):
    """Initial state as (R, C); a per-channel vector is shared across rows."""
    if v0 is None:
        return np.zeros((R, C), dtype), False
    if v0.ndim == 1:
        if v0.shape != (C,):
            raise nc.DimensionError(f"v0 shape {v0.shape} != ({C},)")
        return np.broadcast_to(v0.data, (R, C)).astype(dtype, copy=True), True
    if v0.shape != (R, C):
        raise nc.DimensionError(f"v0 shape {v0.shape} != {(R, C)}")
    return v0.data, False


def scan_fixed(x: Tensor, beta: Tensor, v_th: Tensor,
               v0: Optional[Tensor] = None, *, smooth: bool = False,
               sharpness: float = SURROGATE_SHARPNESS) -> Tuple[Tensor, ScanTrace]:
    """Row-parameter scan: V_pre = beta*V_post' + (1-beta)*x, fire, soft reset."""
    xd = _canon3(x.data)
    S, R, C = xd.shape
    if beta.shape != (C,) or v_th.shape != (C,):
        raise nc.DimensionError("scan_fixed expects per-channel beta/v_th")
    v0d, v0_shared = _canon_v0(v0, R, C, xd.dtype)
    _check_steps_finite([("input", xd)], "scan_fixed")
    _check_steps_finite([("v0", v0d[None])], "scan_fixed")

    v_pre = np.empty_like(xd)
    s = np.empty_like(xd)
    v_post = np.empty_like(xd)
    _fwd_fixed(xd, beta.data, v_th.data, v0d, float(sharpness), bool(smooth),
               v_pre, s, v_post)
    trace = ScanTrace("fixed", bool(smooth), float(sharpness),
                      v_pre, s, v_post, v0d, xd, beta.data, v_th.data)
    out = Tensor(v_post.reshape(x.shape))

    parents = [x, beta, v_th] + ([v0] if isinstance(v0, Tensor) else [])

    def backward(g: np.ndarray) -> None:
        grads = plif_backward(trace, g.reshape(xd.shape))
        nc.accumulate_grad(x, grads.d_input.reshape(x.shape))
        nc.accumulate_grad(beta, grads.d_beta.astype(beta.dtype))
        nc.accumulate_grad(v_th, grads.d_vth.astype(v_th.dtype))
        if isinstance(v0, Tensor):
            dv0 = grads.d_v0.sum(axis=0) if v0_shared else grads.d_v0
            nc.accumulate_grad(v0, dv0.reshape(v0.shape).astype(v0.dtype))

    nc.record_op(out, parents, backward)
    return out, trace


def plif_scan_fixed(x: Tensor, params: PlifParams,
                    v0: Optional[Tensor] = None, *, smooth: bool = False,
                    sharpness: float = SURROGATE_SHARPNESS) -> Tuple[Tensor, ScanTrace]:
    """Fixed-node scan with decay taken as sigmoid of the logit parameter."""
    return scan_fixed(x, params.beta(), params.v_th, v0,
                      smooth=smooth, sharpness=sharpness)


def scan_selective(inputs: SelectiveInputs, v0: Optional[Tensor] = None, *,
                   smooth: bool = False,
                   sharpness: float = SURROGATE_SHARPNESS) -> Tuple[Tensor, ScanTrace]:
    """Per-element scan: V = beta_t*V' + alpha_t*I, fire, soft reset.

    The hidden-node output is the raw post-reset potential; callers that
    want a leakage signal apply :func:`leakage` with a fixed decay.
    """
    cur = inputs.current
    cd = _canon3(cur.data)
    S, R, C = cd.shape
    bd = _canon3(inputs.beta_t.data)
    ad = _canon3(inputs.alpha_t.data)
    td = _canon3(inputs.vth_t.data)
    v0d, v0_shared = _canon_v0(v0, R, C, cd.dtype)
    _check_steps_finite(
        [("current", cd), ("beta", bd), ("alpha", ad), ("v_th", td)],
        "scan_selective")
    if float(td.min()) <= 0:
        raise ValueError("scan_selective requires positive thresholds")

    v_pre = np.empty_like(cd)
    s = np.empty_like(cd)
    v_post = np.empty_like(cd)
    _fwd_selective(bd, ad, td, cd, v0d, float(sharpness), bool(smooth),
                   v_pre, s, v_post)
    trace = ScanTrace("selective", bool(smooth), float(sharpness),
                      v_pre, s, v_post, v0d, cd, bd, td, alpha=ad)
    out = Tensor(v_post.reshape(cur.shape))

    parents = [cur, inputs.beta_t, inputs.alpha_t, inputs.vth_t]
    if isinstance(v0, Tensor):
        parents.append(v0)

    def backward(g: np.ndarray) -> None:
        grads = plif_backward(trace, g.reshape(cd.shape))
        nc.accumulate_grad(cur, grads.d_input.reshape(cur.shape))
        nc.accumulate_grad(inputs.beta_t, grads.d_beta.reshape(inputs.beta_t.shape))
        nc.accumulate_grad(inputs.alpha_t, grads.d_alpha.reshape(inputs.alpha_t.shape))
        nc.accumulate_grad(inputs.vth_t, grads.d_vth.reshape(inputs.vth_t.shape))
        if isinstance(v0, Tensor):
            dv0 = grads.d_v0.sum(axis=0) if v0_shared else grads.d_v0
            nc.accumulate_grad(v0, dv0.reshape(v0.shape).astype(v0.dtype))

    nc.record_op(out, parents, backward)
    return out, trace


plif_scan_selective = scan_selective


def plif_scan_smooth(x: Tensor, params: PlifParams,
                     v0: Optional[Tensor] = None, *,
                     sharpness: float = SURROGATE_SHARPNESS) -> Tuple[Tensor, ScanTrace]:
    """Fully smooth fixed-node scan (spike := surrogate sigmoid everywhere)."""
    return plif_scan_fixed(x, params, v0, smooth=True, sharpness=sharpness)


# Sign of the surrogate term inside the reset Jacobian.  +1.0 is the
# non-detached convention (gradient flows through the reset); mutation
# tests flip it to prove the gradient oracle catches the change.
_RESET_SIGN = 1.0


def plif_backward(trace: ScanTrace, grad_out: np.ndarray) -> ScanGrads:
    """Reverse-time scan over a forward trace.

    Uses the surrogate derivative for the spike and keeps the reset term
    in the chain rule; in smooth mode the same formulas are the exact
    gradient.  Parameter gradients accumulate in float64.
    """
    g = np.ascontiguousarray(grad_out)
    if g.shape != trace.v_post.shape:
        raise nc.DimensionError(
            f"grad_out shape {g.shape} != trace shape {trace.v_post.shape}")
    S, R, C = trace.x.shape
    if trace.mode == "fixed":
        dx = np.empty_like(trace.x)
        dbeta = np.zeros(C, np.float64)
        dvth = np.zeros(C, np.float64)
        dv0 = np.zeros((R, C), np.float64)
        _bwd_fixed(trace.x, trace.beta, trace.vth, trace.v0,
                   trace.v_pre, trace.s, trace.v_post, g,
                   trace.sharpness, _RESET_SIGN, dx, dbeta, dvth, dv0)
        return ScanGrads(dx, dbeta, dvth, dv0)
    dcur = np.empty_like(trace.x)
    dbeta = np.empty_like(trace.x)
    dalpha = np.empty_like(trace.x)
    dvth = np.empty_like(trace.x)
    dv0 = np.zeros((R, C), np.float64)
    _bwd_selective(trace.beta, trace.alpha, trace.vth, trace.x, trace.v0,
                   trace.v_pre, trace.s, trace.v_post, g,
                   trace.sharpness, _RESET_SIGN, dcur, dbeta, dalpha, dvth, dv0)
    return ScanGrads(dcur, dbeta, dvth, dv0, d_alpha=dalpha)


def leakage(v_post: Tensor, beta: Tensor) -> Tensor:
    """Decay-weighted boundary signal (1 - beta) * V_post."""
    return nc.mul(nc.sub(1.0, beta), v_post)


# ---------------------------------------------------------------------------
# Three-phase prefix-scan / fixed-point oracle
# ---------------------------------------------------------------------------

_prefix_fallbacks = 0


def prefix_fallback_count() -> int:
    """How many oracle calls hit max_iters and fell back to the sequential scan."""
    return _prefix_fallbacks


@dataclass
class PrefixScanResult:
    v_pre: np.ndarray
    s: np.ndarray
    v_post: np.ndarray
    iterations: int
    converged: bool
    used_fallback: bool


def _prefix_affine(a: np.ndarray, b: np.ndarray, v0: np.ndarray) -> np.ndarray:
    """Inclusive prefix of affine maps v -> a*v + b applied to v0.

    Hillis-Steele over the step axis with the composition
    (a2,b2) o (a1,b1) = (a2*a1, a2*b1 + b2), later map on the left.
    """
    A = a.astype(np.float64).copy()
    B = b.astype(np.float64).copy()
    S = A.shape[0]
    stride = 1
    while stride < S:
        A_src = A[:-stride]
        B_src = B[:-stride]
        B[stride:] = A[stride:] * B_src + B[stride:]
        A[stride:] = A[stride:] * A_src
        stride *= 2
    return A * v0[None, ...] + B


def _prefix_core(a: np.ndarray, b: np.ndarray, vth: np.ndarray, v0: np.ndarray,
                 max_iters: int, boundary_fires: bool,
                 sequential_fallback) -> PrefixScanResult:
    global _prefix_fallbacks
    no_reset = _prefix_affine(a, b, v0)            # phase 1

    def fires(v_pre):
        return (v_pre >= vth) if boundary_fires else (v_pre > vth)

    def reset_correction(spikes):
        # R[t] = a_t * (R[t-1] + vth[t-1]*s[t-1]); same prefix machinery.
        shifted = np.zeros_like(no_reset)
        shifted[1:] = (vth * spikes)[:-1]
        return _prefix_affine(a, a * shifted, np.zeros_like(v0, dtype=np.float64))

    s = fires(no_reset).astype(no_reset.dtype)      # phase 2: fixed point
    iters = 0
    converged = False
    v_pre = no_reset
    while iters < max_iters:
        iters += 1
        v_pre = no_reset - reset_correction(s)
        s_new = fires(v_pre).astype(no_reset.dtype)
        if np.array_equal(s_new, s):
            converged = True
            break
        s = s_new
    if not converged:
        _prefix_fallbacks += 1
        v_pre, s, v_post = sequential_fallback()
        return PrefixScanResult(v_pre, s, v_post, iters, False, True)
    v_post = v_pre - vth * s                        # phase 3
    return PrefixScanResult(v_pre, s, v_post, iters, True, False)


def prefix_scan_fixed(x: np.ndarray, beta: np.ndarray, vth: np.ndarray,
                      v0: Optional[np.ndarray] = None, *, max_iters: int = 64,
                      boundary_fires: bool = True) -> PrefixScanResult:
    """Oracle for the fixed-parameter scan (raw arrays, forward only)."""
    x = _canon3(np.asarray(x))
    S, R, C = x.shape
    beta = np.asarray(beta, dtype=np.float64)
    vth_full = np.broadcast_to(np.asarray(vth, dtype=np.float64), x.shape)
    v0 = np.zeros((R, C)) if v0 is None else np.asarray(v0, np.float64).reshape(R, C)
    a = np.broadcast_to(beta, x.shape)
    b = (1.0 - beta) * x.astype(np.float64)

    def fallback():
        v_pre = np.empty(x.shape, np.float64)
        s = np.empty(x.shape, np.float64)
        v_post = np.empty(x.shape, np.float64)
        _fwd_fixed(x.astype(np.float64), beta, np.asarray(vth, np.float64),
                   v0, SURROGATE_SHARPNESS, False, v_pre, s, v_post)
        return v_pre, s, v_post

    return _prefix_core(a, b, vth_full, v0, max_iters, boundary_fires, fallback)


def prefix_scan_selective(beta_t: np.ndarray, alpha_t: np.ndarray,
                          vth_t: np.ndarray, current: np.ndarray,
                          v0: Optional[np.ndarray] = None, *,
                          max_iters: int = 64,
                          boundary_fires: bool = True) -> PrefixScanResult:
    """Oracle for the selective scan (raw arrays, forward only)."""
    cur = _canon3(np.asarray(current))
    S, R, C = cur.shape
    a = _canon3(np.asarray(beta_t)).astype(np.float64)
    alpha = _canon3(np.asarray(alpha_t)).astype(np.float64)
    vth = _canon3(np.asarray(vth_t)).astype(np.float64)
    v0 = np.zeros((R, C)) if v0 is None else np.asarray(v0, np.float64).reshape(R, C)
    b = alpha * cur.astype(np.float64)

    def fallback():
        v_pre = np.empty(cur.shape, np.float64)
        s = np.empty(cur.shape, np.float64)
        v_post = np.empty(cur.shape, np.float64)
        _fwd_selective(a, alpha, vth, cur.astype(np.float64), v0,
                       SURROGATE_SHARPNESS, False, v_pre, s, v_post)
        return v_pre, s, v_post

    return _prefix_core(a, b, vth, v0, max_iters, boundary_fires, fallback)
