"""Selective spiking sequence block, spiking feed-forward, structured init.

The sequence block computes six projections of the incoming leakage
signal (current, three modulation signals, gate, skip), runs the
selective scan over ``D*N`` hidden neurons, and mixes the post-reset
potentials back to width ``D`` through a gated output projection.  The
feed-forward replaces a gated MLP's activation with two fixed-parameter
spiking nodes whose leakage signals multiply elementwise.

Hidden channels use a group-major layout: neuron index ``n*D + d`` for
group ``n`` of ``N``.  Checkpoints inherit this layout.

Initialization targets multi-timescale decay (logit-spaced groups),
near-unity input gain, and per-group firing rates calibrated from the
stationary potential variance; input rows and output columns carry the
matching per-group scales.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from snnlm import numcore as nc
from snnlm import neuron
from snnlm.numcore import Tensor
from snnlm.neuron import PlifParams, ScanTrace, SelectiveInputs

# Calibration constants for the structured init.
BETA_LOW, BETA_HIGH = 0.80, 0.99
P_FIRE_HIGH, P_FIRE_LOW = 0.25, 0.08
K_REF = 16                  # calibration horizon, in scan steps
P_INPUT = 0.15              # assumed rate of incoming leak events
BASE_STD = 0.02             # base weight scale before per-group factors
MODULATION_SCALE = 0.1      # W_beta/W_alpha/W_th relative to W_in
B_ALPHA_MEAN = 0.5413       # softplus(0.5413) ~ 1.0
B_ALPHA_STD = 0.1
B_BETA_NOISE = 0.1


# ---------------------------------------------------------------------------
# Inverse standard normal CDF
# ---------------------------------------------------------------------------

# Rational approximation coefficients (Acklam), then one Halley refinement
# against erfc, giving absolute error well below 1e-8 on (0, 1).
_ICDF_A = (-3.969683028665376e+01, 2.209460984245205e+02,
           -2.759285104469687e+02, 1.383577518672690e+02,
           -3.066479806614716e+01, 2.506628277459239e+00)
_ICDF_B = (-5.447609879822406e+01, 1.615858368580409e+02,
           -1.556989798598866e+02, 6.680131188771972e+01,
           -1.328068155288572e+01)
_ICDF_C = (-7.784894002430293e-03, -3.223964580411365e-01,
           -2.400758277161838e+00, -2.549732539343734e+00,
           4.374664141464968e+00, 2.938163982698783e+00)
_ICDF_D = (7.784695709041462e-03, 3.224671290700398e-01,
           2.445134137142996e+00, 3.754408661907416e+00)


def inv_normal_cdf(q: float) -> float:
    """Quantile of the standard normal; valid on open (0, 1)."""
    q = float(q)
    if not 0.0 < q < 1.0:
        raise nc.DomainError(f"inv_normal_cdf: q={q} outside (0, 1)")
    a, b, c, d = _ICDF_A, _ICDF_B, _ICDF_C, _ICDF_D
    p_low = 0.02425
    if q < p_low:
        u = math.sqrt(-2.0 * math.log(q))
        x = (((((c[0] * u + c[1]) * u + c[2]) * u + c[3]) * u + c[4]) * u + c[5]) / \
            ((((d[0] * u + d[1]) * u + d[2]) * u + d[3]) * u + 1.0)
    elif q <= 1.0 - p_low:
        u = q - 0.5
        r = u * u
        x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * u / \
            (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0)
    else:
        u = math.sqrt(-2.0 * math.log(1.0 - q))
        x = -(((((c[0] * u + c[1]) * u + c[2]) * u + c[3]) * u + c[4]) * u + c[5]) / \
            ((((d[0] * u + d[1]) * u + d[2]) * u + d[3]) * u + 1.0)
    # Halley refinement: e = Phi(x) - q
    e = 0.5 * math.erfc(-x / math.sqrt(2.0)) - q
    u = e * math.sqrt(2.0 * math.pi) * math.exp(x * x / 2.0)
    return x - u / (1.0 + x * u / 2.0)


# ---------------------------------------------------------------------------
# Parameter containers
# ---------------------------------------------------------------------------


@dataclass
class SnnBlockParams:
    w_in: Tensor          # (D, D*N)
    w_beta: Tensor        # (D, D*N)
    w_alpha: Tensor       # (D, D*N)
    w_th: Tensor          # (D, D*N)
    w_gate: Tensor        # (D, D)
    w_skip: Tensor        # (D, D)
    w_out: Tensor         # (D*N, D)
    b_beta: Tensor        # (D*N,)
    b_alpha: Tensor       # (D*N,)
    b_th: Tensor          # (D*N,)
    plif_in: PlifParams   # D channels

    @property
    def d_model(self) -> int:
        return self.w_in.shape[0]

    @property
    def n_groups(self) -> int:
        return self.w_in.shape[1] // self.w_in.shape[0]


@dataclass
class SnnFfnParams:
    w_gate: Tensor        # (D, D_ff)
    w_up: Tensor          # (D, D_ff)
    w_down: Tensor        # (D_ff, D)
    w_skip: Tensor        # (D, D)
    plif_in: PlifParams   # D channels
    plif_gate: PlifParams  # D_ff channels
    plif_up: PlifParams   # D_ff channels


@dataclass
class BlockTrace:
    """Diagnostics from one block forward (raw arrays; not differentiated)."""

    scan: ScanTrace
    beta_t: np.ndarray    # modulation values actually used, (S, B, D*N)
    alpha_t: np.ndarray
    vth_t: np.ndarray

    def group_spike_rates(self, n_groups: int) -> np.ndarray:
        s = self.scan.s
        d = s.shape[-1] // n_groups
        grouped = s.reshape(*s.shape[:-1], n_groups, d)
        return grouped.mean(axis=tuple(i for i in range(grouped.ndim) if i != grouped.ndim - 2),
                            dtype=np.float64)


@dataclass
class FfnTrace:
    gate_scan: ScanTrace
    up_scan: ScanTrace


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------


def init_plif_node(dim: int, tau0: float, v0: float,
                   rng: np.random.Generator) -> PlifParams:
    """Per-channel draws: decay logits near logit(1 - 1/tau0), thresholds
    uniform in [0.5*v0, 1.5*v0]."""
    if tau0 <= 1:
        raise ValueError(f"init_plif_node: tau0 must exceed 1, got {tau0}")
    if v0 <= 0:
        raise ValueError(f"init_plif_node: v0 must be positive, got {v0}")
    center = math.log((1.0 - 1.0 / tau0) / (1.0 / tau0))
    w = rng.normal(center, 0.5, dim)
    v_th = rng.uniform(0.5 * v0, 1.5 * v0, dim)
    return PlifParams(Tensor(w), Tensor(v_th))


def group_beta_targets(n_groups: int) -> np.ndarray:
    return np.linspace(BETA_LOW, BETA_HIGH, n_groups)


def group_fire_targets(n_groups: int) -> np.ndarray:
    return np.linspace(P_FIRE_HIGH, P_FIRE_LOW, n_groups)


def stationary_sigma(beta: np.ndarray, k_ref: int = K_REF,
                     p_input: float = P_INPUT) -> np.ndarray:
    """Predicted potential std after k_ref steps of rate-p unit-variance drive."""
    beta = np.asarray(beta, dtype=np.float64)
    return np.sqrt(p_input / 3.0) * np.sqrt(1.0 - beta ** (2 * k_ref))


def group_threshold_targets(n_groups: int) -> np.ndarray:
    betas = group_beta_targets(n_groups)
    p_fire = group_fire_targets(n_groups)
    sigma = stationary_sigma(betas)
    return np.array([sigma[n] * inv_normal_cdf(1.0 - p_fire[n])
                     for n in range(n_groups)])


def _grouped_normal(rng: np.random.Generator, d_in: int, d_out_groups: int,
                    group_scale: np.ndarray, std: float) -> np.ndarray:
    """(d_in, N*d_in) base normal with per-group output-column scaling."""
    n = group_scale.shape[0]
    w = rng.normal(0.0, std, (d_in, n * d_in))
    for g in range(n):
        w[:, g * d_in:(g + 1) * d_in] *= group_scale[g]
    return w


def init_snn_block(d_model: int, n_groups: int, rng: np.random.Generator, *,
                   v_min: float = 0.1, tau0: float = 2.0,
                   v0: float = 1.0) -> SnnBlockParams:
    """Structured init for one sequence block (see module docstring)."""
    if d_model < 1 or n_groups < 1:
        raise ValueError(f"invalid block extents D={d_model}, N={n_groups}")
    betas = group_beta_targets(n_groups)
    vth_targets = group_threshold_targets(n_groups)
    charge_scale = np.sqrt(1.0 - betas ** 2)

    b_beta = np.concatenate([
        np.log(betas[n] / (1.0 - betas[n])) + rng.normal(0.0, B_BETA_NOISE, d_model)
        for n in range(n_groups)])
    b_alpha = rng.normal(B_ALPHA_MEAN, B_ALPHA_STD, n_groups * d_model)
    # Thresholds are encoded as offsets above the floor; zero modulation then
    # reproduces the calibrated target through v_min + |b_th|.
    b_th = np.concatenate([
        np.full(d_model, max(vth_targets[n] - v_min, 0.0))
        for n in range(n_groups)])

    w_in = _grouped_normal(rng, d_model, n_groups, charge_scale, BASE_STD)
    w_beta = _grouped_normal(rng, d_model, n_groups, charge_scale, BASE_STD) \
        * MODULATION_SCALE
    w_alpha = _grouped_normal(rng, d_model, n_groups, charge_scale, BASE_STD) \
        * MODULATION_SCALE
    w_th = _grouped_normal(rng, d_model, n_groups, charge_scale, BASE_STD) \
        * MODULATION_SCALE
    w_gate = rng.normal(0.0, BASE_STD, (d_model, d_model))
    w_skip = rng.normal(0.0, BASE_STD, (d_model, d_model))

    w_out = rng.normal(0.0, BASE_STD, (n_groups * d_model, d_model))
    col_factors = 1.0 / np.sqrt(group_fire_targets(n_groups))
    col_factors = col_factors / col_factors.mean()
    for g in range(n_groups):
        w_out[g * d_model:(g + 1) * d_model, :] *= col_factors[g]

    return SnnBlockParams(
        w_in=Tensor(w_in), w_beta=Tensor(w_beta), w_alpha=Tensor(w_alpha),
        w_th=Tensor(w_th), w_gate=Tensor(w_gate), w_skip=Tensor(w_skip),
        w_out=Tensor(w_out), b_beta=Tensor(b_beta), b_alpha=Tensor(b_alpha),
        b_th=Tensor(b_th),
        plif_in=init_plif_node(d_model, tau0, v0, rng))


def init_snn_ffn(d_model: int, d_ff: int, n_layers: int,
                 rng: np.random.Generator, *, tau0: float = 2.0,
                 v0: float = 1.0) -> SnnFfnParams:
    """Feed-forward init; the down projection shrinks by 1/sqrt(L) to keep
    deep residual chains stable."""
    if d_model < 1 or d_ff < 1:
        raise ValueError(f"invalid ffn extents D={d_model}, D_ff={d_ff}")
    w_gate = rng.normal(0.0, BASE_STD, (d_model, d_ff))
    w_up = rng.normal(0.0, BASE_STD, (d_model, d_ff))
    w_down = rng.normal(0.0, BASE_STD, (d_ff, d_model)) / math.sqrt(n_layers)
    w_skip = rng.normal(0.0, BASE_STD, (d_model, d_model))
    return SnnFfnParams(
        w_gate=Tensor(w_gate), w_up=Tensor(w_up), w_down=Tensor(w_down),
        w_skip=Tensor(w_skip),
        plif_in=init_plif_node(d_model, tau0, v0, rng),
        plif_gate=init_plif_node(d_ff, tau0, v0, rng),
        plif_up=init_plif_node(d_ff, tau0, v0, rng))


# ---------------------------------------------------------------------------
# Forwards
# ---------------------------------------------------------------------------


def snn_block_forward(leak_in: Tensor, params: SnnBlockParams, *,
                      v_min: float = 0.1, smooth: bool = False,
                      sharpness: float = neuron.SURROGATE_SHARPNESS,
                      v0: Optional[Tensor] = None) -> Tuple[Tensor, BlockTrace]:
    """Run the selective block over (S, B, D) leakage input.

    Membrane state carries across all S frames (the only cross-step
    mixing); pass ``v0`` only when resuming a segment mid-sequence.
    """
    S, B, D = leak_in.shape
    DN = params.w_in.shape[1]
    flat = nc.reshape(leak_in, (S * B, D))

    current = nc.reshape(nc.matmul(flat, params.w_in), (S, B, DN))
    beta_t = nc.sigmoid(nc.reshape(
        nc.add(nc.matmul(flat, params.w_beta), params.b_beta), (S, B, DN)))
    alpha_t = nc.softplus(nc.reshape(
        nc.add(nc.matmul(flat, params.w_alpha), params.b_alpha), (S, B, DN)))
    vth_t = nc.add(v_min, nc.absval(nc.reshape(
        nc.add(nc.matmul(flat, params.w_th), params.b_th), (S, B, DN))))
    gate = nc.sigmoid(nc.reshape(nc.matmul(flat, params.w_gate), (S, B, D)))
    skip = nc.reshape(nc.matmul(flat, params.w_skip), (S, B, D))

    inputs = SelectiveInputs(beta_t=beta_t, alpha_t=alpha_t, vth_t=vth_t,
                             current=current)
    v_post, scan_trace = neuron.scan_selective(
        inputs, v0, smooth=smooth, sharpness=sharpness)

    mixed = nc.reshape(nc.matmul(nc.reshape(v_post, (S * B, DN)), params.w_out),
                       (S, B, D))
    out = nc.add(nc.mul(mixed, gate), skip)
    trace = BlockTrace(scan=scan_trace, beta_t=beta_t.data,
                       alpha_t=alpha_t.data, vth_t=vth_t.data)
    return out, trace


def snn_ffn_forward(leak_in: Tensor, params: SnnFfnParams, *,
                    smooth: bool = False,
                    sharpness: float = neuron.SURROGATE_SHARPNESS
                    ) -> Tuple[Tensor, FfnTrace]:
    """Gated spiking feed-forward over (S, B, D) leakage input."""
    S, B, D = leak_in.shape
    D_ff = params.w_gate.shape[1]
    flat = nc.reshape(leak_in, (S * B, D))

    gate_cur = nc.reshape(nc.matmul(flat, params.w_gate), (S, B, D_ff))
    up_cur = nc.reshape(nc.matmul(flat, params.w_up), (S, B, D_ff))

    beta_gate = params.plif_gate.beta()
    gate_post, gate_trace = neuron.scan_fixed(
        gate_cur, beta_gate, params.plif_gate.v_th, smooth=smooth,
        sharpness=sharpness)
    gate_leak = neuron.leakage(gate_post, beta_gate)

    beta_up = params.plif_up.beta()
    up_post, up_trace = neuron.scan_fixed(
        up_cur, beta_up, params.plif_up.v_th, smooth=smooth,
        sharpness=sharpness)
    up_leak = neuron.leakage(up_post, beta_up)

    hidden = nc.reshape(nc.mul(gate_leak, up_leak), (S * B, D_ff))
    out = nc.add(nc.reshape(nc.matmul(hidden, params.w_down), (S, B, D)),
                 nc.reshape(nc.matmul(flat, params.w_skip), (S, B, D)))
    return out, FfnTrace(gate_scan=gate_trace, up_scan=up_trace)
