"""Built-in verification suites, runnable from the CLI.

Each suite prints one pass/fail line with its seed so failures are
reproducible.  The suites cross-check independent computation routes:
sequential kernels vs the prefix/fixed-point oracle, the production
backward vs the scalar oracle, smooth-mode gradients vs central finite
differences, halting-weight algebra vs closed forms, and the closed-form
parameter count vs the published breakdown.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from snnlm import blocks, model, neuron, ponder, reference
from snnlm import numcore as nc
from snnlm.numcore import Tensor, oracle


@dataclass
class SuiteResult:
    name: str
    passed: bool
    detail: str
    seed: Optional[int] = None

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        seed = f" seed={self.seed}" if self.seed is not None else ""
        return f"[{status}] {self.name}{seed}: {self.detail}"


def _rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float((np.abs(a - b) / denom).max()) if a.size else 0.0


# ---------------------------------------------------------------------------
# Instance generators
# ---------------------------------------------------------------------------


def random_scan_instance(rng: np.random.Generator, *, max_steps: int = 256,
                         max_channels: int = 64,
                         rate_band: Tuple[float, float] = (0.05, 0.40)):
    """A scan instance whose realized firing rate lies inside ``rate_band``.

    Thresholds start at the no-reset-potential quantile for a drawn target
    rate and are rescaled until the sequential rate lands in band.
    """
    S = int(rng.integers(16, max_steps + 1))
    C = int(rng.integers(1, max_channels + 1))
    mode = "fixed" if rng.random() < 0.5 else "selective"
    target = rng.uniform(*rate_band)
    if mode == "fixed":
        beta = rng.uniform(0.2, 0.98, C)
        x = rng.standard_normal((S, C)) * rng.uniform(0.5, 1.5)
        fields = {"x": x, "beta": beta}
        run = lambda vth: neuron.prefix_scan_fixed(x, beta, vth)
        seq = lambda vth: _sequential_fixed(x, beta, vth)
        base = np.quantile(np.abs(x), 1.0 - target, axis=0) + 1e-3
    else:
        beta = rng.uniform(0.1, 0.98, (S, 1, C))
        alpha = rng.uniform(0.3, 1.5, (S, 1, C))
        x = rng.standard_normal((S, 1, C))
        base_vth = np.quantile(np.abs(alpha * x), 1.0 - target, axis=0) + 1e-3
        fields = {"beta": beta, "alpha": alpha, "x": x}
        run = lambda vth: neuron.prefix_scan_selective(beta, alpha, vth, x)
        seq = lambda vth: _sequential_selective(beta, alpha, vth, x)
        base = base_vth
    lo = max(rate_band[0], target - 0.05)
    hi = min(rate_band[1], target + 0.05)
    scale = 1.0
    for _ in range(25):
        vth = np.maximum(base * scale, 1e-2) * np.ones_like(base)
        vth_arg = vth if mode == "fixed" else np.broadcast_to(vth, x.shape).copy()
        rate = float(seq(vth_arg).s.mean(dtype=np.float64))
        if lo <= rate <= hi:
            break
        scale *= 1.2 if rate > target else 0.85
    return mode, fields, vth_arg, run, seq, rate


def _sequential_fixed(x, beta, vth):
    out, trace = neuron.scan_fixed(Tensor(np.asarray(x, np.float64)),
                                   Tensor(np.asarray(beta, np.float64)),
                                   Tensor(np.asarray(vth, np.float64)))
    return trace


def _sequential_selective(beta, alpha, vth, x):
    inputs = neuron.SelectiveInputs(
        beta_t=Tensor(np.asarray(beta, np.float64)),
        alpha_t=Tensor(np.asarray(alpha, np.float64)),
        vth_t=Tensor(np.asarray(vth, np.float64)),
        current=Tensor(np.asarray(x, np.float64)))
    out, trace = neuron.scan_selective(inputs)
    return trace


def random_block_micro(rng: np.random.Generator, dtype=np.float64):
    """Small random sequence-block instance plus matching scalar params."""
    D = int(rng.integers(2, 5))
    N = int(rng.integers(1, 3))
    S = int(rng.integers(2, 6))
    B = int(rng.integers(1, 3))
    p = {
        "w_in": rng.standard_normal((D, D * N)) * 0.6,
        "w_beta": rng.standard_normal((D, D * N)) * 0.3,
        "w_alpha": rng.standard_normal((D, D * N)) * 0.3,
        "w_th": rng.standard_normal((D, D * N)) * 0.3,
        "w_gate": rng.standard_normal((D, D)) * 0.6,
        "w_skip": rng.standard_normal((D, D)) * 0.6,
        "w_out": rng.standard_normal((D * N, D)) * 0.6,
        "b_beta": rng.normal(1.0, 0.5, D * N),
        "b_alpha": rng.normal(0.5, 0.3, D * N),
        "b_th": rng.uniform(0.05, 0.6, D * N),
        "leak": rng.standard_normal((S, B, D)) * 0.8,
    }
    return {k: v.astype(dtype) for k, v in p.items()}, (S, B, D, N)


def random_ffn_micro(rng: np.random.Generator, dtype=np.float64):
    D = int(rng.integers(2, 5))
    D_ff = int(rng.integers(2, 7))
    S = int(rng.integers(2, 6))
    B = int(rng.integers(1, 3))
    p = {
        "w_gate": rng.standard_normal((D, D_ff)) * 0.7,
        "w_up": rng.standard_normal((D, D_ff)) * 0.7,
        "w_down": rng.standard_normal((D_ff, D)) * 0.7,
        "w_skip": rng.standard_normal((D, D)) * 0.7,
        "plif_gate.w": rng.normal(0.0, 1.0, D_ff),
        "plif_gate.v_th": rng.uniform(0.2, 1.2, D_ff),
        "plif_up.w": rng.normal(0.0, 1.0, D_ff),
        "plif_up.v_th": rng.uniform(0.2, 1.2, D_ff),
        "leak": rng.standard_normal((S, B, D)) * 0.8,
    }
    return {k: v.astype(dtype) for k, v in p.items()}, (S, B, D, D_ff)


def _block_loss_production(p: Dict[str, np.ndarray], shape, weights: np.ndarray,
                           *, smooth: bool) -> Tuple[float, Dict[str, np.ndarray]]:
    S, B, D, N = shape
    tensors = {k: Tensor(v) for k, v in p.items()}
    params = blocks.SnnBlockParams(
        w_in=tensors["w_in"], w_beta=tensors["w_beta"],
        w_alpha=tensors["w_alpha"], w_th=tensors["w_th"],
        w_gate=tensors["w_gate"], w_skip=tensors["w_skip"],
        w_out=tensors["w_out"], b_beta=tensors["b_beta"],
        b_alpha=tensors["b_alpha"], b_th=tensors["b_th"],
        plif_in=neuron.PlifParams(Tensor(np.zeros(D)), Tensor(np.ones(D))))
    with nc.Tape() as tape:
        out, _ = blocks.snn_block_forward(tensors["leak"], params,
                                          v_min=0.1, smooth=smooth)
        loss = nc.sum_all(nc.mul(out, weights))
        tape.backward(loss)
    grads = {k: t.grad if t.grad is not None else np.zeros_like(t.data)
             for k, t in tensors.items()}
    return loss.item(), grads


def _block_loss_reference(p: Dict[str, np.ndarray], shape, weights: np.ndarray,
                          *, smooth: bool):
    def f(wrapped):
        out = reference.ref_block_forward(
            wrapped["leak"],
            {k: wrapped[k] for k in wrapped if k != "leak"},
            v_min=0.1, smooth=smooth)
        total = oracle.Value(0.0)
        for idx, w in np.ndenumerate(weights):
            total = total + out[idx] * float(w)
        return total
    return f


def _ffn_loss_production(p, shape, weights, *, smooth: bool):
    S, B, D, D_ff = shape
    tensors = {k: Tensor(v) for k, v in p.items()}
    params = blocks.SnnFfnParams(
        w_gate=tensors["w_gate"], w_up=tensors["w_up"],
        w_down=tensors["w_down"], w_skip=tensors["w_skip"],
        plif_in=neuron.PlifParams(Tensor(np.zeros(D)), Tensor(np.ones(D))),
        plif_gate=neuron.PlifParams(tensors["plif_gate.w"],
                                    tensors["plif_gate.v_th"]),
        plif_up=neuron.PlifParams(tensors["plif_up.w"],
                                  tensors["plif_up.v_th"]))
    with nc.Tape() as tape:
        out, _ = blocks.snn_ffn_forward(tensors["leak"], params, smooth=smooth)
        loss = nc.sum_all(nc.mul(out, weights))
        tape.backward(loss)
    grads = {k: t.grad if t.grad is not None else np.zeros_like(t.data)
             for k, t in tensors.items()}
    return loss.item(), grads


def _ffn_loss_reference(p, shape, weights, *, smooth: bool):
    def f(wrapped):
        out = reference.ref_ffn_forward(
            wrapped["leak"], {k: wrapped[k] for k in wrapped if k != "leak"},
            smooth=smooth)
        total = oracle.Value(0.0)
        for idx, w in np.ndenumerate(weights):
            total = total + out[idx] * float(w)
        return total
    return f


# ---------------------------------------------------------------------------
# Suites
# ---------------------------------------------------------------------------


def suite_scan_equivalence(n_instances: int = 1000, seed: int = 2024,
                           max_steps: int = 256) -> SuiteResult:
    rng = np.random.default_rng(seed)
    worst_pot = 0.0
    fallbacks = 0
    rates = []
    for _ in range(n_instances):
        mode, fields, vth, run, seq, rate = random_scan_instance(
            rng, max_steps=max_steps)
        rates.append(rate)
        trace = seq(vth)
        result = run(vth)
        fallbacks += int(result.used_fallback)
        if not np.array_equal(result.s.reshape(trace.s.shape), trace.s):
            return SuiteResult("scan_equivalence", False,
                               f"spike pattern mismatch in {mode} instance",
                               seed)
        diff = float(np.abs(result.v_pre.reshape(trace.v_pre.shape)
                            - trace.v_pre).max())
        worst_pot = max(worst_pot, diff)
        diff = float(np.abs(result.v_post.reshape(trace.v_post.shape)
                            - trace.v_post).max())
        worst_pot = max(worst_pot, diff)
    ok = worst_pot <= 1e-5
    detail = (f"{n_instances} instances, rates {min(rates):.2f}-{max(rates):.2f}, "
              f"max potential diff {worst_pot:.2e}, fallbacks {fallbacks}")
    return SuiteResult("scan_equivalence", ok, detail, seed)


def suite_backward_oracle(n_instances: int = 100, seed: int = 2025) -> SuiteResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(n_instances):
        if i % 2 == 0:
            p, shape = random_block_micro(rng)
            weights = rng.standard_normal((shape[0], shape[1], shape[2]))
            loss, grads = _block_loss_production(p, shape, weights, smooth=False)
            ref_fn = _block_loss_reference(p, shape, weights, smooth=False)
        else:
            p, shape = random_ffn_micro(rng)
            weights = rng.standard_normal((shape[0], shape[1], shape[2]))
            loss, grads = _ffn_loss_production(p, shape, weights, smooth=False)
            ref_fn = _ffn_loss_reference(p, shape, weights, smooth=False)
        ref = oracle.oracle_grad(ref_fn, p)
        for k in p:
            worst = max(worst, _rel_err(grads[k], ref[k]))
    ok = worst <= 1e-5
    return SuiteResult("backward_vs_oracle", ok,
                       f"{n_instances} micro instances, max rel err {worst:.2e}",
                       seed)


def suite_smooth_finite_difference(n_instances: int = 8, seed: int = 2026,
                                   step: float = 1e-3) -> SuiteResult:
    rng = np.random.default_rng(seed)
    total = 0
    bad = 0
    worst = 0.0
    for i in range(n_instances):
        if i % 2 == 0:
            p, shape = random_block_micro(rng)
            weights = rng.standard_normal((shape[0], shape[1], shape[2]))
            _, grads = _block_loss_production(p, shape, weights, smooth=True)
            runner = lambda q: _block_loss_production(q, shape, weights,
                                                      smooth=True)[0]
        else:
            p, shape = random_ffn_micro(rng)
            weights = rng.standard_normal((shape[0], shape[1], shape[2]))
            _, grads = _ffn_loss_production(p, shape, weights, smooth=True)
            runner = lambda q: _ffn_loss_production(q, shape, weights,
                                                    smooth=True)[0]
        fd = oracle.finite_difference_grad(runner, p, step=step)
        for k in p:
            a = np.asarray(grads[k], np.float64).reshape(-1)
            b = fd[k].reshape(-1)
            keep = (np.abs(a) >= 1e-8) | (np.abs(b) >= 1e-8)
            rel = np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)),
                                             1e-12)
            rel = rel[keep]
            total += rel.size
            bad += int((rel > 1e-3).sum())
            if rel.size:
                worst = max(worst, float(rel.max()))
    frac_ok = 1.0 - bad / max(total, 1)
    ok = frac_ok >= 0.99
    return SuiteResult(
        "smooth_finite_difference", ok,
        f"{total} coords, {frac_ok:.4%} within 1e-3 (worst {worst:.2e})", seed)


def suite_ponder_invariants(seed: int = 2027, n_instances: int = 50) -> SuiteResult:
    rng = np.random.default_rng(seed)
    for _ in range(n_instances):
        T = int(rng.integers(1, 5))
        K = int(rng.integers(1, 9))
        B = int(rng.integers(1, 4))
        D = int(rng.integers(2, 8))
        frames = Tensor(rng.standard_normal((T, K, B, D)))
        params = ponder.PonderParams(
            Tensor(rng.standard_normal((D, 1)) * 0.5),
            Tensor(rng.normal(-1.0, 1.5, 1)))
        out, w = ponder.ponder_aggregate(frames, params)
        sums = w.lam_hat.data.sum(axis=1, dtype=np.float64)
        if np.abs(sums - 1.0).max() > 1e-6:
            return SuiteResult("ponder_invariants", False,
                               "weights do not normalize", seed)
        ek = w.expected_k.data
        if ek.min() < 1.0 - 1e-6 or ek.max() > K + 1e-6:
            return SuiteResult("ponder_invariants", False,
                               "expected steps out of [1, K]", seed)
        surv = w.survival.data
        if np.abs(surv[:, 0] - 1.0).max() > 1e-6 or np.any(np.diff(surv, axis=1) > 1e-9):
            return SuiteResult("ponder_invariants", False,
                               "survival not monotone from 1", seed)
    # equal-p closed form via constant frames
    for p_target in (0.1, 0.3, 0.7):
        K = 6
        logit = float(np.log(p_target / (1 - p_target)))
        frames = Tensor(np.zeros((2, K, 1, 3)))
        params = ponder.PonderParams(Tensor(np.zeros((3, 1))),
                                     Tensor(np.array([logit])))
        _, w = ponder.ponder_aggregate(frames, params)
        expected = ponder.equal_p_expected_k(p_target, K)
        if abs(float(w.expected_k.data[0, 0]) - expected) > 1e-6:
            return SuiteResult("ponder_invariants", False,
                               f"equal-p closed form off at p={p_target}", seed)
    return SuiteResult("ponder_invariants", True,
                       f"{n_instances} random + closed-form instances", seed)


def suite_param_count() -> SuiteResult:
    counts = model.count_params(model.ModelConfig.full_scale())
    targets = {"embedding": 5.5e6, "snn_block_total": 674.8e6,
               "snn_ffn_total": 160.8e6, "residual_proj_total": 32.1e6,
               "total": 874.1e6}
    worst = max(abs(counts[k] - v) / v for k, v in targets.items())
    return SuiteResult("param_count_golden", worst <= 0.005,
                       f"max deviation {worst:.4%}")


def run_all(fast: bool = False) -> List[SuiteResult]:
    results = [
        suite_param_count(),
        suite_scan_equivalence(n_instances=120 if fast else 1000,
                               max_steps=128 if fast else 256),
        suite_backward_oracle(n_instances=20 if fast else 100),
        suite_smooth_finite_difference(n_instances=4 if fast else 8),
        suite_ponder_invariants(),
    ]
    return results


def main(fast: bool = False) -> int:
    results = run_all(fast=fast)
    for r in results:
        print(r.line())
    return 0 if all(r.passed for r in results) else 1
