"""Scalar reference implementations for gradient validation.

Everything here re-expresses the forward math with ``Value`` scalars and
naive Python loops: sequential scans written element by element, survival
probabilities as direct products instead of the fused log-space form,
matrix products via object-dtype dot.  The only shared code with the
production path is the ``Value`` class itself, so agreement between the
two backward passes is evidence, not tautology.

Shapes mirror the production modules: leak inputs are (S, B, D) object
arrays, parameters are dicts of object arrays keyed by the store names.
"""

from __future__ import annotations

from typing import Dict, List, Optional, Tuple

import numpy as np

from snnlm.numcore.oracle import Value

EPS_NORM = 1e-6


def _vec(values) -> np.ndarray:
    out = np.empty(len(values), dtype=object)
    for i, v in enumerate(values):
        out[i] = v
    return out


def _zero() -> Value:
    return Value(0.0)


def matvec(w: np.ndarray, x: np.ndarray) -> np.ndarray:
    """(in, out) weight applied to (in,) vector -> (out,)."""
    return np.dot(x, w)


def vmean(x: np.ndarray) -> Value:
    total = _zero()
    for v in x.reshape(-1):
        total = total + v
    return total / float(x.size)


def ref_scan_fixed(x: np.ndarray, beta: np.ndarray, vth: np.ndarray,
                   v0: Optional[np.ndarray] = None, *, smooth: bool = False,
                   sharpness: float = 4.0) -> np.ndarray:
    """(S, B, C) Values -> post-reset potentials, scalar recurrence per channel."""
    S, B, C = x.shape
    out = np.empty((S, B, C), dtype=object)
    for b in range(B):
        for c in range(C):
            v = v0[b, c] if v0 is not None else _zero()
            for t in range(S):
                v_pre = beta[c] * v + (1.0 - beta[c]) * x[t, b, c]
                u = v_pre - vth[c]
                fire = u.spike_smooth(sharpness) if smooth else u.spike(sharpness)
                v = v_pre - vth[c] * fire
                out[t, b, c] = v
    return out


def ref_scan_selective(beta_t: np.ndarray, alpha_t: np.ndarray,
                       vth_t: np.ndarray, cur: np.ndarray,
                       v0: Optional[np.ndarray] = None, *,
                       smooth: bool = False,
                       sharpness: float = 4.0) -> np.ndarray:
    S, B, C = cur.shape
    out = np.empty((S, B, C), dtype=object)
    for b in range(B):
        for c in range(C):
            v = v0[b, c] if v0 is not None else _zero()
            for t in range(S):
                v_pre = beta_t[t, b, c] * v + alpha_t[t, b, c] * cur[t, b, c]
                u = v_pre - vth_t[t, b, c]
                fire = u.spike_smooth(sharpness) if smooth else u.spike(sharpness)
                v = v_pre - vth_t[t, b, c] * fire
                out[t, b, c] = v
    return out


def ref_leakage(v_post: np.ndarray, beta: np.ndarray) -> np.ndarray:
    S, B, C = v_post.shape
    out = np.empty_like(v_post)
    for t in range(S):
        for b in range(B):
            for c in range(C):
                out[t, b, c] = (1.0 - beta[c]) * v_post[t, b, c]
    return out


def ref_plif_leak(x: np.ndarray, w: np.ndarray, vth: np.ndarray, *,
                  smooth: bool, sharpness: float) -> np.ndarray:
    beta = _vec([wi.sigmoid() for wi in w])
    return ref_leakage(ref_scan_fixed(x, beta, vth, smooth=smooth,
                                      sharpness=sharpness), beta)


def ref_block_forward(leak: np.ndarray, p: Dict[str, np.ndarray], *,
                      v_min: float, smooth: bool = False,
                      sharpness: float = 4.0) -> np.ndarray:
    """Mirror of the selective block on (S, B, D) leak Values.

    ``p`` uses short keys: w_in, w_beta, w_alpha, w_th, w_gate, w_skip,
    w_out, b_beta, b_alpha, b_th.
    """
    S, B, D = leak.shape
    DN = p["w_in"].shape[1]
    beta_t = np.empty((S, B, DN), dtype=object)
    alpha_t = np.empty((S, B, DN), dtype=object)
    vth_t = np.empty((S, B, DN), dtype=object)
    cur = np.empty((S, B, DN), dtype=object)
    gate = np.empty((S, B, D), dtype=object)
    skip = np.empty((S, B, D), dtype=object)
    for t in range(S):
        for b in range(B):
            vec = leak[t, b]
            cur[t, b] = matvec(p["w_in"], vec)
            zb = matvec(p["w_beta"], vec) + p["b_beta"]
            za = matvec(p["w_alpha"], vec) + p["b_alpha"]
            zt = matvec(p["w_th"], vec) + p["b_th"]
            beta_t[t, b] = _vec([z.sigmoid() for z in zb])
            alpha_t[t, b] = _vec([z.softplus() for z in za])
            vth_t[t, b] = _vec([z.absv() + v_min for z in zt])
            gate[t, b] = _vec([z.sigmoid() for z in matvec(p["w_gate"], vec)])
            skip[t, b] = matvec(p["w_skip"], vec)
    v_post = ref_scan_selective(beta_t, alpha_t, vth_t, cur,
                                smooth=smooth, sharpness=sharpness)
    out = np.empty((S, B, D), dtype=object)
    for t in range(S):
        for b in range(B):
            mixed = matvec(p["w_out"], v_post[t, b])
            out[t, b] = _vec([mixed[d] * gate[t, b][d] + skip[t, b][d]
                              for d in range(D)])
    return out


def ref_ffn_forward(leak: np.ndarray, p: Dict[str, np.ndarray], *,
                    smooth: bool = False, sharpness: float = 4.0) -> np.ndarray:
    """Mirror of the spiking feed-forward; keys w_gate, w_up, w_down, w_skip,
    plif_gate.w/.v_th, plif_up.w/.v_th."""
    S, B, D = leak.shape
    D_ff = p["w_gate"].shape[1]
    gate_cur = np.empty((S, B, D_ff), dtype=object)
    up_cur = np.empty((S, B, D_ff), dtype=object)
    for t in range(S):
        for b in range(B):
            gate_cur[t, b] = matvec(p["w_gate"], leak[t, b])
            up_cur[t, b] = matvec(p["w_up"], leak[t, b])
    gate_leak = ref_plif_leak(gate_cur, p["plif_gate.w"], p["plif_gate.v_th"],
                              smooth=smooth, sharpness=sharpness)
    up_leak = ref_plif_leak(up_cur, p["plif_up.w"], p["plif_up.v_th"],
                            smooth=smooth, sharpness=sharpness)
    out = np.empty((S, B, D), dtype=object)
    for t in range(S):
        for b in range(B):
            hidden = _vec([gate_leak[t, b][i] * up_leak[t, b][i]
                           for i in range(D_ff)])
            out[t, b] = matvec(p["w_down"], hidden) + matvec(p["w_skip"], leak[t, b])
    return out


def ref_rmsnorm(h: np.ndarray, gamma: np.ndarray,
                eps: float = EPS_NORM) -> np.ndarray:
    out = np.empty_like(h)
    flat = h.reshape(-1, h.shape[-1])
    oflat = out.reshape(-1, h.shape[-1])
    for i in range(flat.shape[0]):
        ms = vmean(_vec([x * x for x in flat[i]]))
        denom = (ms + eps).sqrt()
        oflat[i] = _vec([x / denom * g for x, g in zip(flat[i], gamma)])
    return out


def ref_center(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    flat = x.reshape(-1, x.shape[-1])
    oflat = out.reshape(-1, x.shape[-1])
    for i in range(flat.shape[0]):
        m = vmean(flat[i])
        oflat[i] = _vec([v - m for v in flat[i]])
    return out


def ref_ponder(frames: np.ndarray, w_halt: np.ndarray, b_halt: np.ndarray
               ) -> Tuple[np.ndarray, np.ndarray]:
    """(T, K, B, D) Values -> ((T, B, D) outputs, (T, B) expected steps).

    Survival uses direct products, the opposite numerical route from the
    production log-space cumulative sum.
    """
    T, K, B, D = frames.shape
    out = np.empty((T, B, D), dtype=object)
    expected = np.empty((T, B), dtype=object)
    for t in range(T):
        for b in range(B):
            ps = []
            for k in range(K):
                z = matvec(w_halt, frames[t, k, b])[0] + b_halt[0]
                ps.append(z.sigmoid())
            lam = []
            survive = Value(1.0)
            for k in range(K):
                lam.append(ps[k] * survive)
                survive = survive * (1.0 - ps[k])
            total = lam[0]
            for v in lam[1:]:
                total = total + v
            lam_hat = [v / total for v in lam]
            ek = _zero()
            for k in range(K):
                ek = ek + lam_hat[k] * float(k + 1)
            expected[t, b] = ek
            for d in range(D):
                acc = _zero()
                for k in range(K):
                    acc = acc + lam_hat[k] * frames[t, k, b, d]
                out[t, b, d] = acc
    return out, expected


def ref_cross_entropy(logits: np.ndarray, targets: np.ndarray,
                      mask: Optional[np.ndarray] = None) -> Value:
    """Masked mean NLL over (rows, vocab) Values."""
    rows, vocab = logits.shape
    if mask is None:
        mask = np.ones(rows)
    total = _zero()
    for i in range(rows):
        if mask[i] == 0:
            continue
        shift = max(z.v for z in logits[i])
        acc = _zero()
        for z in logits[i]:
            acc = acc + (z - shift).exp()
        lse = acc.log() + shift
        total = total + (lse - logits[i][int(targets[i])]) * float(mask[i])
    return total / float(mask.sum())


def ref_model_loss(params: Dict[str, np.ndarray], token_ids: np.ndarray,
                   targets: np.ndarray, config, *,
                   mask: Optional[np.ndarray] = None,
                   smooth: bool = False) -> Value:
    """Scalar re-evaluation of the whole pipeline's training loss."""
    T, B = token_ids.shape
    K, D, L = config.k_frames, config.d_model, config.n_layers
    sharp = config.surrogate_alpha
    emb = params["embedding"]

    h = np.empty((T * K, B, D), dtype=object)
    for t in range(T):
        for b in range(B):
            row = emb[int(token_ids[t, b])]
            for k in range(K):
                h[t * K + k, b] = row  # shared Values: replicas sum gradients

    expected_all: List[np.ndarray] = []
    for i in range(L):
        for kind in ("block", "ffn"):
            pre = f"layers.{i}.{kind}"
            u = ref_rmsnorm(h, params[f"{pre}.norm_gamma"])
            leak = ref_plif_leak(u, params[f"{pre}.plif_in.w"],
                                 params[f"{pre}.plif_in.v_th"],
                                 smooth=smooth, sharpness=sharp)
            if kind == "block":
                keys = ("w_in", "w_beta", "w_alpha", "w_th", "w_gate",
                        "w_skip", "w_out", "b_beta", "b_alpha", "b_th")
                sub = {k: params[f"{pre}.{k}"] for k in keys}
                core = ref_block_forward(leak, sub, v_min=config.v_min,
                                         smooth=smooth, sharpness=sharp)
            else:
                sub = {k: params[f"{pre}.{k}"]
                       for k in ("w_gate", "w_up", "w_down", "w_skip")}
                sub["plif_gate.w"] = params[f"{pre}.plif_gate.w"]
                sub["plif_gate.v_th"] = params[f"{pre}.plif_gate.v_th"]
                sub["plif_up.w"] = params[f"{pre}.plif_up.w"]
                sub["plif_up.v_th"] = params[f"{pre}.plif_up.v_th"]
                core = ref_ffn_forward(leak, sub, smooth=smooth, sharpness=sharp)
            frames = core.reshape(T, K, B, D)
            agg, expected = ref_ponder(frames, params[f"{pre}.halt.w"],
                                       params[f"{pre}.halt.b"])
            expected_all.append(expected)
            new_h = np.empty_like(h)
            for t in range(T):
                for b in range(B):
                    proj = matvec(params[f"{pre}.out_proj"], agg[t, b])
                    m = vmean(proj)
                    centered = _vec([v - m for v in proj])
                    for k in range(K):
                        new_h[t * K + k, b] = _vec(
                            [h[t * K + k, b][d] + centered[d] for d in range(D)])
            h = new_h

    u = ref_rmsnorm(h, params["decode.norm_gamma"])
    leak = ref_plif_leak(u, params["decode.plif_out.w"],
                         params["decode.plif_out.v_th"],
                         smooth=smooth, sharpness=sharp)
    logits = np.empty((T * B, config.vocab_size), dtype=object)
    for t in range(T):
        for b in range(B):
            pooled = _vec([_zero() for _ in range(D)])
            for k in range(K):
                pooled = _vec([pooled[d] + leak[t * K + k, b][d]
                               for d in range(D)])
            pooled = _vec([v / float(K) for v in pooled])
            proj = matvec(params["decode.proj"], pooled)
            ms = vmean(_vec([x * x for x in proj]))
            denom = (ms + EPS_NORM).sqrt()
            normed = _vec([x / denom * g
                           for x, g in zip(proj, params["decode.inhib_gamma"])])
            logits[t * B + b] = np.dot(emb, normed)
    ce = ref_cross_entropy(logits, targets.reshape(-1),
                           None if mask is None else mask.reshape(-1))

    cost = _zero()
    for expected in expected_all:
        cost = cost + vmean(expected)
    cost = cost * (config.lambda_ponder / len(expected_all))
    return ce + cost
