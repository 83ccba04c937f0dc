"""CSV diagnostics: per-token adaptive depth, decay spectrum, firing rates.

All files carry one header row; schemas are documented in the README.
"""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from snnlm.model import Model
from snnlm.tokenizer import BOS_ID, PAD_ID


def _token_text(tid: int) -> str:
    if tid == BOS_ID:
        return "<BOS>"
    if tid == PAD_ID:
        return "<PAD>"
    ch = chr(tid)
    return ch if ch.isprintable() else f"\\x{tid:02x}"


def hidden_beta_values(model: Model) -> Dict[int, np.ndarray]:
    """Per-layer decay values of the hidden channels at zero modulation."""
    out = {}
    for i in range(model.config.n_layers):
        b = model.store[f"layers.{i}.block.b_beta"].data.astype(np.float64)
        out[i] = 1.0 / (1.0 + np.exp(-b))
    return out


def stats_dump(model: Model, eval_ids: np.ndarray, out_dir,
               max_tokens: Optional[int] = None) -> Dict[str, Path]:
    """Run one diagnostic forward and write the four CSV reports.

    Returns {report name: path}.  ``eval_ids`` is a flat id stream; at most
    ``max_tokens`` (default: one context window) are used, batch size 1.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    limit = min(model.config.context_len,
                max_tokens if max_tokens else model.config.context_len)
    ids = np.asarray(eval_ids)[:limit].astype(np.int64)
    if ids.size < 2:
        raise ValueError("stats_dump needs at least two eval tokens")
    _, aux = model.forward(ids[:, None])

    paths = {}
    n_groups = model.config.n_state

    path = out_dir / "per_token_ek.csv"
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["position", "token_id", "token_text", "layer",
                    "sublayer", "expected_k"])
        for s in aux.sublayers:
            ek = s.weights.expected_k.data[:, 0]
            for pos in range(ids.size):
                w.writerow([pos, int(ids[pos]), _token_text(int(ids[pos])),
                            s.layer, s.kind, f"{float(ek[pos]):.6f}"])
    paths["per_token_ek"] = path

    path = out_dir / "layer_ek.csv"
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["layer", "sublayer", "mean_expected_k"])
        for s in aux.sublayers:
            mean_ek = float(s.weights.expected_k.data.mean(dtype=np.float64))
            w.writerow([s.layer, s.kind, f"{mean_ek:.6f}"])
    paths["layer_ek"] = path

    path = out_dir / "beta_histogram.csv"
    betas = np.concatenate(list(hidden_beta_values(model).values()))
    counts, edges = np.histogram(betas, bins=40, range=(0.0, 1.0))
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["bin_lo", "bin_hi", "count"])
        for i, c in enumerate(counts):
            w.writerow([f"{edges[i]:.4f}", f"{edges[i + 1]:.4f}", int(c)])
    paths["beta_histogram"] = path

    path = out_dir / "group_beta.csv"
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["layer", "group", "mean_beta"])
        d = model.config.d_model
        for layer, values in hidden_beta_values(model).items():
            for g in range(n_groups):
                w.writerow([layer, g,
                            f"{values[g * d:(g + 1) * d].mean():.6f}"])
    paths["group_beta"] = path

    path = out_dir / "firing_rates.csv"
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["layer", "site", "group", "rate"])
        for s in aux.sublayers:
            w.writerow([s.layer, f"{s.kind}_input", -1,
                        f"{s.input_scan.spike_rate:.6f}"])
            if s.kind == "block":
                for g, rate in enumerate(s.core.group_spike_rates(n_groups)):
                    w.writerow([s.layer, "block_hidden", g, f"{rate:.6f}"])
            else:
                w.writerow([s.layer, "ffn_gate", -1,
                            f"{s.core.gate_scan.spike_rate:.6f}"])
                w.writerow([s.layer, "ffn_up", -1,
                            f"{s.core.up_scan.spike_rate:.6f}"])
        if aux.decode_scan is not None:
            w.writerow([-1, "decode_out", -1,
                        f"{aux.decode_scan.spike_rate:.6f}"])
    paths["firing_rates"] = path
    return paths
