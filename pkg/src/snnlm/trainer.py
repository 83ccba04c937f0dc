"""Training loop, evaluation, and sampling.

One optimizer step: forward over each micro-batch, backward, accumulate;
then the fixed hook order unscale (no-op at this scale) -> gradient
compensation -> global-norm clip -> Adam.  The order is recorded per step
and asserted, since compensation must see raw (unclipped) gradients.

Loss is next-token cross-entropy plus the pondering cost; the decomposition
is checked every step.  All randomness (batch sampling, generation) flows
from one seeded generator, so a fixed seed reproduces the loss trajectory
exactly.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from snnlm import numcore as nc
from snnlm import ponder, stabilizers
from snnlm.model import Model
from snnlm.optim import Adam, clip_global_norm
from snnlm.tokenizer import BOS_ID

STEP_ORDER = ("backward", "unscale", "compensate", "clip", "update")


class TrainingAborted(RuntimeError):
    """Raised when a step produces non-finite values; message names the site."""


@dataclass
class TrainConfig:
    peak_lr: float = 2e-4
    neuron_lr_mult: float = 10.0
    warmup_steps: int = 100
    total_steps: int = 2000
    schedule: str = "warmup_cosine"
    optimizer: str = "adam"        # "adam" | "adamw" (response-tuning mode)
    weight_decay: float = 0.0
    batch_size: int = 8
    grad_accum: int = 1
    grad_clip: float = 1.0
    seed: int = 0
    corpus_path: str = ""
    context_len: int = 128
    eval_fraction: float = 0.05
    log_every: int = 10

    def __post_init__(self):
        if self.warmup_steps >= self.total_steps:
            raise ValueError("warmup_steps must be below total_steps")
        if self.grad_clip <= 0:
            raise ValueError("grad_clip must be positive")
        if self.schedule != "warmup_cosine":
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.optimizer not in ("adam", "adamw"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class StatsRecord:
    step: int
    loss: float
    ce: float
    ponder_cost: float
    lr: float
    grad_norm: float
    block_ek: List[float]          # mean E[K] per layer, sequence blocks
    ffn_ek: List[float]            # mean E[K] per layer, feed-forwards
    beta_fast_fraction: float      # share of hidden channels with beta < 0.9
    group_fire_rates: List[float]  # mean hidden spike rate per group
    tokens_per_sec: float
    order: Tuple[str, ...] = STEP_ORDER

    def check(self) -> None:
        if abs(self.loss - (self.ce + self.ponder_cost)) > 1e-6:
            raise AssertionError("loss decomposition violated")
        if self.order != STEP_ORDER:
            raise AssertionError(f"step hook order violated: {self.order}")


CSV_COLUMNS = ("step", "loss", "ce", "ponder_cost", "lr", "grad_norm",
               "mean_block_ek", "mean_ffn_ek", "beta_fast_fraction",
               "mean_fire_rate", "tokens_per_sec")


def stats_csv_row(r: StatsRecord) -> str:
    return ",".join([
        str(r.step), f"{r.loss:.6f}", f"{r.ce:.6f}", f"{r.ponder_cost:.6f}",
        f"{r.lr:.3e}", f"{r.grad_norm:.6f}",
        f"{float(np.mean(r.block_ek)):.4f}", f"{float(np.mean(r.ffn_ek)):.4f}",
        f"{r.beta_fast_fraction:.4f}",
        f"{float(np.mean(r.group_fire_rates)):.5f}",
        f"{r.tokens_per_sec:.1f}"])


def sample_batch(ids: np.ndarray, context_len: int, batch_size: int,
                 rng: np.random.Generator
                 ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Random windows -> (inputs, targets, mask), each (T, B)."""
    if ids.size < context_len + 1:
        raise ValueError("corpus shorter than one context window")
    starts = rng.integers(0, ids.size - context_len - 1, batch_size)
    windows = np.stack([ids[s:s + context_len + 1] for s in starts])  # (B, T+1)
    inputs = windows[:, :-1].T.copy()
    targets = windows[:, 1:].T.copy()
    mask = np.ones_like(inputs, dtype=np.float64)
    return inputs, targets, mask


class Trainer:
    """Owns the optimizer state and the per-step hook ordering."""

    def __init__(self, model: Model, config: TrainConfig,
                 corpus_ids: Optional[np.ndarray] = None):
        self.model = model
        self.config = config
        self.rng = np.random.default_rng(config.seed)
        self.corpus_ids = corpus_ids
        weight_decay = config.weight_decay if config.optimizer == "adamw" else 0.0
        self.optimizer = Adam(
            model.store, peak_lr=config.peak_lr,
            neuron_lr_mult=config.neuron_lr_mult,
            warmup_steps=config.warmup_steps, total_steps=config.total_steps,
            weight_decay=weight_decay)
        self.compensation = stabilizers.CompensationConfig(
            c_max=model.config.c_max)
        self.step_count = 0

    # -- single optimizer step -------------------------------------------

    def _loss_and_grads(self, batch) -> Tuple[float, float, Dict[str, np.ndarray], object]:
        inputs, targets, mask = batch
        with nc.Tape() as tape:
            try:
                logits, aux = self.model.forward(inputs)
                flat = nc.reshape(logits, (inputs.size, logits.shape[2]))
                ce = nc.cross_entropy_logits(flat, targets.reshape(-1),
                                             mask.reshape(-1))
                cost = ponder.ponder_cost(aux.ponder_weights(),
                                          self.model.config.lambda_ponder)
                loss = nc.add(ce, cost)
            except nc.NumericError as e:
                raise TrainingAborted(f"non-finite forward: {e}") from e
            tape.backward(loss)
        grads = {name: t.grad for name, t in self.model.store.items()
                 if t.grad is not None}
        return ce.item(), cost.item(), grads, aux

    def train_step(self, batches: Optional[Sequence] = None) -> StatsRecord:
        """One optimizer step over ``grad_accum`` micro-batches."""
        cfg = self.config
        if batches is None:
            batches = [sample_batch(self.corpus_ids, cfg.context_len,
                                    cfg.batch_size, self.rng)
                       for _ in range(cfg.grad_accum)]
        t_start = time.perf_counter()
        order: List[str] = []

        accum: Dict[str, np.ndarray] = {}
        ce_sum = cost_sum = 0.0
        aux = None
        n_tokens = 0
        for batch in batches:
            ce, cost, grads, aux = self._loss_and_grads(batch)
            ce_sum += ce
            cost_sum += cost
            n_tokens += batch[0].size
            for name in sorted(grads):
                if name in accum:
                    accum[name] += grads[name]
                else:
                    accum[name] = grads[name].copy()
        n_micro = len(batches)
        for g in accum.values():
            g /= n_micro
        order.append("backward")

        order.append("unscale")  # hook point; no loss scaling at this size

        for name, tensor in self.model.store.items():
            tensor.grad = accum.get(name)
        stabilizers.compensate_gradients(dict(self.model.store.items()),
                                         self.compensation)
        order.append("compensate")

        grad_norm = clip_global_norm(accum, cfg.grad_clip)
        order.append("clip")

        lr = self.optimizer.step(accum)
        self.model.store.zero_grads()
        order.append("update")

        self.step_count += 1
        elapsed = max(time.perf_counter() - t_start, 1e-9)
        ce_mean = ce_sum / n_micro
        cost_mean = cost_sum / n_micro
        record = StatsRecord(
            step=self.step_count, loss=ce_mean + cost_mean, ce=ce_mean,
            ponder_cost=cost_mean, lr=lr, grad_norm=grad_norm,
            block_ek=self._layer_ek(aux, "block"),
            ffn_ek=self._layer_ek(aux, "ffn"),
            beta_fast_fraction=self.beta_fast_fraction(),
            group_fire_rates=self._group_rates(aux),
            tokens_per_sec=n_tokens / elapsed,
            order=tuple(order))
        record.check()
        if not np.isfinite(record.loss):
            raise TrainingAborted(f"non-finite loss at step {self.step_count}")
        return record

    def _layer_ek(self, aux, kind: str) -> List[float]:
        return [float(s.weights.expected_k.data.mean(dtype=np.float64))
                for s in aux.sublayers if s.kind == kind]

    def _group_rates(self, aux) -> List[float]:
        n = self.model.config.n_state
        rates = np.zeros(n, dtype=np.float64)
        count = 0
        for s in aux.sublayers:
            if s.kind == "block":
                rates += s.core.group_spike_rates(n)
                count += 1
        return list(rates / max(count, 1))

    def beta_fast_fraction(self, threshold: float = 0.9) -> float:
        """Share of hidden decay values (at zero modulation) below threshold."""
        values = []
        for name, t in self.model.store.items():
            if name.endswith(".block.b_beta"):
                values.append(1.0 / (1.0 + np.exp(-t.data.astype(np.float64))))
        beta = np.concatenate(values)
        return float((beta < threshold).mean())

    # -- loop ---------------------------------------------------------------

    def train(self, n_steps: int,
              on_record: Optional[Callable[[StatsRecord], None]] = None
              ) -> List[StatsRecord]:
        records = []
        for _ in range(n_steps):
            record = self.train_step()
            records.append(record)
            if on_record is not None:
                on_record(record)
        return records


def evaluate(model: Model, ids: np.ndarray, *, batch_size: int = 8,
             context_len: Optional[int] = None) -> float:
    """Mean next-token cross-entropy (nats) over non-overlapping windows."""
    context_len = context_len or model.config.context_len
    span = context_len + 1
    n_windows = (ids.size - 1) // context_len
    if n_windows < 1:
        raise ValueError("evaluation stream shorter than one window")
    total_nll = 0.0
    total_tokens = 0
    for start in range(0, n_windows * context_len, context_len * batch_size):
        chunk = []
        for b in range(batch_size):
            s = start + b * context_len
            if s + span > ids.size:
                break
            chunk.append(ids[s:s + span])
        if not chunk:
            break
        windows = np.stack(chunk)
        inputs = windows[:, :-1].T.copy()
        targets = windows[:, 1:].T.copy()
        logits, _ = model.forward(inputs)
        flat = nc.reshape(logits, (inputs.size, model.config.vocab_size))
        ce = nc.cross_entropy_logits(flat, targets.reshape(-1))
        total_nll += ce.item() * inputs.size
        total_tokens += inputs.size
    return total_nll / total_tokens


def generate(model: Model, prompt_ids: Sequence[int], max_new: int, *,
             temperature: float = 1.0,
             rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Autoregressive sampling; the scan replays over the growing sequence.

    Temperature 0 is greedy argmax.  Generation stops at the context limit.
    """
    ids = [int(i) for i in prompt_ids]
    context = model.config.context_len
    if len(ids) >= context:
        raise ValueError(f"prompt length {len(ids)} >= context {context}")
    if not ids:
        ids = [BOS_ID]
    rng = rng if rng is not None else np.random.default_rng(0)
    for _ in range(max_new):
        logits, _ = model.forward(np.asarray(ids, dtype=np.int64)[:, None])
        last = logits.data[-1, 0].astype(np.float64)
        if temperature == 0:
            next_id = int(np.argmax(last))
        else:
            z = last / temperature
            z -= z.max()
            p = np.exp(z)
            p /= p.sum()
            next_id = int(rng.choice(p.size, p=p))
        ids.append(next_id)
        if len(ids) >= context:
            break
    return np.asarray(ids, dtype=np.int64)
