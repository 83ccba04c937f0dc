"""Full pipeline: encode, spiking decoder layers, tied decode head.

Encode embeds token ids and repeats each token vector over K consecutive
frames, giving a (T*K, B, D) residual stream.  Each of L layers applies
two pre-norm sublayers (sequence block, then feed-forward): normalize,
fire the input node, pass the leakage through the core, collapse the K
frames per token with the halting head, project, center, and add back,
re-broadcast over the K frames.  Decode normalizes, fires the output
node, averages the K frames uniformly, projects, applies lateral
inhibition, and multiplies by the transposed embedding (weight tying).

Neuron state is zeroed at every sequence start; batch rows are fully
independent.  Cross-token information moves only through the
forward-in-time membrane scans, so logits at position i cannot depend on
tokens after i.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, Iterator, List, Optional, Tuple, Union

import numpy as np

from snnlm import blocks, neuron, ponder, stabilizers
from snnlm import numcore as nc
from snnlm.numcore import Tensor

CHECKPOINT_MAGIC = b"NSPK"
CHECKPOINT_VERSION = 1

PARAM_GROUP_WEIGHT = "weight"
PARAM_GROUP_NEURON = "neuron"

# Name fragments that mark slow "neuron" parameters (separate LR group).
_NEURON_MARKERS = (".plif_", ".b_beta", ".b_alpha", ".b_th", ".halt.")


class CheckpointError(RuntimeError):
    """Malformed, truncated or incompatible checkpoint file."""


@dataclass
class ModelConfig:
    d_model: int = 64
    n_state: int = 4          # hidden groups per model channel
    k_frames: int = 4         # scan frames per token
    n_layers: int = 4
    d_ff: int = 192
    vocab_size: int = 258     # bytes + BOS + PAD
    context_len: int = 128
    v_min: float = 0.1
    lambda_ponder: float = 0.01
    surrogate_alpha: float = 4.0
    tau0: float = 2.0
    v0: float = 1.0
    c_max: float = 100.0
    seed: int = 0

    def __post_init__(self):
        for name in ("d_model", "n_state", "k_frames", "n_layers", "d_ff",
                     "vocab_size", "context_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"config field {name} must be >= 1")

    @classmethod
    def desk(cls, **overrides) -> "ModelConfig":
        """Default CPU-trainable size."""
        return cls(**overrides)

    @classmethod
    def full_scale(cls, **overrides) -> "ModelConfig":
        """The published 874M-parameter configuration."""
        base = dict(d_model=896, n_state=8, k_frames=16, n_layers=20,
                    d_ff=2688, vocab_size=6144, context_len=512)
        base.update(overrides)
        return cls(**base)


class ParamStore:
    """Ordered name -> tensor registry with one group tag per parameter."""

    def __init__(self):
        self._params: Dict[str, Tensor] = {}
        self._groups: Dict[str, str] = {}

    def register(self, name: str, tensor: Tensor, group: str) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        if group not in (PARAM_GROUP_WEIGHT, PARAM_GROUP_NEURON):
            raise ValueError(f"unknown parameter group {group!r}")
        tensor.name = name
        self._params[name] = tensor
        self._groups[name] = group
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def items(self) -> Iterator[Tuple[str, Tensor]]:
        return iter(self._params.items())

    def names(self) -> List[str]:
        return list(self._params)

    def group_of(self, name: str) -> str:
        return self._groups[name]

    def group_items(self, group: str) -> List[Tuple[str, Tensor]]:
        return [(n, t) for n, t in self._params.items()
                if self._groups[n] == group]

    def zero_grads(self) -> None:
        for t in self._params.values():
            t.grad = None

    def total_params(self) -> int:
        return sum(t.size for t in self._params.values())


def _param_group(name: str) -> str:
    if any(marker in name for marker in _NEURON_MARKERS):
        return PARAM_GROUP_NEURON
    return PARAM_GROUP_WEIGHT


@dataclass
class LayerParams:
    block_norm_gamma: Tensor
    block: blocks.SnnBlockParams
    block_ponder: ponder.PonderParams
    block_out_proj: Tensor
    ffn_norm_gamma: Tensor
    ffn: blocks.SnnFfnParams
    ffn_ponder: ponder.PonderParams
    ffn_out_proj: Tensor


@dataclass
class SublayerStats:
    """Per-sublayer diagnostics collected during one forward."""

    layer: int
    kind: str                                   # "block" | "ffn"
    weights: ponder.PonderWeights
    input_scan: neuron.ScanTrace
    core: Union[blocks.BlockTrace, blocks.FfnTrace]


@dataclass
class ForwardAux:
    sublayers: List[SublayerStats]
    decode_scan: Optional[neuron.ScanTrace] = None

    def ponder_weights(self) -> List[ponder.PonderWeights]:
        return [s.weights for s in self.sublayers]


class Model:
    """Parameters plus the forward computation; training state lives elsewhere."""

    def __init__(self, config: ModelConfig, rng: Optional[np.random.Generator] = None,
                 dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = rng if rng is not None else np.random.default_rng(config.seed)
        self.store = ParamStore()
        self._build(rng)

    # -- construction ---------------------------------------------------

    def _reg(self, name: str, tensor: Tensor) -> Tensor:
        tensor.data = tensor.data.astype(self.dtype, copy=False)
        return self.store.register(name, tensor, _param_group(name))

    def _reg_plif(self, prefix: str, params: neuron.PlifParams) -> neuron.PlifParams:
        self._reg(f"{prefix}.w", params.w)
        self._reg(f"{prefix}.v_th", params.v_th)
        return params

    def _build(self, rng: np.random.Generator) -> None:
        cfg = self.config
        D, L = cfg.d_model, cfg.n_layers
        out_proj_std = blocks.BASE_STD / np.sqrt(2 * L)

        self.embedding = self._reg(
            "embedding", Tensor(rng.normal(0.0, blocks.BASE_STD,
                                           (cfg.vocab_size, D))))
        self.layers: List[LayerParams] = []
        for i in range(L):
            blk = blocks.init_snn_block(D, cfg.n_state, rng, v_min=cfg.v_min,
                                        tau0=cfg.tau0, v0=cfg.v0)
            ffn = blocks.init_snn_ffn(D, cfg.d_ff, L, rng,
                                      tau0=cfg.tau0, v0=cfg.v0)
            layer = LayerParams(
                block_norm_gamma=Tensor(np.ones(D)),
                block=blk,
                block_ponder=ponder.init_ponder(D, rng),
                block_out_proj=Tensor(rng.normal(0.0, out_proj_std, (D, D))),
                ffn_norm_gamma=Tensor(np.ones(D)),
                ffn=ffn,
                ffn_ponder=ponder.init_ponder(D, rng),
                ffn_out_proj=Tensor(rng.normal(0.0, out_proj_std, (D, D))),
            )
            p = f"layers.{i}"
            self._reg(f"{p}.block.norm_gamma", layer.block_norm_gamma)
            self._reg_plif(f"{p}.block.plif_in", blk.plif_in)
            for wname in ("w_in", "w_beta", "w_alpha", "w_th", "w_gate",
                          "w_skip", "w_out", "b_beta", "b_alpha", "b_th"):
                self._reg(f"{p}.block.{wname}", getattr(blk, wname))
            self._reg(f"{p}.block.halt.w", layer.block_ponder.w_halt)
            self._reg(f"{p}.block.halt.b", layer.block_ponder.b_halt)
            self._reg(f"{p}.block.out_proj", layer.block_out_proj)

            self._reg(f"{p}.ffn.norm_gamma", layer.ffn_norm_gamma)
            self._reg_plif(f"{p}.ffn.plif_in", ffn.plif_in)
            for wname in ("w_gate", "w_up", "w_down", "w_skip"):
                self._reg(f"{p}.ffn.{wname}", getattr(ffn, wname))
            self._reg_plif(f"{p}.ffn.plif_gate", ffn.plif_gate)
            self._reg_plif(f"{p}.ffn.plif_up", ffn.plif_up)
            self._reg(f"{p}.ffn.halt.w", layer.ffn_ponder.w_halt)
            self._reg(f"{p}.ffn.halt.b", layer.ffn_ponder.b_halt)
            self._reg(f"{p}.ffn.out_proj", layer.ffn_out_proj)
            self.layers.append(layer)

        self.decode_norm_gamma = self._reg("decode.norm_gamma", Tensor(np.ones(D)))
        self.decode_plif = self._reg_plif(
            "decode.plif_out", blocks.init_plif_node(D, cfg.tau0, cfg.v0, rng))
        self.decode_proj = self._reg(
            "decode.proj", Tensor(rng.normal(0.0, blocks.BASE_STD, (D, D))))
        self.inhib_gamma = self._reg("decode.inhib_gamma", Tensor(np.ones(D)))

    # -- forward ----------------------------------------------------------

    def encode(self, token_ids: np.ndarray) -> Tensor:
        """(T, B) int ids -> (T*K, B, D) frame stream (K replicas per token)."""
        cfg = self.config
        ids = np.asarray(token_ids)
        if ids.ndim != 2:
            raise nc.DimensionError(f"token ids must be (T, B), got {ids.shape}")
        T, B = ids.shape
        emb = nc.reshape(nc.embedding_lookup(self.embedding, ids.reshape(-1)),
                         (T, 1, B, cfg.d_model))
        frames = nc.broadcast_to(emb, (T, cfg.k_frames, B, cfg.d_model))
        return nc.reshape(frames, (T * cfg.k_frames, B, cfg.d_model))

    def _sublayer(self, h: Tensor, norm_gamma: Tensor,
                  plif_in: neuron.PlifParams, core_fn, pond, out_proj: Tensor,
                  shape: Tuple[int, int, int], smooth: bool):
        T, K, B = shape
        D = self.config.d_model
        u = stabilizers.rmsnorm(h, norm_gamma)
        beta_in = plif_in.beta()
        v_post, in_trace = neuron.scan_fixed(
            u, beta_in, plif_in.v_th, smooth=smooth,
            sharpness=self.config.surrogate_alpha)
        leak = neuron.leakage(v_post, beta_in)
        core_out, core_trace = core_fn(leak)
        frames = nc.reshape(core_out, (T, K, B, D))
        agg, weights = ponder.ponder_aggregate(frames, pond)
        proj = nc.reshape(nc.matmul(nc.reshape(agg, (T * B, D)), out_proj),
                          (T, B, D))
        centered = stabilizers.center(proj)
        replicated = nc.reshape(
            nc.broadcast_to(nc.reshape(centered, (T, 1, B, D)), (T, K, B, D)),
            (T * K, B, D))
        return nc.add(h, replicated), weights, in_trace, core_trace

    def decoder_layer(self, h: Tensor, layer_index: int,
                      shape: Tuple[int, int, int], *, smooth: bool = False,
                      aux: Optional[ForwardAux] = None) -> Tensor:
        """One pre-norm layer: sequence-block sublayer, then feed-forward."""
        cfg = self.config
        layer = self.layers[layer_index]
        try:
            h, weights, in_trace, core_trace = self._sublayer(
                h, layer.block_norm_gamma, layer.block.plif_in,
                lambda leak: blocks.snn_block_forward(
                    leak, layer.block, v_min=cfg.v_min, smooth=smooth,
                    sharpness=cfg.surrogate_alpha),
                layer.block_ponder, layer.block_out_proj, shape, smooth)
        except nc.NumericError as e:
            raise nc.NumericError(
                f"layer {layer_index} block sublayer: {e}") from e
        if aux is not None:
            aux.sublayers.append(SublayerStats(layer_index, "block", weights,
                                               in_trace, core_trace))
        try:
            h, weights, in_trace, core_trace = self._sublayer(
                h, layer.ffn_norm_gamma, layer.ffn.plif_in,
                lambda leak: blocks.snn_ffn_forward(
                    leak, layer.ffn, smooth=smooth,
                    sharpness=cfg.surrogate_alpha),
                layer.ffn_ponder, layer.ffn_out_proj, shape, smooth)
        except nc.NumericError as e:
            raise nc.NumericError(
                f"layer {layer_index} ffn sublayer: {e}") from e
        if aux is not None:
            aux.sublayers.append(SublayerStats(layer_index, "ffn", weights,
                                               in_trace, core_trace))
        return h

    def forward(self, token_ids: np.ndarray, *, smooth: bool = False
                ) -> Tuple[Tensor, ForwardAux]:
        """ids (T, B) -> logits (T, B, vocab) plus per-sublayer diagnostics."""
        cfg = self.config
        ids = np.asarray(token_ids)
        T, B = ids.shape
        if T > cfg.context_len:
            raise ValueError(f"sequence length {T} exceeds context {cfg.context_len}")
        K = cfg.k_frames
        h = self.encode(ids)
        aux = ForwardAux(sublayers=[])
        for i in range(len(self.layers)):
            h = self.decoder_layer(h, i, (T, K, B), smooth=smooth, aux=aux)
        logits = self.decode(h, (T, K, B), smooth=smooth, aux=aux)
        return logits, aux

    def decode(self, h: Tensor, shape: Tuple[int, int, int], *,
               smooth: bool = False,
               aux: Optional[ForwardAux] = None) -> Tensor:
        """Frame stream -> logits: norm, output node leakage, uniform
        K-frame mean, projection, lateral inhibition, tied head."""
        cfg = self.config
        T, K, B = shape
        D = cfg.d_model
        u = stabilizers.rmsnorm(h, self.decode_norm_gamma)
        beta_out = self.decode_plif.beta()
        v_post, scan_trace = neuron.scan_fixed(
            u, beta_out, self.decode_plif.v_th, smooth=smooth,
            sharpness=cfg.surrogate_alpha)
        if aux is not None:
            aux.decode_scan = scan_trace
        leak = neuron.leakage(v_post, beta_out)
        pooled = nc.mean_along(nc.reshape(leak, (T, K, B, D)), axis=1)
        proj = nc.reshape(nc.matmul(nc.reshape(pooled, (T * B, D)),
                                    self.decode_proj), (T, B, D))
        normed = stabilizers.lateral_inhibition(proj, self.inhib_gamma)
        logits = nc.reshape(nc.matmul(nc.reshape(normed, (T * B, D)),
                                      nc.transpose(self.embedding)),
                            (T, B, cfg.vocab_size))
        return logits


# ---------------------------------------------------------------------------
# Parameter accounting
# ---------------------------------------------------------------------------


def count_params(config: ModelConfig) -> Dict[str, int]:
    """Closed-form parameter counts by component (no allocation)."""
    D, N, L = config.d_model, config.n_state, config.n_layers
    D_ff, V = config.d_ff, config.vocab_size
    embedding = V * D
    block_per_layer = 5 * D * D * N + 2 * D * D + 3 * D * N + 2 * D
    ffn_per_layer = 3 * D * D_ff + D * D + 2 * D + 4 * D_ff
    residual_proj = 2 * L * D * D
    other = ((2 * L + 1) * D      # pre-sublayer + decode norms
             + 2 * L * (D + 1)    # halting heads
             + 2 * D              # decode output node
             + D * D              # decode projection
             + D)                 # inhibition gain
    total = embedding + L * block_per_layer + L * ffn_per_layer \
        + residual_proj + other
    return {
        "embedding": embedding,
        "snn_block_total": L * block_per_layer,
        "snn_ffn_total": L * ffn_per_layer,
        "residual_proj_total": residual_proj,
        "other": other,
        "total": total,
    }


# ---------------------------------------------------------------------------
# Checkpoint io
# ---------------------------------------------------------------------------


def save_checkpoint(model: Model, path) -> None:
    """Binary dump: magic, version, config record, then named tensor records."""
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    config_blob = json.dumps(asdict(model.config), sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(config_blob)))
    buf.write(config_blob)
    buf.write(struct.pack("<I", len(model.store)))
    for name, tensor in model.store.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", tensor.ndim))
        for extent in tensor.shape:
            buf.write(struct.pack("<I", extent))
        buf.write(np.ascontiguousarray(tensor.data, dtype="<f4").tobytes())
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def _read_exact(f, n: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return data


def load_checkpoint(path) -> Model:
    """Parse and validate fully, then materialize; never returns partial state."""
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, "magic")
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"bad magic {magic!r}")
        version = struct.unpack("<I", _read_exact(f, 4, "version"))[0]
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        config_len = struct.unpack("<I", _read_exact(f, 4, "config length"))[0]
        config_blob = _read_exact(f, config_len, "config record")
        try:
            config_dict = json.loads(config_blob.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointError(f"corrupt config record: {e}") from e
        known = {f.name for f in fields(ModelConfig)}
        unknown = sorted(set(config_dict) - known)
        if unknown:
            raise CheckpointError(
                f"incompatible config: unknown field {unknown[0]!r}")
        config = ModelConfig(**config_dict)

        n_tensors = struct.unpack("<I", _read_exact(f, 4, "tensor count"))[0]
        records: Dict[str, np.ndarray] = {}
        for _ in range(n_tensors):
            name_len = struct.unpack("<I", _read_exact(f, 4, "name length"))[0]
            name = _read_exact(f, name_len, "tensor name").decode("utf-8")
            rank = struct.unpack("<I", _read_exact(f, 4, f"{name} rank"))[0]
            shape = tuple(
                struct.unpack("<I", _read_exact(f, 4, f"{name} extent"))[0]
                for _ in range(rank))
            count = int(np.prod(shape)) if shape else 1
            raw = _read_exact(f, 4 * count, f"{name} data")
            records[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()

    model = Model(config)
    for name, data in records.items():
        if name not in model.store:
            raise CheckpointError(f"unknown tensor name {name!r}")
        tensor = model.store[name]
        if tensor.shape != data.shape:
            raise CheckpointError(
                f"shape mismatch for {name!r}: file {data.shape}, "
                f"model {tensor.shape}")
    missing = sorted(set(model.store.names()) - set(records))
    if missing:
        raise CheckpointError(f"checkpoint missing tensor {missing[0]!r}")
    for name, data in records.items():
        model.store[name].data = data.astype(model.dtype, copy=False)
    # Keep dataclass fields aliased to the registered tensors.
    return model
