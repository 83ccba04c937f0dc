"""Pipeline-level behavior: encode, layers, decode, counting, checkpoints."""

import numpy as np
import pytest

from snnlm import blocks
from snnlm import model as M
from snnlm import numcore as nc
from snnlm import ponder, reference
from snnlm.numcore import Tensor, oracle

from conftest import rel_err

MICRO = dict(d_model=8, n_state=2, k_frames=2, n_layers=2, d_ff=12,
             vocab_size=17, context_len=16, seed=3)


@pytest.fixture
def micro_model():
    return M.Model(M.ModelConfig(**MICRO))


class TestEncode:
    def test_repeat_frames(self, micro_model):
        ids = np.array([[5]])
        out = micro_model.encode(ids)
        row = micro_model.embedding.data[5]
        assert out.shape == (2, 1, 8)
        np.testing.assert_array_equal(out.data[0, 0], row)
        np.testing.assert_array_equal(out.data[1, 0], row)

    def test_token_order_is_frame_major(self, micro_model):
        ids = np.array([[1], [2]])
        out = micro_model.encode(ids)
        e = micro_model.embedding.data
        np.testing.assert_array_equal(out.data[:2, 0], np.stack([e[1], e[1]]))
        np.testing.assert_array_equal(out.data[2:, 0], np.stack([e[2], e[2]]))

    def test_gradient_sums_over_replicas_and_occurrences(self, micro_model):
        ids = np.array([[4], [4]])  # same token twice
        with nc.Tape() as tape:
            out = micro_model.encode(ids)
            w = np.ones(out.shape, dtype=np.float32)
            tape.backward(nc.sum_all(nc.mul(out, w)))
        g = micro_model.embedding.grad
        # 2 occurrences x K=2 replicas, unit upstream grads
        np.testing.assert_allclose(g[4], np.full(8, 4.0), atol=1e-6)
        assert np.abs(g[np.arange(17) != 4]).max() == 0

    def test_out_of_range_id(self, micro_model):
        with pytest.raises(nc.DomainError):
            micro_model.encode(np.array([[17]]))


class TestDecoderLayer:
    def test_zeroed_out_proj_is_identity(self):
        m = M.Model(M.ModelConfig(**MICRO))
        for i in range(m.config.n_layers):
            m.store[f"layers.{i}.block.out_proj"].data *= 0.0
            m.store[f"layers.{i}.ffn.out_proj"].data *= 0.0
        ids = np.array([[1, 2], [3, 4], [5, 6]])
        h_in = m.encode(ids)
        # replicate the forward pass up to decode by zero-proj layers
        logits, aux = m.forward(ids)
        # residual stream unchanged implies decode sees the raw encoding;
        # compare against a 0-layer model with identical decode params
        cfg0 = dict(MICRO)
        cfg0["n_layers"] = 1
        m0 = M.Model(M.ModelConfig(**cfg0))
        for name in ("embedding", "decode.norm_gamma", "decode.plif_out.w",
                     "decode.plif_out.v_th", "decode.proj",
                     "decode.inhib_gamma"):
            m0.store[name].data = m.store[name].data.copy()
        for i in range(1):
            m0.store[f"layers.{i}.block.out_proj"].data *= 0.0
            m0.store[f"layers.{i}.ffn.out_proj"].data *= 0.0
        logits0, _ = m0.forward(ids)
        np.testing.assert_allclose(logits.data, logits0.data, atol=1e-5)

    def test_decoder_layer_public_op(self, micro_model, rng):
        ids = rng.integers(0, 17, (3, 2))
        h = micro_model.encode(ids)
        out = micro_model.decoder_layer(h, 0, (3, 2, 2))
        assert out.shape == h.shape
        # zeroed output projections make the layer an identity
        micro_model.store["layers.1.block.out_proj"].data *= 0.0
        micro_model.store["layers.1.ffn.out_proj"].data *= 0.0
        unchanged = micro_model.decoder_layer(out, 1, (3, 2, 2))
        np.testing.assert_array_equal(unchanged.data, out.data)

    def test_sublayer_contribution_is_centered(self, micro_model):
        ids = np.array([[1, 2], [3, 4]])
        h0 = micro_model.encode(ids).data
        logits, aux = micro_model.forward(ids)
        # re-run manually: after one block sublayer the added contribution
        # must have zero channel mean per frame
        layer = micro_model.layers[0]
        h = micro_model.encode(ids)
        h1, _, _, _ = micro_model._sublayer(
            h, layer.block_norm_gamma, layer.block.plif_in,
            lambda leak: blocks.snn_block_forward(
                leak, layer.block, v_min=micro_model.config.v_min),
            layer.block_ponder, layer.block_out_proj, (2, 2, 2), False)
        delta = h1.data - h0
        means = delta.mean(axis=-1, dtype=np.float64)
        assert np.abs(means).max() < 1e-6


class TestDecode:
    def test_zero_stream_gives_zero_logits(self, micro_model):
        cfg = micro_model.config
        h = Tensor(np.zeros((2 * cfg.k_frames, 1, cfg.d_model),
                            dtype=np.float32))
        aux = M.ForwardAux(sublayers=[])
        logits = micro_model.decode(h, (2, cfg.k_frames, 1), aux=aux)
        np.testing.assert_array_equal(logits.data, 0.0)

    def test_k_one_mean_is_identity(self):
        cfg = dict(MICRO)
        cfg["k_frames"] = 1
        m = M.Model(M.ModelConfig(**cfg))
        ids = np.array([[1, 2], [3, 4]])
        logits, _ = m.forward(ids)
        assert logits.shape == (2, 2, 17)

    def test_batch_rows_independent(self, micro_model, rng):
        ids = rng.integers(0, 17, (4, 3))
        joint, _ = micro_model.forward(ids)
        for b in range(3):
            solo, _ = micro_model.forward(ids[:, b:b + 1])
            np.testing.assert_allclose(joint.data[:, b], solo.data[:, 0],
                                       atol=1e-6)


class TestCausality:
    def test_future_perturbation_leaves_past_logits(self, rng):
        m = M.Model(M.ModelConfig(**MICRO))
        T, B = 6, 2
        ids = rng.integers(0, 17, (T, B))
        logits_a, _ = m.forward(ids)
        ids_b = ids.copy()
        ids_b[4, :] = (ids_b[4, :] + 3) % 17
        logits_b, _ = m.forward(ids_b)
        assert np.abs(logits_a.data[:4] - logits_b.data[:4]).max() <= 1e-6
        # the perturbed position itself must be visible downstream
        assert np.abs(logits_a.data[4:] - logits_b.data[4:]).max() > 0


class TestWeightTying:
    def test_head_shares_embedding_storage(self, micro_model):
        ids = np.array([[1]])
        logits_before, _ = micro_model.forward(ids)
        micro_model.embedding.data[3] += 10.0  # mutate shared storage
        logits_after, _ = micro_model.forward(ids)
        assert not np.allclose(logits_before.data[..., 3],
                               logits_after.data[..., 3])

    def test_embedding_gets_encode_and_head_gradients(self, micro_model):
        ids = np.array([[2]])
        with nc.Tape() as tape:
            logits, _ = micro_model.forward(ids)
            loss = nc.cross_entropy_logits(
                nc.reshape(logits, (1, 17)), np.array([9]))
            tape.backward(loss)
        g = micro_model.embedding.grad
        assert np.abs(g[2]).max() > 0     # encode path
        assert np.abs(g[9]).max() > 0     # head path (target column)
        assert np.abs(g[11]).max() > 0    # head path (softmax pull-down)


class TestCountParams:
    def test_full_scale_golden(self):
        counts = M.count_params(M.ModelConfig.full_scale())
        targets = {"embedding": 5.5e6, "snn_block_total": 674.8e6,
                   "snn_ffn_total": 160.8e6, "residual_proj_total": 32.1e6,
                   "total": 874.1e6}
        for key, ref in targets.items():
            assert abs(counts[key] - ref) / ref < 0.005

    def test_unit_config_hand_count(self):
        cfg = M.ModelConfig(d_model=1, n_state=1, k_frames=1, n_layers=1,
                            d_ff=1, vocab_size=1, context_len=1)
        counts = M.count_params(cfg)
        assert counts["embedding"] == 1
        assert counts["snn_block_total"] == 12   # 5+2+3+2
        assert counts["snn_ffn_total"] == 10     # 3+1+2+4
        assert counts["residual_proj_total"] == 2
        assert counts["other"] == 11             # 3 norms + 4 halt + 2 + 1 + 1
        assert counts["total"] == 36

    def test_block_per_layer_closed_form(self):
        cfg = M.ModelConfig.full_scale()
        counts = M.count_params(cfg)
        D, N = cfg.d_model, cfg.n_state
        per_layer = 5 * D * D * N + 2 * D * D + 3 * D * N + 2 * D
        assert counts["snn_block_total"] == cfg.n_layers * per_layer
        assert abs(per_layer - 33.7e6) / 33.7e6 < 0.005

    def test_matches_allocation(self, micro_model):
        counts = M.count_params(micro_model.config)
        assert counts["total"] == micro_model.store.total_params()


class TestFullModelGradients:
    def test_micro_config_matches_oracle(self, rng):
        cfg = M.ModelConfig(d_model=8, n_state=2, k_frames=2, n_layers=2,
                            d_ff=12, vocab_size=13, context_len=8, seed=5)
        m = M.Model(cfg, dtype=np.float64)
        ids = rng.integers(0, 13, (3, 2))
        targets = rng.integers(0, 13, (3, 2))
        with nc.Tape() as tape:
            logits, aux = m.forward(ids)
            ce = nc.cross_entropy_logits(nc.reshape(logits, (6, 13)),
                                         targets.reshape(-1))
            cost = ponder.ponder_cost(aux.ponder_weights(), cfg.lambda_ponder)
            loss = nc.add(ce, cost)
            tape.backward(loss)
        params = {name: t.data for name, t in m.store.items()}
        expected = oracle.oracle_grad(
            lambda p: reference.ref_model_loss(p, ids, targets, cfg), params)
        worst = 0.0
        for name, t in m.store.items():
            worst = max(worst, rel_err(t.grad, expected[name]))
        assert worst < 1e-5


class TestParamStore:
    def test_every_param_has_one_group(self, micro_model):
        for name in micro_model.store.names():
            assert micro_model.store.group_of(name) in ("weight", "neuron")

    def test_neuron_group_membership(self, micro_model):
        store = micro_model.store
        assert store.group_of("layers.0.block.plif_in.w") == "neuron"
        assert store.group_of("layers.0.block.b_beta") == "neuron"
        assert store.group_of("layers.0.ffn.halt.b") == "neuron"
        assert store.group_of("decode.plif_out.v_th") == "neuron"
        assert store.group_of("embedding") == "weight"
        assert store.group_of("layers.0.block.w_in") == "weight"
        assert store.group_of("layers.0.block.out_proj") == "weight"

    def test_duplicate_name_rejected(self, micro_model):
        with pytest.raises(ValueError):
            micro_model.store.register("embedding", Tensor(np.zeros(1)),
                                       "weight")


class TestCheckpoint:
    def test_round_trip_bit_exact(self, micro_model, tmp_path):
        path = tmp_path / "m.ckpt"
        M.save_checkpoint(micro_model, path)
        loaded = M.load_checkpoint(path)
        assert loaded.config == micro_model.config
        for name, t in micro_model.store.items():
            assert np.array_equal(loaded.store[name].data, t.data), name

    def test_loaded_model_runs_identically(self, micro_model, tmp_path):
        path = tmp_path / "m.ckpt"
        M.save_checkpoint(micro_model, path)
        loaded = M.load_checkpoint(path)
        ids = np.array([[1, 2], [3, 4]])
        a, _ = micro_model.forward(ids)
        b, _ = loaded.forward(ids)
        assert np.array_equal(a.data, b.data)

    def test_bad_magic(self, micro_model, tmp_path):
        path = tmp_path / "m.ckpt"
        M.save_checkpoint(micro_model, path)
        raw = bytearray(path.read_bytes())
        raw[:4] = b"XXXX"
        path.write_bytes(bytes(raw))
        with pytest.raises(M.CheckpointError, match="magic"):
            M.load_checkpoint(path)

    def test_truncation_no_partial_state(self, micro_model, tmp_path):
        path = tmp_path / "m.ckpt"
        M.save_checkpoint(micro_model, path)
        raw = path.read_bytes()
        path.write_bytes(raw[:len(raw) - 37])
        with pytest.raises(M.CheckpointError, match="truncated"):
            M.load_checkpoint(path)

    def test_version_mismatch(self, micro_model, tmp_path):
        path = tmp_path / "m.ckpt"
        M.save_checkpoint(micro_model, path)
        raw = bytearray(path.read_bytes())
        raw[4:8] = (99).to_bytes(4, "little")
        path.write_bytes(bytes(raw))
        with pytest.raises(M.CheckpointError, match="version"):
            M.load_checkpoint(path)

    def test_unknown_config_field(self, micro_model, tmp_path):
        import json
        import struct
        path = tmp_path / "m.ckpt"
        M.save_checkpoint(micro_model, path)
        raw = path.read_bytes()
        config_len = struct.unpack("<I", raw[8:12])[0]
        blob = json.loads(raw[12:12 + config_len])
        blob["mystery_knob"] = 7
        new_blob = json.dumps(blob, sort_keys=True).encode()
        patched = raw[:8] + struct.pack("<I", len(new_blob)) + new_blob \
            + raw[12 + config_len:]
        path.write_bytes(patched)
        with pytest.raises(M.CheckpointError, match="mystery_knob"):
            M.load_checkpoint(path)

    def test_unknown_tensor_name(self, micro_model, tmp_path):
        import struct
        path = tmp_path / "m.ckpt"
        M.save_checkpoint(micro_model, path)
        raw = bytearray(path.read_bytes())
        # rename the first tensor record ("embedding" -> "embeddinX")
        idx = raw.find(b"embedding")
        raw[idx:idx + 9] = b"embeddinX"
        path.write_bytes(bytes(raw))
        with pytest.raises(M.CheckpointError, match="embeddinX"):
            M.load_checkpoint(path)


class TestConfig:
    def test_invalid_extent(self):
        with pytest.raises(ValueError):
            M.ModelConfig(d_model=0)

    def test_full_scale_values(self):
        cfg = M.ModelConfig.full_scale()
        assert (cfg.d_model, cfg.n_state, cfg.k_frames, cfg.n_layers,
                cfg.d_ff, cfg.vocab_size, cfg.context_len) == \
            (896, 8, 16, 20, 2688, 6144, 512)

    def test_context_limit_enforced(self, micro_model):
        ids = np.zeros((17, 1), dtype=np.int64)
        with pytest.raises(ValueError):
            micro_model.forward(ids)
