import numpy as np
import pytest

from stpp import autodiff as ad
from stpp.neural import (
    NetConfig,
    attention,
    causal_mask,
    decoder_forward,
    embed_events,
    encoder_forward,
    init_params,
    network_forward,
    positional_encoding,
)
from stpp.rng import make_rng

from oracles import attention_double_loop

TINY = NetConfig(
    d_space=2, n_in=7, l_out=3, d_model=8, n_layers=2, n_heads=2,
    dropout=0.0, ffn_mult=2, flow_layers=2, flow_hidden=4, mvn_hidden=4,
)


def _events(rng, b, length, d):
    return rng.normal(size=(b, length, d + 2))


class TestAttention:
    def test_single_key_returns_value_row(self):
        rng = make_rng(0)
        q = ad.constant(rng.normal(size=(1, 4, 5)))
        k = ad.constant(rng.normal(size=(1, 1, 5)))
        v = ad.constant(rng.normal(size=(1, 1, 6)))
        out = attention(q, k, v)
        assert np.allclose(out.value, np.broadcast_to(v.value, (1, 4, 6)))

    def test_saturating_key_dominates(self):
        q = ad.constant(np.array([[[1.0, 0.0]]]))
        k = ad.constant(np.array([[[100.0, 0.0], [0.0, 100.0], [0.0, -100.0]]]))
        v = ad.constant(np.array([[[1.0], [2.0], [3.0]]]))
        out = attention(q, k, v)
        assert abs(float(out.value[0, 0, 0]) - 1.0) < 1e-10

    def test_matches_double_loop_oracle(self):
        rng = make_rng(1)
        q = rng.normal(size=(5, 4))
        k = rng.normal(size=(6, 4))
        v = rng.normal(size=(6, 3))
        got = attention(ad.constant(q[None]), ad.constant(k[None]), ad.constant(v[None])).value[0]
        want = attention_double_loop(q, k, v)
        assert np.abs(got - want).max() < 1e-12

    def test_masked_matches_double_loop_oracle(self):
        rng = make_rng(2)
        q = rng.normal(size=(4, 4))
        k = rng.normal(size=(4, 4))
        v = rng.normal(size=(4, 3))
        mask = causal_mask(4)
        got = attention(
            ad.constant(q[None]), ad.constant(k[None]), ad.constant(v[None]), mask
        ).value[0]
        want = attention_double_loop(q, k, v, mask)
        assert np.abs(got - want).max() < 1e-12

    def test_all_masked_row_rejected(self):
        rng = make_rng(3)
        q = ad.constant(rng.normal(size=(1, 2, 4)))
        k = ad.constant(rng.normal(size=(1, 2, 4)))
        v = ad.constant(rng.normal(size=(1, 2, 4)))
        mask = np.array([[True, True], [False, False]])
        with pytest.raises(ValueError, match="mask"):
            attention(q, k, v, mask)

    def test_attention_block_grad_check(self):
        rng = make_rng(4)
        store = ad.ParamStore()
        for name in ("wq", "wk", "wv"):
            store.add(f"{name}", rng.normal(size=(4, 4)) * 0.5)
        x = rng.normal(size=(1, 3, 4))

        def f(lv):
            q = ad.matmul(ad.constant(x), lv["wq"])
            k = ad.matmul(ad.constant(x), lv["wk"])
            v = ad.matmul(ad.constant(x), lv["wv"])
            out = attention(q, k, v, causal_mask(3))
            return ad.sum_(ad.mul(out, out))

        report = ad.grad_check(f, store, h=1e-5)
        assert max(report.values()) < 1e-4, report


class TestEmbedding:
    def test_zero_input_positions_differ(self):
        store = init_params(TINY, seed=0)
        leaves = store.leaves()
        zeros = ad.constant(np.zeros((1, 4, TINY.d_in)))
        out = embed_events(leaves, "time.enc", zeros, TINY, train=False, rng=None).value
        assert not np.allclose(out[0, 0], out[0, 1])

    def test_identical_sequences_identical_rows(self):
        store = init_params(TINY, seed=0)
        leaves = store.leaves()
        rng = make_rng(5)
        seq = rng.normal(size=(1, 5, TINY.d_in))
        batch = ad.constant(np.concatenate([seq, seq], axis=0))
        out = embed_events(leaves, "space.enc", batch, TINY, train=False, rng=None).value
        assert np.array_equal(out[0], out[1])

    def test_paper_scale_shapes(self):
        cfg = NetConfig(d_space=3, n_in=497, l_out=3, d_model=64, n_layers=1, n_heads=6, dropout=0.0)
        store = init_params(cfg, seed=0)
        leaves = store.leaves()
        x = ad.constant(make_rng(6).normal(size=(2, 497, 5)))
        out = embed_events(leaves, "time.enc", x, cfg, train=False, rng=None)
        assert out.shape == (2, 497, 64)

    def test_positional_encoding_values(self):
        pe = positional_encoding(4, 6)
        assert pe.shape == (4, 6)
        assert np.allclose(pe[0], [0, 1, 0, 1, 0, 1])
        assert np.isclose(pe[1, 0], np.sin(1.0))


class TestEncoder:
    def test_causality_bitwise(self):
        store = init_params(TINY, seed=1)
        leaves = store.leaves()
        rng = make_rng(7)
        base = _events(rng, 1, TINY.n_in, TINY.d_space)
        perturbed = base.copy()
        perturbed[0, 5] += 10.0  # future event for positions < 5
        outs = []
        for arr in (base, perturbed):
            emb = embed_events(leaves, "time.enc", ad.constant(arr), TINY, False, None)
            outs.append(encoder_forward(leaves, "time", emb, TINY).value)
        assert np.array_equal(outs[0][0, :5], outs[1][0, :5])
        assert not np.array_equal(outs[0][0, 5:], outs[1][0, 5:])

    def test_causality_by_gradient(self):
        store = init_params(TINY, seed=1)
        rng = make_rng(8)
        arr = _events(rng, 1, TINY.n_in, TINY.d_space)
        leaves = store.leaves()
        x = ad.Tensor(arr, requires_grad=True)
        emb = embed_events(leaves, "time.enc", x, TINY, False, None)
        h = encoder_forward(leaves, "time", emb, TINY)
        # loss touches only position 2; later events must get zero gradient
        ad.backprop(ad.sum_(ad.mul(h[:, 2], h[:, 2])))
        assert np.all(x.grad[0, 3:] == 0.0)
        assert np.any(x.grad[0, :3] != 0.0)

    def test_output_shapes_both_streams(self):
        store = init_params(TINY, seed=2)
        leaves = store.leaves()
        arr = _events(make_rng(9), 2, TINY.n_in, TINY.d_space)
        for stream in ("time", "space"):
            emb = embed_events(leaves, f"{stream}.enc", ad.constant(arr), TINY, False, None)
            h = encoder_forward(leaves, stream, emb, TINY)
            assert h.shape == (2, TINY.n_in, TINY.d_model)

    def test_dropout_train_vs_eval(self):
        cfg = NetConfig(
            d_space=2, n_in=6, l_out=2, d_model=8, n_layers=1, n_heads=2,
            dropout=0.3, ffn_mult=2,
        )
        store = init_params(cfg, seed=3)
        leaves = store.leaves()
        arr = _events(make_rng(10), 1, 6, 2)
        emb_args = (leaves, "time.enc", ad.constant(arr), cfg)
        train_out = encoder_forward(
            leaves, "time", embed_events(*emb_args, train=True, rng=make_rng(0)), cfg,
            train=True, rng=make_rng(1),
        ).value
        eval1 = encoder_forward(leaves, "time", embed_events(*emb_args, train=False, rng=None), cfg).value
        eval2 = encoder_forward(leaves, "time", embed_events(*emb_args, train=False, rng=None), cfg).value
        assert not np.array_equal(train_out, eval1)
        assert np.array_equal(eval1, eval2)


class TestDecoder:
    def _forward(self, cfg, seed, enc_arr, dec_arr, ablation="none"):
        store = init_params(cfg, seed=seed)
        leaves = store.leaves()
        return network_forward(leaves, cfg, enc_arr, dec_arr, ablation=ablation)

    def test_zero_decoder_input_gives_position_distinct_outputs(self):
        rng = make_rng(11)
        enc = _events(rng, 1, TINY.n_in, TINY.d_space)
        dec = np.zeros((1, TINY.l_out, TINY.d_in))
        h_t, h_x = self._forward(TINY, 4, enc, dec)
        assert not np.allclose(h_t.value[0, 0], h_t.value[0, 1])
        assert np.all(h_t.value != 0.0)

    def test_zero_encoder_ablation_ignores_history(self):
        rng = make_rng(12)
        enc_a = _events(rng, 1, TINY.n_in, TINY.d_space)
        enc_b = _events(rng, 1, TINY.n_in, TINY.d_space)
        dec = np.zeros((1, TINY.l_out, TINY.d_in))
        store = init_params(TINY, seed=5)
        leaves = store.leaves()
        out_a = network_forward(leaves, TINY, enc_a, dec, ablation="zero_encoder")
        out_b = network_forward(leaves, TINY, enc_b, dec, ablation="zero_encoder")
        assert np.array_equal(out_a[0].value, out_b[0].value)
        assert np.array_equal(out_a[1].value, out_b[1].value)

    def test_earthquake_shapes(self):
        cfg = NetConfig(d_space=3, n_in=9, l_out=3, d_model=12, n_heads=2, n_layers=2, dropout=0.0)
        rng = make_rng(13)
        enc = _events(rng, 2, 9, 3)
        dec = _events(rng, 2, 3, 3)
        h_t, h_x = self._forward(cfg, 6, enc, dec)
        assert h_t.shape == (2, 3, 1)
        assert h_x.shape == (2, 3, 3)

    def test_cross_attention_sees_every_encoder_slot(self):
        rng = make_rng(14)
        enc = _events(rng, 1, TINY.n_in, TINY.d_space)
        dec = np.zeros((1, TINY.l_out, TINY.d_in))
        store = init_params(TINY, seed=7)
        leaves = store.leaves()
        base_t, base_x = network_forward(leaves, TINY, enc, dec)
        for pos in range(TINY.n_in):
            bumped = enc.copy()
            bumped[0, pos] += 3.0
            h_t, h_x = network_forward(leaves, TINY, bumped, dec)
            assert np.all(h_t.value != base_t.value), f"slot unaffected by encoder pos {pos}"
            assert np.all(h_x.value != base_x.value)

    def test_decoder_self_attention_is_causal(self):
        rng = make_rng(15)
        enc = _events(rng, 1, TINY.n_in, TINY.d_space)
        dec = _events(rng, 1, TINY.l_out, TINY.d_space)
        store = init_params(TINY, seed=8)
        leaves = store.leaves()
        base_t, _ = network_forward(leaves, TINY, enc, dec)
        bumped = dec.copy()
        bumped[0, -1] += 5.0  # last slot: earlier slots must not move
        h_t, _ = network_forward(leaves, TINY, enc, bumped)
        assert np.array_equal(base_t.value[0, :-1], h_t.value[0, :-1])
        assert not np.array_equal(base_t.value[0, -1], h_t.value[0, -1])

    def test_forward_deterministic(self):
        rng = make_rng(16)
        enc = _events(rng, 1, TINY.n_in, TINY.d_space)
        dec = _events(rng, 1, TINY.l_out, TINY.d_space)
        store = init_params(TINY, seed=9)
        a = network_forward(store.leaves(), TINY, enc, dec)
        b = network_forward(store.leaves(), TINY, enc, dec)
        assert np.array_equal(a[0].value, b[0].value)


class TestInit:
    def test_same_seed_same_params(self):
        a, b = init_params(TINY, seed=42), init_params(TINY, seed=42)
        assert a.names() == b.names()
        for p in a:
            assert np.array_equal(p.value, b[p.name].value)

    def test_different_seeds_differ(self):
        a, b = init_params(TINY, seed=1), init_params(TINY, seed=2)
        assert any(not np.array_equal(p.value, b[p.name].value) for p in a if p.value.size > 2)

    def test_config_validation(self):
        with pytest.raises(ValueError, match="smaller"):
            NetConfig(d_space=2, d_model=2, n_heads=3)
        with pytest.raises(ValueError, match="time_flow"):
            NetConfig(d_space=2, time_flow="spline")

    def test_rectangular_heads_supported(self):
        # Table-3 style pairing: 64-dim model with 6 heads (d_k = 10)
        cfg = NetConfig(d_space=2, n_in=5, l_out=2, d_model=64, n_heads=6, n_layers=1, dropout=0.0)
        store = init_params(cfg, seed=0)
        rng = make_rng(20)
        h_t, h_x = network_forward(
            store.leaves(), cfg, rng.normal(size=(1, 5, 4)), rng.normal(size=(1, 2, 4))
        )
        assert h_t.shape == (1, 2, 1) and h_x.shape == (1, 2, 2)
