"""Encoder oracles: gate equivalence, manual forward, FD checks, heads."""

import numpy as np
import pytest

from gotalign import model
from gotalign import numerics as nm
from gotalign.numerics import (
    DimensionError,
    PreconditionError,
    Tape,
    fd_gradient,
    rel_error,
)

RNG = np.random.default_rng(41)

CFG = model.ModelConfig(
    d_model=8, n_layers=2, n_fused=1, n_heads=2, vocab_size=24,
    max_text_len=6, n_patches=4, patch_dim=5, proj_dims=(8, 8, 6),
)


def sample_inputs(cfg=CFG, n_tokens=4, rng=RNG):
    patches = rng.standard_normal((cfg.n_patches, cfg.patch_dim))
    ids = rng.integers(1, cfg.vocab_size, size=n_tokens)
    return patches, np.arange(cfg.n_patches), ids


class TestGateClosedEquivalence:
    def test_fresh_params_dual_equals_fusion(self):
        params = model.init_params(CFG, seed=3)
        for trial in range(20):
            rng = np.random.default_rng(trial)
            patches, pidx, ids = sample_inputs(rng=rng)
            tape = Tape()
            pvars = model.wrap_params(tape, params)
            dual = model.forward_dual(tape, pvars, patches, pidx, ids, CFG)
            fused = model.forward_fusion(tape, pvars, patches, pidx, ids, CFG)
            assert np.abs(dual.local_image.value - fused.local_image.value).max() <= 1e-12
            assert np.abs(dual.local_text.value - fused.local_text.value).max() <= 1e-12

    def test_garbage_counter_stream_irrelevant_at_alpha_zero(self):
        params = model.init_params(CFG, seed=3)
        patches, pidx, ids = sample_inputs()
        tape = Tape()
        pvars = model.wrap_params(tape, params)
        out1 = model.forward_fusion(tape, pvars, patches, pidx, ids, CFG)
        wild = patches + 1e6 * RNG.standard_normal(patches.shape)
        out2 = model.forward_fusion(tape, pvars, wild, pidx, ids, CFG)
        # Text stream sees a garbage image only through the zero gate.
        np.testing.assert_array_equal(out1.local_text.value, out2.local_text.value)

    def test_no_fused_layers_matches_dual_for_any_alpha(self):
        cfg = model.ModelConfig(
            d_model=8, n_layers=2, n_fused=0, n_heads=2, vocab_size=24,
            max_text_len=6, n_patches=4, patch_dim=5, proj_dims=(8, 8, 6),
        )
        params = model.init_params(cfg, seed=5)
        patches, pidx, ids = sample_inputs(cfg)
        tape = Tape()
        pvars = model.wrap_params(tape, params)
        dual = model.forward_dual(tape, pvars, patches, pidx, ids, cfg)
        fused = model.forward_fusion(tape, pvars, patches, pidx, ids, cfg)
        np.testing.assert_array_equal(dual.local_image.value, fused.local_image.value)
        np.testing.assert_array_equal(dual.local_text.value, fused.local_text.value)

    def test_dropout_masks_shared_across_modes(self):
        params = model.init_params(CFG, seed=3)
        patches, pidx, ids = sample_inputs()
        tape = Tape()
        pvars = model.wrap_params(tape, params)
        dual = model.forward_dual(tape, pvars, patches, pidx, ids, CFG,
                                  train=True, drop_seed=9)
        fused = model.forward_fusion(tape, pvars, patches, pidx, ids, CFG,
                                     train=True, drop_seed=9)
        assert np.abs(dual.local_image.value - fused.local_image.value).max() <= 1e-12


class TestFusedBlockManual:
    def make_block_weights(self, tape, d, rng):
        names = {}
        for prefix in ("self", "cross"):
            for kind in ("wq", "wk", "wv", "wo"):
                names[f"{prefix}.h0.{kind}"] = tape.var(rng.standard_normal((d, d)) * 0.3)
        names["ffn.w1"] = tape.var(rng.standard_normal((d, 2 * d)) * 0.3)
        names["ffn.b1"] = tape.var(rng.standard_normal((1, 2 * d)) * 0.1)
        names["ffn.w2"] = tape.var(rng.standard_normal((2 * d, d)) * 0.3)
        names["ffn.b2"] = tape.var(rng.standard_normal((1, d)) * 0.1)
        return names

    @staticmethod
    def manual_attention(x, y, w, prefix):
        q = x @ w[f"{prefix}.h0.wq"]
        k = y @ w[f"{prefix}.h0.wk"]
        v = y @ w[f"{prefix}.h0.wv"]
        scores = q @ k.T / np.sqrt(q.shape[1])
        e = np.exp(scores - scores.max(axis=1, keepdims=True))
        att = e / e.sum(axis=1, keepdims=True)
        return att @ v @ w[f"{prefix}.h0.wo"]

    def test_alpha_one_matches_hand_computation(self):
        d = 4
        rng = np.random.default_rng(17)
        x = rng.standard_normal((2, d))
        tape = Tape()
        weights = self.make_block_weights(tape, d, rng)
        alpha = tape.var(np.array([[1.0]]))
        out = model.fused_block(tape.var(x), tape.var(x), weights, alpha, n_heads=1)

        w = {k: v.value for k, v in weights.items()}
        xhat = self.manual_attention(x, x, w, "self")
        mid = x + xhat + 1.0 * self.manual_attention(xhat, x, w, "cross")
        expected = mid + np.maximum(mid @ w["ffn.w1"] + w["ffn.b1"], 0.0) @ w["ffn.w2"] + w["ffn.b2"]
        np.testing.assert_allclose(out.value, expected, atol=1e-12)

    def test_width_mismatch(self):
        tape = Tape()
        rng = np.random.default_rng(2)
        weights = self.make_block_weights(tape, 4, rng)
        with pytest.raises(DimensionError):
            model.fused_block(
                tape.var(np.ones((2, 4))), tape.var(np.ones((2, 3))),
                weights, tape.var([[0.5]]), n_heads=1,
            )

    def test_fd_through_block(self):
        d = 4
        rng = np.random.default_rng(29)
        x = rng.standard_normal((3, d))
        y = rng.standard_normal((2, d))

        def build(tape, arrays):
            it = iter(arrays)
            weights = {}
            for prefix in ("self", "cross"):
                for kind in ("wq", "wk", "wv", "wo"):
                    weights[f"{prefix}.h0.{kind}"] = tape.var(next(it))
            weights["ffn.w1"] = tape.var(next(it))
            weights["ffn.b1"] = tape.var(next(it))
            weights["ffn.w2"] = tape.var(next(it))
            weights["ffn.b2"] = tape.var(next(it))
            alpha = tape.var(next(it))
            out = model.fused_block(tape.var(x), tape.var(y), weights, alpha, 1)
            return nm.reduce_sum(nm.mul(out, out), "all"), weights, alpha

        arrays = [rng.standard_normal((d, d)) * 0.4 for _ in range(8)]
        arrays += [
            rng.standard_normal((d, 2 * d)) * 0.4,
            rng.standard_normal((1, 2 * d)) * 0.1,
            rng.standard_normal((2 * d, d)) * 0.4,
            rng.standard_normal((1, d)) * 0.1,
            np.array([[0.3]]),
        ]
        tape = Tape()
        out, weights, alpha = build(tape, arrays)
        tape.backward(out)
        analytic = [v.grad for v in weights.values()] + [alpha.grad]

        def f(arrs):
            t2 = Tape()
            val, _, _ = build(t2, arrs)
            return val.item()

        numeric = fd_gradient(f, arrays)
        for ga, gn in zip(analytic, numeric):
            assert rel_error(ga, gn) < 1e-4


class TestForwardContracts:
    def test_globals_are_average_pool_of_locals(self):
        params = model.init_params(CFG, seed=1)
        patches, pidx, ids = sample_inputs()
        tape = Tape()
        pvars = model.wrap_params(tape, params)
        out = model.forward_dual(tape, pvars, patches, pidx, ids, CFG)
        np.testing.assert_allclose(
            out.global_image.value, out.local_image.value.mean(axis=0, keepdims=True),
            atol=1e-12,
        )
        np.testing.assert_allclose(
            out.global_text.value, out.local_text.value.mean(axis=0, keepdims=True),
            atol=1e-12,
        )

    def test_zero_block_weights_pass_embeddings_through(self):
        params = model.init_params(CFG, seed=1)
        for name in params.names():
            if ".l" in name:
                params.values[name] = np.zeros_like(params.values[name])
        patches, pidx, ids = sample_inputs(n_tokens=1)
        patches = patches[:1]
        tape = Tape()
        pvars = model.wrap_params(tape, params)
        out = model.forward_dual(tape, pvars, patches, [0], ids, CFG)
        embedded_img = patches @ params.values["img.input.w"] + params.values["img.input.b"]
        embedded_img = embedded_img + params.values["img.pos"][:1]
        embedded_txt = params.values["txt.emb"][ids] + params.values["txt.pos"][:1]
        np.testing.assert_allclose(out.local_image.value, embedded_img, atol=1e-14)
        np.testing.assert_allclose(out.local_text.value, embedded_txt, atol=1e-14)

    def test_determinism(self):
        params = model.init_params(CFG, seed=7)
        patches, pidx, ids = sample_inputs()

        def run():
            tape = Tape()
            pvars = model.wrap_params(tape, params)
            out = model.forward_fusion(tape, pvars, patches, pidx, ids, CFG,
                                       train=True, drop_seed=5)
            return out.local_text.value

        np.testing.assert_array_equal(run(), run())

    def test_invalid_token_id(self):
        params = model.init_params(CFG, seed=1)
        patches, pidx, _ = sample_inputs()
        tape = Tape()
        pvars = model.wrap_params(tape, params)
        with pytest.raises(PreconditionError, match=str(CFG.vocab_size)):
            model.forward_dual(tape, pvars, patches, pidx, [1, CFG.vocab_size], CFG)

    def test_itm_gradient_wrt_alpha_nonzero(self):
        params = model.init_params(CFG, seed=11)
        alpha_names = [n for n in params.names() if n.endswith("cross.alpha")]
        for n in alpha_names:
            params.values[n] = np.array([[0.1]])
        patches, pidx, ids = sample_inputs()

        def loss_for(values):
            tape = Tape()
            pvars = {k: tape.var(v) for k, v in values.items()}
            out = model.forward_fusion(tape, pvars, patches, pidx, ids, CFG)
            return model.itm_loss(out.itm_logit, 1), tape, pvars

        loss, tape, pvars = loss_for(params.values)
        tape.backward(loss)
        name = alpha_names[0]
        analytic = pvars[name].grad[0, 0]
        assert analytic != 0.0

        def f(arrs):
            values = dict(params.values)
            values[name] = arrs[0]
            val, _, _ = loss_for(values)
            return val.item()

        (fd,) = fd_gradient(f, [params.values[name]])
        assert rel_error(np.array([[analytic]]), fd) < 1e-6


class TestProjector:
    def test_zero_input_zero_biases_gives_zero(self):
        params = model.init_params(CFG, seed=0)
        tape = Tape()
        pvars = model.wrap_params(tape, params)
        out = model.projector(tape.var(np.zeros((4, CFG.d_model))), pvars, "img.proj_global")
        np.testing.assert_array_equal(out.value, np.zeros((4, CFG.proj_dims[2])))

    def test_output_shape(self):
        cfg = model.ModelConfig(
            d_model=32, n_layers=1, n_fused=0, n_heads=4, vocab_size=16,
            max_text_len=4, n_patches=2, patch_dim=4, proj_dims=(64, 64, 32),
        )
        params = model.init_params(cfg, seed=0)
        tape = Tape()
        pvars = model.wrap_params(tape, params)
        out = model.projector(tape.var(RNG.standard_normal((5, 32))), pvars, "txt.proj_local")
        assert out.value.shape == (5, 32)

    def test_single_row_rejected(self):
        params = model.init_params(CFG, seed=0)
        tape = Tape()
        pvars = model.wrap_params(tape, params)
        with pytest.raises(PreconditionError):
            model.projector(tape.var(np.ones((1, CFG.d_model))), pvars, "img.proj_global")

    def test_fd_through_all_three_layers(self):
        x = RNG.standard_normal((5, 4))
        shapes = [(4, 6), (1, 6), (6, 6), (1, 6), (6, 3), (1, 3)]
        arrays = [RNG.standard_normal(s) * 0.4 for s in shapes]
        keys = ["p.w1", "p.b1", "p.w2", "p.b2", "p.w3", "p.b3"]

        def build(tape, arrs):
            pvars = {k: tape.var(a) for k, a in zip(keys, arrs)}
            out = model.projector(tape.var(x), pvars, "p")
            return nm.reduce_sum(nm.mul(out, out), "all"), pvars

        tape = Tape()
        out, pvars = build(tape, arrays)
        tape.backward(out)
        analytic = [pvars[k].grad for k in keys]

        def f(arrs):
            t2 = Tape()
            val, _ = build(t2, arrs)
            return val.item()

        numeric = fd_gradient(f, arrays)
        for key, ga, gn in zip(keys, analytic, numeric):
            # Biases feeding straight into batch standardization are dead
            # parameters (the mean subtraction absorbs them): both sides
            # are ~0 there, so fall back to an absolute bound.
            ok = rel_error(ga, gn) < 1e-5 or np.abs(np.asarray(ga) - gn).max() < 1e-8
            assert ok, key


class TestMlmMask:
    def test_rate_within_binomial_band(self):
        ids = np.ones(100_000, dtype=np.intp)
        masked, positions = model.mlm_mask(ids, 0.15, seed=123)
        frac = positions.size / ids.size
        assert 0.14 <= frac <= 0.16
        assert np.all(masked[positions] == model.MASK_ID)

    def test_determinism(self):
        ids = RNG.integers(1, 20, size=50)
        m1, p1 = model.mlm_mask(ids, 0.3, seed=9)
        m2, p2 = model.mlm_mask(ids, 0.3, seed=9)
        np.testing.assert_array_equal(m1, m2)
        np.testing.assert_array_equal(p1, p2)

    @pytest.mark.parametrize("prob", [0.0, 1.0, -0.1])
    def test_boundary_probs_rejected(self, prob):
        with pytest.raises(PreconditionError):
            model.mlm_mask([1, 2, 3], prob, seed=0)


class TestMlmLoss:
    def test_perfect_logits(self):
        tape = Tape()
        ids = np.array([3, 1, 2])
        logits = np.full((3, 5), -30.0)
        for i, t in enumerate(ids):
            logits[i, t] = 30.0
        loss, n = model.mlm_loss(tape.var(logits), ids, [0, 2])
        assert n == 2
        assert loss.item() < 1e-10

    def test_uniform_logits(self):
        tape = Tape()
        loss, _ = model.mlm_loss(tape.var(np.zeros((4, 7))), [1, 2, 3, 4], [0, 1, 2])
        assert loss.item() == pytest.approx(np.log(7.0), abs=1e-12)

    def test_no_masked_positions(self):
        tape = Tape()
        loss, n = model.mlm_loss(tape.var(np.zeros((2, 5))), [1, 2], [])
        assert n == 0 and loss.item() == 0.0

    def test_matches_direct_recomputation(self):
        tape = Tape()
        logits = RNG.standard_normal((6, 9))
        ids = RNG.integers(0, 9, size=6)
        positions = [1, 4, 5]
        loss, _ = model.mlm_loss(tape.var(logits), ids, positions)
        expected = 0.0
        for p in positions:
            row = logits[p]
            expected += np.log(np.exp(row).sum()) - row[ids[p]]
        assert loss.item() == pytest.approx(expected / len(positions), abs=1e-12)


class TestItmLoss:
    def value(self, logit, label):
        tape = Tape()
        return model.itm_loss(tape.var([[logit]]), label).item()

    def test_saturated_match(self):
        assert self.value(30.0, 1) < 1e-10

    def test_zero_logit_is_ln2(self):
        assert self.value(0.0, 1) == pytest.approx(np.log(2.0), abs=1e-15)
        assert self.value(0.0, 0) == pytest.approx(np.log(2.0), abs=1e-15)

    def test_matches_sigmoid_bce(self):
        for _ in range(10):
            logit = float(RNG.standard_normal() * 3)
            p = 1.0 / (1.0 + np.exp(-logit))
            assert self.value(logit, 1) == pytest.approx(-np.log(p), abs=1e-12)
            assert self.value(logit, 0) == pytest.approx(-np.log(1 - p), abs=1e-12)

    def test_bad_label(self):
        with pytest.raises(PreconditionError):
            self.value(1.0, 2)


def test_alpha_initialized_exactly_zero():
    params = model.init_params(CFG, seed=99)
    alphas = [v for n, v in params.values.items() if n.endswith("cross.alpha")]
    assert alphas, "expected gating scalars in fused layers"
    for a in alphas:
        np.testing.assert_array_equal(a, np.zeros((1, 1)))


def test_bias_like_classification():
    params = model.init_params(CFG, seed=0)
    assert model.is_bias_like("img.input.b", params.values["img.input.b"])
    assert model.is_bias_like("img.l1.cross.alpha", np.zeros((1, 1)))
    assert not model.is_bias_like("img.input.w", params.values["img.input.w"])
    assert not model.is_bias_like("txt.emb", params.values["txt.emb"])
