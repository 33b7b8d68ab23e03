import numpy as np
import pytest

from dreamrand.lstm import (
    LstmState,
    LstmWeights,
    all_ones_mask_set,
    lstm_bptt,
    lstm_forward,
    lstm_step,
    masks_to_arrays,
    sample_mask_set,
)
from dreamrand.numerics import finite_diff_grad, pack_arrays, rng_stream, unpack_arrays


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def reference_lstm_sequence(weights, xs, masks):
    """Straight-line scalar-loop re-implementation of the masked update,
    independent of the vectorized production code."""
    d, r = weights.hidden_dim, weights.input_dim
    h = [0.0] * d
    c = [0.0] * d
    out = []
    for t, x in enumerate(xs):
        m = masks[t]
        pre = np.zeros((4, d))
        for g in range(4):
            for i in range(d):
                acc = weights.b[g][i]
                for j in range(r):
                    acc += weights.w_x[g][i][j] * (x[j] * m.scaled_x[g][j])
                for j in range(d):
                    acc += weights.w_h[g][i][j] * (h[j] * m.scaled_h[g][j])
                pre[g][i] = acc
        new_c = [
            _sigmoid(pre[0][i]) * np.tanh(pre[2][i]) + _sigmoid(pre[1][i]) * c[i]
            for i in range(d)
        ]
        new_h = [_sigmoid(pre[3][i]) * np.tanh(new_c[i]) for i in range(d)]
        h, c = new_h, new_c
        out.append((np.array(h), np.array(c)))
    return out


class TestMaskSampling:
    def test_p_zero_all_ones(self):
        m = sample_mask_set(0.0, 6, 9)
        assert m.keep_x.all() and m.keep_h.all()
        assert np.all(m.scaled_x == 1.0) and np.all(m.scaled_h == 1.0)

    def test_p_zero_consumes_no_draws(self):
        rng_a = rng_stream(3, "mask")
        rng_b = rng_stream(3, "mask")
        sample_mask_set(0.0, 6, 9, rng=rng_a)
        assert rng_a.random() == rng_b.random()

    def test_action_entries_always_kept(self):
        rng = rng_stream(11, "mask-action")
        r = 5
        for _ in range(200):
            m = sample_mask_set(0.9, r, 4, action_dims={r - 1}, rng=rng)
            assert m.keep_x[:, r - 1].all()
            assert np.all(m.scaled_x[:, r - 1] == 1.0)

    def test_drop_fraction_near_p(self):
        rng = rng_stream(12, "mask-frac")
        fracs = []
        for _ in range(100):
            m = sample_mask_set(0.5, 4, 1000, rng=rng)
            fracs.append(1.0 - m.m_hi.mean())
        assert 0.47 <= float(np.mean(fracs)) <= 0.53

    @pytest.mark.parametrize("p", [-0.1, 1.0, 1.5])
    def test_bad_rate_rejected(self, p):
        with pytest.raises(ValueError):
            sample_mask_set(p, 4, 4, rng=rng_stream(0))

    def test_bad_action_dims_rejected(self):
        with pytest.raises(ValueError):
            sample_mask_set(0.1, 4, 4, action_dims={4}, rng=rng_stream(0))

    def test_inverted_scaling(self):
        rng = rng_stream(13, "mask-scale")
        m = sample_mask_set(0.2, 8, 8, action_dims=(6, 7), rng=rng)
        kept = m.keep_x[:, :6]
        np.testing.assert_allclose(m.scaled_x[:, :6][kept], 1.0 / 0.8)
        assert np.all(m.scaled_x[:, :6][~kept] == 0.0)

    def test_scale_rate_override(self):
        rng = rng_stream(14, "mask-rate")
        m = sample_mask_set(0.5, 6, 6, rng=rng, scale_rate=0.0)
        assert set(np.unique(m.scaled_h)) <= {0.0, 1.0}

    def test_batch_masks_distinct(self):
        # Mask collision between sequences in a batch is vanishingly rare.
        rng = rng_stream(15, "mask-distinct")
        keys = {sample_mask_set(0.05, 8, 32, rng=rng).bytes_key() for _ in range(64)}
        assert len(keys) == 64

    def test_tags_unique(self):
        a = all_ones_mask_set(3, 3)
        b = all_ones_mask_set(3, 3)
        assert a.tag != b.tag


class TestLstmStep:
    def test_zero_weights_zero_output(self):
        w = LstmWeights(np.zeros((4, 3, 2)), np.zeros((4, 3, 3)), np.zeros((4, 3)))
        s = lstm_step(w, LstmState.zeros(3), np.array([1.0, -2.0]), all_ones_mask_set(2, 3))
        assert np.all(s.h == 0.0) and np.all(s.c == 0.0)

    def test_identity_mask_matches_unmasked(self):
        rng = rng_stream(21, "step")
        w = LstmWeights.init(5, 4, rng)
        x = rng.normal(size=4)
        state = LstmState(rng.normal(size=5) * 0.1, rng.normal(size=5) * 0.1)
        stepped = lstm_step(w, state, x, all_ones_mask_set(4, 5))
        hs, _ = lstm_forward(w, x[None, None, :], h0=state.h[None], c0=state.c[None])
        np.testing.assert_allclose(stepped.h, hs[0, 0], atol=1e-12)

    def test_matches_straight_line_reference(self):
        rng = rng_stream(22, "step-ref")
        w = LstmWeights.init(4, 3, rng)
        masks = [sample_mask_set(0.5, 3, 4, rng=rng) for _ in range(6)]
        xs = rng.normal(size=(6, 3))
        ref = reference_lstm_sequence(w, xs, masks)
        state = LstmState.zeros(4)
        for t in range(6):
            state = lstm_step(w, state, xs[t], masks[t])
            np.testing.assert_allclose(state.h, ref[t][0], atol=1e-12)
            np.testing.assert_allclose(state.c, ref[t][1], atol=1e-12)

    def test_deterministic(self):
        rng = rng_stream(23, "step-det")
        w = LstmWeights.init(4, 3, rng)
        m = sample_mask_set(0.3, 3, 4, rng=rng)
        x = rng.normal(size=3)
        a = lstm_step(w, LstmState.zeros(4), x, m)
        b = lstm_step(w, LstmState.zeros(4), x, m)
        assert np.array_equal(a.h, b.h) and np.array_equal(a.c, b.c)

    def test_dimension_mismatch_rejected(self):
        rng = rng_stream(24, "step-dim")
        w = LstmWeights.init(4, 3, rng)
        with pytest.raises(ValueError):
            lstm_step(w, LstmState.zeros(4), np.zeros(5), all_ones_mask_set(5, 4))
        with pytest.raises(ValueError):
            lstm_step(w, LstmState.zeros(4), np.zeros(3), all_ones_mask_set(3, 5))

    def test_expectation_preserved_at_preactivation(self):
        # Mean masked-and-rescaled pre-activation over many masks matches the
        # unmasked pre-activation (inverted-dropout identity), here at p=0.3
        # with a reduced draw count; the acceptance suite runs the full 1e5.
        rng = rng_stream(25, "step-exp")
        d, r = 8, 6
        w_xi = rng.uniform(0.5, 1.5, size=(d, r))
        w_hi = rng.uniform(0.5, 1.5, size=(d, d))
        x = rng.uniform(0.5, 1.5, size=r)
        h = rng.uniform(0.5, 1.5, size=d)
        target = w_xi @ x + w_hi @ h
        acc = np.zeros(d)
        draws = 20_000
        for _ in range(draws):
            m = sample_mask_set(0.3, r, d, rng=rng)
            acc += w_xi @ (x * m.scaled_x[0]) + w_hi @ (h * m.scaled_h[0])
        np.testing.assert_allclose(acc / draws, target, rtol=0.02)


class TestBptt:
    def _loss_pieces(self, seed, p, T=5, d=8, r=6):
        rng = rng_stream(seed, "bptt")
        w = LstmWeights.init(d, r, rng)
        xs = rng.normal(size=(T, r))
        if p == 0.0:
            masks = [all_ones_mask_set(r, d)] * T
        else:
            mask = sample_mask_set(p, r, d, action_dims=(r - 1,), rng=rng)
            masks = [mask] * T
        upstream = rng.normal(size=(T, d))
        return w, xs, masks, upstream

    def test_zero_upstream_zero_grads(self):
        w, xs, masks, _ = self._loss_pieces(31, 0.3)
        g = lstm_bptt(w, xs, masks, np.zeros((5, w.hidden_dim)))
        for a in (g.w_x, g.w_h, g.b, g.xs, g.h0, g.c0):
            assert np.all(a == 0.0)

    @pytest.mark.parametrize("p", [0.0, 0.5])
    def test_matches_finite_differences(self, p):
        w, xs, masks, upstream = self._loss_pieces(32, p)
        templates = [w.w_x, w.w_h, w.b]

        def loss_of(vec):
            wx, wh, b = unpack_arrays(vec, templates)
            w2 = LstmWeights(wx, wh, b)
            sx = np.stack([m.scaled_x for m in masks])[:, None]
            sh = np.stack([m.scaled_h for m in masks])[:, None]
            hs, _ = lstm_forward(w2, xs[:, None, :], sx, sh)
            return float(np.sum(hs[:, 0, :] * upstream))

        numeric = unpack_arrays(finite_diff_grad(loss_of, pack_arrays(templates)), templates)
        g = lstm_bptt(w, xs, masks, upstream)
        for got, want in zip([g.w_x, g.w_h, g.b], numeric):
            err = np.abs(got - want)
            tol = 1e-4 * np.maximum(np.abs(want), np.abs(got)) + 1e-8
            assert np.all(err <= tol)

    def test_input_gradient_matches_finite_differences(self):
        w, xs, masks, upstream = self._loss_pieces(33, 0.5)

        def loss_of(flat_xs):
            xs2 = flat_xs.reshape(xs.shape)
            sx = np.stack([m.scaled_x for m in masks])[:, None]
            sh = np.stack([m.scaled_h for m in masks])[:, None]
            hs, _ = lstm_forward(w, xs2[:, None, :], sx, sh)
            return float(np.sum(hs[:, 0, :] * upstream))

        numeric = finite_diff_grad(loss_of, xs.ravel()).reshape(xs.shape)
        g = lstm_bptt(w, xs, masks, upstream)
        np.testing.assert_allclose(g.xs, numeric, atol=1e-7, rtol=1e-4)

    def test_dropped_input_column_gets_zero_grad(self):
        from dreamrand.lstm import MaskSet

        rng = rng_stream(34, "bptt-drop")
        d, r, T = 6, 5, 4
        w = LstmWeights.init(d, r, rng)
        j = 2
        keep_x = np.ones((4, r), dtype=bool)
        keep_x[:, j] = False
        mask = MaskSet(keep_x, np.ones((4, d), dtype=bool), 0.4)
        xs = rng.normal(size=(T, r))
        upstream = rng.normal(size=(T, d))
        g = lstm_bptt(w, xs, [mask] * T, upstream)
        assert np.all(g.w_x[:, :, j] == 0.0)
        assert np.any(g.w_x[:, :, j - 1] != 0.0)

    def test_length_mismatch_rejected(self):
        w, xs, masks, upstream = self._loss_pieces(35, 0.0)
        with pytest.raises(ValueError):
            lstm_bptt(w, xs, masks[:-1], upstream)

    def test_forward_records_mask_tags(self):
        rng = rng_stream(36, "tags")
        w = LstmWeights.init(4, 3, rng)
        masks = [sample_mask_set(0.2, 3, 4, rng=rng) for _ in range(2)]
        sx, sh, tags = masks_to_arrays(masks)
        xs = rng.normal(size=(5, 2, 3))
        _, cache = lstm_forward(w, xs, sx, sh, mask_tags=tags[None, :])
        assert cache.mask_tags.shape == (5, 2)
        # one mask per sequence: identical tag at every step of a sequence
        assert np.all(cache.mask_tags == cache.mask_tags[0])


class TestWeights:
    def test_init_shapes_and_forget_bias(self):
        w = LstmWeights.init(7, 4, rng_stream(41, "w"))
        assert w.w_x.shape == (4, 7, 4) and w.w_h.shape == (4, 7, 7)
        assert np.all(w.b[1] == 1.0)
        assert np.all(np.abs(w.w_x) <= 1 / 2.0)

    def test_nonfinite_rejected(self):
        bad = np.zeros((4, 3, 2))
        bad[0, 0, 0] = np.nan
        with pytest.raises(ValueError):
            LstmWeights(bad, np.zeros((4, 3, 3)), np.zeros((4, 3)))
