import math

import numpy as np
import pytest

from femba import model as fm

from conftest import make_windows


# --- independent oracles -----------------------------------------------------

def naive_scan(u, delta, a, b, c, d=None):
    """Element-by-element recurrence, no vectorization."""
    t_len, n_ch = u.shape
    n_st = a.shape[1]
    h = np.zeros((n_ch, n_st))
    y = np.zeros((t_len, n_ch))
    for t in range(t_len):
        for ch in range(n_ch):
            for s in range(n_st):
                abar = math.exp(delta[t, ch] * a[ch, s])
                bbar = delta[t, ch] * b[t, s]
                h[ch, s] = abar * h[ch, s] + bbar * u[t, ch]
            y[t, ch] = sum(c[t, s] * h[ch, s] for s in range(n_st))
            if d is not None:
                y[t, ch] += d[ch] * u[t, ch]
    return y


def straight_line_branch(seq, p, cfg):
    """Unfused reimplementation of one branch, step by step."""
    xz = seq @ p.in_proj.T
    x, gate = xz[:, :cfg.d_inner], xz[:, cfg.d_inner:]
    t_len = seq.shape[0]
    conv = np.zeros_like(x)
    for t in range(t_len):
        for j in range(cfg.d_conv):
            src = t - (cfg.d_conv - 1) + j
            if src >= 0:
                conv[t] += p.conv_w[:, j] * x[src]
    conv += p.conv_b
    u = conv / (1.0 + np.exp(-conv))
    dbl = u @ p.x_proj.T
    dr, ds = cfg.dt_rank, cfg.d_state
    dt = np.log1p(np.exp(dbl[:, :dr] @ p.dt_proj.T + p.dt_bias))
    dt = np.clip(dt, cfg.dt_min, cfg.dt_max)
    y = naive_scan(u, dt, -np.exp(p.a_log), dbl[:, dr:dr + ds], dbl[:, dr + ds:],
                   p.d_skip)
    gated = y * (gate / (1.0 + np.exp(-gate)))
    return gated @ p.out_proj.T


# --- selective_scan ----------------------------------------------------------

class TestSelectiveScan:
    def test_delta_to_zero_limit(self):
        rng = np.random.default_rng(0)
        u = rng.normal(size=(6, 3))
        delta = np.full((6, 3), 1e-9)
        a = -np.abs(rng.normal(size=(3, 2))) - 0.1
        b = rng.normal(size=(6, 2))
        c = rng.normal(size=(6, 2))
        y = fm.selective_scan(u, delta, a, b, c)
        assert np.abs(y).max() < 1e-6

    def test_hand_unrolled(self):
        # one channel, one state, A=-1, delta=ln 2 -> abar = 0.5
        ln2 = math.log(2.0)
        u = np.ones((2, 1))
        delta = np.full((2, 1), ln2)
        a = np.array([[-1.0]])
        b = np.ones((2, 1))
        c = np.ones((2, 1))
        y = fm.selective_scan(u, delta, a, b, c)
        np.testing.assert_allclose(y[:, 0], [ln2, 0.5 * ln2 + ln2], rtol=1e-12)

    def test_matches_naive_oracle(self):
        rng = np.random.default_rng(42)
        for _ in range(25):
            u = rng.normal(size=(5, 2))
            delta = rng.uniform(0.01, 1.0, size=(5, 2))
            a = -np.exp(rng.normal(size=(2, 3)))
            b = rng.normal(size=(5, 3))
            c = rng.normal(size=(5, 3))
            d = rng.normal(size=2)
            got = fm.selective_scan(u, delta, a, b, c, d)
            want = naive_scan(u, delta, a, b, c, d)
            np.testing.assert_allclose(got, want, atol=1e-6)

    def test_linearity_in_u(self):
        rng = np.random.default_rng(1)
        u = rng.normal(size=(8, 4))
        delta = rng.uniform(0.05, 0.5, size=(8, 4))
        a = -np.exp(rng.normal(size=(4, 3)))
        b = rng.normal(size=(8, 3))
        c = rng.normal(size=(8, 3))
        y1 = fm.selective_scan(3.0 * u, delta, a, b, c)
        y2 = 3.0 * fm.selective_scan(u, delta, a, b, c)
        np.testing.assert_allclose(y1, y2, rtol=1e-6)

    def test_stability_bounded(self):
        rng = np.random.default_rng(2)
        u = rng.normal(size=(200, 4))
        delta = rng.uniform(0.01, 2.0, size=(200, 4))
        a = -np.exp(rng.normal(size=(4, 3)))
        abar = np.exp(delta[:, :, None] * a[None])
        assert np.all(abar < 1.0)
        y = fm.selective_scan(u, delta, a, rng.normal(size=(200, 3)),
                              rng.normal(size=(200, 3)))
        assert np.all(np.isfinite(y))

    def test_rejects_nonpositive_delta(self):
        with pytest.raises(ValueError):
            fm.selective_scan(np.ones((2, 1)), np.zeros((2, 1)),
                              -np.ones((1, 1)), np.ones((2, 1)), np.ones((2, 1)))


# --- branches and blocks -----------------------------------------------------

class TestMambaBranch:
    def test_reversal_symmetry(self, tiny_cfg, tiny_weights):
        tokens = np.random.default_rng(3).normal(size=(tiny_cfg.n_tokens, tiny_cfg.d_model))
        p = tiny_weights.blocks[0].bwd
        bwd = fm.mamba_branch(tokens, p, "bwd", tiny_cfg)
        fwd_of_rev = fm.mamba_branch(tokens[::-1], p, "fwd", tiny_cfg)[::-1]
        np.testing.assert_allclose(bwd, fwd_of_rev, atol=1e-6)

    def test_zero_weights_zero_output(self, tiny_cfg):
        w = fm.zero_weights(tiny_cfg)
        tokens = np.random.default_rng(4).normal(size=(tiny_cfg.n_tokens, tiny_cfg.d_model))
        out = fm.mamba_branch(tokens, w.blocks[0].fwd, "fwd", tiny_cfg)
        assert np.all(out == 0)

    def test_matches_straight_line_oracle(self, tiny_cfg, tiny_weights):
        tokens = np.random.default_rng(5).normal(size=(tiny_cfg.n_tokens, tiny_cfg.d_model))
        p = tiny_weights.blocks[1].fwd
        got = fm.mamba_branch(tokens, p, "fwd", tiny_cfg)
        want = straight_line_branch(tokens, p, tiny_cfg)
        np.testing.assert_allclose(got, want, atol=1e-5)


class TestBiMambaBlock:
    def test_zero_weights_identity(self, tiny_cfg):
        w = fm.zero_weights(tiny_cfg)
        tokens = np.random.default_rng(6).normal(size=(tiny_cfg.n_tokens, tiny_cfg.d_model))
        out = fm.bi_mamba_block(tokens, w.blocks[0], tiny_cfg)
        np.testing.assert_allclose(out, tokens)

    def test_fwd_only_additive(self, tiny_cfg, tiny_weights):
        import copy
        blk = copy.deepcopy(tiny_weights.blocks[0])
        zero = fm.zero_weights(tiny_cfg).blocks[0].bwd
        blk.bwd = zero
        tokens = np.random.default_rng(7).normal(size=(tiny_cfg.n_tokens, tiny_cfg.d_model))
        out = fm.bi_mamba_block(tokens, blk, tiny_cfg)
        want = tokens + fm.mamba_branch(tokens, blk.fwd, "fwd", tiny_cfg)
        np.testing.assert_allclose(out, want, atol=1e-9)

    def test_matches_composed_sub_ops(self, tiny_cfg, tiny_weights):
        blk = tiny_weights.blocks[0]
        tokens = np.random.default_rng(8).normal(size=(tiny_cfg.n_tokens, tiny_cfg.d_model))
        got = fm.bi_mamba_block(tokens, blk, tiny_cfg)
        want = tokens + (straight_line_branch(tokens, blk.fwd, tiny_cfg)
                         + straight_line_branch(tokens[::-1], blk.bwd, tiny_cfg)[::-1])
        np.testing.assert_allclose(got, want, atol=1e-5)

    def test_fusion_modes(self, tiny_cfg):
        cfg_mean = fm.scaled_config(tiny_cfg, fusion="mean")
        w = fm.init_weights(cfg_mean, seed=2)
        tokens = np.random.default_rng(9).normal(size=(tiny_cfg.n_tokens, tiny_cfg.d_model))
        f = fm.mamba_branch(tokens, w.blocks[0].fwd, "fwd", cfg_mean)
        b = fm.mamba_branch(tokens, w.blocks[0].bwd, "bwd", cfg_mean)
        out = fm.bi_mamba_block(tokens, w.blocks[0], cfg_mean)
        np.testing.assert_allclose(out, tokens + 0.5 * (f + b), atol=1e-9)

        cfg_cp = fm.scaled_config(tiny_cfg, fusion="concat_project")
        w2 = fm.init_weights(cfg_cp, seed=2)
        out2 = fm.bi_mamba_block(tokens, w2.blocks[0], cfg_cp)
        assert out2.shape == tokens.shape


# --- tokenizer and forward ---------------------------------------------------

class TestTokenize:
    def test_zero_window_yields_pos_embed_plus_bias(self, tiny_cfg, tiny_weights):
        tokens = fm.tokenize(np.zeros((tiny_cfg.n_channels, tiny_cfg.n_samples)),
                             tiny_weights, tiny_cfg)
        bias_tokens = np.tile(tiny_weights.tok_bias, tiny_cfg.n_patches).reshape(
            tiny_cfg.n_tokens, tiny_cfg.d_model)
        np.testing.assert_allclose(tokens, tiny_weights.pos_embed + bias_tokens)

    def test_zero_window_zero_bias(self, tiny_cfg, tiny_weights):
        import copy
        w = copy.deepcopy(tiny_weights)
        w.tok_bias = np.zeros_like(w.tok_bias)
        tokens = fm.tokenize(np.zeros((tiny_cfg.n_channels, tiny_cfg.n_samples)),
                             w, tiny_cfg)
        np.testing.assert_array_equal(tokens, w.pos_embed)

    def test_delta_input_single_tap(self, tiny_cfg):
        # kernel that copies channel 0, sample 0 of each patch
        w = fm.zero_weights(tiny_cfg)
        w.tok_kernel[0, 0, 0] = 1.0
        window = np.zeros((tiny_cfg.n_channels, tiny_cfg.n_samples))
        window[0, tiny_cfg.patch_size * 2] = 7.0  # patch 2, offset 0
        tokens = fm.tokenize(window, w, tiny_cfg)
        # direct convolution oracle: response only at patch 2, feature 0
        expect = np.zeros_like(tokens)
        expect[2 * tiny_cfg.n_groups, 0] = 7.0
        np.testing.assert_array_equal(tokens, expect)

    def test_default_shape(self):
        cfg = fm.ModelConfig()
        w = fm.zero_weights(cfg)
        tokens = fm.tokenize(np.zeros((22, 1280)), w, cfg)
        assert tokens.shape == (160, 385)

    def test_shape_mismatch(self, tiny_cfg, tiny_weights):
        with pytest.raises(ValueError):
            fm.tokenize(np.zeros((tiny_cfg.n_channels, tiny_cfg.n_samples + 1)),
                        tiny_weights, tiny_cfg)


class TestForward:
    def test_zero_weights_zero_logits(self, tiny_cfg):
        w = fm.zero_weights(tiny_cfg)
        window = np.random.default_rng(10).normal(size=(tiny_cfg.n_channels,
                                                        tiny_cfg.n_samples))
        logits = fm.forward(window, w, tiny_cfg)
        assert np.all(logits == 0)

    def test_duplicated_head_rows_equal_logits(self, tiny_cfg, tiny_weights):
        import copy
        w = copy.deepcopy(tiny_weights)
        w.head_w = np.tile(w.head_w[:1], (tiny_cfg.n_classes, 1))
        w.head_b = np.zeros(tiny_cfg.n_classes)
        window = np.random.default_rng(11).normal(size=(tiny_cfg.n_channels,
                                                        tiny_cfg.n_samples))
        logits = fm.forward(window, w, tiny_cfg)
        assert np.ptp(logits) < 1e-12

    def test_matches_straight_line_composition(self, tiny_cfg, tiny_weights):
        window = np.random.default_rng(12).normal(size=(tiny_cfg.n_channels,
                                                        tiny_cfg.n_samples))
        tokens = fm.tokenize(window, tiny_weights, tiny_cfg)
        for blk in tiny_weights.blocks:
            tokens = tokens + (straight_line_branch(tokens, blk.fwd, tiny_cfg)
                               + straight_line_branch(tokens[::-1], blk.bwd, tiny_cfg)[::-1])
        want = tokens.mean(axis=0) @ tiny_weights.head_w.T + tiny_weights.head_b
        got = fm.forward(window, tiny_weights, tiny_cfg)
        np.testing.assert_allclose(got, want, atol=1e-5)

    def test_head_permutation_equivariance(self, tiny_cfg, tiny_weights):
        import copy
        window = make_windows(tiny_cfg, 1, seed=13)[0]
        logits = fm.forward(window, tiny_weights, tiny_cfg)
        perm = np.array([2, 0, 1])
        w = copy.deepcopy(tiny_weights)
        w.head_w = w.head_w[perm]
        w.head_b = w.head_b[perm]
        permuted = fm.forward(window, w, tiny_cfg)
        np.testing.assert_array_equal(permuted, logits[perm])
        assert np.argmax(permuted) == np.argwhere(perm == np.argmax(logits))[0, 0]

    def test_deterministic(self, tiny_cfg, tiny_weights):
        window = make_windows(tiny_cfg, 1, seed=14)[0]
        a = fm.forward(window, tiny_weights, tiny_cfg)
        b = fm.forward(window, tiny_weights, tiny_cfg)
        assert np.array_equal(a, b)

    def test_trace_covers_quant_points(self, tiny_cfg, tiny_weights):
        window = make_windows(tiny_cfg, 1, seed=15)[0]
        _, trace = fm.forward_with_trace(window, tiny_weights, tiny_cfg)
        for tap in fm.quant_points(tiny_cfg):
            assert tap in trace, tap


def test_config_validation():
    with pytest.raises(ValueError):
        fm.ModelConfig(n_samples=1281)
    with pytest.raises(ValueError):
        fm.ModelConfig(n_tokens=161)
    with pytest.raises(ValueError):
        fm.ModelConfig(fusion="nope")
    cfg = fm.ModelConfig()
    assert cfg.dt_rank == 25 and cfg.n_patches == 80 and cfg.n_groups == 2
