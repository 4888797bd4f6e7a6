import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tthlab.attack import (
    DEFAULT_PAYLOAD,
    AttackConfig,
    MaskSpec,
    PatchState,
    _converged,
    anchor_patch,
    apply_patch,
    attack_loss,
    beacon_capacity,
    beacon_layout,
    build_keyword_context,
    combined_loss,
    decode_beacon,
    generate_trojan_set,
    hex_to_bits,
    load_trojan_set,
    make_beacon,
    patch_gradient,
    read_grid,
    render_grid,
    save_trojan_set,
    step_direction,
    update_patch,
    usability_term,
)
from tthlab.errors import ConfigError, DimensionError, KeywordError
from tthlab.matcher import embed_images, embed_texts
from tthlab.numerics import finite_diff_grad, grad_check, l2_normalize


def random_patch_state(r, side=4, size=8, lam=0.3):
    row, col = int(r.integers(0, size - side + 1)), int(r.integers(0, size - side + 1))
    mask = MaskSpec((size, size), (side / size) ** 2, (row, col))
    return PatchState(r.uniform(0, 255, (side, side, 3)), r.uniform(0, 255, (side, side, 3)), mask, lam)


class TestMask:
    def test_side_and_corners(self):
        m = MaskSpec((64, 64), 0.1)
        assert m.side == 20 and m.offset == (0, 44)
        assert MaskSpec((64, 64), 0.1, "bottom-left").offset == (44, 0)
        assert MaskSpec((64, 64), 0.02).side == 9

    def test_mask_matches_window(self):
        m = MaskSpec((16, 16), 0.25, (3, 5))
        mask = m.mask()
        assert m.side == 8
        assert mask.sum() == 8 * 8 * 3
        assert mask[3:11, 5:13].all()

    def test_invalid(self):
        with pytest.raises(ConfigError):
            MaskSpec((64, 64), 0.0)
        with pytest.raises(ConfigError):
            MaskSpec((64, 64), 0.1, (50, 50))
        with pytest.raises(ConfigError):
            MaskSpec((64, 64), 0.1, "middle").offset

    @settings(max_examples=40)
    @given(st.integers(0, 2 ** 31), st.integers(4, 12))
    def test_masking_exact(self, seed, side):
        r = np.random.default_rng(seed)
        row, col = int(r.integers(0, 33 - side)), int(r.integers(0, 33 - side))
        spec = MaskSpec((32, 32), (side / 32) ** 2, (row, col))
        x = r.integers(0, 256, (32, 32, 3)).astype(float)
        d = r.integers(0, 256, (side, side, 3)).astype(float)
        out = apply_patch(x, d, spec)
        m = spec.mask()
        # x_t = (1 - M) x_b + M pad(delta), checked against an explicit padding
        padded = np.zeros_like(x)
        padded[row:row + side, col:col + side] = d
        np.testing.assert_array_equal(out, (1 - m) * x + m * padded)

    def test_patch_shape_checked(self):
        with pytest.raises(DimensionError):
            apply_patch(np.zeros((64, 64, 3)), np.zeros((5, 5, 3)), MaskSpec((64, 64), 0.1))


class TestBeacon:
    def test_layout_counts(self):
        roles = beacon_layout(8)
        assert (roles == "parity").sum() == 8
        assert (roles == "orient").sum() == 8
        assert beacon_capacity(8) == 48

    def test_round_trip(self):
        bits = hex_to_bits(DEFAULT_PAYLOAD, 48)
        code = make_beacon(bits, 8, 20)
        out, acc, ok = decode_beacon(code.rendered, 8, code)
        assert out == bits and acc == 1.0 and ok

    def test_rows_have_even_parity(self):
        code = make_beacon(hex_to_bits("a5f00f5a0ff0", 48), 8, 16)
        assert np.all(code.grid.sum(axis=1) % 2 == 0)

    def test_payload_text(self):
        bits = hex_to_bits(DEFAULT_PAYLOAD)
        text = bytes(int("".join(map(str, bits[i:i + 8])), 2) for i in range(0, 48, 8))
        assert text == b"Trojan"

    def test_single_flip_breaks_parity(self):
        code = make_beacon(hex_to_bits(DEFAULT_PAYLOAD, 48), 8, 16)
        img = code.rendered.copy()
        img[4:6, 6:8] = 255.0 - img[4:6, 6:8]  # cell (2, 3)
        _, acc, ok = decode_beacon(img, 8, code)
        assert not ok and acc == pytest.approx(63 / 64)

    def test_threshold(self):
        grid, means = read_grid(np.full((16, 16, 3), 127.5), 8)
        assert not grid.any() and np.all(means == 127.5)
        grid, _ = read_grid(np.full((16, 16, 3), 128.0), 8)
        assert grid.all()

    @pytest.mark.parametrize("side", [16, 20, 23])
    def test_uneven_cells_cover_patch(self, side):
        grid = np.random.default_rng(side).integers(0, 2, (8, 8))
        img = render_grid(grid, side)
        np.testing.assert_array_equal(read_grid(img, 8)[0], grid)

    @pytest.mark.parametrize("side", range(8, 17))
    def test_small_anchor_scannable(self, side):
        delta_o, code = anchor_patch(side)
        assert delta_o.shape == (side, side, 3)
        assert set(np.unique(delta_o)) <= {0.0, 255.0}
        assert decode_beacon(delta_o, 8, code)[1:] == (1.0, True)

    def test_errors(self):
        with pytest.raises(ConfigError):
            hex_to_bits("xyz")
        with pytest.raises(ConfigError):
            hex_to_bits("f" * 13, 48)
        with pytest.raises(ConfigError):
            make_beacon([0, 2], 8, 16)
        with pytest.raises(ConfigError):
            make_beacon([0], 8, 12)


class TestLosses:
    def test_attack_loss_oracle(self, mini_models, rng):
        m = mini_models["A"]
        imgs = rng.uniform(0, 255, (4, 8, 8, 3))
        e_w = l2_normalize(rng.normal(size=m.dim))
        loop = np.mean([1.0 - float(embed_images(m, x[None])[0] @ e_w) for x in imgs])
        assert attack_loss(m, imgs, e_w) == pytest.approx(loop, abs=1e-12)

    def test_usability_oracle(self):
        d = np.zeros((4, 4, 3))
        d[0, 0] = [255.0, 0.0, 0.0]
        # one channel of one of 16 pixels off by the full range
        assert usability_term(d, np.zeros_like(d)) == pytest.approx(1 / 16)
        assert usability_term(d, d) == 0.0

    @given(st.floats(0.01, 100), st.floats(1.01, 3))
    def test_usability_increasing(self, scale, grow):
        r = np.random.default_rng(0)
        diff = r.normal(size=(5, 5, 3))
        assert usability_term(diff * scale * grow, 0) > usability_term(diff * scale, 0)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2 ** 31), st.floats(0, 10))
    def test_decomposition(self, seed, lam):
        r = np.random.default_rng(seed)
        from tthlab.matcher import init_matcher
        m = init_matcher(12, (8, 8, 3), d=6, d_e=5, pool_factor=2, seed=seed % 7)
        p = random_patch_state(r, lam=lam)
        e_w = l2_normalize(r.normal(size=6))
        benign = r.uniform(0, 255, (3, 8, 8, 3))
        total, att, use = combined_loss(m, benign, p, e_w)
        assert abs(total - lam * use - att) <= 1e-12
        assert att == pytest.approx(attack_loss(m, apply_patch(benign, p.delta, p.mask), e_w), abs=1e-12)

    def test_lambda_zero(self, mini_models, rng):
        p = random_patch_state(rng, lam=0.0)
        e_w = l2_normalize(rng.normal(size=6))
        benign = rng.uniform(0, 255, (2, 8, 8, 3))
        total, att, _ = combined_loss(mini_models["A"], benign, p, e_w)
        assert total == att

    @pytest.mark.parametrize("arch", ["A", "B"])
    def test_gradient(self, mini_models, arch, rng):
        m = mini_models[arch]
        p = random_patch_state(rng, lam=0.7)
        e_w = l2_normalize(rng.normal(size=6))
        benign = rng.uniform(0, 255, (3, 8, 8, 3))

        def f(v):
            q = PatchState(255.0 * v, p.delta_o, p.mask, p.lam)
            return combined_loss(m, benign, q, e_w)[0]

        num = finite_diff_grad(f, p.delta / 255.0)
        assert grad_check(255.0 * patch_gradient(m, benign, p, e_w), num).passed

    def test_usability_gradient_vanishes_at_anchor(self, mini_models, rng):
        p = random_patch_state(rng, lam=1e6)
        p.delta = p.delta_o.copy()
        e_w = l2_normalize(rng.normal(size=6))
        benign = rng.uniform(0, 255, (2, 8, 8, 3))
        no_pull = PatchState(p.delta.copy(), p.delta_o, p.mask, 0.0)
        np.testing.assert_allclose(patch_gradient(mini_models["A"], benign, p, e_w),
                                   patch_gradient(mini_models["A"], benign, no_pull, e_w), atol=1e-15)


class TestUpdate:
    def test_clamp(self):
        mask = MaskSpec((8, 8), 0.25, (0, 0))
        p = PatchState.start(np.full((4, 4, 3), 250.0), mask, eta=0.01)
        update_patch(p, np.full((4, 4, 3), -1000.0), (0.5, 0.0))
        assert np.all(p.delta == 255.0)
        assert p.iter == 1 and p.loss_trace == [(0.5, 0.0)]

    def test_descent_step(self, mini_models, rng):
        m = mini_models["B"]
        p = random_patch_state(rng)
        e_w = l2_normalize(rng.normal(size=6))
        benign = rng.uniform(0, 255, (3, 8, 8, 3))
        before = combined_loss(m, benign, p, e_w)[0]
        update_patch(p, step_direction(patch_gradient(m, benign, p, e_w)))
        assert combined_loss(m, benign, p, e_w)[0] < before

    def test_step_direction_scale(self, rng):
        g = rng.normal(size=(3, 3, 3))
        s = step_direction(g)
        assert np.max(np.abs(s)) == pytest.approx(255.0)
        np.testing.assert_allclose(s / np.linalg.norm(s), g / np.linalg.norm(g))
        assert not step_direction(np.zeros((2, 2, 3))).any()

    def test_shape_checked(self):
        p = PatchState.start(np.zeros((4, 4, 3)), MaskSpec((8, 8), 0.25, (0, 0)))
        with pytest.raises(DimensionError):
            update_patch(p, np.zeros((3, 3, 3)))

    def test_convergence_rule(self):
        cfg = AttackConfig(window=3)
        flat = [1.0, 0.5, 0.4, 0.4, 0.4, 0.4]
        assert _converged(flat, 0.4, cfg)
        assert not _converged(flat, 0.6, cfg)  # attack term must be below 0.5
        assert not _converged([1.0, 0.9, 0.8, 0.7, 0.6, 0.3], 0.3, cfg)


class TestKeywordContext:
    def test_mcs_loop(self, small_model, small_corpus):
        ctx = build_keyword_context(small_model, small_corpus, "red", m=40, seed=3)
        assert len(ctx.sentences) == 40
        assert all(ctx.token in c.tokens for c in ctx.sentences)
        embs = [embed_texts(small_model, [c])[0] for c in ctx.sentences]
        centre = np.sum(embs, axis=0)
        centre = centre / np.sqrt(sum(v * v for v in centre))
        mcs = sum(float(np.dot(e, centre)) for e in embs) / len(embs)
        assert abs(ctx.mcs - mcs) < 1e-12
        np.testing.assert_allclose(ctx.e_w, centre, atol=1e-12)

    def test_takes_all_when_few(self, small_model, small_corpus):
        tok = small_corpus.token("pink")
        avail = sum(tok in c.tokens for _, c in small_corpus.captions("train"))
        ctx = build_keyword_context(small_model, small_corpus, "pink", m=10 ** 6)
        assert len(ctx.sentences) == avail

    def test_deterministic(self, small_model, small_corpus):
        a = build_keyword_context(small_model, small_corpus, "ring", 30, 1)
        b = build_keyword_context(small_model, small_corpus, "ring", 30, 1)
        np.testing.assert_array_equal(a.e_w, b.e_w)

    def test_missing_split(self, small_model, small_corpus):
        with pytest.raises(KeywordError):
            build_keyword_context(small_model, small_corpus, "red", seed=0, split="nowhere")


class TestTrojanSet:
    def test_zero_iterations_gives_anchor(self, small_model, small_corpus, small_benign):
        ts = generate_trojan_set(small_model, small_corpus, small_benign, "red", AttackConfig(iters=0, m=20))
        assert ts.patch.loss_trace == []
        np.testing.assert_array_equal(ts.patch.delta, ts.patch.delta_o)
        np.testing.assert_array_equal(ts.images, apply_patch(small_benign.stack(), ts.patch.delta_o, ts.patch.mask))
        assert ts.scannable() == (1.0, True)

    def test_trace_length_and_restart(self, small_model, small_corpus, small_benign):
        cfg = AttackConfig(iters=7, m=20)
        ts = generate_trojan_set(small_model, small_corpus, small_benign, "square", cfg)
        expected = 7 + (14 if ts.restarts else 0)
        assert len(ts.patch.loss_trace) == ts.patch.iter == expected
        assert ts.images.shape == (len(small_benign), 64, 64, 3)
        np.testing.assert_array_equal(ts.patch.delta, np.floor(ts.patch.delta))

    def test_attack_moves_towards_keyword(self, small_model, small_corpus, small_benign):
        cfg = AttackConfig(iters=40, m=50, restart=False)
        ts = generate_trojan_set(small_model, small_corpus, small_benign, "circle", cfg)
        first, last = ts.patch.loss_trace[0][0], ts.patch.loss_trace[-1][0]
        assert last < first
        # outside the patch window every carrier is untouched
        outside = 1 - ts.patch.mask.mask()
        np.testing.assert_array_equal(ts.images * outside, small_benign.stack() * outside)

    def test_persistence(self, tmp_path, small_model, small_corpus, small_benign):
        cfg = AttackConfig(iters=5, m=20, restart=False)
        ts = generate_trojan_set(small_model, small_corpus, small_benign, "red", cfg)
        save_trojan_set(ts, tmp_path, cfg)
        back = load_trojan_set(tmp_path, small_corpus)
        np.testing.assert_array_equal(back.images, ts.images)
        np.testing.assert_array_equal(back.patch.delta, ts.patch.delta)
        np.testing.assert_array_equal(back.context.e_w, ts.context.e_w)
        assert back.patch.loss_trace == ts.patch.loss_trace
        assert back.scannable() == ts.scannable()
