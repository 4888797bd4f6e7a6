import numpy as np
import pytest

from tthlab.errors import ConfigError, DegenerateInputError, DimensionError, FormatError, VocabularyError
from tthlab.matcher import (
    TrainHyper,
    embed_image,
    embed_images,
    embed_text,
    embed_texts,
    image_embedding_input_grad,
    init_matcher,
    load_model,
    save_model,
    similarity,
    train_matcher,
    validation_r10,
)
from tthlab.numerics import finite_diff_grad, grad_check
from tthlab.synthworld import generate_corpus


class TestText:
    def test_single_token(self, mini_models):
        m = mini_models["A"]
        row = m.token_table[3] @ m.text_proj
        np.testing.assert_allclose(embed_text(m, [3]), row / np.linalg.norm(row), atol=1e-12)

    def test_bag_of_words(self, mini_models):
        m = mini_models["A"]
        np.testing.assert_allclose(embed_text(m, [1, 2, 2]), embed_text(m, [2, 1, 2]), atol=1e-12)

    def test_unit_norm(self, small_model, small_corpus):
        caps = [c for _, c in small_corpus.captions()[:50]]
        np.testing.assert_allclose(np.linalg.norm(embed_texts(small_model, caps), axis=1), 1.0, atol=1e-9)

    def test_batch_matches_single(self, small_model, small_corpus):
        caps = [c for _, c in small_corpus.captions()[:5]]
        np.testing.assert_allclose(embed_texts(small_model, caps)[2], embed_text(small_model, caps[2]))

    def test_errors(self, mini_models):
        with pytest.raises(VocabularyError):
            embed_text(mini_models["A"], [99])
        with pytest.raises(DegenerateInputError):
            embed_text(mini_models["A"], [])


class TestImage:
    def test_uniform_brightness_invariance(self, small_model):
        a = embed_image(small_model, np.full((64, 64, 3), 128.0))
        b = embed_image(small_model, np.full((64, 64, 3), 255.0))
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_linear_oracle(self, mini_models, rng):
        m = mini_models["A"]
        x = rng.uniform(0, 255, size=(8, 8, 3))
        pooled = x.reshape(4, 2, 4, 2, 3).mean(axis=(1, 3)) / 255.0
        u = pooled.reshape(-1) @ m.img_proj
        np.testing.assert_allclose(embed_image(m, x), u / np.linalg.norm(u), atol=1e-12)

    def test_shape_checked(self, mini_models):
        with pytest.raises(DimensionError):
            embed_image(mini_models["A"], np.ones((6, 8, 3)))

    def test_black_image_degenerate(self, mini_models):
        with pytest.raises(DegenerateInputError):
            embed_image(mini_models["A"], np.zeros((8, 8, 3)))

    def test_similarity_bounded(self, small_model, small_corpus):
        it = small_corpus.items[0]
        s = similarity(small_model, it.captions[0], it.image)
        assert -1.0 <= s <= 1.0

    @pytest.mark.parametrize("arch", ["A", "B"])
    def test_input_gradient(self, mini_models, arch, rng):
        m = mini_models[arch]
        # probe in [0, 1] intensity units, the scale the encoder works in
        x = rng.uniform(0, 1, size=(8, 8, 3))
        up = rng.normal(size=m.dim)
        num = finite_diff_grad(lambda v: float(up @ embed_image(m, 255.0 * v)), x)
        assert grad_check(255.0 * image_embedding_input_grad(m, 255.0 * x, up), num).passed

    def test_batch_gradient(self, mini_models, rng):
        m = mini_models["B"]
        x = rng.uniform(0, 255, size=(3, 8, 8, 3))
        up = rng.normal(size=(3, m.dim))
        g = image_embedding_input_grad(m, x, up)
        np.testing.assert_allclose(g[1], image_embedding_input_grad(m, x[1], up[1]), atol=1e-15)

    def test_linear_encoder_is_scale_free(self, mini_models, rng):
        # a 0-homogeneous map has x . grad = 0 (Euler)
        m = mini_models["A"]
        x = rng.uniform(0, 255, size=(8, 8, 3))
        g = image_embedding_input_grad(m, x, rng.normal(size=m.dim))
        assert abs(np.sum(x * g)) < 1e-12


class TestInit:
    def test_errors(self):
        with pytest.raises(ConfigError):
            init_matcher(10, (10, 10, 3), pool_factor=4)
        with pytest.raises(ConfigError):
            init_matcher(10, arch="C")
        with pytest.raises(ConfigError):
            init_matcher(10, temperature=0.0)

    def test_arch_b_has_hidden_layer(self):
        m = init_matcher(10, arch="B", hidden=16)
        assert m.img_hidden.shape == (768, 16) and m.img_proj.shape == (16, 64)


class TestTraining:
    def test_learns_and_is_deterministic(self):
        c = generate_corpus(2, 800, 30, 10)
        hyper = TrainHyper(epochs=30)
        m1, log1 = train_matcher(c, hyper)
        m2, log2 = train_matcher(c, hyper)
        for (_, a), (_, b) in zip(m1.parameters(), m2.parameters()):
            np.testing.assert_array_equal(a, b)
        assert log1.losses == log2.losses
        assert log1.losses[-1] < log1.losses[0]
        # chance level for R@10 over 30 images is 33%
        assert log1.val_r10 > 80.0

    def test_validation_r10_is_percentage(self, small_model, small_corpus):
        v = validation_r10(small_model, small_corpus, "test")
        assert 0.0 <= v <= 100.0


class TestPersistence:
    @pytest.mark.parametrize("arch", ["A", "B"])
    def test_round_trip_exact(self, tmp_path, arch):
        m = init_matcher(12, (8, 8, 3), d=6, d_e=5, pool_factor=2, arch=arch, hidden=7, seed=1)
        save_model(m, tmp_path / "m.bin")
        back = load_model(tmp_path / "m.bin")
        assert back.arch_tag == m.arch_tag and back.temperature == m.temperature
        for (n1, a), (n2, b) in zip(m.parameters(), back.parameters()):
            assert n1 == n2
            np.testing.assert_array_equal(a, b)

    def test_saved_bytes_stable(self, tmp_path):
        m = init_matcher(12, (8, 8, 3), d=6, d_e=5, pool_factor=2, seed=1)
        save_model(m, tmp_path / "a.bin")
        save_model(m, tmp_path / "b.bin")
        assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()

    def test_truncated(self, tmp_path):
        m = init_matcher(12, (8, 8, 3), d=6, d_e=5, pool_factor=2)
        save_model(m, tmp_path / "m.bin")
        data = (tmp_path / "m.bin").read_bytes()
        (tmp_path / "m.bin").write_bytes(data[:-8])
        with pytest.raises(FormatError):
            load_model(tmp_path / "m.bin")

    def test_garbage(self, tmp_path):
        (tmp_path / "m.bin").write_bytes(b"\x05\x00\x00\x00\x00\x00\x00\x00hello")
        with pytest.raises(FormatError):
            load_model(tmp_path / "m.bin")

    def test_tag_mismatch(self, tmp_path):
        m = init_matcher(12, (8, 8, 3), d=6, d_e=5, pool_factor=2)
        save_model(m, tmp_path / "m.bin")
        with pytest.raises(ConfigError):
            load_model(tmp_path / "m.bin", expected_tag="A:64x64x3:pool4:V32")
