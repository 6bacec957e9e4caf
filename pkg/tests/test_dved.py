import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_heatmaps, tiny_profile
from mofm.config import desk_profile, paper_profile
from mofm.dved import (DVED, build_dved, codebook_stats, dved_loss, gumbel_noise, gumbel_softmax, loss_terms,
                       tau_at, tokenize, train_dved)
from mofm.heatmap import condense
from mofm.kernel import Tensor, default_dtype, make_rng, no_grad


class TestGumbel:
    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.floats(-30, 30), min_size=2, max_size=16), st.floats(0.05, 5.0), st.integers(0, 10 ** 6))
    def test_soft_sample_on_simplex(self, logits, tau, seed):
        with default_dtype(np.float64):
            y, z = gumbel_softmax(np.array(logits), tau, rng=make_rng(seed))
        assert abs(y.data.sum() - 1.0) < 1e-6 and 0 <= int(z) < len(logits)

    def test_hard_id_is_argmax_of_perturbed(self):
        logits = np.log([0.5, 0.3, 0.2])
        g = gumbel_noise(make_rng(0), (3,))
        _, z = gumbel_softmax(Tensor(logits, dtype=np.float64), 1.0, noise=g)
        assert int(z) == int(np.argmax(logits + g))

    def test_monte_carlo_frequencies(self):
        logits = np.tile(np.log([0.7, 0.2, 0.1]), (100_000, 1))
        _, z = gumbel_softmax(Tensor(logits, dtype=np.float64), 1.0, rng=make_rng(7))
        freq = np.bincount(z, minlength=3) / len(z)
        np.testing.assert_allclose(freq, [0.7, 0.2, 0.1], atol=0.01)

    def test_low_temperature_is_nearly_one_hot(self):
        with default_dtype(np.float64):
            y, _ = gumbel_softmax(np.array([0.3, 1.2, -0.4]), 0.01, noise=np.zeros(3))
        assert y.data.max() > 0.99

    def test_tau_must_be_positive(self):
        with pytest.raises(ValueError):
            gumbel_softmax(np.zeros(3), 0.0, rng=make_rng(0))

    def test_straight_through_forward_is_one_hot(self):
        with default_dtype(np.float64):
            x = Tensor(np.array([0.1, 0.5, 0.2]), requires_grad=True)
            y, z = gumbel_softmax(x, 1.0, noise=np.zeros(3), hard=True)
        assert y.data.tolist() == [0.0, 1.0, 0.0] and int(z) == 1


class TestSchedule:
    def test_tau_monotone_and_endpoints(self):
        cfg = desk_profile().dved
        taus = [tau_at(s, 100, cfg) for s in range(101)]
        assert taus[0] == cfg.tau_start and taus[-1] == pytest.approx(cfg.tau_end)
        assert all(a >= b for a, b in zip(taus, taus[1:]))
        assert taus[50] == pytest.approx(cfg.tau_end)


class TestModel:
    def test_paper_logit_shape(self):
        # build only the encoder head; a full forward at paper scale is too slow for unit tests
        p = paper_profile()
        assert p.geometry.num_cubes == 324 and p.dved.vocab == 8192

    def test_desk_logit_shape(self):
        p = desk_profile()
        m = build_dved(p, 0)
        u = random_heatmaps(p, 1)
        with no_grad():
            assert m.encode(u).shape == (1, 36, 64)

    def test_tiny_shapes_and_determinism(self, tiny):
        m = build_dved(tiny, 0)
        u = random_heatmaps(tiny, 2)
        with no_grad():
            a, b = m.encode(u).data, m.encode(u).data
            assert a.shape == (2, tiny.num_cubes, tiny.dved.vocab) and np.array_equal(a, b)
            y = np.eye(tiny.dved.vocab)[np.zeros((2, tiny.num_cubes), dtype=int)]
            assert m.decode(y).shape == (2, tiny.frames, tiny.height, tiny.width)

    def test_encode_shape_check(self, tiny):
        with pytest.raises(ValueError):
            build_dved(tiny, 0).encode(np.zeros((1, tiny.joints, tiny.frames + 1, tiny.height, tiny.width)))

    def test_one_hot_decode_equals_lookup(self, tiny):
        m = build_dved(tiny, 0)
        z = make_rng(1).integers(0, tiny.dved.vocab, (3, tiny.num_cubes))
        with no_grad():
            a = m.decode(np.eye(tiny.dved.vocab)[z]).data
            b = m.decode_ids(z).data
        np.testing.assert_allclose(a, b, atol=1e-6)

    def test_decode_rejects_non_simplex(self, tiny):
        m = build_dved(tiny, 0)
        with pytest.raises(ValueError):
            m.decode(np.full((1, tiny.num_cubes, tiny.dved.vocab), 0.5))

    def test_lookup_is_linear(self, tiny):
        m = build_dved(tiny, 0)
        rng = make_rng(2)
        y1 = rng.dirichlet(np.ones(tiny.dved.vocab), (1, tiny.num_cubes))
        y2 = rng.dirichlet(np.ones(tiny.dved.vocab), (1, tiny.num_cubes))
        with no_grad(), default_dtype(np.float64):
            mix = m.lookup(Tensor(0.3 * y1 + 0.7 * y2, dtype=np.float64)).data
            sep = 0.3 * m.lookup(Tensor(y1, dtype=np.float64)).data + 0.7 * m.lookup(Tensor(y2, dtype=np.float64)).data
        np.testing.assert_allclose(mix, sep, atol=1e-6)

    def test_distinct_token_grids_decode_differently(self, tiny):
        m = build_dved(tiny, 3)
        rng = make_rng(4)
        with no_grad():
            for _ in range(5):
                z1, z2 = rng.integers(0, tiny.dved.vocab, (2, 1, tiny.num_cubes))
                if np.array_equal(z1, z2):
                    continue
                assert not np.array_equal(m.decode_ids(z1).data, m.decode_ids(z2).data)


class TestLoss:
    def test_uniform_posterior_perfect_reconstruction_is_zero(self, tiny):
        """Zero encoder output and a decoder that reproduces the target exactly."""
        m = build_dved(tiny, 0)
        for name, p in m.named_parameters().items():
            if name.startswith("enc_proj"):
                p.data[...] = 0.0
        u = random_heatmaps(tiny, 1)
        logits = m.encode(u)
        assert np.all(logits.data == 0.0)
        total = loss_terms(Tensor(condense(u)), condense(u), logits, beta=tiny.dved.beta)
        assert float(total.data) == 0.0

    def test_kl_term_zero_only_for_uniform(self, tiny):
        m = build_dved(tiny, 0)
        u = random_heatmaps(tiny, 1)
        _, _, kl, logits, _ = dved_loss(m, u, condense(u), 0.5, rng=make_rng(0))
        assert float(kl.data) > 0 and np.ptp(logits.data) > 0

    def test_loss_decomposition(self, tiny):
        m = build_dved(tiny, 0)
        u = random_heatmaps(tiny, 2)
        total, recon, kl, _, _ = dved_loss(m, u, condense(u), 0.7, noise=np.zeros((2, 4, 8)))
        assert float(total.data) == pytest.approx(float(recon.data) + tiny.dved.beta * float(kl.data), rel=1e-6)


class TestTraining:
    def test_empty_dataset(self, tiny):
        with pytest.raises(ValueError):
            train_dved(np.zeros((0, tiny.joints, tiny.frames, 8, 8)), tiny, 0)

    def test_zero_epochs_returns_init(self, tiny):
        u = random_heatmaps(tiny, 4)
        m, st_ = train_dved(u, tiny, 0, epochs=0)
        fresh = build_dved(tiny, 0)
        assert st_.history == []
        for k, v in fresh.named_parameters().items():
            assert np.array_equal(v.data, m.named_parameters()[k].data)

    def test_short_run_is_reproducible_and_logs(self, tiny):
        u = random_heatmaps(tiny, 8)
        a, sa = train_dved(u, tiny, 1, epochs=2)
        b, sb = train_dved(u, tiny, 1, epochs=2)
        assert sa.history == sb.history and len(sa.history) == 2
        assert {"recon", "kl", "tau", "usage", "perplexity", "loss"} <= set(sa.history[0])
        for k, v in a.named_parameters().items():
            assert np.array_equal(v.data, b.named_parameters()[k].data)

    def test_tokenize_deterministic_and_in_range(self, tiny):
        m = build_dved(tiny, 0)
        u = random_heatmaps(tiny, 5)
        t1, t2 = tokenize(m, u, batch_size=2), tokenize(m, u)
        assert np.array_equal(t1, t2) and t1.shape == (5, tiny.num_cubes)
        assert t1.min() >= 0 and t1.max() < tiny.dved.vocab
        assert np.array_equal(tokenize(m, u[0]), t1[0])


def test_codebook_stats():
    s = codebook_stats(np.array([[0, 0, 1, 1]]), 4)
    assert s["usage"] == 0.5 and s["perplexity"] == pytest.approx(2.0)
    assert codebook_stats(np.arange(8), 8)["perplexity"] == pytest.approx(8.0)
    assert math.isclose(codebook_stats(np.zeros(5, dtype=int), 3)["perplexity"], 1.0)


def test_unit_patch_rejected():
    with pytest.raises(ValueError):
        DVED(1, 1, tiny_profile(patch=1, height=8, width=8, **{"backbone.max_seq": 64}).geometry,
             tiny_profile().dved, make_rng(0))
