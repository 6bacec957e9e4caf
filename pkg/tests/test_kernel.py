import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mofm.kernel import AdamW, Tensor, adamw_step, backward, default_dtype, make_rng, no_grad, warmup_cosine
from mofm.kernel import functional as F
from mofm.kernel.gradcheck import check_gradients, relative_error
from mofm.kernel.nn import ConvTranspose2d, Linear, ResBlock
from mofm.kernel.optim import LRSchedule, one_cycle
from mofm.verify import GRAD_CASES, gradient_suite


def _leaf(a, dtype=np.float64):
    return Tensor(np.asarray(a, dtype=dtype), requires_grad=True, dtype=dtype)


def loop_conv(x, w, b, stride, pad):
    """Direct nested-loop cross-correlation for any number of spatial axes."""
    nd = x.ndim - 2
    x = np.pad(x, [(0, 0), (0, 0)] + [(pad, pad)] * nd)
    k = w.shape[2:]
    out = [(s - kk) // stride + 1 for s, kk in zip(x.shape[2:], k)]
    y = np.zeros((x.shape[0], w.shape[0], *out))
    for n, co in itertools.product(range(x.shape[0]), range(w.shape[0])):
        for pos in itertools.product(*map(range, out)):
            acc = b[co] if b is not None else 0.0
            for ci in range(x.shape[1]):
                for off in itertools.product(*map(range, k)):
                    idx = tuple(p * stride + o for p, o in zip(pos, off))
                    acc += x[(n, ci) + idx] * w[(co, ci) + off]
            y[(n, co) + pos] = acc
    return y


class TestConv:
    def test_identity_scalar(self):
        y = F.conv3d(Tensor(np.full((1, 1, 1, 1, 1), 2.5)), Tensor(np.ones((1, 1, 1, 1, 1))),
                     Tensor(np.zeros(1)))
        assert y.shape == (1, 1, 1, 1, 1) and float(y.data.ravel()[0]) == 2.5

    def test_all_ones_sum(self):
        y = F.conv3d(Tensor(np.ones((1, 1, 2, 2, 2))), Tensor(np.ones((1, 1, 2, 2, 2))))
        assert y.shape == (1, 1, 1, 1, 1) and float(y.data.ravel()[0]) == 8.0

    @pytest.mark.parametrize("dense", [True, False])
    def test_conv3d_matches_loop_oracle(self, dense, monkeypatch):
        rng = make_rng(3)
        x = rng.standard_normal((1, 2, 4, 6, 6))
        w = rng.standard_normal((3, 2, 3, 3, 3))
        b = rng.standard_normal(3)
        monkeypatch.setattr(F, "DENSE_LIMIT", 10 ** 9 if dense else 0)
        with default_dtype(np.float64):
            for stride, pad in [(1, 0), (1, 1), (2, 1)]:
                y = F.conv3d(Tensor(x), Tensor(w), Tensor(b), stride, pad)
                np.testing.assert_allclose(y.data, loop_conv(x, w, b, stride, pad), atol=1e-6)

    def test_conv2d_matches_loop_oracle(self):
        rng = make_rng(4)
        x, w = rng.standard_normal((2, 3, 7, 5)), rng.standard_normal((4, 3, 3, 2))
        with default_dtype(np.float64):
            y = F.conv2d(Tensor(x), Tensor(w), None, 2, 1)
        np.testing.assert_allclose(y.data, loop_conv(x, w, None, 2, 1), atol=1e-9)

    def test_output_shape_formula(self):
        assert F.conv_output_shape((9, 8), (3, 3), (2, 2), (1, 0)) == (5, 3)

    def test_transposed_shape(self):
        y = F.conv2d_transposed(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 2, 2))), stride=2)
        assert y.shape == (1, 1, 6, 6)

    def test_transposed_identity_kernel(self):
        x = make_rng(1).standard_normal((1, 1, 4, 5))
        with default_dtype(np.float64):
            y = F.conv2d_transposed(Tensor(x), Tensor(np.ones((1, 1, 1, 1))))
        np.testing.assert_array_equal(y.data, x)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10 ** 6), st.sampled_from([1, 2]), st.sampled_from([0, 1]))
    def test_transposed_is_adjoint_of_conv(self, seed, stride, pad):
        rng = make_rng(seed)
        w = rng.standard_normal((3, 2, 3, 3))
        x = _leaf(rng.standard_normal((2, 2, 7, 5)))  # sizes where every input pixel is reached
        with default_dtype(np.float64):
            y = F.conv2d(x, Tensor(w), None, stride, pad)
            g = rng.standard_normal(y.shape)
            vjp = backward((y * Tensor(g)).sum(), params=[x])[x]
            # conv2d weight (Cout, Cin, ...) is the transposed conv's (Cin', Cout') layout
            yt = F.conv2d_transposed(Tensor(g), Tensor(w), None, stride, pad)
        assert yt.shape == vjp.shape
        np.testing.assert_allclose(yt.data, vjp, atol=1e-5)

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 10 ** 6))
    def test_dense_and_im2col_agree(self, seed):
        rng = make_rng(seed)
        x = rng.standard_normal((2, 3, 3, 5, 4))
        w = rng.standard_normal((2, 3, 3, 3, 3))
        outs = []
        for limit in (10 ** 9, 0):
            old, F.DENSE_LIMIT = F.DENSE_LIMIT, limit
            try:
                xt = _leaf(x)
                wt = _leaf(w)
                with default_dtype(np.float64):
                    y = F.conv3d(xt, wt, None, 1, 1)
                    gr = backward((y * y).sum(), params=[xt, wt])
                outs.append((y.data, gr[xt], gr[wt]))
            finally:
                F.DENSE_LIMIT = old
        for a, b in zip(*outs):
            np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-10)

    def test_shape_errors_name_axis(self):
        with pytest.raises(ValueError, match="channel"):
            F.conv3d(Tensor(np.ones((1, 2, 3, 3, 3))), Tensor(np.ones((1, 1, 1, 1, 1))))
        with pytest.raises(ValueError, match="height"):
            F.conv2d(Tensor(np.ones((1, 1, 2, 9))), Tensor(np.ones((1, 1, 3, 3))))


class TestDenseOps:
    def test_softmax_uniform(self):
        np.testing.assert_allclose(F.softmax(Tensor(np.zeros(3))).data, [1 / 3] * 3, rtol=1e-6)

    def test_softmax_zero_axis(self):
        with pytest.raises(ValueError):
            F.softmax(Tensor(np.zeros((2, 0))))

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
    def test_softmax_simplex(self, xs):
        p = F.softmax(Tensor(np.array(xs), dtype=np.float64)).data
        assert np.all(p >= 0) and abs(p.sum() - 1.0) < 1e-6

    def test_max_pool_single_joint(self):
        x = make_rng(0).standard_normal((1, 3, 4))
        np.testing.assert_array_equal(F.max_pool_over_axis(Tensor(x), 0).data, x[0].astype(np.float32))

    def test_layer_norm_moments(self):
        x = make_rng(0).standard_normal((5, 16)) * 3 + 2
        with default_dtype(np.float64):
            y = F.layer_norm(Tensor(x)).data
        np.testing.assert_allclose(y.mean(-1), 0, atol=1e-9)
        np.testing.assert_allclose(y.var(-1), 1, atol=1e-4)

    def test_attention_picks_matching_key(self):
        # one query aligned with key 0 and orthogonal to key 1; larger scale sharpens the match
        v = np.array([[[1.0, 2.0], [-3.0, 5.0]]])
        k = np.array([[[1.0, 0.0], [0.0, 1.0]]])
        errs = []
        for scale in (1.0, 5.0, 30.0):
            q = np.array([[[scale, 0.0]]])
            with default_dtype(np.float64):
                out = F.multi_head_attention(Tensor(q), Tensor(k * scale), Tensor(v), heads=1).data[0, 0]
            a = math.exp(scale * scale / math.sqrt(2))
            expect = (a * v[0, 0] + v[0, 1]) / (a + 1)
            np.testing.assert_allclose(out, expect, rtol=1e-9)
            errs.append(np.abs(out - v[0, 0]).max())
        assert errs[0] > errs[1] > errs[2] and errs[2] < 1e-6

    def test_attention_dim_check(self):
        with pytest.raises(ValueError):
            F.multi_head_attention(Tensor(np.ones((1, 2, 5))), Tensor(np.ones((1, 2, 5))),
                                   Tensor(np.ones((1, 2, 5))), heads=2)

    def test_attention_mask_blocks_keys(self):
        rng = make_rng(2)
        q, k, v = (rng.standard_normal((1, 3, 4)) for _ in range(3))
        mask = np.array([True, True, False])
        with default_dtype(np.float64):
            full = F.multi_head_attention(Tensor(q), Tensor(k[:, :2]), Tensor(v[:, :2]), 2).data
            masked = F.multi_head_attention(Tensor(q), Tensor(k), Tensor(v), 2, mask=mask).data
        np.testing.assert_allclose(masked, full, atol=1e-12)

    def test_kl_uniform_zero_and_brute_force(self):
        assert float(F.kl_to_uniform(Tensor(np.zeros((2, 7)))).data.max()) == 0.0
        t = 9
        logits = np.zeros(t)
        logits[0] = np.log(2.0)
        p = np.exp(logits) / np.exp(logits).sum()
        with default_dtype(np.float64):
            kl = float(F.kl_to_uniform(Tensor(logits)).data)
        assert abs(kl - sum(pi * np.log(pi * t) for pi in p)) < 1e-12

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.floats(-20, 20), min_size=2, max_size=10))
    def test_kl_nonnegative(self, xs):
        with default_dtype(np.float64):
            assert float(F.kl_to_uniform(Tensor(np.array(xs))).data) >= -1e-12

    def test_smooth_l1_branches(self):
        with default_dtype(np.float64):
            v = F.smooth_l1(Tensor(np.array([0.5, 3.0])), Tensor(np.zeros(2))).data
        assert abs(float(v) - (0.125 + 2.5) / 2) < 1e-12

    def test_cross_entropy_uniform(self):
        with default_dtype(np.float64):
            ce = float(F.cross_entropy(Tensor(np.zeros((3, 8))), np.array([0, 3, 7])).data)
        assert abs(ce - math.log(8)) < 1e-12

    def test_l2_normalize_unit(self):
        y = F.l2_normalize(Tensor(make_rng(0).standard_normal((4, 6)), dtype=np.float64)).data
        np.testing.assert_allclose(np.linalg.norm(y, axis=-1), 1.0, atol=1e-12)

    def test_dropout_eval_is_identity(self):
        x = Tensor(np.ones(10))
        assert F.dropout(x, 0.5, make_rng(0), training=False) is x


class TestBackward:
    def test_linear_case(self):
        x = np.array([1.0, -2.0, 3.0])
        w = _leaf([0.3, 0.1, 0.7])
        with default_dtype(np.float64):
            g = backward((w * Tensor(x)).sum(), params=[w])[w]
        np.testing.assert_array_equal(g, x)

    def test_constant_has_zero_grad(self):
        w = _leaf([1.0, 2.0])
        with default_dtype(np.float64):
            loss = Tensor(np.array(3.0)) + (w * 0.0).sum()
            g = backward(loss, params=[w])[w]
        np.testing.assert_array_equal(g, 0.0)

    def test_unused_param_gets_zero(self):
        a, b = _leaf([1.0]), _leaf([2.0])
        with default_dtype(np.float64):
            g = backward((a * 3.0).sum(), params=[a, b])
        assert g[b].tolist() == [0.0] and g[a].tolist() == [3.0]

    def test_non_scalar_raises(self):
        with pytest.raises(ValueError):
            backward(_leaf([1.0, 2.0]) * 2.0)

    def test_shared_subexpression_accumulates(self):
        x = _leaf([2.0])
        with default_dtype(np.float64):
            y = x * x
            g = backward((y + y).sum(), params=[x])[x]
        assert g.tolist() == [8.0]

    def test_no_grad_builds_no_graph(self):
        x = _leaf([1.0])
        with no_grad():
            y = x * 2.0
        assert not y.requires_grad

    @pytest.mark.parametrize("name", sorted(set(GRAD_CASES) - {"dved_loss", "pretrain_step"}))
    def test_finite_differences(self, name):
        checks = gradient_suite(instances=3, seed=11, names=[name])
        assert all(c.passed for c in checks), [c.line() for c in checks]

    @pytest.mark.parametrize("name", ["dved_loss", "pretrain_step"])
    def test_composed_losses_single_instance(self, name):
        checks = gradient_suite(instances=1, seed=5, names=[name])
        assert all(c.passed for c in checks), [c.line() for c in checks]

    def test_gradcheck_detects_wrong_gradient(self):
        x = _leaf(make_rng(0).standard_normal(5))

        def bad_square(t):
            out = Tensor._from_op(t.data ** 2, (t,), lambda g: (g * t.data,))  # missing factor 2
            return out.sum()

        with default_dtype(np.float64):
            res = check_gradients(lambda: bad_square(x), {"x": x})
        assert not res.passed and res.rel_error > 0.3

    def test_relative_error_zero_safe(self):
        assert relative_error(np.zeros(3), np.zeros(3)) == 0.0


class TestOptim:
    def test_schedule_endpoints(self):
        assert warmup_cosine(0, 100, 10, 1e-6, 3e-4) == 1e-6
        assert warmup_cosine(10, 100, 10, 1e-6, 3e-4) == pytest.approx(3e-4)
        assert warmup_cosine(100, 100, 10, 1e-6, 3e-4) == pytest.approx(1e-6)

    def test_schedule_monotone_after_warmup(self):
        lrs = [warmup_cosine(s, 50, 5, 1e-8, 1.5e-4) for s in range(5, 51)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))

    def test_warmup_longer_than_run_rejected(self):
        with pytest.raises(ValueError):
            warmup_cosine(0, 5, 6, 0.0, 1.0)

    def test_one_cycle_peaks_inside(self):
        lrs = [one_cycle(s, 100, 1e-6, 1e-4) for s in range(101)]
        assert lrs[0] == pytest.approx(1e-6) and max(lrs) == pytest.approx(1e-4)
        assert lrs[-1] == pytest.approx(1e-6)

    def test_lr_schedule_kind_check(self):
        with pytest.raises(ValueError):
            LRSchedule("linear", 10, 0.0, 1.0)

    def test_adamw_first_step_matches_closed_form(self):
        p = {"w": _leaf([1.0, -2.0])}
        g = np.array([0.5, -0.25])
        adamw_step(p, {"w": g}, {}, lr=0.1, weight_decay=0.01)
        # bias-corrected first step moves each coordinate by lr * sign(g) after decay
        expect = np.array([1.0, -2.0]) * (1 - 0.1 * 0.01) - 0.1 * g / (np.abs(g) + 1e-8)
        np.testing.assert_allclose(p["w"].data, expect, rtol=1e-12)

    def test_negative_lr_rejected(self):
        with pytest.raises(ValueError):
            adamw_step({"w": _leaf([1.0])}, {"w": np.ones(1)}, {}, lr=-1.0)

    def test_deterministic_trajectory(self):
        def run():
            rng = make_rng(5)
            lin = Linear(4, 3, rng)
            opt = AdamW(lin.named_parameters(), lr=1e-2)
            x = rng.standard_normal((6, 4))
            for _ in range(3):
                loss = (lin(Tensor(x)) ** 2).mean()
                gr = backward(loss, params=lin.parameters())
                opt.step({k: gr[p] for k, p in lin.named_parameters().items()})
            return {k: v.data.copy() for k, v in lin.named_parameters().items()}

        a, b = run(), run()
        assert all(np.array_equal(a[k], b[k]) for k in a)


class TestModules:
    def test_state_dict_roundtrip(self):
        a, b = ResBlock(2, make_rng(0), nd=2), ResBlock(2, make_rng(1), nd=2)
        b.load_state_dict(a.state_dict())
        x = Tensor(make_rng(2).standard_normal((1, 2, 4, 4)))
        np.testing.assert_array_equal(a(x).data, b(x).data)

    def test_load_state_dict_checks(self):
        m = Linear(2, 2, make_rng(0))
        with pytest.raises(KeyError):
            m.load_state_dict({})
        with pytest.raises(ValueError):
            m.load_state_dict({"weight": np.ones((3, 2)), "bias": np.ones(2)})

    def test_conv_transpose_module_shape(self):
        up = ConvTranspose2d(4, 2, 2, make_rng(0), stride=2)
        assert up(Tensor(np.ones((1, 4, 3, 3)))).shape == (1, 2, 6, 6)

    def test_rng_streams_reproducible(self):
        assert np.array_equal(make_rng([1, 2]).random(5), make_rng([1, 2]).random(5))
        assert not np.array_equal(make_rng([1, 2]).random(5), make_rng([1, 3]).random(5))
