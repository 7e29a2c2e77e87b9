import numpy as np
import pytest

from propgvae import autodiff as ad
from propgvae.errors import DataError, NumericError


def scalar_quadratic(params):
    w = params["w"]
    return lambda: ad.sum_(ad.mul(w, w))


class TestForwardOps:
    def test_matmul_example(self):
        out = ad.matmul(ad.const([[1.0, 2.0], [3.0, 4.0]]), ad.const([[1.0], [1.0]]))
        assert out.value.ravel().tolist() == [3.0, 7.0]

    def test_tanh_gradient_at_zero(self):
        p = ad.ModelParams()
        x = p.add("x", 0.0)
        ad.backward(ad.tanh(x))
        assert float(x.grad) == 1.0

    def test_softmax_single_logit(self):
        assert ad.softmax(ad.const([5.0])).value.tolist() == [1.0]

    def test_softmax_normalizes(self):
        out = ad.softmax(ad.const([1.0, 2.0, 3.0]))
        assert out.value.sum() == pytest.approx(1.0)

    def test_log_softmax_matches_log_of_softmax(self):
        x = np.array([0.3, -1.2, 2.0])
        assert np.allclose(ad.log_softmax(ad.const(x)).value,
                           np.log(ad.softmax(ad.const(x)).value))

    def test_concat_slice(self):
        out = ad.vslice(ad.concat([ad.const([1.0, 2.0]), ad.const([3.0])]), 1, 3)
        assert out.value.tolist() == [2.0, 3.0]

    def test_leaky_relu_slope(self):
        out = ad.leaky_relu(ad.const([-1.0, 2.0]))
        assert out.value.tolist() == [-0.2, 2.0]

    def test_l2_norm(self):
        assert float(ad.l2_norm(ad.const([3.0, 4.0])).value) == 5.0

    def test_rank_guard(self):
        with pytest.raises(ValueError):
            ad.const(np.zeros((2, 2, 2)))


class TestNonFiniteGuard:
    def test_overflowing_exp_aborts_with_op_name(self):
        with pytest.raises(NumericError) as err:
            ad.exp(ad.const([1000.0]))
        assert "exp" in str(err.value)

    def test_constant_nan_rejected(self):
        with pytest.raises(NumericError):
            ad.const([np.nan])


class TestBackward:
    def test_requires_scalar(self):
        with pytest.raises(ValueError):
            ad.backward(ad.const([1.0, 2.0]))

    def test_accumulation_doubles_without_zeroing(self):
        p = ad.ModelParams()
        w = p.add("w", [1.0, -2.0])
        loss = ad.sum_(ad.mul(w, w))
        ad.backward(loss)
        first = w.grad.copy()
        ad.backward(loss)
        assert np.array_equal(w.grad, 2 * first)
        p.zero_grads()
        assert w.grad is None

    def test_shared_subexpression(self):
        p = ad.ModelParams()
        x = p.add("x", 3.0)
        y = ad.mul(x, x)  # x**2
        loss = ad.add(y, y)  # 2 x**2 -> d/dx = 4x = 12
        ad.backward(loss)
        assert float(x.grad) == pytest.approx(12.0)

    def test_determinism_bitwise(self):
        def run():
            rng = np.random.default_rng(42)
            p = ad.ModelParams()
            w = p.add("w", rng.standard_normal((4, 4)))
            x = ad.const(rng.standard_normal(4))
            loss = ad.sum_(ad.tanh(ad.matmul(w, x)))
            ad.backward(loss)
            return loss.value.copy(), w.grad.copy()

        l1, g1 = run()
        l2, g2 = run()
        assert np.array_equal(l1, l2) and np.array_equal(g1, g2)


class TestCrossEntropy:
    def test_uniform_two_classes(self):
        loss = ad.cross_entropy_from_logits(ad.const([0.0, 0.0]), 0)
        assert float(loss.value) == pytest.approx(np.log(2))

    def test_mask_allows_only_target(self):
        mask = np.array([True, False, False])
        loss = ad.cross_entropy_from_logits(ad.const([2.0, 5.0, -1.0]), 0, mask)
        assert float(loss.value) == 0.0

    def test_masked_target_rejected(self):
        mask = np.array([False, True])
        with pytest.raises(ValueError):
            ad.cross_entropy_from_logits(ad.const([0.0, 0.0]), 0, mask)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        p = ad.ModelParams()
        logits = p.add("logits", rng.standard_normal(5))
        mask = np.array([True, True, False, True, True])
        report = ad.grad_check(lambda: ad.cross_entropy_from_logits(logits, 3, mask), p)
        assert report.max_rel_err < 1e-4

    def test_gradient_zero_on_masked_classes(self):
        p = ad.ModelParams()
        logits = p.add("logits", [0.5, -0.2, 1.0])
        mask = np.array([True, False, True])
        ad.backward(ad.cross_entropy_from_logits(logits, 0, mask))
        assert logits.grad[1] == 0.0


class TestGaussianKl:
    def test_equal_gaussians(self):
        z = ad.const([0.0, 0.0])
        assert float(ad.gaussian_kl(z, z, z, z).value) == 0.0

    def test_unit_mean_shift(self):
        kl = ad.gaussian_kl(ad.const([1.0]), ad.const([0.0]),
                            ad.const([0.0]), ad.const([0.0]))
        assert float(kl.value) == pytest.approx(0.5)

    def test_non_negative(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            kl = ad.gaussian_kl(ad.const(rng.standard_normal(4)),
                                ad.const(rng.standard_normal(4)),
                                ad.const(rng.standard_normal(4)),
                                ad.const(rng.standard_normal(4)))
            assert float(kl.value) >= 0.0

    def test_gradients(self):
        rng = np.random.default_rng(2)
        p = ad.ModelParams()
        mq = p.add("mq", rng.standard_normal(3))
        lq = p.add("lq", rng.standard_normal(3) * 0.3)
        mp_ = p.add("mp", rng.standard_normal(3))
        lp = p.add("lp", rng.standard_normal(3) * 0.3)
        report = ad.grad_check(lambda: ad.gaussian_kl(mq, lq, mp_, lp), p)
        assert report.max_rel_err < 1e-4


class TestReparameterize:
    def test_deterministic_given_seed(self):
        mu = ad.const([0.5, -0.5])
        logvar = ad.const([0.0, 0.2])
        a = ad.reparameterize(mu, logvar, np.random.default_rng(7)).value
        b = ad.reparameterize(mu, logvar, np.random.default_rng(7)).value
        assert np.array_equal(a, b)

    def test_gradient_flows_to_both(self):
        p = ad.ModelParams()
        mu = p.add("mu", [0.1, 0.2])
        logvar = p.add("logvar", [0.0, -0.5])
        report = ad.grad_check(
            lambda: ad.sum_(ad.mul(
                ad.reparameterize(mu, logvar, np.random.default_rng(3)),
                ad.reparameterize(mu, logvar, np.random.default_rng(3)))),
            p)
        # the rng is re-seeded per call, so the noise is part of the function
        assert report.max_rel_err < 1e-4


class TestGradCheckPerOp:
    @pytest.mark.parametrize("name", [
        "matmul", "add", "mul", "concat", "slice", "sum", "mean", "tanh",
        "sigmoid", "relu", "leaky_relu", "softmax", "log_softmax", "exp",
        "l2_norm", "stack_rows",
    ])
    def test_each_primitive(self, name):
        rng = np.random.default_rng(hash(name) % 2**32)
        p = ad.ModelParams()
        x = p.add("x", rng.standard_normal(6) + 0.05)
        w = p.add("w", rng.standard_normal((4, 6)))

        def fn():
            if name == "matmul":
                return ad.sum_(ad.tanh(ad.matmul(w, x)))
            if name == "add":
                return ad.sum_(ad.add(x, x))
            if name == "mul":
                return ad.sum_(ad.mul(x, x))
            if name == "concat":
                return ad.sum_(ad.concat([x, ad.mul(x, x)]))
            if name == "slice":
                return ad.sum_(ad.vslice(x, 1, 4))
            if name == "sum":
                return ad.sum_(x)
            if name == "mean":
                return ad.mean_(x)
            if name == "tanh":
                return ad.sum_(ad.tanh(x))
            if name == "sigmoid":
                return ad.sum_(ad.sigmoid(x))
            if name == "relu":
                return ad.sum_(ad.relu(x))
            if name == "leaky_relu":
                return ad.sum_(ad.leaky_relu(x))
            if name == "softmax":
                return ad.sum_(ad.mul(ad.softmax(x), x))
            if name == "log_softmax":
                return ad.sum_(ad.mul(ad.log_softmax(x), x))
            if name == "exp":
                return ad.sum_(ad.exp(ad.scale(x, 0.3)))
            if name == "l2_norm":
                return ad.l2_norm(x)
            return ad.sum_(ad.matmul(ad.stack_rows([x, ad.mul(x, x)]),
                                     ad.const(np.ones(6))))

        report = ad.grad_check(fn, p)
        assert report.max_rel_err < 1e-4, (name, report)

    def test_linear_layer_is_nearly_exact(self):
        rng = np.random.default_rng(5)
        p = ad.ModelParams()
        w = p.add("w", rng.standard_normal((3, 4)))
        b = p.add("b", rng.standard_normal(3))
        x = ad.const(rng.standard_normal(4))
        report = ad.grad_check(lambda: ad.sum_(ad.linear(w, x, b)), p)
        assert report.max_rel_err < 1e-7

    def test_gru_cell_composite(self):
        rng = np.random.default_rng(6)
        hidden, din = 5, 4
        p = ad.ModelParams()
        w = p.add("w", rng.standard_normal((3 * hidden, din)) * 0.4)
        u = p.add("u", rng.standard_normal((3 * hidden, hidden)) * 0.4)
        bx = p.add("bx", rng.standard_normal(3 * hidden) * 0.1)
        bh = p.add("bh", rng.standard_normal(3 * hidden) * 0.1)
        x = ad.const(rng.standard_normal(din))
        h = ad.const(rng.standard_normal(hidden))
        target = ad.const(rng.standard_normal(hidden))

        def fn():
            d = ad.sub(ad.gru_cell(x, h, w, u, bx, bh), target)
            return ad.sum_(ad.mul(d, d))

        assert ad.grad_check(fn, p).max_rel_err < 1e-4

    def test_gated_sum_composite(self):
        rng = np.random.default_rng(7)
        hidden = 4
        p = ad.ModelParams()
        wg = p.add("wg", rng.standard_normal((hidden, hidden)))
        bg = p.add("bg", rng.standard_normal(hidden) * 0.1)
        wm = p.add("wm", rng.standard_normal((hidden, hidden)))
        bm = p.add("bm", rng.standard_normal(hidden) * 0.1)
        inputs = [ad.const(rng.standard_normal(hidden)) for _ in range(3)]

        def fn():
            return ad.sum_(ad.tanh(ad.gated_sum(inputs, wg, bg, wm, bm)))

        assert ad.grad_check(fn, p).max_rel_err < 1e-4

    def test_gated_sum_empty_inputs(self):
        p = ad.ModelParams()
        wg = p.add("wg", np.eye(3))
        bg = p.add("bg", np.zeros(3))
        wm = p.add("wm", np.eye(3))
        bm = p.add("bm", np.zeros(3))
        out = ad.gated_sum([], wg, bg, wm, bm)
        assert np.array_equal(out.value, np.zeros(3))


class TestAdam:
    def test_first_step_moves_by_lr(self):
        p = ad.ModelParams()
        w = p.add("w", [1.0, -1.0, 0.5])
        opt = ad.Adam(p, lr=0.05)
        # the (1 - 1e-6) lower bound needs |g| >= 1e-2, i.e. eps/|g| <= 1e-6
        loss = ad.sum_(ad.mul(w, ad.const([0.3, -2.0, 0.05])))
        ad.backward(loss)
        before = w.value.copy()
        opt.step()
        delta = np.abs(w.value - before)
        assert np.all(delta >= 0.05 * (1 - 1e-6)) and np.all(delta <= 0.05 + 1e-12)

    def test_zero_grad_leaves_parameter(self):
        p = ad.ModelParams()
        w = p.add("w", [2.0])
        opt = ad.Adam(p, lr=0.1)
        opt.step()  # no backward happened: grad treated as zero
        assert w.value.tolist() == [2.0]

    def test_descends_quadratic(self):
        p = ad.ModelParams()
        w = p.add("w", [5.0])
        opt = ad.Adam(p, lr=0.2)
        for _ in range(200):
            loss = ad.mul(w, w)
            ad.backward(ad.sum_(loss))
            opt.step()
            p.zero_grads()
        assert abs(w.value[0]) < 0.5


class TestModelParams:
    def test_duplicate_name_rejected(self):
        p = ad.ModelParams()
        p.add("w", [1.0])
        with pytest.raises(ValueError):
            p.add("w", [2.0])

    def test_copy_is_independent(self):
        p = ad.ModelParams()
        w = p.add("w", [1.0])
        q = p.copy()
        w.value[0] = 9.0
        assert q["w"].value.tolist() == [1.0]

    def test_load_values_shape_check(self):
        p = ad.ModelParams()
        p.add("w", [1.0, 2.0])
        q = ad.ModelParams()
        q.add("w", [[1.0, 2.0]])
        with pytest.raises(ValueError):
            p.load_values(q)


class TestCheckpoint:
    def test_bit_exact_roundtrip(self, tmp_path):
        rng = np.random.default_rng(8)
        p = ad.ModelParams()
        p.add("layer.W", rng.standard_normal((7, 3)))
        p.add("layer.b", rng.standard_normal(7))
        config = {"hidden": 7, "note": "roundtrip"}
        ad.save_params(str(tmp_path / "ckpt"), p, config)
        loaded, loaded_config = ad.load_params(str(tmp_path / "ckpt"))
        assert loaded_config == config
        assert loaded.names() == p.names()
        for name, v in p.items():
            assert loaded[name].value.tobytes() == v.value.tobytes()

    def test_truncated_bin_detected(self, tmp_path):
        p = ad.ModelParams()
        p.add("w", np.ones(4))
        ad.save_params(str(tmp_path / "ckpt"), p, {})
        bin_path = tmp_path / "ckpt" / "params.bin"
        bin_path.write_bytes(bin_path.read_bytes()[:-8])
        with pytest.raises(DataError):
            ad.load_params(str(tmp_path / "ckpt"))

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DataError):
            ad.load_params(str(tmp_path))
