import math

import numpy as np
import pytest

from faplearn import numeric as nm
from faplearn.numeric import (GradTape, InvalidDistribution, NonFiniteInput,
                              NonScalarLoss, Parameter, ShapeMismatch, Tensor,
                              backward, grad_check, load_checkpoint,
                              save_checkpoint)


class TestMatmul:
    def test_identity(self):
        b = Tensor([[1.0, 2.0], [3.0, 4.0]])
        out = nm.matmul(Tensor(np.eye(2)), b)
        assert np.array_equal(out.data, b.data)

    def test_small_product(self):
        out = nm.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
        assert out.data.tolist() == [[11.0]]

    def test_zero_matrix(self):
        out = nm.matmul(Tensor(np.zeros((2, 3))), Tensor(np.ones((3, 4))))
        assert not out.data.any()

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            nm.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_matmul_t_equals_transposed(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(4, 3)), rng.normal(size=(5, 3))
        assert np.allclose(nm.matmul_t(Tensor(a), Tensor(b)).data, a @ b.T)


class TestSoftmax:
    def test_symmetry(self):
        assert nm.softmax(Tensor([0.0, 0.0])).data.tolist() == [0.5, 0.5]

    def test_shift_invariance(self):
        for c in (-3.0, 0.0, 17.5):
            out = nm.softmax(Tensor([c, c, c, c]))
            assert np.allclose(out.data, 0.25, atol=1e-15)

    def test_large_logits_do_not_overflow(self):
        out = nm.softmax(Tensor([1000.0, 0.0]))
        assert np.isfinite(out.data).all()
        assert out.data[0] > 1 - 1e-12 and out.data[1] < 1e-12

    def test_unit_sum_and_positivity_random(self):
        rng = np.random.default_rng(42)
        for _ in range(200):
            n = rng.integers(1, 30)
            scale = rng.choice([1.0, 10.0, 1000.0])
            x = rng.normal(scale=scale, size=n)
            y = nm.softmax(Tensor(x)).data
            assert (y >= 0).all()
            if scale <= 10.0:  # magnitude-1000 gaps underflow exp to exact 0
                assert (y > 0).all()
            assert abs(y.sum() - 1.0) < 1e-12

    def test_non_finite_input(self):
        with pytest.raises(NonFiniteInput):
            nm.softmax(Tensor([np.nan, 0.0]))


class TestCrossEntropy:
    def test_one_hot_is_zero(self):
        q = Tensor([0.0, 1.0, 0.0])
        assert nm.cross_entropy(1, q).item() == 0.0

    def test_uniform_four(self):
        q = Tensor([0.25] * 4)
        assert abs(nm.cross_entropy(2, q).item() - math.log(4)) < 1e-12

    def test_half(self):
        q = Tensor([0.5, 0.5])
        assert abs(nm.cross_entropy(0, q).item() - 0.6931471805599453) < 1e-12

    def test_nonnegative_random(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            n = int(rng.integers(2, 10))
            q = rng.dirichlet(np.ones(n))
            assert nm.cross_entropy(int(rng.integers(n)), Tensor(q)).item() >= 0.0

    def test_invalid_distribution(self):
        with pytest.raises(InvalidDistribution):
            nm.cross_entropy(0, Tensor([0.9, 0.9]))
        with pytest.raises(InvalidDistribution):
            nm.cross_entropy(5, Tensor([0.5, 0.5]))

    def test_clamp_guards_log_zero(self):
        out = nm.cross_entropy(0, Tensor([0.0, 1.0]))
        assert np.isfinite(out.item())
        assert out.item() == pytest.approx(-math.log(1e-12))


class TestElementwise:
    def test_sigmoid_zero(self):
        assert nm.sigmoid(Tensor([0.0])).data[0] == 0.5

    def test_sigmoid_extremes_finite(self):
        y = nm.sigmoid(Tensor([-1000.0, 1000.0])).data
        assert y[0] == pytest.approx(0.0, abs=1e-300)
        assert y[1] == 1.0

    def test_tanh_zero(self):
        assert nm.tanh(Tensor([0.0])).data[0] == 0.0

    def test_add_zero(self):
        x = Tensor([1.5, -2.0])
        assert np.array_equal(nm.add(x, Tensor([0.0, 0.0])).data, x.data)

    def test_dispatcher(self):
        x = Tensor([0.0, 1.0])
        assert np.array_equal(nm.elementwise("one_minus", x).data, [1.0, 0.0])
        assert np.array_equal(nm.elementwise("mul", x, x).data, [0.0, 1.0])
        with pytest.raises(nm.NumericError):
            nm.elementwise("pow", x)

    def test_forward_determinism(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(5, 5))
        a = nm.tanh(nm.matmul(Tensor(x), Tensor(x))).data
        b = nm.tanh(nm.matmul(Tensor(x), Tensor(x))).data
        assert np.array_equal(a, b)


class TestBackward:
    def test_sum_gives_ones(self):
        p = Parameter(np.array([1.0, 2.0, 3.0]), "p")
        with GradTape() as tape:
            loss = nm.total_sum(p)
        backward(tape, loss)
        assert np.array_equal(p.grad.data, np.ones(3))

    def test_zero_scale_gives_zero_grads(self):
        p = Parameter(np.array([4.0, 5.0]), "p")
        with GradTape() as tape:
            loss = nm.scale(nm.total_sum(p), 0.0)
        backward(tape, loss)
        assert not p.grad.data.any()

    def test_double_backward_doubles(self):
        p = Parameter(np.array([[1.0, 2.0]]), "p")
        with GradTape() as tape:
            loss = nm.total_sum(nm.mul(p, p))
        backward(tape, loss)
        once = p.grad.data.copy()
        backward(tape, loss)
        assert np.array_equal(p.grad.data, 2 * once)

    def test_unreachable_parameter_untouched(self):
        p = Parameter(np.array([1.0]), "p")
        q = Parameter(np.array([1.0]), "q")
        with GradTape() as tape:
            loss = nm.total_sum(p)
        backward(tape, loss)
        assert not q.grad.data.any()

    def test_non_scalar_loss(self):
        p = Parameter(np.array([1.0, 2.0]), "p")
        with GradTape() as tape:
            out = nm.mul(p, p)
        with pytest.raises(NonScalarLoss):
            backward(tape, out)

    def test_two_layer_against_central_differences(self):
        # independent oracle: perturb each coordinate and difference the loss
        rng = np.random.default_rng(123)
        x = Tensor(rng.normal(size=(4, 3)))
        W1 = Parameter(rng.normal(size=(5, 3)) * 0.5, "W1")
        b1 = Parameter(rng.normal(size=5) * 0.1, "b1")
        W2 = Parameter(rng.normal(size=(2, 5)) * 0.5, "W2")
        b2 = Parameter(rng.normal(size=2) * 0.1, "b2")
        params = [W1, b1, W2, b2]

        def forward():
            h = nm.tanh(nm.add_bias(nm.matmul_t(x, W1), b1))
            out = nm.sigmoid(nm.add_bias(nm.matmul_t(h, W2), b2))
            return nm.total_sum(nm.mul(out, out))

        with GradTape() as tape:
            loss = forward()
        backward(tape, loss)

        eps = 1e-5
        for p in params:
            flat = p.value.data.reshape(-1)
            gflat = p.grad.data.reshape(-1)
            for c in range(flat.size):
                orig = flat[c]
                flat[c] = orig + eps
                f_plus = forward().item()
                flat[c] = orig - eps
                f_minus = forward().item()
                flat[c] = orig
                numeric = (f_plus - f_minus) / (2 * eps)
                assert abs(gflat[c] - numeric) <= 1e-4 * max(1.0, abs(numeric)), p.name

    def test_embed_scatter_gradient(self):
        table = Parameter(np.arange(8.0).reshape(4, 2), "emb")
        with GradTape() as tape:
            rows = nm.embed(table, np.array([1, 1, 3]))
            loss = nm.total_sum(rows)
        backward(tape, loss)
        expected = np.zeros((4, 2))
        expected[1] = 2.0
        expected[3] = 1.0
        assert np.array_equal(table.grad.data, expected)


class TestGradCheck:
    def test_quadratic(self):
        theta = Parameter(np.array([3.0]), "theta")

        def f():
            return nm.total_sum(nm.mul(theta, theta))

        report = grad_check(f, [theta], eps=1e-5, tol=1e-6)
        assert report.passed(1e-6)
        # analytic gradient is 6 at theta=3
        theta.zero_grad()
        with GradTape() as tape:
            loss = f()
        backward(tape, loss)
        assert theta.grad.data[0] == pytest.approx(6.0, abs=1e-8)

    def test_corrupted_rule_detected(self, monkeypatch):
        # negative control: break the sigmoid gradient rule
        monkeypatch.setattr(nm, "_sigmoid_grad", lambda g, y: g * y)
        theta = Parameter(np.array([0.3, -0.2]), "theta")

        def f():
            return nm.total_sum(nm.sigmoid(theta))

        report = grad_check(f, [theta], eps=1e-5)
        assert not report.passed(1e-4)

    def test_report_lists_all_params(self):
        a = Parameter(np.ones(3), "a")
        b = Parameter(np.ones((2, 2)), "b")

        def f():
            return nm.add(nm.total_sum(a), nm.total_sum(nm.mul(b, b)))

        report = grad_check(f, [a, b])
        assert {e.name for e in report.entries} == {"a", "b"}
        assert report.passed(1e-4)
        assert "overall" in report.summary()


class TestCheckpoint:
    def test_exact_round_trip(self, tmp_path):
        rng = np.random.default_rng(5)
        params = [
            Parameter(rng.normal(size=(3, 4)) * np.pi, "layer.W"),
            Parameter(rng.normal(size=7) / 3.0, "layer.b"),
        ]
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, params, {"hidden_dim": "7", "tag": "a b c"})
        manifest, arrays = load_checkpoint(path)
        assert manifest == {"hidden_dim": "7", "tag": "a b c"}
        for p in params:
            assert arrays[p.name].shape == p.value.data.shape
            assert np.array_equal(arrays[p.name], p.value.data)  # bit-exact

    def test_header_checked(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_text("not-a-checkpoint\n")
        with pytest.raises(nm.NumericError):
            load_checkpoint(path)

    def test_value_count_checked(self, tmp_path):
        path = tmp_path / "short.ckpt"
        path.write_text("faplearn-ckpt v1\nw 2 2\n1.0 2.0 3.0\n")
        with pytest.raises(nm.NumericError):
            load_checkpoint(path)
