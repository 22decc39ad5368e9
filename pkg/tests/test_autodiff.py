import threading

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from metaexo import autodiff as ad
from metaexo.errors import CheckpointError, NaNDetected, ShapeMismatch

from gradcheck import numeric_grad, random_graph, rel_err, scalar_fn

finite = st.floats(-3, 3, allow_nan=False)


def grad_of(build, x):
    t = ad.Tensor(x, requires_grad=True)
    (g,), _ = ad.grad(build(t), [t])
    return g.data


class TestPrimitives:
    def test_mul_add_values(self):
        x = ad.Tensor(3.0, requires_grad=True)
        y = ad.Tensor(4.0, requires_grad=True)
        f = x * y + x
        (gx, gy), _ = ad.grad(f, [x, y])
        assert f.item() == 15.0
        assert gx.item() == 5.0 and gy.item() == 3.0

    def test_cube_first_and_second_derivative(self):
        theta = ad.Tensor(1.5, requires_grad=True)
        (g,), _ = ad.grad(theta ** 3, [theta], create_graph=True)
        assert g.item() == pytest.approx(3 * 1.5 ** 2)
        (h,), _ = ad.grad(g, [theta])
        assert h.item() == pytest.approx(6 * 1.5)

    @pytest.mark.parametrize("name", ["tanh", "sigmoid", "exp", "softplus", "square", "relu"])
    def test_unary_against_finite_differences(self, name, rng):
        x = rng.normal(size=(4, 3))
        x[np.abs(x) < 1e-3] = 0.1   # keep away from the relu kink
        op = getattr(ad, name)

        def build(t):
            return ad.sum_(op(t) * ad.Tensor(np.arange(12.0).reshape(4, 3)))

        assert rel_err(grad_of(build, x), numeric_grad(scalar_fn(build), x)) < 1e-7

    def test_log_and_div(self, rng):
        x = rng.uniform(0.5, 2.0, size=5)

        def build(t):
            return ad.sum_(ad.log(t) / (t + 1.0))

        assert rel_err(grad_of(build, x), numeric_grad(scalar_fn(build), x)) < 1e-7

    def test_matmul_gradient(self, rng):
        a = rng.normal(size=(3, 4))
        b = ad.Tensor(rng.normal(size=(4, 2)))

        def build(t):
            return ad.sum_(ad.tanh(ad.matmul(t, b)))

        assert rel_err(grad_of(build, a), numeric_grad(scalar_fn(build), a)) < 1e-7

    def test_getitem_fancy_index_accumulates(self):
        x = ad.Tensor(np.arange(4.0), requires_grad=True)
        y = ad.getitem(x, np.array([0, 0, 3]))
        (g,), _ = ad.grad(ad.sum_(y), [x])
        np.testing.assert_array_equal(g.data, [2.0, 0.0, 0.0, 1.0])

    def test_broadcast_to_sums_back(self):
        x = ad.Tensor(np.ones((1, 3)), requires_grad=True)
        (g,), _ = ad.grad(ad.sum_(ad.broadcast_to(x, (4, 3))), [x])
        np.testing.assert_array_equal(g.data, 4 * np.ones((1, 3)))

    def test_shapes_must_match(self):
        with pytest.raises(ShapeMismatch):
            ad.add(ad.Tensor(np.ones(3)), ad.Tensor(np.ones(4)))
        with pytest.raises(ShapeMismatch):
            ad.matmul(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((2, 3))))

    def test_scalar_broadcasting_is_allowed(self):
        x = ad.Tensor(np.ones(3), requires_grad=True)
        (g,), _ = ad.grad(ad.sum_(x * 2.0 + 1.0), [x])
        np.testing.assert_array_equal(g.data, [2.0, 2.0, 2.0])


class TestConv:
    def test_valid_example(self):
        out = ad.conv1d_dilated(ad.Tensor([[1.0, 2, 3, 4]]), ad.Tensor([[[1.0, 1.0]]]), 2, "valid")
        np.testing.assert_array_equal(out.data, [[4.0, 6.0]])

    def test_unit_kernel_is_identity(self, rng):
        x = rng.normal(size=(1, 7))
        out = ad.conv1d_dilated(ad.Tensor(x), ad.Tensor(np.ones((1, 1, 1))), 1, "valid")
        np.testing.assert_array_equal(out.data, x)

    def test_causal_dilated_example(self):
        out = ad.conv1d_dilated(ad.Tensor([[1.0, 2, 3, 4]]), ad.Tensor([[[1.0, 1.0]]]), 2, "causal")
        np.testing.assert_array_equal(out.data, [[1.0, 2.0, 4.0, 6.0]])

    def test_matches_direct_loop(self, rng):
        x = rng.normal(size=(2, 3, 10))
        w = rng.normal(size=(4, 3, 3))
        d = 2
        out = ad.conv1d_dilated(ad.Tensor(x), ad.Tensor(w), d, "causal").data
        xp = np.concatenate([np.zeros((2, 3, 4)), x], axis=2)
        ref = np.zeros((2, 4, 10))
        for t in range(10):
            for j in range(3):
                ref[:, :, t] += np.einsum("oc,bc->bo", w[:, :, j], xp[:, :, t + j * d])
        np.testing.assert_allclose(out, ref, atol=1e-12)

    def test_causality(self, rng):
        x = rng.normal(size=(1, 2, 12))
        w = ad.Tensor(rng.normal(size=(3, 2, 3)))
        a = ad.conv1d_dilated(ad.Tensor(x), w, 2).data
        x2 = x.copy()
        x2[..., 7:] += 5.0
        b = ad.conv1d_dilated(ad.Tensor(x2), w, 2).data
        np.testing.assert_array_equal(a[..., :7], b[..., :7])

    def test_gradients(self, rng):
        x = ad.Tensor(rng.normal(size=(2, 2, 8)))
        w0 = rng.normal(size=(3, 2, 3))

        def build(w):
            return ad.sum_(ad.tanh(ad.conv1d_dilated(x, w, 2)))

        assert rel_err(grad_of(build, w0), numeric_grad(scalar_fn(build), w0)) < 1e-7

    def test_too_short_input(self):
        with pytest.raises(ShapeMismatch):
            ad.conv1d_dilated(ad.Tensor(np.ones((1, 3))), ad.Tensor(np.ones((1, 1, 3))), 2, "valid")


class TestGraphAndModes:
    def test_disconnected_inputs_get_zero(self):
        x = ad.Tensor(np.ones(2), requires_grad=True)
        y = ad.Tensor(np.ones(3), requires_grad=True)
        grads, missing = ad.grad(ad.sum_(x * 3.0), [x, y])
        assert missing == [1]
        np.testing.assert_array_equal(grads[1].data, np.zeros(3))

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_nan_loss_raises(self):
        x = ad.Tensor(np.array([-1.0]), requires_grad=True)
        with pytest.raises(NaNDetected):
            ad.grad(ad.sum_(ad.log(x)), [x])

    def test_no_grad_records_nothing(self):
        x = ad.Tensor(2.0, requires_grad=True)
        with ad.no_grad():
            y = ad.tanh(x * x)
        assert not y.requires_grad and y.is_leaf

    def test_grad_mode_is_thread_local(self):
        seen = []
        with ad.no_grad():
            t = threading.Thread(target=lambda: seen.append(ad.is_grad_enabled()))
            t.start()
            t.join()
            assert not ad.is_grad_enabled()
        assert seen == [True]

    def test_topological_order(self):
        x = ad.Tensor(1.0, requires_grad=True)
        a = ad.tanh(x)
        b = a * a
        order = ad.graph_of(b)
        assert order.index(x) < order.index(a) < order.index(b)


class TestRandomGraphs:
    @given(st.integers(0, 10_000))
    def test_first_order(self, seed):
        rng = np.random.default_rng(seed)
        build = random_graph(rng)
        x = rng.normal(size=(3, 3))
        assert rel_err(grad_of(build, x), numeric_grad(scalar_fn(build), x)) < 1e-5

    @given(st.integers(0, 10_000))
    def test_hessian_vector_product(self, seed):
        rng = np.random.default_rng(seed)
        build = random_graph(rng)
        x0 = rng.normal(size=(3, 3))
        v = rng.normal(size=(3, 3))

        def gv(x):
            return float(np.sum(grad_of(build, x) * v))

        t = ad.Tensor(x0, requires_grad=True)
        (g,), _ = ad.grad(build(t), [t], create_graph=True)
        (hv,), _ = ad.grad(ad.sum_(g * ad.Tensor(v)), [t])
        assert rel_err(hv.data, numeric_grad(gv, x0, h=1e-5)) < 1e-4


class TestParamsAndOptim:
    def test_flatten_roundtrip(self, rng):
        p = ad.ParamSet({"a": rng.normal(size=(2, 3)), "b": rng.normal(size=4)})
        q = p.unflatten(p.flatten())
        for k in p:
            np.testing.assert_array_equal(p[k].data, q[k].data)

    def test_sgd_step(self):
        p = ad.ParamSet({"w": np.array([1.0, 2.0])})
        g = ad.ParamSet({"w": np.array([0.5, -1.0])})
        np.testing.assert_allclose(ad.sgd_step(p, g, 0.1)["w"].data, [0.95, 2.1])

    def test_adam_first_step_is_lr_sign(self):
        p = ad.ParamSet({"w": np.array([1.0, -1.0, 0.0])})
        g = ad.ParamSet({"w": np.array([3.0, -0.2, 0.0])})
        _, new = ad.adam_step(ad.AdamState(), p, g, 0.01)
        np.testing.assert_allclose(new["w"].data, [0.99, -0.99, 0.0], atol=1e-6)

    def test_adam_minimizes_quadratic(self):
        p = ad.ParamSet({"w": np.array([3.0, -2.0])})
        state = ad.AdamState()
        for _ in range(2000):
            w = p["w"]
            g = ad.backward(ad.sum_(ad.square(w - 1.0)), p)
            state, p = ad.adam_step(state, p, g, 0.05)
        np.testing.assert_allclose(p["w"].data, [1.0, 1.0], atol=1e-3)

    def test_checkpoint_roundtrip(self, tmp_path, rng):
        p = ad.ParamSet({"a": rng.normal(size=(2, 3)), "b": rng.normal(size=1)})
        path = tmp_path / "c.json"
        ad.save_checkpoint(path, p, {"k": 1}, {"note": "x"})
        q, cfg, extra = ad.load_checkpoint(path, expected_shapes={"a": (2, 3), "b": (1,)})
        assert cfg == {"k": 1} and extra == {"note": "x"}
        for k in p:
            np.testing.assert_array_equal(p[k].data, q[k].data)

    def test_checkpoint_rejects_wrong_version_and_shape(self, tmp_path):
        path = tmp_path / "c.json"
        ad.save_checkpoint(path, ad.ParamSet({"a": np.zeros(2)}))
        with pytest.raises(CheckpointError):
            ad.load_checkpoint(path, expected_shapes={"a": (3,)})
        path.write_text(path.read_text().replace('"version": 1', '"version": 99'))
        with pytest.raises(CheckpointError):
            ad.load_checkpoint(path)

    @given(hnp.arrays(np.float64, st.integers(1, 6), elements=finite))
    def test_sum_gradient_is_ones(self, x):
        np.testing.assert_array_equal(grad_of(ad.sum_, x), np.ones_like(x))
