import csv
import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from metaexo import autodiff as ad
from metaexo import meta as mt
from metaexo import tasknet as tn
from metaexo.dataset import synth_meta_dataset, synth_task_family
from metaexo.errors import NaNDetected

TINY = tn.MetaConfig(delta_t=3, latent_dim=8, channels=(4, 4), encoder_hidden=8, head_hidden=8,
                     encoder_resample_len=8, task_batch=2)


def scalar_params(theta):
    return ad.ParamSet({"theta": np.array(float(theta))})


def quad(c):
    """L(theta) = 0.5 (theta - c)^2."""
    return lambda p: ad.square(p["theta"] - c) * 0.5


def adapted_query(theta, c, alpha):
    t = theta - alpha * (theta - c)
    return 0.5 * (t - c) ** 2


class TestInnerAdapt:
    def test_one_step(self):
        out = mt.inner_adapt(scalar_params(0.0), quad(1.0), 0.1, 1)
        assert out["theta"].item() == pytest.approx(0.1, abs=1e-15)

    def test_five_steps(self):
        out = mt.inner_adapt(scalar_params(0.0), quad(1.0), 0.1, 5)
        assert out["theta"].item() == pytest.approx(1 - 0.9 ** 5, abs=1e-14)
        assert out["theta"].item() == pytest.approx(0.40951, abs=1e-12)

    def test_minimum_is_fixed(self):
        assert mt.inner_adapt(scalar_params(2.0), quad(2.0), 0.7, 3)["theta"].item() == 2.0

    def test_first_order_detaches(self):
        p = scalar_params(0.0)
        out = mt.inner_adapt(p, quad(1.0), 0.1, 1, second_order=False)
        (g,), _ = ad.grad(out["theta"] * 1.0, [p["theta"]])
        assert g.item() == 1.0   # the update is a constant shift

    def test_preconditions(self):
        with pytest.raises(ValueError):
            mt.inner_adapt(scalar_params(0.0), quad(1.0), 0.0, 1)
        with pytest.raises(ValueError):
            mt.inner_adapt(scalar_params(0.0), quad(1.0), 0.1, 0)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_nan_names_step(self):
        def loss(p):
            return ad.log(p["theta"] - 1.0)   # log of a negative number
        with pytest.raises(NaNDetected, match="step 0"):
            mt.inner_adapt(scalar_params(0.0), loss, 0.1, 2)


class TestMetaGradient:
    @given(st.floats(-3, 3), st.lists(st.floats(-3, 3), min_size=1, max_size=5), st.floats(0.01, 0.9))
    def test_quadratic_closed_form(self, theta, cs, alpha):
        tasks = [mt.TaskLoss(quad(c), quad(c)) for c in cs]
        g2, _, _ = mt.meta_gradient(scalar_params(theta), tasks, alpha, second_order=True)
        g1, _, _ = mt.meta_gradient(scalar_params(theta), tasks, alpha, second_order=False)
        expect2 = sum((1 - alpha) ** 2 * (theta - c) for c in cs)
        expect1 = sum((1 - alpha) * (theta - c) for c in cs)
        assert abs(g2["theta"].item() - expect2) < 1e-8
        assert abs(g1["theta"].item() - expect1) < 1e-8

    @given(st.floats(-3, 3), st.floats(-3, 3), st.floats(0.01, 0.9))
    def test_matches_finite_differences(self, theta, c, alpha):
        g, _, _ = mt.meta_gradient(scalar_params(theta), [mt.TaskLoss(quad(c), quad(c))], alpha)
        h = 1e-5
        fd = (adapted_query(theta + h, c, alpha) - adapted_query(theta - h, c, alpha)) / (2 * h)
        assert abs(g["theta"].item() - fd) < 1e-6

    def test_orders_differ_by_one_minus_alpha(self):
        alpha = 0.3
        tasks = [mt.TaskLoss(quad(1.5), quad(1.5))]
        g2 = mt.meta_gradient(scalar_params(0.2), tasks, alpha)[0]["theta"].item()
        g1 = mt.meta_gradient(scalar_params(0.2), tasks, alpha, second_order=False)[0]["theta"].item()
        assert g2 == pytest.approx((1 - alpha) * g1, rel=1e-14)

    def test_equal_centres_leave_theta(self):
        state = mt.MetaState(scalar_params(0.7))
        tasks = [mt.TaskLoss(quad(0.7), quad(0.7))] * 3
        new = mt.meta_step(state, tasks, 0.1, 0.01)
        assert new.params["theta"].item() == 0.7
        assert new.history == [0.0] and new.iteration == 1

    def test_empty_batch(self):
        with pytest.raises(ValueError):
            mt.meta_step(mt.MetaState(scalar_params(0.0)), [], 0.1, 0.01)

    def test_threads_reduce_in_order(self, rng):
        cs = rng.normal(size=6)
        tasks = [mt.TaskLoss(quad(c), quad(c + 0.1)) for c in cs]
        a = mt.meta_gradient(scalar_params(0.3), tasks, 0.2, workers=1)
        b = mt.meta_gradient(scalar_params(0.3), tasks, 0.2, workers=3)
        assert a[0]["theta"].item() == b[0]["theta"].item()
        assert a[1] == b[1]


@pytest.fixture(scope="module")
def small_meta():
    return synth_meta_dataset(4, 6, seed=3)


class TestMetaTrain:
    def test_rejects_zero_iterations(self, small_meta):
        with pytest.raises(ValueError):
            mt.meta_train(TINY, small_meta, 0)

    def test_bit_deterministic(self, small_meta):
        a = mt.meta_train(TINY, small_meta, 5, seed=1, max_windows=32)
        b = mt.meta_train(TINY, small_meta, 5, seed=1, max_windows=32)
        assert a.history == b.history
        np.testing.assert_array_equal(a.params.flatten(), b.params.flatten())

    def test_parallel_matches_serial(self, small_meta):
        a = mt.meta_train(TINY, small_meta, 4, seed=2, max_windows=32)
        b = mt.meta_train(TINY, small_meta, 4, seed=2, max_windows=32, workers=2)
        assert np.max(np.abs(np.subtract(a.history, b.history))) <= 1e-10

    def test_resume_continues_sequence(self, small_meta):
        full = mt.meta_train(TINY, small_meta, 4, seed=5, max_windows=32)
        half = mt.meta_train(TINY, small_meta, 2, seed=5, max_windows=32)
        rest = mt.meta_train(TINY, small_meta, 2, seed=5, max_windows=32, state=half)
        assert rest.history == full.history and rest.iteration == 4

    def test_smoothed_loss_decreases(self, small_meta):
        cfg = tn.MetaConfig(task_batch=2)
        state = mt.meta_train(cfg, small_meta, 150, seed=0, max_windows=64)
        s = mt.smoothed(state.history, 50)
        assert len(state.history) == state.iteration == 150
        assert s[-1] < s[0]

    def test_training_log(self, tmp_path, small_meta):
        state = mt.meta_train(TINY, small_meta, 3, seed=0, max_windows=16)
        path = tmp_path / "loss.csv"
        mt.write_training_log(path, state)
        rows = list(csv.reader(path.open()))
        assert rows[0] == ["iter", "mean_query_loss", "mean_support_loss"]
        assert [float(r[1]) for r in rows[1:]] == state.history


@pytest.fixture(scope="module")
def theta():
    return tn.init_params(TINY, 4)


class TestOnlineAdapt:
    def test_default_five_steps(self, theta):
        demo = synth_task_family("reach", None, n_traj=2, seed=0).trajectories[0]
        rep = mt.online_adapt(theta, demo, TINY)
        assert rep.steps == 5 == len(rep.losses)

    def test_zero_steps_is_identity(self, theta):
        demo = synth_task_family("reach", None, n_traj=2, seed=0).trajectories[0]
        rep = mt.online_adapt(theta, demo, TINY, steps=0)
        np.testing.assert_array_equal(rep.params.flatten(), theta.flatten())
        assert rep.losses == []

    def test_demo_loss_drops(self, theta):
        task = synth_task_family("lift_cycle", None, n_traj=3, seed=1)
        rep = mt.online_adapt(theta, task.trajectories[0], TINY, query=task.trajectories[1:])
        assert rep.losses[-1] < rep.pre_loss
        assert rep.query_post < rep.query_pre

    def test_report_json(self, tmp_path, theta):
        demo = synth_task_family("gesture", None, n_traj=2, seed=2).trajectories[0]
        rep = mt.online_adapt(theta, demo, TINY, steps=2)
        path = tmp_path / "r.json"
        rep.write_json(path, config={"alpha": TINY.alpha})
        data = json.loads(path.read_text())
        assert data["steps"] == 2 and len(data["losses"]) == 2 and data["config"] == {"alpha": 0.01}
