"""Tests for the optimizer, loss, schedule, and the training loop."""

from types import SimpleNamespace

import numpy as np
import pytest

from flowinfer.autodiff import RngState, Tensor
from flowinfer.model import PosteriorModel
from flowinfer.nets import ParameterStore
from flowinfer.train import (
    Adam,
    TrainingConfig,
    TrainingDivergedError,
    TrainingHistory,
    TrainState,
    clip_gradients,
    evaluate_loss,
    joint_loss,
    train,
)


def toy_dataset(n_train=300, n_val=60, dim=2, k=3, noise=0.1, seed=0):
    """Linear-Gaussian pairs: theta ~ N(0, I), u = G theta + eps."""
    rng = RngState(seed)
    G = rng.normal((k, dim))
    theta = rng.normal((n_train + n_val, dim))
    u = theta @ G.T + noise * rng.normal((n_train + n_val, k))
    obs = u[:, :, None]  # (M, k, 1): one synthetic sensor
    return SimpleNamespace(
        train_theta=theta[:n_train], train_obs=obs[:n_train],
        val_theta=theta[n_train:], val_obs=obs[n_train:], G=G)


def toy_model(dim=2, k=3, seed=0, hidden=(32,), dropout=0.0):
    return PosteriorModel.build(
        dim, 1, summary={"type": "flatten", "k": k, "n_sensors": 1},
        n_affine=2, n_spline=2, hidden=hidden, dropout=dropout, seed=seed)


class TestAdam:
    def test_first_step_matches_closed_form(self):
        store = ParameterStore()
        store.create("w", np.array([1.0, -2.0]))
        opt = Adam(store)
        g = np.array([0.5, -0.25])
        opt.step({"w": Tensor(g)}, lr=0.1)
        # bias-corrected first step reduces to lr * g / (|g| + eps)
        expected = np.array([1.0, -2.0]) - 0.1 * g / (np.abs(g) + 1e-8)
        np.testing.assert_allclose(store["w"].data, expected, atol=1e-12)

    def test_zero_gradient_leaves_parameters_unchanged(self):
        store = ParameterStore()
        store.create("w", np.array([3.0, 4.0]))
        opt = Adam(store)
        before = store["w"].data.copy()
        for _ in range(5):
            opt.step({"w": Tensor(np.zeros(2))}, lr=0.1)
        assert np.array_equal(store["w"].data, before)

    def test_minimizes_quadratic(self):
        store = ParameterStore()
        store.create("w", np.array([5.0, -3.0]))
        opt = Adam(store)
        target = np.array([1.0, 2.0])
        for _ in range(800):
            g = store["w"].data - target
            opt.step({"w": Tensor(g)}, lr=0.05)
        np.testing.assert_allclose(store["w"].data, target, atol=1e-3)


class TestClipping:
    def test_norm_capped_exactly(self):
        grads = {"a": Tensor(np.full(4, 10.0)), "b": Tensor(np.full(9, 10.0))}
        raw = clip_gradients(grads, 10.0)
        assert raw == pytest.approx(np.sqrt(13) * 10.0)
        clipped = np.sqrt(sum(np.sum(g.data ** 2) for g in grads.values()))
        assert clipped == pytest.approx(10.0)

    def test_small_gradients_untouched(self):
        g = np.array([0.1, -0.2])
        grads = {"a": Tensor(g)}
        clip_gradients(grads, 10.0)
        assert np.array_equal(grads["a"].data, g)


class TestSchedule:
    def test_staircase_values_exact(self):
        cfg = TrainingConfig(epochs=400, lr=1e-3, lr_decay=0.95)
        assert cfg.decay_interval() == 4
        assert cfg.lr_at(0) == 1e-3
        assert cfg.lr_at(3) == 1e-3
        assert cfg.lr_at(4) == 1e-3 * 0.95
        assert cfg.lr_at(399) == 1e-3 * 0.95 ** 99

    def test_short_runs_decay_every_epoch(self):
        cfg = TrainingConfig(epochs=50)
        assert cfg.decay_interval() == 1
        assert cfg.lr_at(10) == 1e-3 * 0.95 ** 10

    def test_explicit_interval_wins(self):
        cfg = TrainingConfig(epochs=1000, decay_every=7)
        assert cfg.lr_at(14) == 1e-3 * 0.95 ** 2


class TestJointLoss:
    def test_identity_initialized_model_starts_at_half_dim(self):
        data = toy_dataset()
        model = toy_model()
        model.fit_standardizers(data.train_theta, data.train_obs)
        loss, per = joint_loss(model, data.train_theta, data.train_obs,
                               return_per_sample=True)
        assert loss.item() == pytest.approx(model.dim / 2, abs=1e-9)
        assert per.shape == (300,)

    def test_non_finite_sample_is_named(self):
        data = toy_dataset()
        model = toy_model()
        model.fit_standardizers(data.train_theta, data.train_obs)
        theta = data.train_theta[:4].copy()
        obs = data.train_obs[:4].copy()
        obs[2] = np.nan
        with pytest.raises(Exception, match="non-finite"):
            joint_loss(model, theta, obs)

    def test_evaluate_loss_batching_invariant(self):
        data = toy_dataset()
        model = toy_model()
        model.fit_standardizers(data.train_theta, data.train_obs)
        full = evaluate_loss(model, data.val_theta, data.val_obs, batch_size=512)
        split = evaluate_loss(model, data.val_theta, data.val_obs, batch_size=7)
        assert full == pytest.approx(split, abs=1e-12)


class TestTrainingLoop:
    def test_loss_decreases_on_toy_problem(self):
        data = toy_dataset()
        model = toy_model()
        cfg = TrainingConfig(epochs=40, batch_size=64, patience=1000, seed=1)
        history = train(model, data, cfg)
        assert history.rows[0][2] > history.best_val + 0.4
        assert history.best_epoch >= 0

    def test_best_epoch_parameters_restored(self):
        data = toy_dataset()
        model = toy_model()
        cfg = TrainingConfig(epochs=12, batch_size=64, patience=1000, seed=2)
        snapshots = {}
        history = train(model, data, cfg)
        # retrain and capture the parameter vector at the best epoch
        model2 = toy_model()
        for epoch_limit in (history.best_epoch + 1,):
            cfg2 = TrainingConfig(epochs=epoch_limit, batch_size=64,
                                  patience=1000, seed=2)
            train(model2, data, cfg2)
            snapshots[epoch_limit] = model2.store.flatten()
        np.testing.assert_array_equal(model.store.flatten(),
                                      snapshots[history.best_epoch + 1])

    def test_early_stopping_with_frozen_learning(self):
        data = toy_dataset()
        model = toy_model()
        cfg = TrainingConfig(epochs=100, batch_size=64, lr=0.0, patience=3,
                             seed=3)
        history = train(model, data, cfg)
        assert history.stopped_early
        assert len(history.rows) == 4  # epoch 0 best, then patience epochs
        assert history.best_epoch == 0

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_validation_aborts_with_context(self):
        data = toy_dataset()
        data.val_obs = data.val_obs.copy()
        data.val_obs[10] = np.nan
        model = toy_model()
        cfg = TrainingConfig(epochs=50, batch_size=64, patience=1000, seed=4)
        with pytest.raises(TrainingDivergedError, match="not finite"):
            train(model, data, cfg)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_training_batch_aborts_with_context(self):
        data = toy_dataset()
        data.train_obs = data.train_obs.copy()
        data.train_obs[50] = np.inf
        model = toy_model()
        cfg = TrainingConfig(epochs=50, batch_size=64, patience=1000, seed=4)
        with pytest.raises(TrainingDivergedError, match="best epoch"):
            train(model, data, cfg)

    def test_training_is_deterministic(self):
        data = toy_dataset()
        runs = []
        for _ in range(2):
            model = toy_model(dropout=0.3)
            cfg = TrainingConfig(epochs=5, batch_size=64, patience=1000, seed=5)
            history = train(model, data, cfg)
            runs.append((model.store.flatten(),
                         [(r[0], r[1], r[2], r[3]) for r in history.rows]))
        np.testing.assert_array_equal(runs[0][0], runs[1][0])
        assert runs[0][1] == runs[1][1]

    def test_history_csv(self, tmp_path):
        history = TrainingHistory()
        history.append(0, 1.5, 2.5, 1e-3, 0.1)
        history.append(1, 1.25, 2.25, 1e-3, 0.1)
        path = tmp_path / "history.csv"
        history.to_csv(path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "epoch,train_loss,val_loss,lr,seconds"
        assert len(lines) == 3
        assert lines[1].startswith("0,1.5,2.5,0.001,")

    def test_sparse_validation_cadence(self):
        data = toy_dataset()
        model = toy_model()
        cfg = TrainingConfig(epochs=7, batch_size=64, patience=1000, seed=6,
                             val_every=3)
        history = train(model, data, cfg)
        vals = [row[2] for row in history.rows]
        assert np.isnan(vals[0]) and np.isnan(vals[1])
        assert np.isfinite(vals[2]) and np.isfinite(vals[5])
        assert np.isnan(vals[3]) and np.isnan(vals[4])
        assert np.isfinite(vals[6])  # the last epoch always validates
        assert history.best_epoch in (2, 5, 6)


class TestResume:
    def cfg(self, epochs, **kw):
        args = dict(epochs=epochs, batch_size=64, patience=1000, seed=7,
                    decay_every=2)
        args.update(kw)
        return TrainingConfig(**args)

    def test_resumed_run_matches_uninterrupted_run(self):
        data = toy_dataset()
        straight = toy_model(seed=3)
        full = train(straight, data, self.cfg(6))

        resumed = toy_model(seed=3)
        part1 = train(resumed, data, self.cfg(3))
        part2 = train(resumed, data, self.cfg(6), resume=part1.final_state)

        assert [r[0] for r in part2.rows] == [3, 4, 5]
        for row, expected in zip(part2.rows, full.rows[3:]):
            assert row[1] == expected[1]  # identical next-epoch train loss
            assert row[2] == expected[2]
        np.testing.assert_array_equal(resumed.store.flatten(),
                                      straight.store.flatten())
        assert part2.best_epoch == full.best_epoch

    def test_state_survives_file_roundtrip(self, tmp_path):
        data = toy_dataset()
        model = toy_model(seed=4)
        history = train(model, data, self.cfg(3))
        state = history.final_state
        path = tmp_path / "state.nfts"
        state.save(path)
        back = TrainState.load(path)
        assert back.next_epoch == state.next_epoch
        assert back.adam_t == state.adam_t
        assert back.best_epoch == state.best_epoch
        assert back.best_val == state.best_val
        for name in ("adam_m", "adam_v", "last_params", "best_params"):
            np.testing.assert_array_equal(getattr(back, name),
                                          getattr(state, name))

    def test_state_file_validation(self, tmp_path):
        path = tmp_path / "state.nfts"
        path.write_bytes(b"JUNKJUNKJUNK")
        with pytest.raises(ValueError, match="training-state"):
            TrainState.load(path)

    def test_checkpoint_callback_cadence(self):
        data = toy_dataset()
        model = toy_model(seed=5)
        seen = []
        cfg = self.cfg(5, checkpoint_every=2)
        train(model, data, cfg,
              checkpoint_callback=lambda st, hist: seen.append(st.next_epoch))
        assert seen == [2, 4]


class TestConvergence:
    def test_validation_loss_crosses_half_way_to_analytic_floor(self):
        # the ideal model recovers the exact linear-Gaussian posterior;
        # its loss on standardized parameters is dim/2 plus half the
        # log-determinant of the standardized posterior covariance
        noise = 0.3
        data = toy_dataset(noise=noise)
        model = toy_model(seed=1)
        model.fit_standardizers(data.train_theta, data.train_obs)
        initial = evaluate_loss(model, data.val_theta, data.val_obs)

        post_cov = np.linalg.inv(np.eye(2) + data.G.T @ data.G / noise ** 2)
        D = np.diag(1.0 / data.train_theta.std(axis=0))
        floor = 1.0 + 0.5 * np.linalg.slogdet(D @ post_cov @ D)[1]
        assert initial > floor

        fresh = toy_model(seed=1)
        cfg = TrainingConfig(epochs=200, batch_size=60, patience=500, seed=5)
        history = train(fresh, data, cfg)
        assert history.best_val <= initial - 0.5 * (initial - floor)
