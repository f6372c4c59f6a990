import numpy as np
import pytest

from s5dscr.errors import DataError, NumericError
from s5dscr.hsdata import BandDataset, PatchPair, prepare_dataset, load_dataset, synth_cube
from s5dscr.model import ModelConfig, init_weights
from s5dscr.train import (
    AdamState,
    PlateauState,
    TrainConfig,
    adam_step,
    fit,
    load_checkpoint,
    plateau_step,
    train_epoch,
    validation_loss,
)

from oracles import scalar_adam_reference


class TestAdamStep:
    def test_first_step_moves_by_lr(self):
        params = {"w": np.array([0.0], dtype=np.float64)}
        grads = {"w": np.array([1.0], dtype=np.float64)}
        new, state = adam_step(params, grads, AdamState(lr=1e-3))
        assert state.t == 1
        assert new["w"][0] == pytest.approx(-1e-3, rel=1e-6)

    def test_zero_gradient_is_identity(self):
        params = {"w": np.array([0.7, -0.2], dtype=np.float32)}
        grads = {"w": np.zeros(2, dtype=np.float32)}
        new, _ = adam_step(params, grads, AdamState(lr=1e-3))
        np.testing.assert_array_equal(new["w"], params["w"])

    def test_quadratic_descent(self):
        theta = np.array([1.0], dtype=np.float64)
        state = AdamState(lr=0.1)
        for _ in range(100):
            grads = {"t": 2.0 * theta}
            new, state = adam_step({"t": theta}, grads, state)
            theta = new["t"]
        assert abs(theta[0]) < 0.05

    def test_matches_scalar_reference_trajectory(self):
        ref = scalar_adam_reference(1.0, lambda t: 2.0 * t, n_steps=50, lr=0.1)
        theta = np.array([1.0], dtype=np.float64)
        state = AdamState(lr=0.1)
        for step in range(50):
            new, state = adam_step({"t": theta}, {"t": 2.0 * theta}, state)
            theta = new["t"]
            assert theta[0] == pytest.approx(ref[step + 1], rel=1e-12)

    def test_non_finite_gradient_aborts(self):
        params = {"w": np.zeros(2)}
        grads = {"w": np.array([1.0, np.nan])}
        with pytest.raises(NumericError):
            adam_step(params, grads, AdamState())


class TestPlateauStep:
    def test_drop_at_fourth_call(self):
        state = PlateauState(current_lr=1e-3)
        lrs = []
        for loss in (0.5, 0.51, 0.50, 0.52):
            state = plateau_step(state, loss)
            lrs.append(state.current_lr)
        assert lrs == [1e-3, 1e-3, 1e-3, pytest.approx(1e-4)]
        assert state.epochs_since_improve == 0  # reset after the reduction

    def test_strictly_decreasing_never_drops(self):
        state = PlateauState(current_lr=1e-3)
        for loss in (0.5, 0.4, 0.3, 0.2, 0.1):
            state = plateau_step(state, loss)
        assert state.current_lr == 1e-3

    def test_min_lr_clamp(self):
        state = PlateauState(current_lr=1e-7)
        for _ in range(12):
            state = plateau_step(state, 1.0)
            state = plateau_step(state, 1.0)
            state = plateau_step(state, 1.0)
        assert state.current_lr == 1e-7

    def test_nan_loss_aborts(self):
        with pytest.raises(NumericError):
            plateau_step(PlateauState(current_lr=1e-3), float("nan"))

    def test_improvement_needs_relative_margin(self):
        state = PlateauState(current_lr=1e-3, rel_threshold=1e-4)
        state = plateau_step(state, 1.0)
        assert state.best_val == 1.0
        # within the threshold: counts as no improvement
        state = plateau_step(state, 1.0 - 1e-5)
        assert state.epochs_since_improve == 1


def tiny_patches(n=4, c=2, lr_hw=8, scale=4, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        hr = rng.random((c, lr_hw * scale, lr_hw * scale)).astype(np.float32)
        lr = rng.random((c, lr_hw, lr_hw)).astype(np.float32)
        out.append(PatchPair(lr=lr, hr=hr, tile_id=f"t{i}", offset=(0, 0)))
    return out


class TestTrainEpoch:
    def test_single_step_when_batch_covers_all(self):
        patches = tiny_patches(n=3)
        cfg = ModelConfig(channels=2, n_modules=1)
        tw = init_weights(cfg, seed=0).tensors(requires_grad=True)
        adam, _ = train_epoch(tw, AdamState(lr=1e-3), patches, batch_size=8,
                              rng=np.random.default_rng(0))
        assert adam.t == 1

    def test_deterministic_trajectory(self):
        patches = tiny_patches(n=6)
        cfg = ModelConfig(channels=2, n_modules=1)

        def run():
            tw = init_weights(cfg, seed=1).tensors(requires_grad=True)
            adam = AdamState(lr=1e-3)
            losses = []
            rng = np.random.default_rng(42)
            for _ in range(3):
                adam, loss = train_epoch(tw, adam, patches, batch_size=2, rng=rng)
                losses.append(loss)
            return losses

        assert run() == run()

    def test_overfit_one_batch(self):
        # standard harness sanity oracle: loss collapses on 4 fixed patches
        # with a real degradation relationship between lr and hr
        from s5dscr.resample import DegradationSpec, degrade
        from s5dscr.bands import Spectrometer

        spec = DegradationSpec.for_spectrometer(Spectrometer.UVIS)
        patches = []
        for i in range(4):
            hr = synth_cube(2, 32, 32, seed=100 + i, spatial_sigma=6.0).data
            patches.append(PatchPair(lr=degrade(hr, spec), hr=hr,
                                     tile_id=f"t{i}", offset=(0, 0)))
        cfg = ModelConfig(channels=2, n_modules=1)
        tw = init_weights(cfg, seed=0).tensors(requires_grad=True)
        adam = AdamState(lr=3e-3)
        rng = np.random.default_rng(7)
        first = None
        last = None
        for _ in range(200):
            adam, loss = train_epoch(tw, adam, patches, batch_size=4, rng=rng)
            if first is None:
                first = loss
            last = loss
        assert last < first / 100.0


def build_dataset(tmp_path, n_cubes=3, size=64, tile=32, lr_size=8, seed=0):
    cubes = [synth_cube(4, size, size, seed=seed + i) for i in range(n_cubes)]
    prepare_dataset(cubes, tmp_path / "ds", tile_h=tile, tile_w=tile, seed=seed,
                    lr_size=lr_size, lr_stride=lr_size)
    return load_dataset(tmp_path / "ds")


class TestFit:
    def test_zero_epochs_returns_initial_checkpoint(self, tmp_path):
        ds = build_dataset(tmp_path)
        cfg = ModelConfig(channels=4, n_modules=1)
        run = fit(ds, cfg, TrainConfig(max_epochs=0, seed=0), tmp_path / "run")
        assert run.history == []
        weights, _, _, epoch, _, _ = load_checkpoint(run.best_checkpoint)
        assert epoch == -1
        assert weights.config == cfg

    def test_loss_improves_and_history_written(self, tmp_path):
        ds = build_dataset(tmp_path)
        cfg = ModelConfig(channels=4, n_modules=1)
        run = fit(ds, cfg, TrainConfig(max_epochs=5, batch_size=8, seed=0), tmp_path / "run")
        assert len(run.history) == 5
        assert run.history[-1].val_loss < run.history[0].val_loss
        csv_path = tmp_path / "run" / "history.csv"
        assert csv_path.exists()
        lines = csv_path.read_text().strip().splitlines()
        assert lines[0] == "epoch,train_loss,val_loss,lr"
        assert len(lines) == 6

    def test_resume_reproduces_uninterrupted_run(self, tmp_path):
        ds = build_dataset(tmp_path)
        cfg = ModelConfig(channels=4, n_modules=1)
        tc2 = TrainConfig(max_epochs=2, batch_size=8, seed=3)
        full = fit(ds, cfg, tc2, tmp_path / "full")

        tc1 = TrainConfig(max_epochs=1, batch_size=8, seed=3)
        fit(ds, cfg, tc1, tmp_path / "part")
        resumed = fit(ds, cfg, tc2, tmp_path / "part2",
                      resume_from=tmp_path / "part" / "last")

        assert resumed.history[0].epoch == 1
        assert resumed.history[0].train_loss == full.history[1].train_loss
        assert resumed.history[0].val_loss == full.history[1].val_loss

        w_full, *_ = load_checkpoint(full.last_checkpoint)
        w_res, *_ = load_checkpoint(resumed.last_checkpoint)
        for name, arr in w_full.param_arrays().items():
            np.testing.assert_array_equal(w_res.param_arrays()[name], arr)

    def test_empty_split_rejected(self, tmp_path):
        ds = build_dataset(tmp_path)
        ds.patches["train"] = []
        with pytest.raises(DataError):
            fit(ds, ModelConfig(channels=4, n_modules=1), TrainConfig(max_epochs=1),
                tmp_path / "run")

    def test_lr_floor_stops_training(self, tmp_path):
        ds = build_dataset(tmp_path)
        cfg = ModelConfig(channels=4, n_modules=1)
        # immediate plateau: huge rel_threshold means nothing ever improves
        tc = TrainConfig(max_epochs=50, batch_size=8, seed=0, rel_threshold=0.999,
                         patience=1, stop_lr=1e-5)
        run = fit(ds, cfg, tc, tmp_path / "run")
        # first epoch sets best (inf -> finite counts as improvement), then
        # every epoch plateaus: lr 1e-3 -> 1e-4 -> 1e-5 -> 1e-6 < stop_lr
        assert len(run.history) < 50
        assert run.history[-1].lr <= 1e-5


class TestValidationLoss:
    def test_perfect_model_zero_loss(self):
        patches = tiny_patches(n=2)
        cfg = ModelConfig(channels=2, n_modules=1)
        tw = init_weights(cfg, seed=0).tensors(requires_grad=True)
        val = validation_loss(tw, patches, batch_size=2)
        assert val > 0.0
