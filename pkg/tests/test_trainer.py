"""Optimizer step, plateau schedule, checkpoints and the training loop."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cagnet.data import synth_sample
from cagnet.model import CagnetConfig, build
from cagnet.tensor import Tensor
from cagnet.trainer import (Checkpoint, CheckpointError, TrainConfig, TrainingDiverged,
                            plateau_schedule, restore, sgd_step, snapshot, train)

SMALL = CagnetConfig(backbone="toy", toy_width=4, n_f=2)


def reference_schedule(history, lr0, patience, factor):
    """Independent restatement: walk epochs, track epochs since the last new best."""
    lr, best, since = lr0, None, 0
    for i, loss in enumerate(history):
        if best is None or loss < best:
            best, since = loss, 0
            continue
        since += 1
        if since == patience:
            lr *= factor
            since = 0
    return lr


@pytest.fixture
def tiny_dataset():
    return [synth_sample(32, np.random.default_rng([5, i])) for i in range(6)]


class TestSgd:
    def test_two_step_recursion(self):
        theta, v = {"w": np.zeros(3)}, {"w": np.zeros(3)}
        g = {"w": np.ones(3)}
        sgd_step(theta, g, v, 0.1, 0.9)
        np.testing.assert_allclose(theta["w"], -0.1)
        sgd_step(theta, g, v, 0.1, 0.9)
        np.testing.assert_allclose(theta["w"], -0.29)

    def test_zero_gradient(self):
        theta, v = {"w": np.arange(3.0)}, {"w": np.zeros(3)}
        sgd_step(theta, {"w": np.zeros(3)}, v, 0.5, 0.9)
        np.testing.assert_array_equal(theta["w"], np.arange(3.0))

    def test_plain_descent(self, rng):
        w0, g = rng.normal(size=4), rng.normal(size=4)
        theta, v = {"w": w0.copy()}, {"w": np.zeros(4)}
        sgd_step(theta, {"w": g}, v, 0.01, 0.0)
        np.testing.assert_allclose(theta["w"], w0 - 0.01 * g)

    def test_zero_lr(self, rng):
        w0 = rng.normal(size=4)
        theta, v = {"w": w0.copy()}, {"w": np.zeros(4)}
        sgd_step(theta, {"w": rng.normal(size=4)}, v, 0.0, 0.9)
        np.testing.assert_array_equal(theta["w"], w0)

    def test_key_mismatch_named(self):
        with pytest.raises(KeyError, match="ghost"):
            sgd_step({"w": np.zeros(1)}, {"ghost": np.zeros(1)}, {"w": np.zeros(1)}, 0.1, 0.9)


class TestPlateau:
    def test_decreasing(self):
        assert plateau_schedule(list(range(30, 0, -1))) == 8e-3

    def test_ten_stale_epochs(self):
        # first epoch sets the best; ten more without a strict improvement
        assert plateau_schedule([1.0] * 10) == 8e-3
        assert plateau_schedule([1.0] * 11) == pytest.approx(8e-4)

    def test_twenty_stale_epochs(self):
        assert plateau_schedule([1.0] * 21) == pytest.approx(8e-5)

    def test_improvement_resets(self):
        hist = [1.0] * 9 + [0.5] + [0.5] * 9
        assert plateau_schedule(hist) == 8e-3

    def test_empty(self):
        with pytest.raises(ValueError):
            plateau_schedule([])

    @settings(max_examples=60, deadline=None)
    @given(hist=st.lists(st.sampled_from([1.0, 0.9, 0.8, 0.7, 1.1]), min_size=1, max_size=60),
           patience=st.integers(1, 6))
    def test_matches_reference(self, hist, patience):
        assert plateau_schedule(hist, 8e-3, patience, 0.1) == pytest.approx(
            reference_schedule(hist, 8e-3, patience, 0.1), rel=1e-12)

    @pytest.mark.parametrize("bad", [dict(lr0=0), dict(momentum=1.0), dict(plateau_patience=0),
                                     dict(input_size=40)])
    def test_config_validation(self, bad):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


class TestCheckpoint:
    def test_roundtrip_and_bit_exact_forward(self, tmp_path, rng):
        model = build(SMALL.replace(seed=4))
        for _, p in model.named_parameters():
            p.data += rng.normal(size=p.shape) * 0.01
        vel = {n: rng.normal(size=p.shape) for n, p in model.named_parameters()}
        ck = snapshot(model, vel, epoch=3, history=[1.5, 1.25, 1.0],
                      rng_state={"k": 1}, train_config=TrainConfig(epochs=9))
        ck.save(tmp_path / "m.ck")
        back = Checkpoint.load(tmp_path / "m.ck")
        assert back.config == ck.config and back.epoch == 3 and back.history == ck.history
        assert back.train_config == ck.train_config and back.rng_state == {"k": 1}
        for group in ("params", "velocities", "buffers"):
            a, b = getattr(ck, group), getattr(back, group)
            assert a.keys() == b.keys()
            assert all(a[k].tobytes() == b[k].tobytes() for k in a)
        assert back.to_bytes() == ck.to_bytes()
        x = Tensor(rng.normal(size=(2, 3, 32, 32)))
        m2 = restore(back)
        assert model(x).data.tobytes() == m2(x).data.tobytes()

    def test_bad_magic(self):
        with pytest.raises(CheckpointError, match="magic"):
            Checkpoint.from_bytes(b"NOTACKPT" + bytes(20))

    def test_bad_version(self):
        ck = snapshot(build(SMALL), {n: np.zeros(p.shape) for n, p in build(SMALL).named_parameters()})
        raw = bytearray(ck.to_bytes())
        raw[8] = 9
        with pytest.raises(CheckpointError, match="version"):
            Checkpoint.from_bytes(bytes(raw))

    def test_truncated(self):
        model = build(SMALL)
        raw = snapshot(model, {n: np.zeros(p.shape) for n, p in model.named_parameters()}).to_bytes()
        with pytest.raises(CheckpointError, match="truncated"):
            Checkpoint.from_bytes(raw[:-8])

    def test_config_mismatch(self):
        model = build(SMALL)
        ck = snapshot(model, {n: np.zeros(p.shape) for n, p in model.named_parameters()})
        ck.config = SMALL.replace(use_rrm=False)
        with pytest.raises(CheckpointError):
            restore(ck)


class TestTrain:
    def test_zero_epochs_is_init(self, tiny_dataset, tmp_path):
        model = build(SMALL)
        init = {n: p.data.copy() for n, p in model.named_parameters()}
        res = train(model, tiny_dataset, TrainConfig(epochs=0, input_size=32), out=tmp_path / "c")
        assert res.checkpoint.epoch == 0 and res.log == []
        for n, arr in Checkpoint.load(tmp_path / "c").params.items():
            np.testing.assert_array_equal(arr, init[n])

    def test_deterministic(self, tiny_dataset, tmp_path):
        cfg = TrainConfig(epochs=2, batch_size=3, input_size=32, seed=11)
        runs = []
        for k in range(2):
            out, logp = tmp_path / f"c{k}", tmp_path / f"l{k}"
            train(build(SMALL), tiny_dataset, cfg, out=out, log_path=logp)
            runs.append((out.read_bytes(), logp.read_bytes()))
        assert runs[0] == runs[1]
        lines = runs[0][1].decode().splitlines()
        assert len(lines) == 2 and lines[0].startswith("epoch 1 loss ") and " lr " in lines[0]
        assert " mae " in lines[0]

    def test_seed_changes_run(self, tiny_dataset):
        a = train(build(SMALL), tiny_dataset, TrainConfig(epochs=1, input_size=32, seed=0))
        b = train(build(SMALL), tiny_dataset, TrainConfig(epochs=1, input_size=32, seed=1))
        assert a.log != b.log

    def test_loss_decreases(self, tiny_dataset):
        res = train(build(SMALL.replace(norm="none")), tiny_dataset,
                    TrainConfig(epochs=6, batch_size=2, input_size=32, augment=False))
        hist = res.checkpoint.history
        assert hist[-1] < hist[0]

    def test_divergence_keeps_last_good(self, tiny_dataset, tmp_path):
        model = build(SMALL)
        out = tmp_path / "c"
        seen = []

        def sabotage(epoch, line):
            seen.append(epoch)
            model.head.weight.data[...] = np.nan

        with pytest.raises(TrainingDiverged):
            train(model, tiny_dataset, TrainConfig(epochs=3, input_size=32), out=out,
                  on_epoch=sabotage)
        ck = Checkpoint.load(out)
        assert ck.epoch == 1 and all(np.all(np.isfinite(a)) for a in ck.params.values())

    def test_rejects_bad_inputs(self, tiny_dataset):
        with pytest.raises(ValueError):
            train(build(SMALL), [], TrainConfig(epochs=1))
        odd = [synth_sample(32, np.random.default_rng(0))]
        odd[0].image.pixels = odd[0].image.pixels[:30, :30]
        odd[0].mask.pixels = odd[0].mask.pixels[:30, :30]
        with pytest.raises(ValueError):
            train(build(SMALL), odd, TrainConfig(epochs=1))
