import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from finedust import features as feat
from finedust.features import WindowedDataset
from finedust.ingest import ObservationTable
from finedust.loss import mse_grad, mse_loss
from finedust.net import load_checkpoint
from finedust.train import (
    AdamMoments,
    EarlyStopping,
    ModelRegistry,
    TrainConfig,
    TrainingDivergence,
    adam_step,
    sgd_step,
    train_all,
    train_station,
)

from conftest import START


def toy_dataset(n, T=5, D=6, seed=0, target=None):
    rng = np.random.default_rng(seed)
    x = rng.uniform(size=(n, T, D))
    y = np.full((n, 2), target) if target is not None else rng.uniform(size=(n, 2))
    return WindowedDataset(x, y, np.arange(T, T + n), START, 0)


class TestLoss:
    def test_zero_when_equal(self):
        assert mse_loss([0.2, 0.7], [0.2, 0.7]) == 0.0

    def test_sum_of_squares(self):
        assert mse_loss([0.3, 0.4], [0.1, 0.1]) == pytest.approx(0.13, abs=1e-15)

    def test_gradient(self):
        np.testing.assert_allclose(mse_grad([0.3, 0.4], [0.1, 0.1]), [0.4, 0.6], atol=1e-15)

    def test_batch_mean(self):
        assert mse_loss([[0.3, 0.4], [0.1, 0.1]], [[0.1, 0.1], [0.1, 0.1]]) == pytest.approx(0.065, abs=1e-15)

    def test_non_finite(self):
        with pytest.raises(ValueError):
            mse_loss([np.nan, 0.0], [0.0, 0.0])

    @given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=2), st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=2))
    def test_non_negative_and_zero_iff_equal(self, a, b):
        loss = mse_loss(a, b)
        assert loss >= 0
        if a == b:
            assert loss == 0
        else:
            # squared differences below ~1e-162 underflow to zero
            assert loss > 0 or np.allclose(a, b, rtol=0, atol=1e-150)


class TestAdam:
    def test_zero_gradient_leaves_params(self):
        p = [np.array([1.0, -2.0])]
        adam_step(p, [np.zeros(2)], AdamMoments.zeros(p), 1)
        np.testing.assert_array_equal(p[0], [1.0, -2.0])

    def test_hand_computed_scalar(self):
        # g = 0.5 from zero moments: m = 0.05, v = 2.5e-4, m_hat = 0.5, v_hat = 0.25
        # step = 1e-3 * 0.5 / (0.5 + 1e-8)
        p = [np.array([1.0])]
        mom = AdamMoments.zeros(p)
        adam_step(p, [np.array([0.5])], mom, 1)
        assert mom.m[0][0] == pytest.approx(0.05, rel=1e-15)
        assert mom.v[0][0] == pytest.approx(2.5e-4, rel=1e-15)
        assert p[0][0] == pytest.approx(1.0 - 1e-3 * 0.5 / (0.5 + 1e-8), abs=1e-15)
        # second identical step: m = 0.095, v = 4.9975e-4, bias-corrected values unchanged
        adam_step(p, [np.array([0.5])], mom, 2)
        assert mom.m[0][0] == pytest.approx(0.095, rel=1e-14)
        assert p[0][0] == pytest.approx(1.0 - 2e-3 * 0.5 / (0.5 + 1e-8), abs=1e-14)

    def test_no_cross_talk(self):
        p = [np.array([1.0]), np.array([2.0, 3.0])]
        mom = AdamMoments.zeros(p)
        adam_step(p, [np.array([0.1]), np.zeros(2)], mom, 1)
        np.testing.assert_array_equal(p[1], [2.0, 3.0])
        assert not mom.m[1].any()
        assert p[0][0] < 1.0

    def test_step_index_starts_at_one(self):
        p = [np.zeros(1)]
        with pytest.raises(ValueError):
            adam_step(p, [np.ones(1)], AdamMoments.zeros(p), 0)

    def test_sgd(self):
        p = [np.array([1.0])]
        sgd_step(p, [np.array([2.0])], 0.1)
        assert p[0][0] == pytest.approx(0.8)


class TestConfig:
    def test_defaults_valid(self):
        c = TrainConfig()
        assert (c.optimizer, c.learning_rate, c.beta1, c.beta2, c.adam_eps, c.batch_size, c.T) == ("adam", 1e-3, 0.9, 0.999, 1e-8, 32, 48)

    @pytest.mark.parametrize("bad", [{"epochs": 0}, {"batch_size": 0}, {"learning_rate": 0.0}, {"optimizer": "rmsprop"}])
    def test_invalid(self, bad):
        with pytest.raises(ValueError):
            TrainConfig(**bad)

    def test_file_with_overrides(self, tmp_path):
        path = tmp_path / "c.toml"
        path.write_text('epochs = 7\nlearning_rate = 0.01\noptimizer = "sgd"\n')
        c = TrainConfig.from_file(path, epochs=3, seed=None)
        assert (c.epochs, c.learning_rate, c.optimizer, c.seed) == (3, 0.01, "sgd", 0)

    def test_unknown_key(self, tmp_path):
        path = tmp_path / "c.toml"
        path.write_text("epochz = 7\n")
        with pytest.raises(ValueError, match="unknown"):
            TrainConfig.from_file(path)

    def test_text_round_trip(self, tmp_path):
        c = TrainConfig(epochs=4, learning_rate=0.003, seed=9)
        path = tmp_path / "c.toml"
        path.write_text(c.to_text())
        assert TrainConfig.from_file(path) == c


class TestEarlyStopping:
    def test_rising_losses(self):
        es = EarlyStopping(3)
        stopped_at = None
        for epoch, loss in enumerate([1.0, 1.1, 1.2, 1.3, 1.4, 1.5], start=1):
            es.update(epoch, loss)
            if es.should_stop:
                stopped_at = epoch
                break
        assert stopped_at == 4
        assert es.best_epoch == 1

    def test_off(self):
        es = EarlyStopping(0)
        for epoch in range(1, 20):
            es.update(epoch, float(epoch))
        assert not es.should_stop

    def test_improvement_resets(self):
        es = EarlyStopping(2)
        for epoch, loss in enumerate([1.0, 2.0, 0.5, 2.0], start=1):
            es.update(epoch, loss)
        assert not es.should_stop and es.best_epoch == 3


class TestTrainStation:
    cfg = TrainConfig(epochs=6, batch_size=4, hidden_size=4, T=5, learning_rate=0.01, seed=3)

    def test_deterministic(self):
        data = (toy_dataset(20, seed=1), toy_dataset(6, seed=2))
        m1, r1 = train_station(data, 0, self.cfg)
        m2, r2 = train_station(data, 0, self.cfg)
        assert r1.train_loss == r2.train_loss and r1.val_loss == r2.val_loss
        for a, b in zip(m1.arrays(), m2.arrays()):
            assert a.tobytes() == b.tobytes()

    def test_seed_changes_result(self):
        data = (toy_dataset(20, seed=1), toy_dataset(6, seed=2))
        r1 = train_station(data, 0, self.cfg)[1]
        r2 = train_station(data, 0, TrainConfig(**{**self.cfg.__dict__, "seed": 4}))[1]
        assert r1.train_loss != r2.train_loss

    def test_keeps_best_validation_model(self):
        data = (toy_dataset(20, seed=1), toy_dataset(6, seed=2))
        model, report = train_station(data, 0, self.cfg)
        from finedust.train import dataset_loss
        assert dataset_loss(model, data[1]) == report.best_val_mse == min(report.val_loss)
        assert report.val_loss[report.best_epoch - 1] == report.best_val_mse

    def test_early_stop_on_rising_validation_loss(self):
        # training pulls outputs toward 1 while the validation targets sit at -1
        train = toy_dataset(16, seed=1, target=1.0)
        val = toy_dataset(4, seed=2, target=-1.0)
        cfg = TrainConfig(epochs=50, batch_size=16, hidden_size=4, T=5, learning_rate=0.05, early_stop_patience=3, seed=0)
        _, report = train_station((train, val), 0, cfg)
        assert all(b > a for a, b in zip(report.val_loss, report.val_loss[1:]))
        assert report.epochs_run == 4
        assert report.best_epoch == 1

    def test_divergence(self):
        cfg = TrainConfig(epochs=5, batch_size=4, hidden_size=4, T=5, optimizer="sgd", learning_rate=1e300)
        with pytest.raises(TrainingDivergence) as info:
            train_station((toy_dataset(8), toy_dataset(4, seed=5)), 0, cfg)
        assert info.value.report.station_id == 0

    def test_empty_split(self):
        with pytest.raises(ValueError):
            train_station((toy_dataset(8), toy_dataset(8).subset(0, 0)), 0, self.cfg)


FAST = TrainConfig(epochs=2, batch_size=32, hidden_size=4, seed=1)


class TestTrainAll:
    def test_one_entry_per_station(self, synth_table, tmp_path):
        reg = train_all(synth_table, [1, 6, 20], FAST, tmp_path)
        assert sorted(reg.entries) == [1, 6, 20] and not reg.failures
        reg.write(tmp_path / "registry.jsonl")
        lines = [json.loads(l) for l in (tmp_path / "registry.jsonl").read_text().splitlines()]
        assert [l["station_id"] for l in lines] == [1, 6, 20]
        assert set(lines[0]) == {"station_id", "checkpoint", "scaler", "best_val_mse", "epochs_run"}
        again = ModelRegistry.read(tmp_path / "registry.jsonl")
        assert again.manifest() == reg.manifest()
        assert again.load_model(6).hidden_size == 4
        assert again.load_scaler(6).to_text() == (tmp_path / "scaler.txt").read_text()

    def test_failing_station_is_isolated(self, synth_table, tmp_path):
        pol = np.array(synth_table.pollutants)
        pol[:, 4, feat.PM10] = np.nan
        holey = ObservationTable(synth_table.start, pol, np.array(synth_table.climate), np.isnan(pol),
                                 np.array(synth_table.climate_mask))
        reg = train_all(holey, [3, 4, 5], FAST, tmp_path)
        assert sorted(reg.entries) == [3, 5]
        assert list(reg.failures) == [4]
        reg.write(tmp_path / "registry.jsonl")
        assert ModelRegistry.read(tmp_path / "registry.jsonl").failures == reg.failures

    def test_station_order_does_not_matter(self, synth_table, tmp_path):
        a = train_all(synth_table, [2, 9, 30], FAST, tmp_path / "a")
        b = train_all(synth_table, [30, 2, 9], FAST, tmp_path / "b")
        assert a.manifest() == b.manifest()
        for s in (2, 9, 30):
            assert (tmp_path / "a" / f"station_{s:02d}.ckpt").read_bytes() == (tmp_path / "b" / f"station_{s:02d}.ckpt").read_bytes()

    def test_duplicate_ids(self, synth_table, tmp_path):
        with pytest.raises(ValueError):
            train_all(synth_table, [1, 1], FAST, tmp_path)

    def test_registry_rejects_duplicates(self, tmp_path):
        from finedust.train import RegistryEntry
        reg = ModelRegistry(tmp_path)
        reg.add(RegistryEntry(1, "a", "s", 0.1, 1))
        with pytest.raises(ValueError):
            reg.add(RegistryEntry(1, "b", "s", 0.1, 1))
