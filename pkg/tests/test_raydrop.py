import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lidarsim.errors import FormatError, InputError
from lidarsim.io import write_grid
from lidarsim.metrics import roc_auc
from lidarsim.polar import CH_INCIDENCE, CH_LASER, CH_OCCUPANCY, N_CHANNELS
from lidarsim.raydrop import (
    FeatureSpec,
    RaydropModel,
    TrainConfig,
    bce,
    extract_features,
    loss_and_grad,
    predict,
    sample_mask,
    train,
)
from lidarsim.rng import uniforms
from lidarsim.synth import drop_by_incidence

M64 = (1 << 64) - 1


def splitmix_reference(seed, counter, stream):
    """Pure-integer reimplementation of the counter-based generator."""
    def mix(z):
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & M64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & M64
        return z ^ (z >> 31)

    g = 0x9E3779B97F4A7C15
    k = mix(seed ^ mix((stream + g) & M64))
    z = mix(mix((k + (counter + 1) * g) & M64) ^ k)
    return (z >> 11) / float(1 << 53)


def synthetic_grid(rng, rows=16, cols=256, fill=0.7):
    """Random feature grid obeying the channel invariants."""
    g = np.zeros((N_CHANNELS, rows, cols))
    occ = rng.random((rows, cols)) < fill
    g[0] = rng.uniform(2, 60, (rows, cols))
    g[1] = rng.uniform(0, 1, (rows, cols))
    g[CH_INCIDENCE] = rng.uniform(0, math.pi / 2, (rows, cols))
    g[3] = rng.uniform(2, 60, (rows, cols))
    g[4] = rng.uniform(0, math.pi / 2, (rows, cols))
    g[6] = rng.integers(1, 4, (rows, cols))
    g[:CH_LASER] *= occ
    g[6] *= occ
    g[CH_LASER] = np.arange(rows)[:, None]
    g[CH_OCCUPANCY] = occ
    return g


@pytest.fixture(scope="module")
def incidence_rule_data():
    rng = np.random.default_rng(0)
    grids = [synthetic_grid(rng) for _ in range(4)]
    return [(g, drop_by_incidence(g)) for g in grids]


class TestFeatures:
    def test_dims(self):
        assert FeatureSpec(window=0).dim == 8
        assert FeatureSpec(window=1).dim == 72
        g = synthetic_grid(np.random.default_rng(1), 4, 10)
        assert extract_features(g, FeatureSpec(window=1)).shape == (40, 72)

    def test_azimuth_wraps(self):
        g = synthetic_grid(np.random.default_rng(2), 4, 10, fill=1.0)
        spec = FeatureSpec(window=1)
        X = extract_features(g, spec, cells=([2], [9]))
        right = spec.offsets.index((0, 1))
        np.testing.assert_array_equal(X[0, right * 8:(right + 1) * 8], g[:, 2, 0])

    def test_rows_clamped(self):
        g = synthetic_grid(np.random.default_rng(3), 4, 10, fill=1.0)
        spec = FeatureSpec(window=1)
        X = extract_features(g, spec, cells=([0], [5]))
        up = spec.offsets.index((-1, 0))
        np.testing.assert_array_equal(X[0, up * 8:(up + 1) * 8], g[:, 0, 5])

    def test_standardised(self):
        g = synthetic_grid(np.random.default_rng(4), 4, 10)
        mean, std = np.arange(8.0), np.full(8, 2.0)
        X = extract_features(g, FeatureSpec(window=0), mean, std)
        np.testing.assert_allclose(X * 2.0 + np.arange(8.0), extract_features(g, FeatureSpec(window=0)))


class TestGradient:
    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_matches_central_differences(self, seed):
        rng = np.random.default_rng(seed)
        X = rng.normal(size=(32, 6))
        y = (rng.random(32) < 0.5).astype(float)
        params = rng.normal(0, 0.5, 7)
        _, g = loss_and_grad(params, X, y)
        h = 1e-6
        fd = np.empty_like(params)
        for i in range(len(params)):
            e = np.zeros_like(params)
            e[i] = h
            fd[i] = (loss_and_grad(params + e, X, y)[0] - loss_and_grad(params - e, X, y)[0]) / (2 * h)
        rel = np.abs(g - fd) / np.maximum(np.abs(fd), 1e-3)
        assert rel.max() <= 1e-5

    def test_loss_matches_bce(self):
        rng = np.random.default_rng(5)
        X, y, params = rng.normal(size=(50, 3)), (rng.random(50) < 0.3).astype(float), rng.normal(size=4)
        z = X @ params[:-1] + params[-1]
        assert loss_and_grad(params, X, y)[0] == pytest.approx(bce(1 / (1 + np.exp(-z)), y), rel=1e-9)


class TestTrain:
    def test_nothing_drops(self):
        g = synthetic_grid(np.random.default_rng(6))
        res = train([(g, g[CH_OCCUPANCY])], TrainConfig(step_size=0.05, epochs=60, batch_cells=256, window=0,
                                                      kind="logistic"))
        p = predict(res.model, g)
        assert p[g[CH_OCCUPANCY] == 1].min() >= 0.99

    def test_incidence_rule_auc(self, incidence_rule_data):
        cfg = TrainConfig(step_size=0.01, epochs=15, window=1)
        res = train(incidence_rule_data[:3], cfg)
        g, real = incidence_rule_data[3]
        occ = g[CH_OCCUPANCY] == 1
        p = predict(res.model, g)
        assert roc_auc(p[occ], real[occ]) >= 0.95
        assert res.model.final_loss < res.initial_loss

    def test_deterministic_bytes(self, incidence_rule_data):
        cfg = TrainConfig(step_size=0.01, epochs=2, window=1, seed=3)
        a = train(incidence_rule_data[:2], cfg).model.to_bytes()
        b = train(incidence_rule_data[:2], cfg).model.to_bytes()
        assert a == b

    def test_seed_changes_batches(self, incidence_rule_data):
        a = train(incidence_rule_data[:1], TrainConfig(step_size=0.01, epochs=1, window=0, batch_cells=64, seed=1))
        b = train(incidence_rule_data[:1], TrainConfig(step_size=0.01, epochs=1, window=0, batch_cells=64, seed=2))
        assert not np.array_equal(a.model.params, b.model.params)

    def test_errors(self):
        g = synthetic_grid(np.random.default_rng(7), fill=0.0)
        with pytest.raises(InputError):
            train([(g, g[CH_OCCUPANCY])])
        with pytest.raises(InputError):
            train([])
        with pytest.raises(InputError):
            TrainConfig(step_size=0.0)
        with pytest.raises(FormatError):
            TrainConfig.from_json({"learning_rate": 1.0})

    def test_constant_kind(self, incidence_rule_data):
        res = train(incidence_rule_data[:1], TrainConfig(kind="constant"))
        g, real = incidence_rule_data[0]
        occ = g[CH_OCCUPANCY] == 1
        assert res.model.params[0] == pytest.approx(real[occ].mean(), abs=1e-6)


class TestPredict:
    def test_constant(self):
        g = synthetic_grid(np.random.default_rng(8))
        p = predict(RaydropModel.constant(0.9), g)
        occ = g[CH_OCCUPANCY] == 1
        assert np.all(p[occ] == 0.9) and np.all(p[~occ] == 0)

    def test_zero_logistic(self):
        g = synthetic_grid(np.random.default_rng(9))
        p = predict(RaydropModel.logistic(np.zeros(8), 0.0), g)
        occ = g[CH_OCCUPANCY] == 1
        assert np.all(p[occ] == 0.5) and np.all(p[~occ] == 0)

    def test_monotone_in_incidence(self):
        w = np.zeros(8)
        w[CH_INCIDENCE] = -3.0
        model = RaydropModel.logistic(w, 1.0)
        g = synthetic_grid(np.random.default_rng(10), fill=1.0)
        before = predict(model, g)[3, 7]
        g[CH_INCIDENCE, 3, 7] += 0.1
        assert predict(model, g)[3, 7] < before

    def test_dim_mismatch(self):
        g = synthetic_grid(np.random.default_rng(11))
        with pytest.raises(InputError):
            RaydropModel("logistic", np.zeros(5), FeatureSpec(window=0))
        with pytest.raises(InputError):
            predict(RaydropModel.constant(0.5), g[:7])

    def test_plugin(self, tmp_path):
        g = synthetic_grid(np.random.default_rng(12))
        write_grid(tmp_path / "p.lgrd", np.full((1, 16, 256), 0.25))
        p = predict(RaydropModel.plugin(tmp_path / "p.lgrd"), g)
        occ = g[CH_OCCUPANCY] == 1
        assert np.all(p[occ] == 0.25) and np.all(p[~occ] == 0)

    def test_model_file_roundtrip(self, tmp_path, incidence_rule_data):
        model = train(incidence_rule_data[:1], TrainConfig(step_size=0.01, epochs=1, window=1)).model
        model.save(tmp_path / "m.lrdm")
        back = RaydropModel.load(tmp_path / "m.lrdm")
        assert back.to_bytes() == model.to_bytes()
        np.testing.assert_array_equal(predict(back, incidence_rule_data[0][0]),
                                      predict(model, incidence_rule_data[0][0]))
        (tmp_path / "bad.lrdm").write_bytes(b"XXXX" + model.to_bytes()[4:])
        with pytest.raises(FormatError):
            RaydropModel.load(tmp_path / "bad.lrdm")


class TestSampleMask:
    def test_extremes(self):
        assert np.all(sample_mask(np.ones((64, 2048)), 0) == 1)
        assert np.all(sample_mask(np.zeros((64, 2048)), 0) == 0)

    def test_half(self):
        frac = sample_mask(np.full((64, 2048), 0.5), 42).mean()
        assert 0.49 <= frac <= 0.51

    def test_threads_and_determinism(self):
        p = np.random.default_rng(13).random((64, 2048))
        a = sample_mask(p, 7, threads=1)
        np.testing.assert_array_equal(a, sample_mask(p, 7, threads=4))
        np.testing.assert_array_equal(a, sample_mask(p, 7))
        assert not np.array_equal(a, sample_mask(p, 8))

    def test_never_exceeds_occupancy(self):
        g = synthetic_grid(np.random.default_rng(14))
        mask = sample_mask(predict(RaydropModel.constant(1.0), g), 0)
        assert np.all(mask <= g[CH_OCCUPANCY])

    def test_rejects_bad_probabilities(self):
        with pytest.raises(InputError):
            sample_mask(np.full((2, 2), 1.5), 0)

    def test_generator_matches_integer_reference(self):
        counters = np.array([0, 1, 2, 12345, 131071], dtype=np.uint64)
        got = uniforms(99, counters, stream=1)
        want = [splitmix_reference(99, int(c), 1) for c in counters]
        np.testing.assert_array_equal(got, want)
