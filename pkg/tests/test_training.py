import io
import math

import numpy as np
import pytest

from minnsa.bagdata import SynthConfig, stratified_holdout, synth_generate
from minnsa.metrics import auc
from minnsa.network import ModelConfig, init_model
from minnsa.training import Adam, TrainConfig, bce_loss, optimizer_step, predict, train


@pytest.fixture(scope="module")
def separable_split():
    ds = synth_generate(SynthConfig(n_bags=400, p=10, signal_shift=5.0, witness_rate=1.0, seed=21))
    keep, test = stratified_holdout(ds.labels, 0.2, seed=0)
    inner_keep, val = stratified_holdout(ds.labels[keep], 0.1, seed=1)
    return ds.subset(keep[inner_keep]), ds.subset(keep[val]), ds.subset(test)


@pytest.fixture(scope="module")
def trained(separable_split):
    tr, va, _ = separable_split
    model = init_model(ModelConfig(p=10, m_star=40, seed=5))
    best, history = train(model, tr, va, TrainConfig(seed=6))
    return best, history


class TestLoss:
    def test_zero_logit(self):
        loss, _ = bce_loss(np.array([0.0]), np.array([1]))
        assert loss == pytest.approx(math.log(2), abs=1e-6)

    def test_large_logit_stable(self):
        loss, grad = bce_loss(np.array([30.0]), np.array([1]))
        assert loss == pytest.approx(9.357622968840175e-14, rel=1e-6)
        loss, grad = bce_loss(np.array([-800.0, 800.0]), np.array([1, 0]))
        assert np.isfinite(loss) and np.isfinite(grad).all()
        assert loss == pytest.approx(800.0)

    def test_gradient_finite_differences(self):
        rng = np.random.default_rng(0)
        logits = rng.normal(scale=3, size=16)
        y = rng.integers(0, 2, size=16)
        _, g = bce_loss(logits, y)
        h = 1e-6
        num = np.array([
            (bce_loss(logits + h * e, y)[0] - bce_loss(logits - h * e, y)[0]) / (2 * h)
            for e in np.eye(16)
        ])
        assert np.abs(g - num).max() / np.abs(num).max() < 1e-8


class TestAdam:
    def test_first_step(self):
        params = {"x": np.array(2.0)}
        Adam(lr=0.1).step(params, {"x": np.array(1.0)})
        assert float(params["x"]) == pytest.approx(2.0 - 0.1 / (1 + 1e-8), abs=1e-15)

    def test_zero_gradient_fixed_point(self):
        params = {"x": np.array([1.0, -2.0])}
        opt = Adam(lr=0.1)
        for _ in range(10):
            opt.step(params, {"x": np.zeros(2)})
        np.testing.assert_array_equal(params["x"], [1.0, -2.0])

    def test_quadratic_bowl(self):
        params = {"theta": np.array(1.0)}
        opt = Adam(lr=0.05)
        for _ in range(500):
            opt.step(params, {"theta": 2 * params["theta"]})
        assert abs(float(params["theta"])) < 1e-3

    def test_non_finite_gradient(self):
        with pytest.raises(FloatingPointError, match="'V'"):
            Adam().step({"V": np.zeros(2)}, {"V": np.array([1.0, np.nan])})

    def test_optimizer_step_bumps_version(self):
        model = init_model(ModelConfig(p=3, m_star=2))
        grads = {k: np.zeros_like(v) for k, v in model.params.items()}
        optimizer_step(model, grads, Adam())
        assert model.version == 1


class TestTrain:
    def test_zero_lr_leaves_parameters(self, separable_split):
        tr, va, _ = separable_split
        model = init_model(ModelConfig(p=10, m_star=40, seed=1))
        before = {k: v.copy() for k, v in model.params.items()}
        best, _ = train(model, tr, va, TrainConfig(epochs=1, learning_rate=0.0))
        for k in before:
            assert best.params[k].tobytes() == before[k].tobytes()

    def test_deterministic_history(self, separable_split):
        tr, va, _ = separable_split
        runs = []
        for _ in range(2):
            model = init_model(ModelConfig(p=10, m_star=40, seed=2))
            runs.append(train(model, tr, va, TrainConfig(epochs=3, seed=4))[1])
        assert runs[0].train_loss == runs[1].train_loss
        assert runs[0].metric == runs[1].metric

    def test_separable_reaches_high_auc(self, trained):
        _, history = trained
        assert history.best_metric > 0.95

    def test_best_snapshot_reproduces_metric(self, trained, separable_split):
        best, history = trained
        _, va, _ = separable_split
        assert auc(predict(best, va).probabilities, va.labels) == pytest.approx(history.best_metric, abs=1e-9)
        assert history.best_metric == max(history.metric)
        assert history.metric.index(history.best_metric) == history.best_epoch

    def test_predict_contract(self, trained, separable_split):
        best, _ = trained
        _, _, te = separable_split
        a = predict(best, te)
        b = predict(best, te)
        assert a.probabilities.tobytes() == b.probabilities.tobytes()
        assert ((a.probabilities > 0) & (a.probabilities < 1)).all()
        np.testing.assert_allclose(a.attention.sum(axis=1), 1, atol=1e-9)
        assert ((a.probabilities > 0.5) == te.labels).mean() > 0.9

    def test_predict_dimension_mismatch(self, trained):
        best, _ = trained
        ds = synth_generate(SynthConfig(n_bags=10, p=4, seed=0))
        with pytest.raises(ValueError):
            predict(best, ds)

    def test_train_loss_selection(self, separable_split):
        tr, _, _ = separable_split
        model = init_model(ModelConfig(p=10, m_star=40))
        _, history = train(model, tr, None, TrainConfig(epochs=4, selection_metric="train_loss"))
        assert history.best_metric == min(history.train_loss)

    def test_errors(self, separable_split):
        tr, va, _ = separable_split
        model = init_model(ModelConfig(p=10, m_star=40))
        with pytest.raises(ValueError, match="validation"):
            train(model, tr, None, TrainConfig(epochs=1))
        with pytest.raises(ValueError, match="empty"):
            train(model, tr.subset([]), va, TrainConfig(epochs=1))

    def test_history_csv(self, trained):
        _, history = trained
        buf = io.StringIO()
        history.to_csv(buf)
        lines = buf.getvalue().splitlines()
        assert lines[0] == "epoch,train_loss,val_auc"
        assert len(lines) == 101

    def test_loss_decreases_across_seeds(self):
        ds = synth_generate(SynthConfig(n_bags=400, p=10, signal_shift=5.0, witness_rate=1.0, seed=8))
        keep, val = stratified_holdout(ds.labels, 0.1, seed=0)
        tr, va = ds.subset(keep), ds.subset(val)
        decreased = 0
        for seed in range(20):
            model = init_model(ModelConfig(p=10, m_star=40, seed=seed))
            _, history = train(model, tr, va, TrainConfig(epochs=100, seed=seed))
            decreased += history.train_loss[-1] < history.train_loss[0]
        assert decreased >= 19
