import math
from dataclasses import replace

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ecogdec.data import window_sessions
from ecogdec.decoders import build_model
from ecogdec.training import (
    Adam, EarlyStopper, EmptyDatasetError, NonFiniteError, OptimizerState, PooledCache, TrainConfig,
    ZeroNormError, batch_cosine_similarity, cosine_loss, cosine_similarity, evaluate, finite_difference_check,
    no_decay_names, optimizer_step, split_train_valid, train,
)


class TestCosine:
    @pytest.mark.parametrize("y,p,cs", [
        ([1, 0, 0], [1, 0, 0], 1.0),
        ([1, 0, 0], [0, 1, 0], 0.0),
        ([1, 1, 0], [2, 2, 0], 1.0),
        ([1, 0, 0], [-1, 0, 0], -1.0),
    ])
    def test_cases(self, y, p, cs):
        assert cosine_similarity(y, p) == pytest.approx(cs, abs=1e-15)

    def test_zero_norm(self):
        with pytest.raises(ZeroNormError):
            cosine_similarity([0, 0, 0], [1, 0, 0])
        with pytest.raises(ZeroNormError):
            batch_cosine_similarity(torch.ones(2, 3), torch.zeros(2, 3))

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-10, 10), min_size=6, max_size=6), st.floats(0.01, 100))
    def test_bounded_and_scale_invariant(self, v, scale):
        y, p = np.array(v[:3]), np.array(v[3:])
        if np.linalg.norm(y) < 1e-3 or np.linalg.norm(p) < 1e-3:
            return
        cs = cosine_similarity(y, p)
        assert -1 - 1e-12 <= cs <= 1 + 1e-12
        assert cosine_similarity(y, scale * p) == pytest.approx(cs, abs=1e-12)

    def test_loss_values(self):
        y = torch.randn(50, 3, dtype=torch.float64)
        assert float(cosine_loss(y, 3 * y)) == pytest.approx(0, abs=1e-12)
        assert float(cosine_loss(y, -y)) == pytest.approx(2, abs=1e-12)

    def test_random_directions(self):
        g = torch.Generator().manual_seed(0)
        y, p = torch.randn(10_000, 3, generator=g), torch.randn(10_000, 3, generator=g)
        assert float(cosine_loss(y, p)) == pytest.approx(1.0, abs=0.05)

    def test_multi_target_mean(self):
        y = torch.randn(4, 10, 3)
        assert cosine_loss(y, y).abs() < 1e-6

    def test_empty(self):
        with pytest.raises(EmptyDatasetError):
            cosine_loss(torch.zeros(0, 3), torch.zeros(0, 3))


class TestOptimizer:
    def config(self, **kw):
        return TrainConfig(**kw)

    def test_zero_grad_no_decay_unchanged(self):
        p = {"w": torch.tensor([1.0, -2.0], dtype=torch.float64)}
        optimizer_step(p, {"w": torch.zeros(2, dtype=torch.float64)}, OptimizerState(), self.config(weight_decay=0))
        assert p["w"].tolist() == [1.0, -2.0]

    def test_decoupled_shrink(self):
        w0 = torch.tensor([1.0, -2.0, 0.5], dtype=torch.float64)
        p = {"w": w0.clone(), "b": w0.clone()}
        g = {n: torch.zeros(3, dtype=torch.float64) for n in p}
        optimizer_step(p, g, OptimizerState(), self.config(), no_decay={"b"})
        assert torch.equal(p["w"], w0 * (1 - 0.001 * 0.01))
        assert (1 - 0.001 * 0.01) == 0.99999
        assert torch.equal(p["b"], w0)

    def test_first_step(self):
        cfg = self.config(weight_decay=0)
        p = {"x": torch.tensor([0.0], dtype=torch.float64)}
        optimizer_step(p, {"x": torch.tensor([1.0], dtype=torch.float64)}, OptimizerState(), cfg)
        # bias-corrected moments are exactly g and g**2, so the step is lr * g / (|g| + eps)
        assert float(p["x"]) == pytest.approx(-cfg.learning_rate / (1 + cfg.eps), abs=1e-18)
        assert abs(float(p["x"]) + cfg.learning_rate) < 1e-10

    def test_matches_torch_adamw(self):
        torch.manual_seed(0)
        w = torch.randn(5, dtype=torch.float64)
        ref = w.clone().requires_grad_(True)
        opt = torch.optim.AdamW([ref], lr=0.001, weight_decay=0.01)
        p, state = {"w": w.clone()}, OptimizerState()
        for _ in range(20):
            g = torch.randn(5, dtype=torch.float64)
            ref.grad = g.clone()
            opt.step()
            optimizer_step(p, {"w": g}, state, self.config())
        torch.testing.assert_close(p["w"], ref.detach(), rtol=0, atol=1e-15)

    def test_per_parameter_step_counts(self):
        state = OptimizerState()
        p = {"a": torch.zeros(1), "b": torch.zeros(1)}
        optimizer_step(p, {"a": torch.ones(1), "b": None}, state, self.config())
        optimizer_step(p, {"a": torch.ones(1), "b": torch.ones(1)}, state, self.config())
        assert state.steps == {"a": 2, "b": 1}

    def test_non_finite(self):
        with pytest.raises(NonFiniteError):
            optimizer_step({"w": torch.zeros(1)}, {"w": torch.tensor([math.nan])}, OptimizerState(), self.config())

    def test_no_decay_names(self):
        names = no_decay_names(build_model("mlp", "e2e-cfo"))
        assert "extractor.filterbank.freq_param" in names
        assert {"head.bn.weight", "head.bn.bias", "head.fc1.bias", "extractor.bn.weight"} <= names
        assert "head.fc1.weight" not in names
        lstm = no_decay_names(build_model("cnn-lstm-mt", "e2e-free"))
        assert "head.lstm1.bias_ih_l0" in lstm and "extractor.filterbank.bias" in lstm
        assert "extractor.filterbank.weight" not in lstm and "head.lstm1.weight_hh_l0" not in lstm


class TestEarlyStopper:
    def test_worsening_stops_at_patience_plus_one(self):
        model = torch.nn.Linear(1, 1)
        stopper = EarlyStopper(20)
        snapshot = {k: v.clone() for k, v in model.state_dict().items()}
        stopped = None
        for epoch in range(1, 100):
            if epoch > 1:
                with torch.no_grad():
                    model.weight.add_(1.0)
            if stopper.update(epoch, float(epoch), model):
                stopped = epoch
                break
        assert stopped == 21 and stopper.best_epoch == 1
        assert torch.equal(stopper.best_parameter_snapshot["weight"], snapshot["weight"])

    def test_equal_loss_is_not_improvement(self):
        s = EarlyStopper(2)
        m = torch.nn.Linear(1, 1)
        assert not s.update(1, 1.0, m)
        assert not s.update(2, 1.0, m)
        assert s.update(3, 1.0, m)
        assert s.best_epoch == 1


class TestSplit:
    def test_fraction_and_seed(self, tiny_dataset):
        w = tiny_dataset.windows
        w100 = w.subset(np.arange(len(w))[:80])
        a, b = split_train_valid(w100, 0.1, seed=3)
        assert (len(a), len(b)) == (72, 8)
        a2, b2 = split_train_valid(w100, 0.1, seed=3)
        assert a.keys() == a2.keys() and b.keys() == b2.keys()
        assert not set(a.keys()) & set(b.keys())

    def test_chronological(self, tiny_dataset):
        a, b = split_train_valid(tiny_dataset.windows, 0.1, chronological=True)
        assert b.keys() == tiny_dataset.windows.keys()[-len(b):]

    def test_too_small(self, tiny_dataset):
        with pytest.raises(EmptyDatasetError):
            split_train_valid(tiny_dataset.windows.subset([0, 1, 2]))


def _small(dataset, n_sessions=3):
    return window_sessions(dataset.select(range(n_sessions)))


class TestTrain:
    def test_hand_crafted_runs(self, tiny_dataset):
        w = _small(tiny_dataset)
        model, curve = train(build_model("mlp"), w, TrainConfig(max_epochs=3, batch_size=10))
        assert [r["epoch"] for r in curve.rows] == [1, 2, 3]
        assert all(r["frozen_flag"] for r in curve.rows)
        assert curve.to_csv().splitlines()[0] == "epoch,train_loss,valid_loss,valid_cs,frozen_flag"

    def test_cfo_curve_has_frequencies(self, tiny_dataset):
        w = _small(tiny_dataset, 2)
        _, curve = train(build_model("mlp", "e2e-cfo"), w, TrainConfig(max_epochs=1, batch_size=10))
        header = curve.to_csv().splitlines()[0].split(",")
        assert header[5:] == [f"f_{i}" for i in range(1, 16)]

    def test_freeze_schedule(self, tiny_dataset):
        w = _small(tiny_dataset, 2)
        model = build_model("mlp", "e2e-free", seed=1)
        init = model.filterbank.weight.detach().clone()
        seen = {}
        cfg = TrainConfig(max_epochs=7, batch_size=6, patience=50)
        train(model, w, cfg, on_epoch_end=lambda e, m, r: seen.__setitem__(e, m.filterbank.weight.detach().clone()))
        assert all(torch.equal(seen[e], init) for e in range(1, 6))
        assert not torch.equal(seen[7], init)

    def test_early_stopping_restores_best(self, tiny_dataset):
        w = _small(tiny_dataset, 4)
        train_w, valid_w = split_train_valid(w, 0.2, seed=0)
        # validation targets point the other way: learning the task worsens validation
        valid_w = valid_w.with_targets(-valid_w.targets)
        snaps = {}
        model, curve = train(build_model("mlp", seed=2), train_w, TrainConfig(max_epochs=40, patience=3, batch_size=16),
                             valid=valid_w, cache=PooledCache(),
                             on_epoch_end=lambda e, m, r: snaps.__setitem__(e, m.head.fc1.weight.detach().clone()))
        assert curve.stopped_epoch == curve.best_epoch + 3
        assert torch.equal(model.head.fc1.weight, snaps[curve.best_epoch])

    def test_deterministic_float64(self, tiny_dataset):
        w = _small(tiny_dataset, 2)
        cfg = TrainConfig(max_epochs=2, batch_size=8, pretrain_freeze_epochs=1)
        runs = [train(build_model("mlp", "e2e-cfo", seed=5, dtype=torch.float64), w, cfg) for _ in range(2)]
        for (a, _), (b, _) in [runs]:
            for (k, v), v2 in zip(a.state_dict().items(), b.state_dict().values()):
                assert torch.equal(v, v2), k

    def test_empty(self, tiny_dataset):
        w = tiny_dataset.windows.subset([])
        with pytest.raises(EmptyDatasetError):
            train(build_model("mlp"), w, TrainConfig(max_epochs=1))
        with pytest.raises(EmptyDatasetError):
            evaluate(build_model("mlp"), w)

    def test_non_finite_loss(self, tiny_dataset):
        model = build_model("mlp", seed=0)
        with torch.no_grad():
            model.head.fc3.weight.fill_(math.nan)
        with pytest.raises(NonFiniteError):
            train(model, _small(tiny_dataset, 2), TrainConfig(max_epochs=1, batch_size=10))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(batch_size=0).validate()
        with pytest.raises(ValueError):
            TrainConfig(valid_fraction=1.0).validate()


class TestGradientCheck:
    def loss_fn(self, x, y):
        return lambda m: cosine_loss(y, m(x))

    def test_affine_and_cfo(self):
        torch.manual_seed(0)
        model = build_model("mlp", "e2e-cfo", seed=0, dtype=torch.float64)
        x = torch.randn(4, 64, 590, dtype=torch.float64)
        y = torch.randn(4, 3, dtype=torch.float64)
        groups = {"cfo": ["extractor.filterbank.freq_param"], "affine": ["head.fc2.weight", "head.fc3.bias"]}
        report = finite_difference_check(model, self.loss_fn(x, y), sample_count=4, groups=groups)
        assert report.passed, report.worst()

    def test_corrupted_gradient_fails(self):
        model = build_model("mlp", "hand-crafted", seed=0, dtype=torch.float64)
        x = torch.randn(4, 64, 590, dtype=torch.float64)
        y = torch.randn(4, 3, dtype=torch.float64)
        report = finite_difference_check(model, self.loss_fn(x, y), sample_count=4,
                                         groups={"affine": ["head.fc2.weight"]}, corrupt=0.1)
        assert not report.passed
