"""R² metric and the frozen-encoder probes."""

import hashlib

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from eqrecon.dataset import Dataset
from eqrecon.evaluate import (
    ProbeConfig,
    R2Warning,
    eval_classification,
    eval_equivariance,
    r_squared,
    split_indices,
)
from eqrecon.gradcore import ContractError
from eqrecon.model import EquivariantReconstructionModel
from eqrecon.views import TransformSpec

FAST = ProbeConfig(epochs=5)


def one_hot(ds):
    classes, idx = np.unique(ds.labels, return_inverse=True)
    return np.eye(len(classes))[idx]


def weights_digest(model):
    h = hashlib.sha256()
    for name, p in model.named_parameters():
        h.update(name.encode())
        h.update(p.data.tobytes())
    return h.hexdigest()


class TestRSquared:
    def test_perfect(self):
        y = np.random.default_rng(0).normal(size=(20, 3))
        per, mean = r_squared(y, y)
        assert mean == 1.0 and np.all(per == 1.0)

    def test_mean_predictor(self):
        y = np.random.default_rng(1).normal(size=(20, 2))
        _, mean = r_squared(y, np.tile(y.mean(axis=0), (20, 1)))
        assert abs(mean) < 1e-9

    def test_hand_case(self):
        _, mean = r_squared(np.array([1.0, 2.0, 3.0]), np.array([1.0, 2.0, 4.0]))
        assert abs(mean - 0.5) < 1e-9

    def test_can_be_negative(self):
        _, mean = r_squared(np.array([1.0, 2.0, 3.0]), np.array([3.0, 2.0, 1.0]))
        assert mean == pytest.approx(-3.0)

    def test_zero_variance_dim_excluded(self):
        y = np.column_stack([np.arange(5.0), np.ones(5)])
        with pytest.warns(R2Warning, match=r"\[1\]"):
            per, mean = r_squared(y, y + np.column_stack([np.zeros(5), np.full(5, 0.3)]))
        assert np.isnan(per[1])
        assert mean == 1.0

    def test_contract(self):
        with pytest.raises(ContractError):
            r_squared(np.zeros((1, 2)), np.zeros((1, 2)))
        with pytest.raises(ContractError):
            r_squared(np.zeros((3, 2)), np.zeros((3, 1)))

    @settings(max_examples=100, deadline=None)
    @given(
        arrays(np.float64, 12, elements=st.floats(-100, 100)),
        arrays(np.float64, 12, elements=st.floats(-100, 100)),
        st.floats(0.1, 10) | st.floats(-10, -0.1),
        st.floats(-50, 50),
    )
    def test_affine_invariance(self, y, yhat, a, b):
        assume(np.var(y) > 1e-3)
        _, base = r_squared(y, yhat)
        _, moved = r_squared(a * y + b, a * yhat + b)
        assert moved == pytest.approx(base, rel=1e-7, abs=1e-7)

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.float64, 10, elements=st.floats(-100, 100)), arrays(np.float64, 10, elements=st.floats(-100, 100)))
    def test_never_above_one(self, y, yhat):
        assume(np.var(y) > 1e-6)
        assert r_squared(y, yhat)[1] <= 1.0


class TestSplit:
    def test_sizes_and_disjoint(self):
        tr, va = split_indices(100, 0.2, seed=3)
        assert len(tr) == 80 and len(va) == 20
        assert not set(tr) & set(va)

    def test_seeded(self):
        assert np.array_equal(split_indices(50, 0.2, 1)[1], split_indices(50, 0.2, 1)[1])
        assert not np.array_equal(split_indices(50, 0.2, 1)[1], split_indices(50, 0.2, 2)[1])


class TestEquivariance:
    def test_report_structure(self, tiny_data, tiny_model_cfg):
        model = EquivariantReconstructionModel(tiny_model_cfg)
        spec = TransformSpec(("rotation", "color", "flip"))
        rep = eval_equivariance(model, tiny_data, spec, FAST, seed=0)
        assert list(rep.families) == ["rotation", "color", "flip"]
        assert set(rep.params) == set(spec.param_keys())
        assert rep.n_train + rep.n_val == len(tiny_data)
        csv = rep.to_csv().splitlines()
        assert csv[0] == "family,r2" and len(csv) == 5
        assert all(v <= 1.0 for v in rep.params.values())

    def test_encoder_untouched(self, tiny_data, tiny_model_cfg):
        model = EquivariantReconstructionModel(tiny_model_cfg)
        before = weights_digest(model)
        eval_equivariance(model, tiny_data, TransformSpec(("rotation",)), FAST, seed=0)
        eval_classification(model, tiny_data, seed=0, probe=FAST)
        assert weights_digest(model) == before
        assert all(p.grad is None for p in model.parameters())

    def test_deterministic(self, tiny_data, tiny_model_cfg):
        model = EquivariantReconstructionModel(tiny_model_cfg)
        spec = TransformSpec(("rotation",))
        a = eval_equivariance(model, tiny_data, spec, FAST, seed=4)
        b = eval_equivariance(model, tiny_data, spec, FAST, seed=4)
        assert a.to_csv() == b.to_csv()

    def test_full_representation(self, tiny_data, tiny_model_cfg):
        model = EquivariantReconstructionModel(tiny_model_cfg)
        rep = eval_equivariance(model, tiny_data, TransformSpec(("rotation",)), ProbeConfig(epochs=2, representation="full"), seed=0)
        assert np.isfinite(rep.mean)

    def test_oracle_features_small(self, tiny_data):
        spec = TransformSpec(("rotation", "color"))
        rep = eval_equivariance(None, tiny_data, spec, ProbeConfig(epochs=300, batch_size=32), seed=0, feature_fn=lambda p: p.targets())
        assert min(rep.families.values()) > 0.99
        assert rep.train_mean > 0.99
        assert rep.n_val == 21


class TestClassification:
    def test_one_hot_oracle(self, tiny_data):
        rep = eval_classification(None, tiny_data, seed=0, probe=ProbeConfig(epochs=100, batch_size=16), feature_fn=one_hot)
        assert rep.accuracy >= 0.99
        assert rep.n_classes == 8

    def test_single_class_is_contract_error(self, tiny_data):
        ds = Dataset(tiny_data.images, np.zeros(len(tiny_data)), tiny_data.latents)
        with pytest.raises(ContractError):
            eval_classification(None, ds, feature_fn=one_hot)

    def test_constant_label_smoke(self, tiny_data, tiny_model_cfg):
        ds = Dataset(tiny_data.images, np.full(len(tiny_data), 4), tiny_data.latents)
        probe = ProbeConfig(epochs=40, batch_size=16)
        rep = eval_classification(EquivariantReconstructionModel(tiny_model_cfg), ds, seed=0, probe=probe, allow_single_class=True)
        assert rep.accuracy == 1.0
