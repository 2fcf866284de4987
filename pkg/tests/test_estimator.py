import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError
from sklearn.pipeline import make_pipeline

from nodulesat.backbone import TINY_BACKBONE
from nodulesat.estimator import HUNormalizer, IsotropicResampler, NoduleSATClassifier, jitter_bags, train_epochs
from nodulesat.exceptions import ConfigurationError, ContractError, EmptySetError, NumericDomainError
from nodulesat.mil import InstanceBag
from nodulesat.preprocess import Volume
from nodulesat.synth import SynthSpec, generate_bags


def small_bags(n=24, seed=0, **kw):
    spec = dict(n_bags=n, n_min=2, n_max=5, n_keys=4, feature_dim=8, mask_fraction=0.2, seed=seed)
    spec.update(kw)
    return generate_bags(SynthSpec(**spec))


def small_est(**kw):
    params = dict(L=1, H=8, g=2, epochs=3, batch_bags=8, random_state=0)
    params.update(kw)
    return NoduleSATClassifier(**params)


class TestClassifierAPI:
    def test_get_params_and_clone(self):
        est = small_est(lr=3e-3)
        assert est.get_params()["lr"] == 3e-3
        twin = clone(est)
        assert twin.get_params() == est.get_params() and twin is not est

    def test_not_fitted(self):
        with pytest.raises(NotFittedError):
            small_est().predict(small_bags(2))

    def test_output_shapes(self):
        bags = small_bags()
        est = small_est().fit(bags)
        n = sum(len(b) for b in bags)
        assert est.decision_function(bags).shape == (n,)
        proba = est.predict_proba(bags)
        assert proba.shape == (n, 2)
        np.testing.assert_allclose(proba.sum(axis=1), 1.0)
        assert set(np.unique(est.predict(bags))) <= {0, 1}
        assert est.transform(bags).shape == (n, 8)
        assert 0.0 <= est.score(bags) <= 1.0
        assert len(est.history_) == 3 and est.epoch_ == 3

    def test_deterministic(self):
        bags = small_bags()
        a = small_est().fit(bags).decision_function(bags)
        b = small_est().fit(bags).decision_function(bags)
        np.testing.assert_array_equal(a, b)

    def test_seed_changes_result(self):
        bags = small_bags()
        a = small_est(random_state=0).fit(bags).decision_function(bags)
        b = small_est(random_state=1).fit(bags).decision_function(bags)
        assert not np.array_equal(a, b)

    def test_permuting_a_bag_permutes_outputs(self):
        bags = small_bags()
        est = small_est().fit(bags)
        perm = np.array([2, 0, 1])
        bag = InstanceBag("x", bags[0].instances[:3], [0, 0, 0], [1, 1, 1])
        a = est.predict_bags([bag.permuted(perm)])[0].logits
        b = est.predict_bags([bag])[0].logits[perm]
        np.testing.assert_allclose(a, b, atol=1e-10)

    def test_invalid_inputs(self):
        est = small_est()
        with pytest.raises(ContractError):
            est.fit([np.zeros(3)])
        with pytest.raises(EmptySetError):
            est.fit([InstanceBag("e", [], [], [])])
        with pytest.raises(ConfigurationError):
            small_est(mode="sideways").fit(small_bags(2))
        with pytest.raises(ConfigurationError):
            small_est(schedule="cosine").fit(small_bags(2))

    def test_voxel_needs_backbone(self):
        bags = small_bags(2, payload="voxel")
        with pytest.raises(ConfigurationError):
            small_est().fit(bags)

    def test_voxel_training(self):
        bags = small_bags(4, payload="voxel", n_max=3)
        est = small_est(backbone=TINY_BACKBONE, epochs=1, voxel_augment=True).fit(bags)
        assert est.n_features_in_ == TINY_BACKBONE.out_channels
        assert np.isfinite(est.decision_function(bags)).all()

    def test_frozen_backbone_mode(self):
        bags = small_bags(4, payload="voxel", n_max=3)
        est = small_est(backbone=TINY_BACKBONE, epochs=1)
        est.set_params(mode="frozen-backbone")
        est.fit(bags)
        assert all(bn.running.populated for bn in est.model_.backbone_batchnorms())

    def test_learns_the_relation(self):
        train = small_bags(300, seed=1, n_keys=3, mask_fraction=0.0)
        test = small_bags(100, seed=2, n_keys=3, mask_fraction=0.0)
        est = small_est(L=2, H=16, g=4, epochs=25, batch_bags=16).fit(train)
        assert est.score(test) > 0.75


class TestCheckpoint:
    def test_save_load_predictions(self, tmp_path):
        bags = small_bags()
        est = small_est().fit(bags)
        est.save(tmp_path / "m.nsat")
        back = small_est().load(tmp_path / "m.nsat", bags)
        assert back.epoch_ == 3
        np.testing.assert_array_equal(back.decision_function(bags), est.decision_function(bags))

    def test_resume_matches_uninterrupted(self, tmp_path):
        bags = small_bags()
        full = small_est(epochs=4).fit(bags)
        half = small_est(epochs=2).fit(bags)
        half.save(tmp_path / "h.nsat")
        resumed = small_est(epochs=4).load(tmp_path / "h.nsat", bags).partial_fit(bags)
        assert [r.epoch for r in resumed.history_] == [2, 3]
        np.testing.assert_array_equal(resumed.decision_function(bags), full.decision_function(bags))


class TestTraining:
    def test_nan_loss_reports_step(self):
        bags = small_bags(8)
        bad = InstanceBag("nan", [np.full(8, np.nan)] * 2, [1, 0], [1, 1])
        est = small_est(epochs=1)
        est._build(bags)
        with pytest.raises(NumericDomainError, match="step"):
            train_epochs(est.model_, est.optimizer_, bags + [bad], est._schedule(), 1, batch_bags=16)

    def test_jitter_leaves_labels(self):
        bags = small_bags(3)
        out = jitter_bags(bags, np.random.default_rng(0), 0.1, False)
        for a, b in zip(bags, out):
            np.testing.assert_array_equal(a.labels, b.labels)
            assert not np.array_equal(np.stack(a.instances), np.stack(b.instances))

    def test_schedule_drives_lr(self):
        rec = []
        small_est(epochs=3, schedule="halve-every-k", period=1, lr=0.01, on_epoch=rec.append).fit(small_bags())
        assert [r.lr for r in rec] == [0.01, 0.005, 0.0025]


class TestTransformers:
    def test_hu_on_arrays_and_volumes(self):
        arr = np.array([-1024.0, -312.0, 400.0, 2000.0]).reshape(1, 1, 4)
        np.testing.assert_allclose(HUNormalizer().fit_transform(arr).ravel(), [-1, 0, 1, 1], atol=1e-12)
        out = HUNormalizer().transform([Volume(arr, (2, 2, 2))])
        assert out[0].spacing == (2.0, 2.0, 2.0)

    def test_pipeline(self):
        v = Volume(np.full((4, 4, 4), 400.0), (2.0, 2.0, 2.0))
        pipe = make_pipeline(IsotropicResampler(), HUNormalizer())
        (out,) = pipe.fit_transform([v])
        assert out.dims == (8, 8, 8)
        np.testing.assert_allclose(out.voxels, 1.0)

    def test_resampler_needs_spacing(self):
        with pytest.raises(ContractError):
            IsotropicResampler().fit_transform([np.zeros((2, 2, 2))])

    def test_resampler_bad_spacing(self):
        with pytest.raises(ConfigurationError):
            IsotropicResampler(spacing=(1, 0, 1)).fit([])
