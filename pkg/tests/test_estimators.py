import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from madkit.errors import ConfigError, UsageError
from madkit.estimators import MADClassifier, MADPretrainer, MADRegressor

from test_distill import TINY_ENCODER, toy_views
from test_heads import blobs


def tiny_pretrainer(**overrides):
    base = dict(encoder=TINY_ENCODER, epochs=1, batch_size=10,
                steps_per_epoch=2, n_global=2, n_local=1, seed=5)
    base.update(overrides)
    return MADPretrainer(**base)


@pytest.fixture(scope="module")
def fitted():
    return tiny_pretrainer().fit(toy_views())


class TestMADPretrainer:
    def test_transform_shape_and_dim(self, fitted):
        views = toy_views()
        emb = fitted.transform(views)
        assert emb.shape == (views.n_cells, 32)
        assert fitted.embedding_dim_ == 32

    def test_transform_view_halves(self, fitted):
        views = toy_views()
        joint = fitted.transform(views)
        morph = fitted.transform_view(views, "morphology")
        env = fitted.transform_view(views, "environment")
        np.testing.assert_array_equal(joint[:, :16], morph)
        np.testing.assert_array_equal(joint[:, 16:], env)

    def test_unfitted_transform_rejected(self):
        with pytest.raises(NotFittedError):
            tiny_pretrainer().transform(toy_views())

    def test_requires_cell_views(self, fitted):
        with pytest.raises(UsageError):
            fitted.transform(np.zeros((4, 8)))
        with pytest.raises(UsageError):
            tiny_pretrainer().fit(np.zeros((4, 8)))

    def test_clone_and_params_round_trip(self):
        est = tiny_pretrainer(cross_weight=0.25, n_local=3)
        dup = clone(est)
        assert dup.get_params() == est.get_params()
        assert dup.cross_weight == 0.25
        est.set_params(cross_weight=0.75)
        assert est.cross_weight == 0.75
        assert dup.cross_weight == 0.25

    def test_invalid_hyperparameters_fail_at_fit(self):
        est = tiny_pretrainer(cross_weight=-1.0)
        with pytest.raises(ConfigError):
            est.fit(toy_views())

    def test_fit_is_deterministic(self):
        views = toy_views()
        a = tiny_pretrainer().fit(views).transform(views)
        b = tiny_pretrainer().fit(views).transform(views)
        np.testing.assert_array_equal(a, b)

    def test_history_recorded(self, fitted):
        assert len(fitted.history_) == 1
        assert np.isfinite(fitted.history_[0]["loss_mean"])


class TestMADClassifier:
    def test_fit_predict_score(self):
        x, y = blobs()
        est = MADClassifier(hidden=16, epochs=30, batch_size=32)
        assert est.fit(x, y) is est
        np.testing.assert_array_equal(est.classes_, [0, 1, 2])
        assert est.score(x, y) > 0.95
        p = est.predict_proba(x)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)

    def test_unfitted_rejected(self):
        with pytest.raises(NotFittedError):
            MADClassifier().predict(np.zeros((2, 3)))

    def test_clone_keeps_hyperparameters(self):
        est = MADClassifier(balance="reweight", hidden=8)
        dup = clone(est)
        assert dup.balance == "reweight"
        assert dup.hidden == 8


class TestMADRegressor:
    def test_fit_predict_score(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(150, 5))
        y = x @ rng.normal(size=(5, 2)) + 0.05 * rng.normal(size=(150, 2))
        est = MADRegressor(hidden=16, epochs=60, batch_size=32)
        est.fit(x, y)
        assert est.predict(x).shape == (150, 2)
        assert est.score(x, y) > 0.8

    def test_unfitted_rejected(self):
        with pytest.raises(NotFittedError):
            MADRegressor().predict(np.zeros((2, 3)))
