import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from conftest import make_bundle
from fscil_prompts import ConfigurationError, DataError, ProtocolError, PromptTunedClassifier


@pytest.fixture
def sessions(small_data):
    names = np.array(small_data.class_names, dtype=object)
    y_all = names[small_data.labels]
    base = np.isin(small_data.labels, [0, 1, 2, 3]) & (np.arange(len(y_all)) % 12 < 6)
    inc = np.isin(small_data.labels, [4, 5]) & (np.arange(len(y_all)) % 12 < 2)
    return (small_data.images[base], y_all[base]), (small_data.images[inc], y_all[inc])


def _model(bundle, **kw):
    params = dict(learning_rate=0.3, epochs=2, batch_size=8, incremental_epochs=1)
    params.update(kw)
    return PromptTunedClassifier(bundle=bundle, **params)


def test_params_roundtrip(aligned_bundle):
    model = _model(aligned_bundle, prompt_length=3)
    params = model.get_params()
    assert params["prompt_length"] == 3 and params["learning_rate"] == 0.3
    assert clone(model).get_params()["prompt_length"] == 3


def test_fit_partial_fit_predict(aligned_bundle, sessions):
    (Xb, yb), (Xi, yi) = sessions
    model = _model(aligned_bundle).fit(Xb, yb)
    assert list(model.classes_) == sorted(set(yb))
    proba = model.predict_proba(Xb)
    assert proba.shape == (len(Xb), 4) and np.allclose(proba.sum(axis=1), 1, atol=1e-5)
    model.partial_fit(Xi, yi)
    assert len(model.classes_) == 6 and model.session_ == 1
    assert model.class_counts_ == [4, 2]
    assert set(model.predict(Xi)) <= set(model.classes_)
    assert model.transform(Xi).shape == (len(Xi), aligned_bundle.d_joint)
    assert {r["session"] for r in model.training_log_} == {0, 1}
    assert 0.0 <= model.score(Xb, yb) <= 1.0


def test_repeated_classes_rejected(aligned_bundle, sessions):
    (Xb, yb), _ = sessions
    model = _model(aligned_bundle).fit(Xb, yb)
    with pytest.raises(ProtocolError):
        model.partial_fit(Xb[:2], yb[:2])


def test_fit_resets(aligned_bundle, sessions):
    (Xb, yb), (Xi, yi) = sessions
    model = _model(aligned_bundle).fit(Xb, yb).partial_fit(Xi, yi)
    model.fit(Xb, yb)
    assert model.session_ == 0 and len(model.classes_) == 4


def test_zero_shot_does_not_train(aligned_bundle, sessions):
    (Xb, yb), _ = sessions
    model = _model(aligned_bundle, ablation="zero_shot", learning_rate=-1).fit(Xb, yb)
    assert model.bank_ is None and model.training_log_ == []
    assert model.predict(Xb).shape == (len(Xb),)


def test_init_bank_is_not_mutated(aligned_bundle, sessions):
    from fscil_prompts import init_prompts

    (Xb, yb), _ = sessions
    bank = init_prompts(2, 1, aligned_bundle.d_nlp, aligned_bundle.d_cv)
    before = bank.prompts.detach().clone()
    _model(aligned_bundle, init_bank=bank).fit(Xb, yb)
    assert (bank.prompts == before).all()


def test_input_validation(aligned_bundle, sessions):
    (Xb, yb), _ = sessions
    model = _model(aligned_bundle)
    with pytest.raises(NotFittedError):
        model.predict(Xb)
    with pytest.raises(DataError):
        model.fit(Xb[:, :, :8], yb)
    bad = Xb.copy()
    bad[0, 0, 0, 0] = np.nan
    with pytest.raises(DataError):
        model.fit(bad, yb)
    with pytest.raises(ValueError):
        model.fit(Xb, yb[:-1])
    with pytest.raises(DataError):
        model.fit(Xb, np.array([""] * len(Xb), dtype=object))


def test_setup_errors(aligned_bundle, sessions):
    (Xb, yb), _ = sessions
    with pytest.raises(ConfigurationError):
        PromptTunedClassifier().fit(Xb, yb)
    with pytest.raises(ProtocolError):
        _model(make_bundle()).fit(Xb, yb)
    with pytest.raises(ConfigurationError):
        _model(aligned_bundle, ablation="other").fit(Xb, yb)
    with pytest.raises(ConfigurationError):
        _model(aligned_bundle, prompt_depth=5).fit(Xb, yb)
