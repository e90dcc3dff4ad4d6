import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError
from sklearn.model_selection import cross_val_score

from racecar import RacecarClassifier
from racecar.exceptions import ContractError
from racecar.nn import Dense


def blobs(n=120, seed=0):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, n)
    X = rng.normal(size=(n, 4)) + 2.5 * np.where(y[:, None] == 1, 1.0, -1.0)
    return X, np.where(y == 1, "pos", "neg")


def test_params_and_clone():
    clf = RacecarClassifier(hidden_layer_sizes=(5,), racecar="layerwise", epochs=3)
    p = clf.get_params()
    assert p["racecar"] == "layerwise" and p["epochs"] == 3
    c = clone(clf).set_params(epochs=7)
    assert c.epochs == 7 and clf.epochs == 3


def test_fit_predict_string_labels():
    X, y = blobs()
    clf = RacecarClassifier(hidden_layer_sizes=(6,), epochs=100, batch_size=16).fit(X, y)
    assert set(clf.classes_) == {"neg", "pos"}
    assert clf.score(X, y) > 0.95
    proba = clf.predict_proba(X)
    assert proba.shape == (len(X), 2) and np.allclose(proba.sum(1), 1)
    assert clf.n_features_in_ == 4
    assert len(clf.metrics_.rows) > 0


def test_fit_is_deterministic():
    X, y = blobs()
    a = RacecarClassifier(epochs=5, random_state=3).fit(X, y).decision_function(X)
    b = RacecarClassifier(epochs=5, random_state=3).fit(X, y).decision_function(X)
    assert np.array_equal(a, b)


@pytest.mark.parametrize("mode", ["off", "full", "layerwise", "input"])
def test_racecar_modes(mode):
    X, y = blobs(40)
    clf = RacecarClassifier(racecar=mode, epochs=2).fit(X, y)
    reg = [row[2] for row in clf.metrics_.rows]
    assert (max(reg) == 0) == (mode == "off")


def test_ortho_variants():
    X, y = blobs(40)
    for ortho in ("soft", "srip"):
        RacecarClassifier(racecar="off", ortho=ortho, epochs=2).fit(X, y)


def test_transform_stage_widths():
    X, y = blobs(40)
    clf = RacecarClassifier(hidden_layer_sizes=(6, 3), epochs=2).fit(X, y)
    assert clf.transform(X).shape == (40, 3)
    assert clf.set_params(transform_stage=1).transform(X).shape == (40, 6)
    with pytest.raises(ContractError):
        clf.set_params(transform_stage=9).transform(X)


def test_explicit_layers_with_image_shape():
    rng = np.random.default_rng(0)
    X = rng.random((20, 16))
    y = np.arange(20) % 2
    clf = RacecarClassifier(layers=[Dense(2)], input_shape=(4, 4, 1), epochs=2).fit(X, y)
    assert clf.network_.input_shape == (4, 4, 1)
    assert clf.predict(X).shape == (20,)
    with pytest.raises(ContractError):
        RacecarClassifier(input_shape=(5, 5), epochs=1).fit(X, y)


def test_warm_start_continues_training():
    X, y = blobs(60)
    clf = RacecarClassifier(epochs=2, warm_start=True).fit(X, y)
    net = clf.network_
    clf.fit(X, y)
    assert clf.network_ is net


def test_errors():
    X, y = blobs(30)
    with pytest.raises(NotFittedError):
        RacecarClassifier().predict(X)
    with pytest.raises(ContractError):
        RacecarClassifier(epochs=1).fit(X, np.zeros(30))
    with pytest.raises(ContractError):
        RacecarClassifier(racecar="bogus", epochs=1).fit(X, y)
    clf = RacecarClassifier(epochs=1).fit(X, y)
    with pytest.raises(ContractError):
        clf.predict(X[:, :3])


def test_works_with_model_selection():
    X, y = blobs(60)
    scores = cross_val_score(RacecarClassifier(epochs=10, batch_size=10), X, y, cv=3)
    assert scores.mean() > 0.9
