"""scikit-learn compatible classifier wrapping network construction and training."""
import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .datasets import Dataset
from .exceptions import ContractError
from .nn import Activation, BatchNorm, Dense, build_network, forward
from .regularizers import RacecarConfig
from .training import TrainConfig, train

__all__ = ["RacecarClassifier"]


class RacecarClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Fully connected classifier with optional racecar or orthogonality regularization.

    ``racecar`` selects the reverse-pass constraint: ``"off"``, ``"full"``,
    ``"layerwise"`` or ``"input"`` (only the input reconstruction is
    penalized). ``layers`` overrides ``hidden_layer_sizes``/``activation``
    with an explicit layer list; ``input_shape`` lets flat feature rows be
    reshaped for such a list (images, for instance).

    ``transform`` returns the output of stage ``transform_stage`` (1-based;
    the last hidden stage by default).
    """

    def __init__(
        self,
        hidden_layer_sizes=(10,),
        activation="tanh",
        batch_norm=False,
        layers=None,
        input_shape=None,
        racecar="full",
        racecar_lambda=1e-4,
        racecar_reduction="mean",
        ortho="off",
        ortho_weight=1e-4,
        srip_beta=1e-4,
        optimizer="adam",
        learning_rate=1e-3,
        epochs=200,
        batch_size=32,
        warm_start=False,
        random_state=0,
        log_every=10,
        transform_stage=None,
    ):
        self.hidden_layer_sizes = hidden_layer_sizes
        self.activation = activation
        self.batch_norm = batch_norm
        self.layers = layers
        self.input_shape = input_shape
        self.racecar = racecar
        self.racecar_lambda = racecar_lambda
        self.racecar_reduction = racecar_reduction
        self.ortho = ortho
        self.ortho_weight = ortho_weight
        self.srip_beta = srip_beta
        self.optimizer = optimizer
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.warm_start = warm_start
        self.random_state = random_state
        self.log_every = log_every
        self.transform_stage = transform_stage

    def _layer_list(self, n_classes):
        if self.layers is not None:
            return list(self.layers)
        out = []
        for width in self.hidden_layer_sizes:
            out.append(Dense(int(width)))
            if self.batch_norm:
                out.append(BatchNorm())
            out.append(Activation(self.activation))
        out.append(Dense(n_classes))
        return out

    def _racecar_config(self):
        if self.racecar == "off":
            return None
        if self.racecar == "input":
            return RacecarConfig(self.racecar_lambda, "full", constrained_layers=[1], reduction=self.racecar_reduction)
        if self.racecar in ("full", "layerwise"):
            return RacecarConfig(self.racecar_lambda, self.racecar, reduction=self.racecar_reduction)
        raise ContractError(f"unknown racecar mode {self.racecar!r}")

    def _shape(self, X):
        shape = tuple(self.input_shape) if self.input_shape is not None else X.shape[1:]
        if int(np.prod(shape)) != int(np.prod(X.shape[1:])):
            raise ContractError(f"input_shape {shape} does not fit rows of shape {X.shape[1:]}")
        return X.reshape((len(X),) + shape)

    def fit(self, X, y):
        X, y = check_X_y(X, y, allow_nd=True, dtype=np.float64)
        classes = unique_labels(y)
        if self.warm_start and hasattr(self, "network_"):
            if not np.array_equal(classes, self.classes_):
                raise ContractError("warm start needs the classes seen in the first fit")
        else:
            self.classes_ = classes
        if len(self.classes_) < 2:
            raise ContractError("need at least two classes")
        idx = np.searchsorted(self.classes_, y)
        Xs = self._shape(X)
        if not (self.warm_start and hasattr(self, "network_")):
            self.network_ = build_network(self._layer_list(len(self.classes_)), Xs.shape[1:], seed=self.random_state)
        cfg = TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            optimizer=self.optimizer,
            seed=self.random_state,
            racecar=self._racecar_config(),
            ortho=self.ortho,
            ortho_weight=self.ortho_weight,
            srip_beta=self.srip_beta,
            log_every=self.log_every,
        )
        _, self.metrics_ = train(self.network_, Dataset(Xs, idx, "train", "estimator"), cfg)
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def _checked(self, X):
        check_is_fitted(self, "network_")
        X = check_array(X, allow_nd=True, dtype=np.float64)
        if int(np.prod(X.shape[1:])) != self.n_features_in_:
            raise ContractError(f"expected {self.n_features_in_} features, got {int(np.prod(X.shape[1:]))}")
        return X.reshape((len(X),) + self.network_.input_shape)

    def decision_function(self, X):
        Xs = self._checked(X)
        out, _ = forward(self.network_, Xs)
        return out

    def predict_proba(self, X):
        z = self.decision_function(X)
        z = z - z.max(axis=1, keepdims=True)
        p = np.exp(z)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]

    def transform(self, X):
        Xs = self._checked(X)
        net = self.network_
        m = self.transform_stage or max(net.n_stages - 1, 1)
        if not 1 <= m <= net.n_stages:
            raise ContractError(f"transform_stage {m} outside 1..{net.n_stages}")
        _, trace = forward(net, Xs, record=True)
        return trace[m + 1].reshape(len(Xs), -1)
