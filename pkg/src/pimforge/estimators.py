"""scikit-learn style front ends for training, compression and PIM simulation."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import trainer
from .admm import AdmmSchedule, compress
from .cost import CostParams, compare, estimate
from .mapper import PHYSICAL, build_layout, simulate
from .model import Model, QuantSpec, build_network, sparsity_report
from .sparsity import SparsityConstraint, parse_constraints
from .validation import check_images, check_images_labels


def _encode_labels(est, y):
    est.classes_, y_enc = np.unique(y, return_inverse=True)
    return y_enc


class _ModelClassifierMixin(ClassifierMixin):
    """predict / predict_proba on top of a fitted ``model_``."""

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        X = check_images(X, self.model_.input_shape)
        return np.concatenate(
            [trainer.forward(self.model_, X[i : i + 1024]) for i in range(0, len(X), 1024)]
        )

    def predict_proba(self, X):
        return np.exp(trainer.log_softmax(self.decision_function(X)))

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[scores.argmax(axis=1)]


class TinyCNNClassifier(_ModelClassifierMixin, BaseEstimator):
    """Small CONV/ReLU/max-pool/FC classifier trained with minibatch SGD.

    Parameters
    ----------
    input_shape : tuple of int
        ``(C, H, W)`` of one sample.
    conv : sequence of (filters, kernel_size)
        CONV layers, each followed by ReLU and a 2x2 max-pool.
    hidden : sequence of int
        Widths of hidden FC layers before the output layer.
    epochs, learning_rate, batch_size, momentum, lr_decay
        SGD settings; the learning rate is multiplied by ``lr_decay`` after
        every epoch.
    random_state : int
        Seeds both the initialisation and the minibatch order.

    Attributes
    ----------
    model_ : Model
    classes_ : ndarray
    """

    def __init__(
        self,
        input_shape=(1, 16, 16),
        conv=((16, 3), (32, 3)),
        hidden=(),
        epochs=30,
        learning_rate=0.02,
        batch_size=32,
        momentum=0.9,
        lr_decay=0.93,
        random_state=0,
    ):
        self.input_shape = input_shape
        self.conv = conv
        self.hidden = hidden
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.momentum = momentum
        self.lr_decay = lr_decay
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_images_labels(X, y, self.input_shape)
        y_enc = _encode_labels(self, y)
        model = build_network(
            self.input_shape, list(self.conv), len(self.classes_), hidden=list(self.hidden),
            seed=self.random_state,
        )
        self.history_ = []
        trainer.train(
            model, X, y_enc, epochs=self.epochs, learning_rate=self.learning_rate,
            batch_size=self.batch_size, momentum=self.momentum, lr_decay=self.lr_decay,
            seed=self.random_state, log=self.history_.append,
        )
        self.model_ = model
        return self


class ADMMCompressor(_ModelClassifierMixin, BaseEstimator):
    """Structured pruning and quantization of a trained network by ADMM.

    ``fit`` runs the ADMM rounds, masked retraining and the final
    quantization on ``(X, y)``.

    Parameters
    ----------
    base_model : Model or fitted TinyCNNClassifier
    constraints : list of dict or SparsityConstraint
        Entries ``{"layer", "kind", "budget"}`` or ``{"layer", "kind", "keep_ratio"}``.
    weight_bits : int or None
        Signed weight width; ``None`` disables quantization.
    input_bits, input_frac_bits : int
        Unsigned activation format used by the bit-serial engine.
    schedule : dict, optional
        Overrides for :class:`pimforge.admm.AdmmSchedule`.
    propagate : bool
        Push pruned filters/channels into neighbouring layers before retraining.

    Attributes
    ----------
    model_ : Model
    sparsity_ : SparsityReport
    history_ : list of dict
    """

    def __init__(
        self,
        base_model=None,
        constraints=(),
        weight_bits=8,
        input_bits=8,
        input_frac_bits=5,
        schedule=None,
        propagate=True,
        random_state=0,
    ):
        self.base_model = base_model
        self.constraints = constraints
        self.weight_bits = weight_bits
        self.input_bits = input_bits
        self.input_frac_bits = input_frac_bits
        self.schedule = schedule
        self.propagate = propagate
        self.random_state = random_state

    def _base(self) -> Model:
        base = self.base_model
        if isinstance(base, TinyCNNClassifier):
            check_is_fitted(base, "model_")
            return base.model_
        if not isinstance(base, Model):
            raise TypeError("base_model must be a Model or a fitted TinyCNNClassifier")
        return base

    def _constraints(self, model):
        plain = [c.to_dict() if isinstance(c, SparsityConstraint) else dict(c) for c in self.constraints]
        return parse_constraints(plain, model)

    def fit(self, X, y):
        base = self._base()
        X, y = check_images_labels(X, y, base.input_shape)
        if isinstance(self.base_model, TinyCNNClassifier):
            self.classes_ = self.base_model.classes_
        else:
            self.classes_ = np.arange(base.num_classes)
        y_enc = np.minimum(np.searchsorted(self.classes_, y), len(self.classes_) - 1)
        if not np.array_equal(self.classes_[y_enc], y):
            raise ValueError("labels are not among the classes of the base model")
        quant = None
        if self.weight_bits is not None:
            quant = QuantSpec(self.weight_bits, self.input_bits, 0, True, self.input_frac_bits)
        sched = AdmmSchedule(**{"seed": self.random_state, **(self.schedule or {})})
        self.history_ = []
        self.model_ = compress(
            base, self._constraints(base), quant, (X, y_enc), sched, propagate=self.propagate,
            log=self.history_.append,
        )
        self.sparsity_ = sparsity_report(self.model_)
        return self

    @property
    def compression_rate_(self) -> float:
        check_is_fitted(self, "model_")
        return self.sparsity_.compression_rate


class PimSimulator(ClassifierMixin, BaseEstimator):
    """Bit-serial inference of a quantized model on its PE/sub-array layout.

    ``fit`` only builds the layout; ``predict`` runs the simulation and
    keeps the per-layer operation counts in ``trace_``.

    Parameters
    ----------
    model : Model or fitted ADMMCompressor
    mode : {"physical", "lut"}
    """

    def __init__(self, model=None, mode=PHYSICAL):
        self.model = model
        self.mode = mode

    def _model(self) -> Model:
        if isinstance(self.model, ADMMCompressor):
            check_is_fitted(self.model, "model_")
            return self.model.model_
        if not isinstance(self.model, Model):
            raise TypeError("model must be a quantized Model or a fitted ADMMCompressor")
        return self.model

    def fit(self, X=None, y=None):
        model = self._model()
        self.layout_ = build_layout(model, self.mode)
        if isinstance(self.model, ADMMCompressor):
            self.classes_ = self.model.classes_
        else:
            self.classes_ = np.arange(model.num_classes)
        return self

    def decision_function(self, X):
        check_is_fitted(self, "layout_")
        X = check_images(X, self.layout_.model.input_shape)
        result = simulate(self.layout_, X)
        self.trace_ = result.traces
        return result.logits

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[scores.argmax(axis=1)]

    def cost_report(self, params=None, baseline=None):
        """Cost of one inference; pass a baseline report to fill ``ratios``."""
        check_is_fitted(self, ["layout_", "trace_"])
        report = estimate(self.layout_, self.trace_, params or CostParams.default())
        if baseline is not None:
            report.ratios = compare(report, baseline)
        return report
