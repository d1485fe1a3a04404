"""Scikit-learn style front door for the grounding model.

``X`` is a list of LayerFeatureSet (one per video-query pair) and ``y`` a
list of GroundingLabels, so the estimator slots into sklearn tooling
(``clone``, grid search over its constructor knobs) while the heavy lifting
stays in the training module.
"""

from __future__ import annotations

from sklearn.base import BaseEstimator

from .features import GroundingLabels, LayerFeatureSet
from .metrics import mean_iou
from .training import TrainConfig, train


def check_feature_sets(X, k: int | None = None):
    """Validate a list of feature sets; returns it unchanged."""
    if not isinstance(X, (list, tuple)) or not X:
        raise ValueError("X must be a non-empty list of LayerFeatureSet")
    first = X[0]
    for i, fs in enumerate(X):
        if not isinstance(fs, LayerFeatureSet):
            raise TypeError(f"X[{i}] is {type(fs).__name__}, expected LayerFeatureSet")
        if fs.visual.shape[3] != first.visual.shape[3]:
            raise ValueError(f"X[{i}] visual width differs from X[0]")
        if fs.query.shape[2] != first.query.shape[2]:
            raise ValueError(f"X[{i}] query width differs from X[0]")
        if k is not None and fs.n_layers < k:
            raise ValueError(
                f"X[{i}] has {fs.n_layers} layers; refinement depth k={k} "
                "needs at least that many"
            )
    return X


def check_labels(X, y):
    if y is None or len(y) != len(X):
        raise ValueError("y must provide one GroundingLabels per feature set")
    for i, (fs, labels) in enumerate(zip(X, y)):
        if not isinstance(labels, GroundingLabels):
            raise TypeError(f"y[{i}] is {type(labels).__name__}, expected GroundingLabels")
        labels.validate(fs.num_frames)
    return y


class VideoGroundingEstimator(BaseEstimator):
    """Fit the recurrent fusion model on feature sets; predict moments.

    Parameters mirror the training configuration; feature widths are
    inferred from the data at fit time. ``predict`` returns one list of
    (start, end, confidence) moments per sample; ``score`` is the mean
    top-1 IoU on held-out pairs.
    """

    def __init__(self, hidden_size=64, num_heads=4, k=4, reversed_order=True,
                 share_params=True, droppath_p=0.1, pyramid_levels=2,
                 epochs=10, batch_size=8, lr=1e-3, warmup_steps=0,
                 lr_drop_epoch=0, weight_decay=1e-4, seed=0, max_steps=0,
                 nms_threshold=0.7):
        self.hidden_size = hidden_size
        self.num_heads = num_heads
        self.k = k
        self.reversed_order = reversed_order
        self.share_params = share_params
        self.droppath_p = droppath_p
        self.pyramid_levels = pyramid_levels
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.warmup_steps = warmup_steps
        self.lr_drop_epoch = lr_drop_epoch
        self.weight_decay = weight_decay
        self.seed = seed
        self.max_steps = max_steps
        self.nms_threshold = nms_threshold

    def _config(self, X) -> TrainConfig:
        return TrainConfig(
            d_v=X[0].visual.shape[3],
            d_q=X[0].query.shape[2],
            hidden_size=self.hidden_size,
            num_heads=self.num_heads,
            K=self.k,
            reversed=self.reversed_order,
            share_params=self.share_params,
            droppath_p=self.droppath_p,
            pyramid_levels=self.pyramid_levels,
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr=self.lr,
            warmup_steps=self.warmup_steps,
            lr_drop_epoch=self.lr_drop_epoch,
            weight_decay=self.weight_decay,
            seed=self.seed,
            max_steps=self.max_steps,
        )

    def fit(self, X, y):
        X = check_feature_sets(X, self.k)
        y = check_labels(X, y)
        self.config_ = self._config(X)
        self.model_, self.history_ = train(self.config_, list(zip(X, y)))
        return self

    def _require_fitted(self):
        if not hasattr(self, "model_"):
            raise RuntimeError("estimator is not fitted; call fit first")

    def predict(self, X):
        self._require_fitted()
        X = check_feature_sets(X, self.k)
        out = []
        for fs in X:
            kept, _, _ = self.model_.predict(fs, self.nms_threshold)
            out.append([(p.start, p.end, p.confidence) for p in kept])
        return out

    def predict_saliency(self, X):
        self._require_fitted()
        X = check_feature_sets(X, self.k)
        return [self.model_.predict(fs, self.nms_threshold)[1] for fs in X]

    def score(self, X, y):
        """Mean top-1 IoU against the labeled moments."""
        self._require_fitted()
        y = check_labels(X, y)
        preds, gts = [], []
        for fs, labels in zip(X, y):
            kept, _, _ = self.model_.predict(fs, self.nms_threshold)
            preds.append(kept)
            gts.append([tuple(m) for m in labels.moments])
        return mean_iou(preds, gts)
