"""Scikit-learn style facade over the completion pipeline.

`CloudCompleter` wraps model construction, training, and inference in
the fit/predict idiom so the pipeline composes with sklearn tooling
(grid search over hyperparameters, cloning, parameter introspection).
The estimator operates on `oracle.Sample` objects; ground truth travels
inside the samples, so `y` is ignored.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from . import network, oracle, training

_PRESETS = {
    "full": network.full_config,
    "small": network.small_config,
    "tiny": network.tiny_config,
}


class CloudCompleter(BaseEstimator):
    """Complete partial point clouds from scans plus posed depth views.

    Parameters mirror the underlying ModelConfig / TrainConfig knobs
    that matter for model selection; everything else stays at the
    preset's defaults.
    """

    def __init__(self, preset="small", epochs=80, batch_size=8, lr=1e-4,
                 keep_fraction=0.75, use_views=True, seed=0,
                 conf_weight=0.2, loss_gt_points=4096):
        self.preset = preset
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.keep_fraction = keep_fraction
        self.use_views = use_views
        self.seed = seed
        self.conf_weight = conf_weight
        self.loss_gt_points = loss_gt_points

    def _check_samples(self, X):
        samples = list(X)
        if not samples:
            raise ValueError("expected a non-empty sequence of samples")
        for s in samples:
            if not isinstance(s, oracle.Sample):
                raise TypeError(f"expected oracle.Sample, got {type(s).__name__}")
        return samples

    def fit(self, X, y=None, val_samples=None, run_dir=None, log=None):
        if self.preset not in _PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}; "
                             f"choose from {sorted(_PRESETS)}")
        samples = self._check_samples(X)
        config = _PRESETS[self.preset](keep_fraction=self.keep_fraction,
                                       use_views=self.use_views)
        self.model_ = network.CompletionModel(config, seed=self.seed)
        cfg = training.TrainConfig(epochs=self.epochs, batch_size=self.batch_size,
                                   lr=self.lr, seed=self.seed,
                                   conf_weight=self.conf_weight,
                                   loss_gt_points=self.loss_gt_points)
        self.history_ = training.train(self.model_, samples, val_samples or [],
                                       cfg, run_dir=run_dir, log=log)
        return self

    def _require_fitted(self):
        if not hasattr(self, "model_"):
            raise RuntimeError("estimator is not fitted; call fit() first")

    def predict(self, X):
        """Dense completions, one (R * n_in, 3) array per sample."""
        self._require_fitted()
        return [self.model_.forward(s).dense.data.astype(np.float64)
                for s in self._check_samples(X)]

    def transform(self, X):
        return self.predict(X)

    def predict_stages(self, X):
        """Per-sample dict of coarse / filtered / dense / confidence arrays."""
        self._require_fitted()
        out = []
        for s in self._check_samples(X):
            r = self.model_.forward(s)
            out.append({"coarse": r.coarse.data.astype(np.float64),
                        "filtered": r.filtered.data.astype(np.float64),
                        "dense": r.dense.data.astype(np.float64),
                        "confidence": r.scores.data.astype(np.float64)})
        return out

    def score(self, X, y=None):
        """Negative mean CD-l1 (x1000 scale), so larger is better."""
        self._require_fitted()
        report = training.evaluate(self.model_, self._check_samples(X))
        return -report.means["cd_l1"]

    def save(self, path):
        self._require_fitted()
        self.model_.save(path)

    def load(self, path):
        """Load weights into a freshly built model for the current params."""
        config = _PRESETS[self.preset](keep_fraction=self.keep_fraction,
                                       use_views=self.use_views)
        self.model_ = network.CompletionModel(config, seed=self.seed)
        self.model_.load(path)
        self.history_ = []
        return self
