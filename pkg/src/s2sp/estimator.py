"""Scikit-learn style front door: fit on one noisy image, transform to denoise.

The estimator wraps the training loop and dropout-ensemble inference so the
denoiser composes with sklearn tooling (``get_params``/``set_params``,
``clone``, pipelines). X is a single (H, W) or (H, W, C) image in [0, 1],
not a sample matrix.
"""

from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .pipeline import (DEFAULT_ENSEMBLE_SIZE, Checkpoint, TrainConfig,
                       denoise_ensemble, train)
from .validation import check_image


class SelfSupervisedDenoiser(TransformerMixin, BaseEstimator):
    """Single-image denoiser trained with Bernoulli-masked self-supervision.

    Parameters mirror :class:`~s2sp.pipeline.TrainConfig`; defaults are the
    stock synthetic-noise settings (4000 steps, shared probability 0.4,
    Adam at 4e-4, quality weight 2e-8) plus a 500-instance ensemble.

    Examples
    --------
    >>> den = SelfSupervisedDenoiser(steps=200, ensemble_size=20, seed=7)
    >>> restored = den.fit_transform(noisy)          # doctest: +SKIP
    """

    def __init__(self, steps: int = 4000, p: float = 0.4, lr: float = 4e-4,
                 lambda_iqa: float = 2e-8, loss_variant: str = "l1",
                 normalize_loss: bool = False, gconv_enabled: bool = True,
                 scorer: str = "smoothtv", ensemble_size: int = DEFAULT_ENSEMBLE_SIZE,
                 p_mask: Optional[float] = None, p_drop: Optional[float] = None,
                 threads: Optional[int] = None, seed: int = 0):
        self.steps = steps
        self.p = p
        self.lr = lr
        self.lambda_iqa = lambda_iqa
        self.loss_variant = loss_variant
        self.normalize_loss = normalize_loss
        self.gconv_enabled = gconv_enabled
        self.scorer = scorer
        self.ensemble_size = ensemble_size
        self.p_mask = p_mask
        self.p_drop = p_drop
        self.threads = threads
        self.seed = seed

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            steps=self.steps, p=self.p, lr=self.lr, lambda_iqa=self.lambda_iqa,
            loss_variant=self.loss_variant, normalize_loss=self.normalize_loss,
            gconv_enabled=self.gconv_enabled, scorer=self.scorer, seed=self.seed,
            p_mask=self.p_mask, p_drop=self.p_drop)

    def fit(self, X, y=None):
        """Train the network on the noisy image X (y is ignored)."""
        image = check_image(X, "X")
        self.checkpoint_, self.loss_trace_ = train(image, self._train_config())
        return self

    def transform(self, X) -> np.ndarray:
        """Denoise X with the fitted network (typically the training image)."""
        self._require_fitted()
        out = denoise_ensemble(self.checkpoint_, np.asarray(X),
                               n_instances=self.ensemble_size,
                               p_mask=self.p_mask, seed=self.seed,
                               threads=self.threads)
        return out[:, :, 0] if np.asarray(X).ndim == 2 else out

    def predict(self, X) -> np.ndarray:
        """Alias of :meth:`transform`."""
        return self.transform(X)

    def save_checkpoint(self, path) -> None:
        self._require_fitted()
        self.checkpoint_.save(path)

    @classmethod
    def from_checkpoint(cls, path, **params) -> "SelfSupervisedDenoiser":
        """Rebuild a fitted estimator from a saved checkpoint file."""
        ckpt = Checkpoint.load(path)
        est = cls(**params)
        est.checkpoint_ = ckpt
        est.loss_trace_ = []
        return est

    def _require_fitted(self) -> None:
        if not hasattr(self, "checkpoint_"):
            raise NotFittedError(
                "This SelfSupervisedDenoiser instance is not fitted yet; call fit first.")
