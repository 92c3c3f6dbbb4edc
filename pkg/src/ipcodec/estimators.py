"""scikit-learn style wrappers around the codec and the toy embedder."""
from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .bitstream import ImageCodec
from .codec import Architecture
from .embedder import AlignerConfig, ToyEmbedder, make_embedder
from .evaluation import cosine_distances, psnr
from .training import Checkpoint, TrainConfig, load_checkpoint, train, warm_start as _warm_start
from .validation import check_fraction, check_images, check_labels

DEFAULT_LAMBDA_RATE = 1e-6


class IdentityPreservingCodec(TransformerMixin, BaseEstimator):
    """Learned image codec trained under the REC, IPR or IP objective.

    ``lambda_id=0`` trains for reconstruction only. With ``lambda_id > 0`` the
    model must be warm-started (``warm_start`` = a fitted codec, a
    :class:`Checkpoint` or a checkpoint path) unless ``allow_cold_start``.
    ``transform`` returns reconstructions decoded from real bitstreams.
    """

    def __init__(self, lambda_rate: float = DEFAULT_LAMBDA_RATE, lambda_id: float = 0.0, recon: str = "l2",
                 lr: float = 1e-3, batch_size: int = 8, steps: int = 3000, seed: int = 0,
                 n_filters: int = 64, latent_channels: int = 32, hyper_channels: int = 16,
                 embedder=None, warm_start=None, allow_cold_start: bool = False):
        self.lambda_rate = lambda_rate
        self.lambda_id = lambda_id
        self.recon = recon
        self.lr = lr
        self.batch_size = batch_size
        self.steps = steps
        self.seed = seed
        self.n_filters = n_filters
        self.latent_channels = latent_channels
        self.hyper_channels = hyper_channels
        self.embedder = embedder
        self.warm_start = warm_start
        self.allow_cold_start = allow_cold_start

    def _config(self) -> TrainConfig:
        arch = Architecture(self.n_filters, self.latent_channels, self.hyper_channels)
        return TrainConfig(lambda_rate=self.lambda_rate, lambda_id=self.lambda_id, recon=self.recon, lr=self.lr,
                           batch_size=self.batch_size, steps=self.steps, seed=self.seed, arch=arch,
                           allow_cold_start=self.allow_cold_start)

    def _embedder(self) -> ToyEmbedder | None:
        e = self.embedder
        if isinstance(e, ToyFaceEmbedder):
            check_is_fitted(e)
            return e.embedder_
        return e

    def _init(self, config: TrainConfig) -> Checkpoint | None:
        src = self.warm_start
        if src is None:
            return None
        if isinstance(src, IdentityPreservingCodec):
            check_is_fitted(src)
            src = src.checkpoint_
        elif not isinstance(src, Checkpoint):
            src = load_checkpoint(src)
        return _warm_start(src, config)

    def fit(self, X, y=None, log_path=None):
        X = check_images(X)
        config = self._config()
        self.checkpoint_, self.log_ = train(config, X, embedder=self._embedder(), init=self._init(config),
                                            log_path=log_path)
        self.codec_ = ImageCodec(self.checkpoint_.model)
        return self

    @classmethod
    def from_checkpoint(cls, ckpt) -> "IdentityPreservingCodec":
        if not isinstance(ckpt, Checkpoint):
            ckpt = load_checkpoint(ckpt)
        a = ckpt.model.arch
        est = cls(n_filters=a.n_filters, latent_channels=a.latent_channels, hyper_channels=a.hyper_channels)
        est.checkpoint_, est.log_ = ckpt, []
        est.codec_ = ImageCodec(ckpt.model)
        return est

    def compress(self, X) -> list[bytes]:
        check_is_fitted(self)
        return [self.codec_.compress(img) for img in check_images(X)]

    def decompress(self, blobs) -> np.ndarray:
        check_is_fitted(self)
        return np.stack([self.codec_.decompress(b) for b in blobs])

    def transform(self, X) -> np.ndarray:
        return self.decompress(self.compress(X))

    def score(self, X, y=None) -> float:
        """Mean PSNR (dB) of the coded reconstructions."""
        X = check_images(X)
        R = self.transform(X)
        return float(np.mean([psnr(a, b) for a, b in zip(X, R)]))


class ToyFaceEmbedder(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Frozen identity embedder; ``predict`` is nearest-centroid identification.

    ``mode="pretrained"`` trains the trunk on ``(X, y)``; ``"seeded-random"``
    keeps random weights and only records class centroids.
    """

    def __init__(self, mode: str = "pretrained", seed: int = 0, dim: int = 64, epochs: int = 40,
                 lr: float = 3e-3, holdout: float = 0.2, crop_fraction: float = 0.7, side: int = 32,
                 exclude_identities=()):
        self.mode = mode
        self.seed = seed
        self.dim = dim
        self.epochs = epochs
        self.lr = lr
        self.holdout = holdout
        self.crop_fraction = crop_fraction
        self.side = side
        self.exclude_identities = exclude_identities

    def fit(self, X, y):
        X = check_images(X)
        y = check_labels(y, len(X))
        check_fraction("holdout", self.holdout, low_open=False)
        aligner = AlignerConfig(self.crop_fraction, self.side)
        self.embedder_, self.holdout_accuracy_ = make_embedder(
            self.mode, self.seed, X if self.mode == "pretrained" else None, y if self.mode == "pretrained" else None,
            aligner=aligner, dim=self.dim, epochs=self.epochs, lr=self.lr, holdout=self.holdout,
            exclude_identities=self.exclude_identities, return_accuracy=True,
        )
        self.classes_ = np.unique(y)
        E = self._embed(X)
        E /= np.linalg.norm(E, axis=1, keepdims=True)
        self.centroids_ = np.stack([E[y == c].mean(axis=0) for c in self.classes_])
        return self

    def _embed(self, X) -> np.ndarray:
        with torch.no_grad():
            return self.embedder_(torch.from_numpy(X)).numpy().astype(np.float64)

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self)
        return self._embed(check_images(X))

    def predict(self, X) -> np.ndarray:
        d = cosine_distances(self.transform(X), self.centroids_)
        return self.classes_[np.argmin(d, axis=1)]
