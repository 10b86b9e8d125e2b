"""Estimator-style front doors: fit/transform/sample over images and latents.

``VaeTokenizer`` compresses images into latent grids (optionally trained
with foundation alignment); ``LatentFlow`` learns a class-conditional
rectified-flow generator over those grids.  Both follow the scikit-learn
parameter conventions (plain ``__init__`` storage, ``get_params`` /
``set_params``, trailing-underscore fitted attributes), so they compose
with pipelines and grid search.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from . import autodiff as ad
from .diagnostics import psnr, ssim, uniformity_of_latents
from .dit import DiTModel, DiTTrainConfig, eval_velocity_loss, sample_latents, train_dit
from .foundation import FeatureSource
from .tokenizer import TokenizerModel, TrainConfig, train_tokenizer
from .vfloss import Projection


def check_images(X, f=None):
    """Validate an (n, 3, H, W) float image batch in [-1, 1]."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 4 or X.shape[1] != 3:
        raise ValueError(f"expected images shaped (n, 3, H, W), got {X.shape}")
    if len(X) == 0:
        raise ValueError("empty image batch")
    if not np.isfinite(X).all():
        raise ValueError("images contain non-finite values")
    if X.min() < -1.0 - 1e-6 or X.max() > 1.0 + 1e-6:
        raise ValueError(f"pixel range [{X.min():.3f}, {X.max():.3f}] outside [-1, 1]")
    if f is not None and (X.shape[2] % f or X.shape[3] % f):
        raise ValueError(f"image sides {X.shape[2]}x{X.shape[3]} not divisible by f={f}")
    return X


def check_latents(Z):
    """Validate an (n, h, w, d_z) latent grid batch."""
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 4:
        raise ValueError(f"expected latents shaped (n, h, w, d_z), got {Z.shape}")
    if len(Z) == 0:
        raise ValueError("empty latent batch")
    if not np.isfinite(Z).all():
        raise ValueError("latents contain non-finite values")
    return Z


def check_labels(y, n, num_classes):
    if y is None:
        return np.zeros(n, dtype=np.int64)
    y = np.asarray(y, dtype=np.int64)
    if y.shape != (n,):
        raise ValueError(f"labels must be one integer per sample, got shape {y.shape}")
    if y.size and (y.min() < 0 or y.max() >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes})")
    return y


class VaeTokenizer(BaseEstimator, TransformerMixin):
    """Convolutional image tokenizer: images in [-1, 1] to latent grids.

    ``fit`` trains the autoencoder (reconstruction + KL, plus the alignment
    loss unless ``vf=False``); ``transform`` returns posterior means shaped
    (n, H/f, W/f, d_z); ``inverse_transform`` decodes latent grids back to
    images.
    """

    def __init__(self, f=8, d_z=16, vf=True, foundation="synthetic", foundation_seed=0,
                 d_f=24, feature_path=None, m1=0.5, m2=0.25, w_hyper=0.1, w_kl=1e-6,
                 ablation="full", mdms_on_projected=False, lr=1e-4, beta2=0.95,
                 batch_size=16, epochs=30, seed=0):
        self.f = f
        self.d_z = d_z
        self.vf = vf
        self.foundation = foundation
        self.foundation_seed = foundation_seed
        self.d_f = d_f
        self.feature_path = feature_path
        self.m1 = m1
        self.m2 = m2
        self.w_hyper = w_hyper
        self.w_kl = w_kl
        self.ablation = ablation
        self.mdms_on_projected = mdms_on_projected
        self.lr = lr
        self.beta2 = beta2
        self.batch_size = batch_size
        self.epochs = epochs
        self.seed = seed

    def _feature_source(self):
        if not self.vf:
            return None
        return FeatureSource(kind=self.foundation, seed=self.foundation_seed,
                             d_f=self.d_f, path=self.feature_path)

    def fit(self, X, y=None):
        X = check_images(X, f=self.f)
        cfg = TrainConfig(
            f=self.f, d_z=self.d_z, vf=self.vf, d_f=self.d_f, m1=self.m1, m2=self.m2,
            w_hyper=self.w_hyper, w_kl=self.w_kl, ablation=self.ablation,
            mdms_on_projected=self.mdms_on_projected, lr=self.lr, beta2=self.beta2,
            batch_size=self.batch_size, epochs=self.epochs, seed=self.seed,
        )
        self.model_, self.projection_, self.history_ = train_tokenizer(X, cfg, self._feature_source())
        return self

    def _require_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("this VaeTokenizer is not fitted yet; call fit first")

    def transform(self, X, batch=64):
        """Posterior means for every image, shape (n, H/f, W/f, d_z)."""
        self._require_fitted()
        X = check_images(X, f=self.model_.config.f)
        outs = []
        with ad.no_grad():
            for start in range(0, len(X), batch):
                outs.append(self.model_.encode(X[start : start + batch]).mean.data)
        return np.concatenate(outs).astype(np.float64)

    def sample_posterior(self, X, seed=0, batch=64):
        """Reparameterized latent draws instead of posterior means."""
        self._require_fitted()
        X = check_images(X, f=self.model_.config.f)
        rng = np.random.default_rng(seed)
        outs = []
        with ad.no_grad():
            for start in range(0, len(X), batch):
                outs.append(self.model_.encode(X[start : start + batch]).sample(rng).data)
        return np.concatenate(outs).astype(np.float64)

    def inverse_transform(self, Z, batch=64):
        """Decode latent grids back to images shaped (n, 3, H, W)."""
        self._require_fitted()
        Z = check_latents(Z)
        outs = []
        with ad.no_grad():
            for start in range(0, len(Z), batch):
                outs.append(self.model_.decode(Z[start : start + batch].astype(
                    self.model_.config.np_dtype)).data)
        return np.concatenate(outs).astype(np.float64)

    def reconstruction_metrics(self, X):
        """PSNR (dB) and SSIM of decode(encode(X)) against X."""
        X = check_images(X)
        x_hat = self.inverse_transform(self.transform(X))
        return {"psnr": psnr(X, x_hat), "ssim": ssim(X, x_hat)}

    def score(self, X, y=None):
        """Mean reconstruction PSNR; higher is better."""
        return self.reconstruction_metrics(X)["psnr"]

    def uniformity(self, X, max_points=2048, seed=0):
        """Uniformity report over per-location latent vectors of X."""
        return uniformity_of_latents(self.transform(X), max_points=max_points, seed=seed)

    def save(self, path):
        self._require_fitted()
        extra = {}
        if self.projection_ is not None:
            extra["extra.proj.weight"] = self.projection_.weight.data
        self.model_.save(path, extra=extra)
        return path

    @classmethod
    def from_checkpoint(cls, path):
        """Rebuild a fitted tokenizer (architecture and weights) from disk."""
        model, extra = TokenizerModel.load(path)
        est = cls(f=model.config.f, d_z=model.config.d_z)
        est.model_ = model
        est.projection_ = None
        if "extra.proj.weight" in extra:
            est.projection_ = Projection(ad.Tensor(extra["extra.proj.weight"], requires_grad=True))
        est.history_ = []
        return est


class LatentFlow(BaseEstimator):
    """Class-conditional rectified-flow generator over latent grids.

    ``fit`` trains the velocity transformer on (latents, labels);
    ``sample`` integrates the learned field from noise to new latents.
    """

    def __init__(self, depth=4, heads=4, width=128, patch=1, num_classes=4,
                 lambda_dir=1.0, label_dropout=0.1, lognorm=True, lognorm_until_step=None,
                 lr=1e-4, beta2=0.95, batch_size=32, steps=2000, seed=0):
        self.depth = depth
        self.heads = heads
        self.width = width
        self.patch = patch
        self.num_classes = num_classes
        self.lambda_dir = lambda_dir
        self.label_dropout = label_dropout
        self.lognorm = lognorm
        self.lognorm_until_step = lognorm_until_step
        self.lr = lr
        self.beta2 = beta2
        self.batch_size = batch_size
        self.steps = steps
        self.seed = seed

    def fit(self, Z, y=None):
        Z = check_latents(Z)
        y = check_labels(y, len(Z), self.num_classes)
        cfg = DiTTrainConfig(
            depth=self.depth, heads=self.heads, width=self.width, patch=self.patch,
            num_classes=self.num_classes, lambda_dir=self.lambda_dir,
            label_dropout=self.label_dropout, lognorm=self.lognorm,
            lognorm_until_step=self.lognorm_until_step, lr=self.lr, beta2=self.beta2,
            batch_size=self.batch_size, steps=self.steps, seed=self.seed,
        )
        self.model_, self.norm_stats_, self.loss_log_ = train_dit(Z, y, cfg)
        return self

    def _require_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("this LatentFlow is not fitted yet; call fit first")

    def sample(self, labels, steps=250, cfg_scale=1.0, cfg_interval=(0.0, 1.0),
               shift_s=1.0, seed=0):
        """Generate one latent grid per label via Euler integration."""
        self._require_fitted()
        labels = check_labels(np.asarray(labels), len(np.atleast_1d(labels)), self.num_classes)
        return sample_latents(self.model_, self.norm_stats_, labels, steps=steps,
                              cfg_scale=cfg_scale, cfg_interval=cfg_interval,
                              shift_s=shift_s, rng=np.random.default_rng(seed))

    def score(self, Z, y=None):
        """Negative fixed-probe velocity loss; higher is better."""
        self._require_fitted()
        Z = check_latents(Z)
        y = check_labels(y, len(Z), self.num_classes)
        return -eval_velocity_loss(self.model_, self.norm_stats_, Z, y)

    def save(self, path):
        self._require_fitted()
        mean, std = self.norm_stats_
        self.model_.save(path, extra={
            "extra.norm.mean": mean.astype(np.float32),
            "extra.norm.std": std.astype(np.float32),
        })
        return path

    @classmethod
    def from_checkpoint(cls, path):
        model, extra = DiTModel.load(path)
        cfg = model.config
        est = cls(depth=cfg.depth, heads=cfg.heads, width=cfg.width, patch=cfg.patch,
                  num_classes=cfg.num_classes)
        est.model_ = model
        est.norm_stats_ = (extra["extra.norm.mean"].astype(np.float64),
                           extra["extra.norm.std"].astype(np.float64))
        est.loss_log_ = []
        return est
