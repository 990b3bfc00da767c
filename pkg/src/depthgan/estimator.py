"""scikit-learn style facade over the trainer.

``fit`` takes RGBD images as an (N, H, W, 4) array, ``sample`` draws new RGBD
images, and ``predict``/``predict_proba`` run the discriminator's depth branch
on RGB images.
"""

from __future__ import annotations

import math
from typing import Optional

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .config import resolve_config
from .training import Trainer, load_checkpoint
from .validation import check_rgb, check_rgbd, to_nchw, to_nhwc


class DepthGAN(BaseEstimator):
    """Dual-path RGBD GAN with a four-phase training step.

    Weight parameters left as ``None`` keep the preset's value. ``overrides``
    is a mapping of extra ``section.key`` settings applied last.
    """

    def __init__(
        self,
        preset: str = "desk64",
        steps: int = 500,
        batch_size: int = 8,
        lr: float = 1.5e-3,
        seed: int = 0,
        rot_depth: Optional[float] = None,
        rot_rgb: Optional[float] = None,
        fake_depth: Optional[float] = None,
        real_depth: Optional[float] = None,
        r1: Optional[float] = None,
        overrides: Optional[dict] = None,
    ):
        self.preset = preset
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.seed = seed
        self.rot_depth = rot_depth
        self.rot_rgb = rot_rgb
        self.fake_depth = fake_depth
        self.real_depth = real_depth
        self.r1 = r1
        self.overrides = overrides

    def _config(self, resolution: Optional[int] = None):
        values = {
            "preset": self.preset,
            "train.steps": self.steps,
            "train.batch_size": self.batch_size,
            "train.lr": self.lr,
            "train.seed": self.seed,
        }
        for name in ("rot_depth", "rot_rgb", "fake_depth", "real_depth", "r1"):
            if getattr(self, name) is not None:
                values[f"loss.{name}"] = getattr(self, name)
        if resolution is not None:
            values["model.resolution"] = resolution
        values.update(self.overrides or {})
        return resolve_config(overrides=values)

    def fit(self, X, y=None):
        """Train for ``steps`` steps on RGBD images ``X`` of shape (N, R, R, 4)."""
        cfg = self._config(np.shape(X)[1] if np.ndim(X) == 4 else None)
        arr = check_rgbd(X, cfg.camera.near, cfg.camera.far)
        if arr.shape[0] < cfg.train.batch_size:
            raise ValueError(f"need at least batch_size={cfg.train.batch_size} images, got {arr.shape[0]}")
        tensor = to_nchw(arr)
        self.trainer_ = Trainer(cfg)
        self.history_ = self.trainer_.fit(tensor[:, :3], tensor[:, 3:], cfg.train.steps)
        self.n_features_in_ = 4
        return self

    @classmethod
    def from_checkpoint(cls, path) -> "DepthGAN":
        trainer = load_checkpoint(path)
        cfg = trainer.cfg
        est = cls(preset=cfg.preset, steps=cfg.train.steps, batch_size=cfg.train.batch_size, lr=cfg.train.lr, seed=cfg.train.seed)
        est.trainer_ = trainer
        est.history_ = []
        est.n_features_in_ = 4
        return est

    @property
    def config_(self):
        check_is_fitted(self, "trainer_")
        return self.trainer_.cfg

    def sample(self, n: int, theta_deg=None, random_state: int = 0) -> np.ndarray:
        """Draw ``n`` RGBD images (N, R, R, 4). ``theta_deg`` defaults to uniform in range."""
        check_is_fitted(self, "trainer_")
        G = self.trainer_.G.eval()
        g = torch.Generator().manual_seed(random_state)
        z_d, z_rgb = G.sample_codes(n, g)
        if theta_deg is None:
            lo, hi = self.config_.theta_range
            theta = lo + (hi - lo) * torch.rand(n, generator=g)
        else:
            theta = torch.full((n,), math.radians(float(theta_deg)))
        with torch.no_grad():
            rgb, depth = G(z_d, z_rgb, theta)
        return to_nhwc(torch.cat([rgb, depth], dim=1))

    def predict_proba(self, X) -> np.ndarray:
        """Per-pixel depth-class probabilities (N, h, h, k) at the branch resolution."""
        check_is_fitted(self, "trainer_")
        arr = check_rgb(X, self.config_.model.resolution)
        D = self.trainer_.D.eval()
        with torch.no_grad():
            logits = D.predict_depth(to_nchw(arr))
        return to_nhwc(torch.softmax(logits, dim=1))

    def predict(self, X) -> np.ndarray:
        """Most likely depth class per pixel, (N, h, h) integers in [0, k-1]."""
        return self.predict_proba(X).argmax(axis=-1)

    def predict_depth(self, X) -> np.ndarray:
        """Depth in scene units: the centre of the most likely bin."""
        c = self.config_.camera
        k = self.config_.model.depth_classes
        cls = self.predict(X)
        return c.near + (cls + 0.5) * (c.far - c.near) / k
