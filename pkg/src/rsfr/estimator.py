"""Scikit-learn style estimator facade over the trainable reconstruction core.

``RSFRReconstructor.fit`` takes fully sampled, [0, 1]-normalized slices,
simulates the undersampling internally (per-slice seeded masks at the
configured acceleration factor), and trains the coarse + refinement networks
end to end. ``predict`` maps zero-filled inputs to refined reconstructions;
``transform`` is an alias so the estimator drops into sklearn pipelines.
"""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from . import kspace
from .backbone import BackboneConfig
from .fusion import SFIConfig
from .metrics import ssim
from .semantics import SegmenterKind, segment
from .training import (
    LossWeights,
    TrainConfig,
    TrainingPair,
    train_end_to_end,
)
from .validation import check_normalized, check_slice_stack


class RSFRReconstructor(BaseEstimator):
    """Coarse-to-fine reconstructor for undersampled magnitude slices.

    Parameters follow the sklearn convention (stored verbatim, validated in
    ``fit``). The heavy lifting lives in the functional modules; this class
    only adapts them to the fit/predict protocol.
    """

    def __init__(self, af=4, center_fraction=None, segmenter="fallback",
                 n_res_blocks=4, embed_dim=32, state_dim=8, patch_size=4,
                 input_size=96, total_steps=200, batch_size=2, base_lr=1e-3,
                 alpha=1.0, beta=1.0, gamma=0.0, deep_supervision=0.0,
                 seed=0):
        self.af = af
        self.center_fraction = center_fraction
        self.segmenter = segmenter
        self.n_res_blocks = n_res_blocks
        self.embed_dim = embed_dim
        self.state_dim = state_dim
        self.patch_size = patch_size
        self.input_size = input_size
        self.total_steps = total_steps
        self.batch_size = batch_size
        self.base_lr = base_lr
        self.alpha = alpha
        self.beta = beta
        self.gamma = gamma
        self.deep_supervision = deep_supervision
        self.seed = seed

    # -- configuration assembly ------------------------------------------

    def _backbone_config(self) -> BackboneConfig:
        n_stages = max(1, self.n_res_blocks // 2)
        return BackboneConfig(
            n_res_blocks=self.n_res_blocks, embed_dim=self.embed_dim,
            scale_factors=(1,) + (2,) * (n_stages - 1),
            patch_size=self.patch_size, state_dim=self.state_dim,
            input_size=self.input_size,
        )

    def degrade(self, X) -> np.ndarray:
        """Undersample fully sampled slices: per-slice mask, zero-filled
        magnitude output clipped to [0, 1]. Deterministic in ``seed``."""
        X = check_slice_stack(X, "X", shape=(self.input_size, self.input_size))
        out = np.empty_like(X)
        n_pe = self.input_size // 2  # acquisition band is half the padded width
        for i, gt in enumerate(X):
            mask = kspace.generate_mask(n_pe=n_pe, af=self.af,
                                        center_fraction=self.center_fraction,
                                        seed=self.seed + i)
            y = kspace.forward_operator(kspace.ImageSlice(gt), mask)
            out[i] = np.clip(kspace.zero_fill(y, mask).pixels, 0.0, 1.0)
        return out

    # -- sklearn protocol --------------------------------------------------

    def fit(self, X, y=None):
        """Train on fully sampled slices (n, H, W) in [0, 1]."""
        X = check_slice_stack(X, "X", shape=(self.input_size, self.input_size))
        check_normalized(X, "X")
        SegmenterKind(self.segmenter)  # validate early
        zf = self.degrade(X)
        pairs = [TrainingPair(gt=gt, zf=z) for gt, z in zip(X, zf)]
        cfg = TrainConfig(total_steps=self.total_steps,
                          batch_size=self.batch_size, base_lr=self.base_lr,
                          seed=self.seed, af_schedule=(self.af,))
        if self.deep_supervision:
            cfg.deep_supervision = float(self.deep_supervision)
        weights = LossWeights(alpha=self.alpha, beta=self.beta,
                              gamma=self.gamma)
        state = train_end_to_end(pairs, cfg, weights,
                                 backbone_cfg=self._backbone_config(),
                                 segmenter_kind=self.segmenter)
        self.coarse_ = state.coarse
        self.refiner_ = state.refiner
        self.train_log_ = state.log
        self.n_features_in_ = X.shape[1] * X.shape[2]
        return self

    def _check_fitted(self):
        if not hasattr(self, "refiner_"):
            raise NotFittedError(
                "this RSFRReconstructor instance is not fitted yet")

    def _forward(self, X, stage: str) -> np.ndarray:
        self._check_fitted()
        X = check_slice_stack(X, "X", shape=(self.input_size, self.input_size))
        check_normalized(X, "X", tol=1e-3)
        out = np.empty_like(X)
        with torch.no_grad():
            for i, zf in enumerate(X):
                t = torch.as_tensor(np.clip(zf, 0, 1),
                                    dtype=torch.float32)[None, None]
                xbar = self.coarse_(t)
                if stage == "coarse":
                    out[i] = xbar[0, 0].double().numpy()
                    continue
                coarse_slice = kspace.ImageSlice(
                    np.clip(xbar[0, 0].double().numpy(), 0, 1))
                prior = segment(coarse_slice, self.segmenter)
                p = torch.as_tensor(prior.masks, dtype=torch.float32)[None]
                out[i] = self.refiner_(xbar, p)[0, 0].double().numpy()
        return out

    def predict(self, X) -> np.ndarray:
        """Refined reconstructions for zero-filled slices (n, H, W)."""
        return self._forward(X, "refined")

    def transform(self, X) -> np.ndarray:
        return self.predict(X)

    def reconstruct_coarse(self, X) -> np.ndarray:
        """First-pass reconstructions only (no semantic refinement)."""
        return self._forward(X, "coarse")

    def score(self, X, y) -> float:
        """Mean SSIM of predict(X) against reference slices ``y``."""
        y = check_slice_stack(y, "y", shape=(self.input_size, self.input_size))
        pred = np.clip(self.predict(X), 0.0, 1.0)
        return float(np.mean([ssim(ref, p) for ref, p in zip(y, pred)]))
