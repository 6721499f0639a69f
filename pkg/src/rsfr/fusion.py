"""Fusion & refinement network: second-pass backbone with semantic injection.

The semantic feature integration (SFI) unit concatenates image features with
the (resolution-matched) prior channels, aligns them through a convolution,
instance normalisation and GELU, then reweights channels with a
squeeze-excite style attention whose sigmoid output multiplies the features.
One SFI unit sits at each configured encoder stage of the refinement
backbone; the prior is average-pooled down to each stage's resolution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import BackboneConfig, VisionMambaUNet
from .kspace import ImageSlice
from .semantics import PRIOR_CHANNELS, SemanticPrior
from .validation import check_normalized


@dataclass
class SFIConfig:
    conv_kernel: int = 3
    attention_reduction: int = 4
    injection_points: tuple[int, ...] | None = None  # None = every encoder stage

    def stages(self, n_stages: int) -> tuple[int, ...]:
        if self.injection_points is None:
            return tuple(range(n_stages))
        pts = tuple(sorted(set(self.injection_points)))
        if any(p < 0 or p >= n_stages for p in pts):
            raise ValueError(f"injection points {pts} outside 0..{n_stages - 1}")
        return pts

    def to_dict(self) -> dict:
        return {"conv_kernel": self.conv_kernel,
                "attention_reduction": self.attention_reduction,
                "injection_points": (None if self.injection_points is None
                                     else list(self.injection_points))}

    @classmethod
    def from_dict(cls, d: dict) -> "SFIConfig":
        d = dict(d)
        if d.get("injection_points") is not None:
            d["injection_points"] = tuple(d["injection_points"])
        return cls(**d)


class ChannelAttention(nn.Module):
    """Global average pool -> bottleneck MLP -> sigmoid channel weights."""

    def __init__(self, channels: int, reduction: int = 4):
        super().__init__()
        if channels % reduction:
            raise ValueError(
                f"reduction {reduction} does not divide {channels} channels"
            )
        self.fc1 = nn.Linear(channels, channels // reduction)
        self.fc2 = nn.Linear(channels // reduction, channels)

    def weights(self, f: torch.Tensor) -> torch.Tensor:
        pooled = f.mean(dim=(2, 3))
        w = torch.sigmoid(self.fc2(F.gelu(self.fc1(pooled))))
        return w[:, :, None, None]

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        return f * self.weights(f)


class SFIModule(nn.Module):
    """concat -> conv -> instance norm -> GELU -> channel attention."""

    def __init__(self, channels: int, cfg: SFIConfig):
        super().__init__()
        pad = cfg.conv_kernel // 2
        self.conv = nn.Conv2d(channels + PRIOR_CHANNELS, channels,
                              cfg.conv_kernel, padding=pad)
        self.norm = nn.InstanceNorm2d(channels, affine=True)
        self.attn = ChannelAttention(channels, cfg.attention_reduction)

    def forward(self, f: torch.Tensor, prior: torch.Tensor) -> torch.Tensor:
        if prior.shape[-2:] != f.shape[-2:]:
            raise ValueError(
                f"prior {tuple(prior.shape[-2:])} does not match feature "
                f"resolution {tuple(f.shape[-2:])}"
            )
        fused = torch.cat([f, prior], dim=1)
        fused = F.gelu(self.norm(self.conv(fused)))
        return self.attn(fused)


def sfi_fuse(f: torch.Tensor, prior: torch.Tensor, module: SFIModule) -> torch.Tensor:
    """Functional wrapper: resample the prior to f's grid and fuse."""
    if prior.shape[-2:] != f.shape[-2:]:
        prior = F.adaptive_avg_pool2d(prior, f.shape[-2:])
    return module(f, prior)


class RefinementNet(VisionMambaUNet):
    """Backbone clone whose encoder path injects the semantic prior."""

    def __init__(self, cfg: BackboneConfig, sfi_cfg: SFIConfig | None = None):
        super().__init__(cfg, in_ch=1)
        self.sfi_cfg = sfi_cfg or SFIConfig()
        stages = self.sfi_cfg.stages(cfg.n_stages)
        chans = cfg.stage_channels
        self.sfi = nn.ModuleDict({
            str(i): SFIModule(chans[i], self.sfi_cfg) for i in stages
        })

    def _inject(self, stage: int, f: torch.Tensor, context) -> torch.Tensor:
        key = str(stage)
        if key not in self.sfi or context is None:
            return f
        prior = F.adaptive_avg_pool2d(context, f.shape[-2:])
        return self.sfi[key](f, prior)

    def forward(self, x: torch.Tensor, prior: torch.Tensor | None = None):
        if prior is None:
            bsz = x.shape[0]
            prior = x.new_zeros(bsz, PRIOR_CHANNELS, x.shape[-2], x.shape[-1])
        return super().forward(x, context=prior)


def build_refiner(cfg: BackboneConfig, sfi_cfg: SFIConfig | None = None,
                  seed: int = 0) -> RefinementNet:
    torch.manual_seed(seed)
    return RefinementNet(cfg, sfi_cfg)


def refine(coarse: ImageSlice, prior: SemanticPrior,
           model: "RefinementNet | BackboneConfig") -> ImageSlice:
    """Run the refinement network on one normalized coarse slice.

    Accepts a built network or a backbone config (fresh seeded weights).
    """
    if isinstance(model, BackboneConfig):
        model = build_refiner(model, seed=0)
    cfg = model.cfg
    pixels = np.asarray(coarse.pixels, dtype=np.float64)
    if pixels.shape != (cfg.input_size, cfg.input_size):
        raise ValueError(
            f"expected a {cfg.input_size}x{cfg.input_size} slice, got {pixels.shape}"
        )
    check_normalized(pixels, "coarse input")
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        x = torch.as_tensor(pixels, dtype=dtype)[None, None]
        p = torch.as_tensor(prior.masks, dtype=dtype)[None]
        out = model(x, p)[0, 0].double().cpu().numpy()
    return ImageSlice(out, norm=coarse.norm, meta=dict(coarse.meta))
