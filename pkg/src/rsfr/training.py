"""End-to-end optimisation of the coarse and refinement networks.

The hybrid objective is a Charbonnier penalty in image space and in k-space
(centred orthonormal FFT, computed at the 96x96 operating resolution) plus
an optional feature-space L1 term from a fixed extractor:

    L = alpha * sqrt(||x - x_hat||_2^2 + eps^2)
      + beta  * sqrt(||F x - F x_hat||_2^2 + eps^2)
      + gamma * mean |f(x) - f(x_hat)|

with eps fixed at 1e-9 and batch-mean reduction. Supervision lands on the
refined output only (an optional deep-supervision flag adds the coarse
output); the segmenter never receives gradients or updates.

At desk scale the perceptual extractor is a fixed, seeded, random-weight
convolution stack: it exercises the code path deterministically but its
values are not comparable to published perceptual metrics.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import backbone as bb
from . import fusion as fus
from . import semantics
from .kspace import ImageSlice

CHARBONNIER_EPS = 1e-9


class TrainingDiverged(RuntimeError):
    """Non-finite loss encountered; a state dump path is attached."""

    def __init__(self, step: int, dump_path: str | None):
        self.step = step
        self.dump_path = dump_path
        super().__init__(f"non-finite loss at step {step}"
                         + (f" (state dumped to {dump_path})" if dump_path else ""))


@dataclass
class LossWeights:
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 0.0
    epsilon: float = CHARBONNIER_EPS

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("loss weights must be non-negative")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")
        if self.alpha == self.beta == self.gamma == 0:
            raise ValueError("at least one loss weight must be positive")

    def to_dict(self) -> dict:
        return {"alpha": self.alpha, "beta": self.beta, "gamma": self.gamma,
                "epsilon": self.epsilon}

    @classmethod
    def from_dict(cls, d: dict) -> "LossWeights":
        return cls(**d)


@dataclass
class TrainConfig:
    total_steps: int = 300
    batch_size: int = 2
    base_lr: float = 2e-4
    decay_every: int = 20_000   # halve the rate every D steps ...
    warm_step: int = 50_000     # ... once past step W
    seed: int = 0
    af_schedule: tuple[int, ...] = (4,)
    log_every: int = 1
    checkpoint_every: int = 0   # 0 = only at the end
    deep_supervision: float = 0.0  # weight of an extra loss term on the coarse output

    def __post_init__(self):
        if self.decay_every <= 0:
            raise ValueError("decay_every must be positive")
        if self.warm_step >= self.total_steps:
            # legal (no decay kicks in), matches short desk runs
            pass

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["af_schedule"] = list(self.af_schedule)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["af_schedule"] = tuple(d.get("af_schedule", (4,)))
        return cls(**d)


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Halve the base rate every ``decay_every`` steps after ``warm_step``.

    lr(W + D) = base/2, lr(W + 2D) = base/4; no decay before W + D.
    """
    if step < cfg.warm_step:
        return cfg.base_lr
    return cfg.base_lr * 0.5 ** ((step - cfg.warm_step) // cfg.decay_every)


# ---------------------------------------------------------------------------
# losses

def _as_batch(t: torch.Tensor) -> torch.Tensor:
    if t.dim() == 2:
        return t[None]
    if t.dim() == 4 and t.shape[1] == 1:
        return t[:, 0]
    if t.dim() == 3:
        return t
    raise ValueError(f"expected (H,W), (B,H,W) or (B,1,H,W), got {tuple(t.shape)}")


def charbonnier_image_loss(x: torch.Tensor, x_hat: torch.Tensor,
                           epsilon: float = CHARBONNIER_EPS) -> torch.Tensor:
    """sqrt(||x - x_hat||_2^2 + eps^2), batch-mean; equals eps at x == x_hat."""
    x, x_hat = _as_batch(x), _as_batch(x_hat)
    if x.shape != x_hat.shape:
        raise ValueError("shape mismatch")
    sq = (x - x_hat).flatten(1).pow(2).sum(dim=1)
    return torch.sqrt(sq + epsilon ** 2).mean()


def fft2c_torch(x: torch.Tensor) -> torch.Tensor:
    """Centred orthonormal 2D DFT over the last two axes."""
    return torch.fft.fftshift(
        torch.fft.fft2(torch.fft.ifftshift(x, dim=(-2, -1)), norm="ortho"),
        dim=(-2, -1))


def charbonnier_kspace_loss(x: torch.Tensor, x_hat: torch.Tensor,
                            epsilon: float = CHARBONNIER_EPS) -> torch.Tensor:
    """Charbonnier penalty on the spectra of the two images."""
    x, x_hat = _as_batch(x), _as_batch(x_hat)
    if x.shape != x_hat.shape:
        raise ValueError("shape mismatch")
    diff = fft2c_torch(x) - fft2c_torch(x_hat)
    sq = diff.abs().flatten(1).pow(2).sum(dim=1)
    return torch.sqrt(sq + epsilon ** 2).mean()


class RandomConvExtractor:
    """Fixed, seeded 4-stage convolutional feature extractor.

    Weights are drawn once from the seed and never trained. Works on torch
    tensors in-graph (for the training loss) and on numpy images (for the
    perceptual-distance metric).
    """

    N_STAGES = 4

    def __init__(self, seed: int = 0):
        g = torch.Generator().manual_seed(seed)
        chans = [1, 8, 16, 32, 32]
        self.weights = []
        for i in range(self.N_STAGES):
            w = torch.randn(chans[i + 1], chans[i], 3, 3, generator=g)
            w *= (2.0 / (chans[i] * 9)) ** 0.5
            self.weights.append(w)
        self.seed = seed

    def features_torch(self, x: torch.Tensor) -> list[torch.Tensor]:
        if x.dim() == 2:
            x = x[None, None]
        elif x.dim() == 3:
            x = x[:, None]
        feats = []
        h = x
        for w in self.weights:
            h = F.gelu(F.conv2d(h, w.to(h.dtype), stride=2, padding=1))
            feats.append(h)
        return feats

    def features(self, image: np.ndarray) -> list[np.ndarray]:
        with torch.no_grad():
            t = torch.as_tensor(np.asarray(image, dtype=np.float64))
            return [f[0].cpu().numpy() for f in self.features_torch(t)]


def perceptual_loss(x: torch.Tensor, x_hat: torch.Tensor,
                    extractor: RandomConvExtractor) -> torch.Tensor:
    """Mean absolute distance between extractor activations (all stages)."""
    if extractor is None:
        raise ValueError("no feature extractor configured")
    x, x_hat = _as_batch(x), _as_batch(x_hat)
    fa = extractor.features_torch(x)
    fb = extractor.features_torch(x_hat)
    terms = [(a - b).abs().mean() for a, b in zip(fa, fb)]
    return torch.stack(terms).mean()


def hybrid_loss(x: torch.Tensor, x_hat: torch.Tensor, weights: LossWeights,
                extractor: RandomConvExtractor | None = None,
                return_parts: bool = False):
    """Weighted sum of the three terms; the extractor is only invoked when
    gamma > 0. Returns the scalar loss (plus a parts dict if requested)."""
    parts = {}
    total = x_hat.new_zeros(())
    li = charbonnier_image_loss(x, x_hat, weights.epsilon)
    parts["loss_i"] = float(li.detach())
    total = total + weights.alpha * li
    lk = charbonnier_kspace_loss(x, x_hat, weights.epsilon)
    parts["loss_k"] = float(lk.detach())
    total = total + weights.beta * lk
    if weights.gamma > 0:
        lp = perceptual_loss(x, x_hat, extractor)
        parts["loss_p"] = float(lp.detach())
        total = total + weights.gamma * lp
    else:
        parts["loss_p"] = 0.0
    if return_parts:
        return total, parts
    return total


# ---------------------------------------------------------------------------
# training loop

@dataclass
class TrainingPair:
    """One supervised sample: normalized ground truth and its degraded input."""

    gt: np.ndarray
    zf: np.ndarray
    ref_mask: np.ndarray | None = None


@dataclass
class TrainState:
    coarse: bb.CoarseReconstructor
    refiner: fus.RefinementNet
    config: TrainConfig
    weights: LossWeights
    log: list[dict] = field(default_factory=list)
    checkpoint_path: Path | None = None

    @property
    def initial_loss(self) -> float:
        return self.log[0]["loss"]

    @property
    def final_loss(self) -> float:
        return self.log[-1]["loss"]


def segmenter_params_hash(segmenter_kind, trained_model=None) -> str:
    """Stable hash of segmenter parameters (frozen-weights contract)."""
    import hashlib
    h = hashlib.sha256(str(segmenter_kind).encode())
    if trained_model is not None:
        for name, p in sorted(trained_model.state_dict().items()):
            h.update(name.encode())
            h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def _compute_priors(xbar: torch.Tensor, pairs_batch: list[TrainingPair],
                    segmenter_kind: semantics.SegmenterKind,
                    trained_model=None) -> torch.Tensor:
    """Semantic priors for a batch, detached from the graph (frozen stage)."""
    kind = semantics.SegmenterKind(segmenter_kind)
    priors = []
    detached = xbar.detach().clamp(0.0, 1.0).double().cpu().numpy()
    for i, pair in enumerate(pairs_batch):
        slc = ImageSlice(detached[i, 0])
        prior = semantics.segment(slc, kind, reference_mask=pair.ref_mask,
                                  trained_model=trained_model)
        priors.append(torch.as_tensor(prior.masks, dtype=xbar.dtype))
    return torch.stack(priors)


def train_end_to_end(pairs: list[TrainingPair], cfg: TrainConfig,
                     weights: LossWeights,
                     backbone_cfg: bb.BackboneConfig | None = None,
                     sfi_cfg: fus.SFIConfig | None = None,
                     segmenter_kind=semantics.SegmenterKind.FALLBACK,
                     trained_segmenter=None,
                     extractor: RandomConvExtractor | None = None,
                     out_dir: str | Path | None = None,
                     log_file: str | Path | None = None) -> TrainState:
    """Joint optimisation of both reconstruction networks.

    The segmenter runs on the (detached, clamped) coarse output every step,
    so the data flow matches inference, but stays frozen. Deterministic for
    a fixed config seed. Non-finite losses abort with a state dump.
    """
    if not pairs:
        raise ValueError("empty training set")
    backbone_cfg = backbone_cfg or bb.BackboneConfig()
    if weights.gamma > 0 and extractor is None:
        extractor = RandomConvExtractor(seed=cfg.seed)

    torch.manual_seed(cfg.seed)
    coarse_net = bb.CoarseReconstructor(backbone_cfg)
    refiner = fus.RefinementNet(backbone_cfg, sfi_cfg)
    params = list(coarse_net.parameters()) + list(refiner.parameters())
    optimizer = torch.optim.Adam(params, lr=cfg.base_lr)

    seg_hash_before = segmenter_params_hash(segmenter_kind, trained_segmenter)
    order_rng = np.random.default_rng(cfg.seed)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    log_fh = open(log_file, "w") if log_file is not None else None

    gt_all = torch.as_tensor(
        np.stack([p.gt for p in pairs]), dtype=torch.float32)[:, None]
    zf_all = torch.as_tensor(
        np.stack([p.zf for p in pairs]), dtype=torch.float32)[:, None]

    state = TrainState(coarse=coarse_net, refiner=refiner, config=cfg,
                       weights=weights)
    try:
        for step in range(cfg.total_steps):
            lr = lr_schedule(step, cfg)
            for group in optimizer.param_groups:
                group["lr"] = lr
            idx = order_rng.choice(len(pairs), size=min(cfg.batch_size,
                                                        len(pairs)),
                                   replace=False)
            gt = gt_all[idx]
            zf = zf_all[idx]

            xbar = coarse_net(zf)
            priors = _compute_priors(xbar, [pairs[i] for i in idx],
                                     segmenter_kind, trained_segmenter)
            xhat = refiner(xbar, priors)

            loss, parts = hybrid_loss(gt, xhat, weights, extractor,
                                      return_parts=True)
            if cfg.deep_supervision:
                loss = loss + cfg.deep_supervision * hybrid_loss(
                    gt, xbar, weights, extractor)

            if not torch.isfinite(loss):
                dump = None
                if out_dir is not None:
                    dump = str(bb.save_checkpoint(
                        out_dir / "diverged.npz",
                        {"coarse": coarse_net, "refiner": refiner},
                        {"step": step}))
                raise TrainingDiverged(step, dump)

            optimizer.zero_grad()
            loss.backward()
            optimizer.step()

            if step % cfg.log_every == 0 or step == cfg.total_steps - 1:
                record = {"step": step, "loss": float(loss.detach()),
                          **parts, "lr": lr}
                state.log.append(record)
                if log_fh is not None:
                    log_fh.write(json.dumps(record, sort_keys=True) + "\n")
            if (cfg.checkpoint_every and out_dir is not None
                    and step and step % cfg.checkpoint_every == 0):
                bb.save_checkpoint(out_dir / f"step{step:07d}.npz",
                                   {"coarse": coarse_net, "refiner": refiner},
                                   _checkpoint_config(backbone_cfg, sfi_cfg,
                                                      cfg, weights, step))
    finally:
        if log_fh is not None:
            log_fh.close()

    if segmenter_params_hash(segmenter_kind, trained_segmenter) != seg_hash_before:
        raise RuntimeError("segmenter parameters changed during training")

    # hand back frozen inference-mode models (the attention block selects
    # kernels by mode, so eval here keeps later outputs reproducible)
    coarse_net.eval()
    refiner.eval()

    if out_dir is not None:
        state.checkpoint_path = bb.save_checkpoint(
            out_dir / "final.npz", {"coarse": coarse_net, "refiner": refiner},
            _checkpoint_config(backbone_cfg, sfi_cfg, cfg, weights,
                               cfg.total_steps))
    return state


def _checkpoint_config(backbone_cfg, sfi_cfg, cfg, weights, step) -> dict:
    return {
        "backbone": backbone_cfg.to_dict(),
        "sfi": (sfi_cfg or fus.SFIConfig()).to_dict(),
        "train": cfg.to_dict(),
        "loss_weights": weights.to_dict(),
        "step": step,
    }


def load_models(checkpoint: str | Path):
    """Rebuild (coarse, refiner, config dict) from a training checkpoint."""
    arrays, config = bb.load_checkpoint(checkpoint)
    backbone_cfg = bb.BackboneConfig.from_dict(config["backbone"])
    sfi_cfg = fus.SFIConfig.from_dict(config["sfi"])
    coarse = bb.CoarseReconstructor(backbone_cfg)
    refiner = fus.RefinementNet(backbone_cfg, sfi_cfg)
    bb.load_into(coarse, arrays, "coarse")
    bb.load_into(refiner, arrays, "refiner")
    coarse.eval()
    refiner.eval()
    return coarse, refiner, config
