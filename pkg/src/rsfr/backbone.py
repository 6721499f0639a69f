"""State-space (Mamba-style) reconstruction backbone.

U-shaped network: patch embedding, encoder/decoder residual blocks built
from two-pathway gated VSS units whose core is an input-dependent selective
state-space recurrence run over four scan orders (row/column major from two
opposite corners), a single self-attention block in the bottleneck, skip
connections, and a global residual to the input image.

The selective scan ships in two numerically identical forms: a plain
sequential reference used by tests, and a chunked lower-triangular
formulation that vectorizes the recurrence over fixed-size blocks. The
blocked form only ever exponentiates non-positive log-decays, so it cannot
overflow regardless of sequence length or learned step sizes.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .kspace import ImageSlice
from .validation import check_normalized


@dataclass
class BackboneConfig:
    """Architecture hyperparameters; the toy values are the tested default."""

    n_res_blocks: int = 4          # total residual blocks, split enc/dec
    embed_dim: int = 32
    scale_factors: tuple[int, ...] = (1, 2)   # per-stage channel multiplier
    patch_size: int = 4
    state_dim: int = 8
    input_size: int = 96
    attn_heads: int = 4
    expand: float = 1.0            # inner width ratio of the VSS pathways
    scan_chunk: int = 8            # block size of the chunked selective scan

    def __post_init__(self):
        if self.n_res_blocks % 2 != 0:
            raise ValueError("n_res_blocks must be even (symmetric encoder/decoder)")
        if len(self.scale_factors) != self.n_stages:
            raise ValueError(
                f"scale_factors must have {self.n_stages} entries, "
                f"got {len(self.scale_factors)}"
            )
        divisor = self.patch_size * 2 ** (self.n_stages - 1)
        if self.input_size % divisor != 0:
            raise ValueError(
                f"input_size {self.input_size} not divisible by "
                f"patch_size * downsampling = {divisor}"
            )

    @property
    def n_stages(self) -> int:
        return self.n_res_blocks // 2

    @property
    def stage_channels(self) -> tuple[int, ...]:
        # successive multipliers: (1, 2, 2, 2) with embed 180 -> 180/360/720/1440
        return tuple(
            self.embed_dim * int(np.prod(self.scale_factors[: i + 1]))
            for i in range(self.n_stages)
        )

    def to_dict(self) -> dict:
        return {
            "n_res_blocks": self.n_res_blocks, "embed_dim": self.embed_dim,
            "scale_factors": list(self.scale_factors),
            "patch_size": self.patch_size, "state_dim": self.state_dim,
            "input_size": self.input_size, "attn_heads": self.attn_heads,
            "expand": self.expand, "scan_chunk": self.scan_chunk,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        d = dict(d)
        d["scale_factors"] = tuple(d.get("scale_factors", (1, 2)))
        return cls(**d)


def paper_scale_config() -> BackboneConfig:
    """Full-scale configuration (not trained at desk scale, forward-only)."""
    return BackboneConfig(n_res_blocks=8, embed_dim=180,
                          scale_factors=(1, 2, 2, 2), patch_size=2,
                          state_dim=16, input_size=96)


# ---------------------------------------------------------------------------
# cross-scan orders

def scan_permutations(h: int, w: int, device=None) -> torch.Tensor:
    """The four scan orders as permutations of flat (row-major) indices.

    Order 0: row-major from the top-left; order 1: column-major from the
    top-left; orders 2 and 3: the reversals of 0 and 1 (i.e. starting from
    the bottom-right corner).
    """
    base = torch.arange(h * w, dtype=torch.long, device=device)
    rowmajor = base
    colmajor = (base % h) * w + base // h
    return torch.stack([rowmajor, colmajor,
                        rowmajor.flip(0), colmajor.flip(0)])


def inverse_permutation(perm: torch.Tensor) -> torch.Tensor:
    inv = torch.empty_like(perm)
    inv[perm] = torch.arange(perm.numel(), dtype=perm.dtype, device=perm.device)
    return inv


@dataclass
class ScanSequences:
    """Four ordered token sequences plus the permutations that made them."""

    sequences: torch.Tensor   # (B, 4, C, L)
    perms: torch.Tensor       # (4, L)
    spatial: tuple[int, int]


def scan_expand(f: torch.Tensor) -> ScanSequences:
    """Expand a (B, C, H, W) feature map into the four scan sequences."""
    b, c, h, w = f.shape
    perms = scan_permutations(h, w, device=f.device)
    flat = f.flatten(2)
    seqs = torch.stack([flat[:, :, perms[k]] for k in range(4)], dim=1)
    return ScanSequences(sequences=seqs, perms=perms, spatial=(h, w))


def scan_merge(s: ScanSequences) -> torch.Tensor:
    """Invert each scan order and sum the four branches back to a map."""
    b, k, c, length = s.sequences.shape
    h, w = s.spatial
    out = torch.zeros(b, c, length, dtype=s.sequences.dtype,
                      device=s.sequences.device)
    for i in range(k):
        inv = inverse_permutation(s.perms[i])
        out = out + s.sequences[:, i, :, inv]
    return out.view(b, c, h, w)


# ---------------------------------------------------------------------------
# selective scan

def _as_grouped(u, delta, a, b, c):
    """Normalize scan arguments to grouped shapes.

    ``b``/``c`` may be (B, N, L) (one projection shared by all channels, the
    single-sequence op) or (B, G, N, L) (one per channel group, as used by
    the four cross-scan directions). Channels split evenly across groups.
    """
    if b.dim() == 3:
        b = b.unsqueeze(1)
        c = c.unsqueeze(1)
    bsz, groups, n, length = b.shape
    ch = u.shape[1]
    if ch % groups:
        raise ValueError(f"{ch} channels not divisible into {groups} groups")
    cg = ch // groups
    u_g = u.view(bsz, groups, cg, 1, length)
    delta_g = delta.view(bsz, groups, cg, 1, length)
    a_g = a.view(groups, cg, n, 1)
    return u_g, delta_g, a_g, b.unsqueeze(2), c.unsqueeze(2), cg


def selective_scan_ref(u, delta, a, b, c, d):
    """Sequential reference recurrence (oracle for the chunked version).

    Shapes: u, delta (B, C, L); a (C, N); b, c (B[, G], N, L); d (C,).
    State update per step: h = exp(delta * a) * h + delta * b * u, output
    y = <c, h> + d * u. Strictly causal along the sequence.
    """
    u_g, delta_g, a_g, b_g, c_g, _ = _as_grouped(u, delta, a, b, c)
    length = u.shape[-1]
    h = torch.zeros_like(u_g[..., 0] * a_g[None, ..., 0])  # (B,G,Cg,N)
    ys = []
    for t in range(length):
        da = torch.exp(delta_g[..., t] * a_g[None, ..., 0])
        h = da * h + (delta_g[..., t] * u_g[..., t]) * b_g[..., t]
        ys.append((h * c_g[..., t]).sum(-1))
    y = torch.stack(ys, dim=-1).reshape(u.shape)
    return y + d[None, :, None] * u


# Exponents below this are treated as total decay. exp(-80) ~ 1.8e-35 is
# negligible against O(1) states but still a *normal* float: feeding the
# vectorized exp denormal-producing or -inf inputs stalls it by 10-100x on
# CPU, which is what this floor exists to avoid.
_EXP_FLOOR = -80.0


def _chunked_decay_scan(la: torch.Tensor, bu: torch.Tensor,
                        chunk: int) -> torch.Tensor:
    """States h_t = exp(la_t) * h_{t-1} + bu_t for (..., L) tensors.

    Each block of ``chunk`` steps is unrolled as a lower-triangular matrix
    of decay products exp(P_t - P_s); every kept entry has a non-positive
    exponent so nothing can overflow, whatever the learned step sizes.
    Blocks chain through a carried state. Plain tensor math, no autograd.
    """
    length = la.shape[-1]
    h_out = torch.empty_like(bu)
    carry = torch.zeros_like(la[..., 0])
    tri = torch.tril(torch.ones(chunk, chunk, dtype=la.dtype, device=la.device))
    for s in range(0, length, chunk):
        e = min(s + chunk, length)
        k = e - s
        p = torch.cumsum(la[..., s:e], dim=-1)
        diff = p.unsqueeze(-1) - p.unsqueeze(-2)        # [t, s'] = P_t - P_s'
        # kept (lower-triangle) entries are <= 0; the max clamp only tames
        # the positive upper-triangle values the mask zeroes anyway
        t_mat = torch.exp(diff.clamp(min=_EXP_FLOOR, max=0.0)) * tri[:k, :k]
        h = (t_mat @ bu[..., s:e].unsqueeze(-1)).squeeze(-1)
        h = h + torch.exp(p.clamp(min=_EXP_FLOOR)) * carry.unsqueeze(-1)
        h_out[..., s:e] = h
        carry = h[..., -1]
    return h_out


class _SelectiveScan(torch.autograd.Function):
    """Chunked selective scan with a hand-derived backward.

    The adjoint of the state recurrence is itself a linear decay scan run
    in reverse time, so backward reuses the same chunked primitive instead
    of letting autograd retain every block's triangular matrix.
    """

    @staticmethod
    def forward(ctx, u, delta, a, b, c, d, chunk):
        u_g, delta_g, a_g, b_g, c_g, _ = _as_grouped(u, delta, a, b, c)
        la = delta_g * a_g[None]                  # (B,G,Cg,N,L), <= 0
        bu = (delta_g * u_g) * b_g
        h = _chunked_decay_scan(la, bu, chunk)
        y = (h * c_g).sum(-2).reshape(u.shape) + d[None, :, None] * u
        ctx.save_for_backward(u, delta, a, b, c, d, h)
        ctx.chunk = chunk
        ctx.b_was_grouped = b.dim() == 4
        return y

    @staticmethod
    def backward(ctx, gy):
        u, delta, a, b, c, d, h = ctx.saved_tensors
        chunk = ctx.chunk
        u_g, delta_g, a_g, b_g, c_g, _ = _as_grouped(u, delta, a, b, c)
        gy = gy.contiguous()
        g = gy.view(h.shape[0], h.shape[1], h.shape[2], 1, h.shape[4])

        la = delta_g * a_g[None]
        alpha = torch.exp(la.clamp(min=_EXP_FLOOR))
        # adjoint state: s_t = g_t * c_t + exp(la_{t+1}) * s_{t+1}, run as a
        # forward scan on the time-reversed sequence (decays shift by one)
        la_rev = torch.cat(
            [torch.zeros_like(la[..., :1]), la.flip(-1)[..., :-1]], dim=-1)
        s = _chunked_decay_scan(la_rev, (g * c_g).flip(-1), chunk).flip(-1)

        h_prev = torch.cat([torch.zeros_like(h[..., :1]), h[..., :-1]], dim=-1)
        g_la = s * h_prev * alpha                 # dL/d(log decay)

        g_delta = (g_la * a_g[None]).sum(-2) + (s * b_g).sum(-2) * u_g.squeeze(-2)
        g_a = (g_la * delta_g).sum(dim=(0, -1)).view(a.shape)
        g_b = (s * delta_g * u_g).sum(2)          # (B,G,N,L)
        g_c = (g * h).sum(2)
        g_u = (s * delta_g * b_g).sum(-2) + (d.view(1, g.shape[1], g.shape[2], 1)
                                             * g.squeeze(-2))
        g_d = (gy * u).sum(dim=(0, 2))

        shape3 = u.shape
        g_u = g_u.reshape(shape3)
        g_delta = g_delta.reshape(shape3)
        if not ctx.b_was_grouped:
            g_b = g_b.squeeze(1)
            g_c = g_c.squeeze(1)
        return g_u, g_delta, g_a, g_b, g_c, g_d, None


def selective_scan(u, delta, a, b, c, d, chunk: int = 8):
    """Chunked selective scan; same semantics as :func:`selective_scan_ref`.

    Matches the sequential form up to floating-point regrouping and the
    decay floor, in O(L * chunk) work instead of L python-level steps, with
    an analytic backward pass.
    """
    return _SelectiveScan.apply(u, delta, a, b, c, d, chunk)


class S6(nn.Module):
    """Input-dependent state-space recurrence over one ordered sequence."""

    def __init__(self, d_inner: int, d_state: int, dt_rank: int,
                 chunk: int = 64):
        super().__init__()
        self.d_inner, self.d_state, self.dt_rank = d_inner, d_state, dt_rank
        self.chunk = chunk
        self.x_proj = nn.Linear(d_inner, dt_rank + 2 * d_state, bias=False)
        self.dt_proj = nn.Linear(dt_rank, d_inner, bias=True)
        with torch.no_grad():
            std = dt_rank ** -0.5
            self.dt_proj.weight.uniform_(-std, std)
            dt = torch.exp(torch.rand(d_inner)
                           * (math.log(0.1) - math.log(0.001)) + math.log(0.001))
            self.dt_proj.bias.copy_(dt + torch.log(-torch.expm1(-dt)))
        a_init = torch.arange(1, d_state + 1, dtype=torch.float32)
        self.a_log = nn.Parameter(torch.log(a_init)[None, :].repeat(d_inner, 1))
        self.d_skip = nn.Parameter(torch.ones(d_inner))

    def forward(self, seq: torch.Tensor, reference: bool = False) -> torch.Tensor:
        # seq: (B, C, L) ordered along the scan
        proj = self.x_proj(seq.transpose(1, 2))      # (B, L, dt_rank + 2N)
        dt, b, c = torch.split(proj, [self.dt_rank, self.d_state, self.d_state],
                               dim=-1)
        delta = F.softplus(self.dt_proj(dt)).transpose(1, 2)   # (B, C, L)
        a = -torch.exp(self.a_log)
        scan = selective_scan_ref if reference else selective_scan
        kwargs = {} if reference else {"chunk": self.chunk}
        return scan(seq, delta, a, b.transpose(1, 2), c.transpose(1, 2),
                    self.d_skip, **kwargs)


class CrossScanS6(nn.Module):
    """Scan expanding -> per-direction S6 -> scan merging.

    The four branches own independent parameters but run as one grouped
    scan call (directions folded into channel groups), which keeps the
    python-level chunk loop count independent of the branch count.
    """

    def __init__(self, d_inner: int, d_state: int, chunk: int = 16):
        super().__init__()
        self.d_inner, self.d_state, self.chunk = d_inner, d_state, chunk
        self.dt_rank = max(1, math.ceil(d_inner / 16))
        self.branches = nn.ModuleList(
            [S6(d_inner, d_state, self.dt_rank, chunk=chunk) for _ in range(4)]
        )

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        scans = scan_expand(f)
        xs = scans.sequences                                   # (B, 4, C, L)
        bsz, k, ch, length = xs.shape
        n = self.d_state

        w_x = torch.stack([br.x_proj.weight for br in self.branches])
        w_dt = torch.stack([br.dt_proj.weight for br in self.branches])
        bias_dt = torch.stack([br.dt_proj.bias for br in self.branches])
        a = -torch.exp(torch.stack([br.a_log for br in self.branches]))
        d = torch.stack([br.d_skip for br in self.branches])

        x_dbl = torch.einsum("bkcl,kdc->bkdl", xs, w_x)
        dts, b_mat, c_mat = torch.split(
            x_dbl, [self.dt_rank, n, n], dim=2)
        delta = F.softplus(
            torch.einsum("bkrl,kcr->bkcl", dts, w_dt) + bias_dt[None, :, :, None])

        y = selective_scan(
            xs.reshape(bsz, k * ch, length),
            delta.reshape(bsz, k * ch, length),
            a.reshape(k * ch, n),
            b_mat, c_mat, d.reshape(k * ch),
            chunk=self.chunk,
        ).view(bsz, k, ch, length)
        return scan_merge(ScanSequences(y, scans.perms, scans.spatial))


class VSSBlock(nn.Module):
    """Two-pathway gated unit: norm -> (linear, dwconv, SiLU, S6, norm) *
    (linear, SiLU) -> gating linear, with a residual around the block."""

    def __init__(self, d_model: int, d_state: int, expand: float = 1.0,
                 chunk: int = 64):
        super().__init__()
        d_inner = max(1, int(round(expand * d_model)))
        self.norm = nn.LayerNorm(d_model)
        self.in_proj_main = nn.Linear(d_model, d_inner)
        self.in_proj_gate = nn.Linear(d_model, d_inner)
        self.conv = nn.Conv2d(d_inner, d_inner, 3, padding=1, groups=d_inner)
        self.s6 = CrossScanS6(d_inner, d_state, chunk=chunk)
        self.out_norm = nn.LayerNorm(d_inner)
        self.out_proj = nn.Linear(d_inner, d_model)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: (B, C, H, W)
        h = self.norm(x.permute(0, 2, 3, 1))
        a = self.in_proj_main(h).permute(0, 3, 1, 2)
        a = F.silu(self.conv(a))
        a = self.s6(a)
        a = self.out_norm(a.permute(0, 2, 3, 1))
        gate = F.silu(self.in_proj_gate(h))
        y = self.out_proj(a * gate)
        return x + y.permute(0, 3, 1, 2)


class ResidualMambaBlock(nn.Module):
    """Two VSS blocks plus a convolution, wrapped in a residual."""

    def __init__(self, d_model: int, d_state: int, expand: float = 1.0,
                 chunk: int = 64):
        super().__init__()
        self.vss1 = VSSBlock(d_model, d_state, expand, chunk)
        self.vss2 = VSSBlock(d_model, d_state, expand, chunk)
        self.conv = nn.Conv2d(d_model, d_model, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.conv(self.vss2(self.vss1(x)))


class AttentionBlock(nn.Module):
    """Single multi-head self-attention block over flattened patches."""

    def __init__(self, d_model: int, heads: int = 4):
        super().__init__()
        self.norm1 = nn.LayerNorm(d_model)
        self.attn = nn.MultiheadAttention(d_model, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(d_model)
        self.mlp = nn.Sequential(
            nn.Linear(d_model, 2 * d_model), nn.GELU(),
            nn.Linear(2 * d_model, d_model),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        t = x.flatten(2).transpose(1, 2)
        n = self.norm1(t)
        t = t + self.attn(n, n, n, need_weights=False)[0]
        t = t + self.mlp(self.norm2(t))
        return t.transpose(1, 2).view(b, c, h, w)


class PatchEmbed(nn.Module):
    def __init__(self, in_ch: int, embed_dim: int, patch_size: int):
        super().__init__()
        self.proj = nn.Conv2d(in_ch, embed_dim, patch_size, stride=patch_size)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.proj(x)


class PatchUnembed(nn.Module):
    """Sub-pixel expansion back to image resolution."""

    def __init__(self, embed_dim: int, out_ch: int, patch_size: int):
        super().__init__()
        self.proj = nn.Conv2d(embed_dim, out_ch * patch_size ** 2, 1)
        self.shuffle = nn.PixelShuffle(patch_size) if patch_size > 1 else nn.Identity()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.shuffle(self.proj(x))


class Downsample(nn.Module):
    """Strided patch merge (factor 2)."""

    def __init__(self, ch_in: int, ch_out: int):
        super().__init__()
        self.proj = nn.Conv2d(ch_in, ch_out, 2, stride=2)

    def forward(self, x):
        return self.proj(x)


class Upsample(nn.Module):
    """Learnable sub-pixel expansion (factor 2)."""

    def __init__(self, ch_in: int, ch_out: int):
        super().__init__()
        self.proj = nn.Conv2d(ch_in, 4 * ch_out, 1)
        self.shuffle = nn.PixelShuffle(2)

    def forward(self, x):
        return self.shuffle(self.proj(x))


class VisionMambaUNet(nn.Module):
    """The full U-shaped reconstruction network with a global residual."""

    def __init__(self, cfg: BackboneConfig, in_ch: int = 1):
        super().__init__()
        self.cfg = cfg
        chans = cfg.stage_channels
        self.patch_embed = PatchEmbed(in_ch, chans[0], cfg.patch_size)
        self.encoder = nn.ModuleList([
            ResidualMambaBlock(chans[i], cfg.state_dim, cfg.expand, cfg.scan_chunk)
            for i in range(cfg.n_stages)
        ])
        self.down = nn.ModuleList([
            Downsample(chans[i], chans[i + 1]) for i in range(cfg.n_stages - 1)
        ])
        self.bottleneck = AttentionBlock(chans[-1], cfg.attn_heads)
        self.skip_fuse = nn.ModuleList([
            nn.Conv2d(2 * chans[i], chans[i], 1) for i in range(cfg.n_stages)
        ])
        self.decoder = nn.ModuleList([
            ResidualMambaBlock(chans[i], cfg.state_dim, cfg.expand, cfg.scan_chunk)
            for i in range(cfg.n_stages)
        ])
        self.up = nn.ModuleList([
            Upsample(chans[i + 1], chans[i]) for i in range(cfg.n_stages - 1)
        ])
        self.patch_unembed = PatchUnembed(chans[0], 1, cfg.patch_size)

    def _inject(self, stage: int, f: torch.Tensor, context) -> torch.Tensor:
        # hook for semantic-prior injection; identity in the plain backbone
        return f

    def forward(self, x: torch.Tensor, context=None) -> torch.Tensor:
        if x.dim() != 4:
            raise ValueError(f"expected (B, C, H, W) input, got {tuple(x.shape)}")
        f = self.patch_embed(x)
        skips = []
        for i in range(self.cfg.n_stages):
            f = self._inject(i, f, context)
            f = self.encoder[i](f)
            skips.append(f)
            if i < self.cfg.n_stages - 1:
                f = self.down[i](f)
        f = self.bottleneck(f)
        for i in reversed(range(self.cfg.n_stages)):
            f = self.skip_fuse[i](torch.cat([f, skips[i]], dim=1))
            f = self.decoder[i](f)
            if i > 0:
                f = self.up[i - 1](f)
        return self.patch_unembed(f) + x[:, :1]


class CoarseReconstructor(VisionMambaUNet):
    """First-pass network applied to the zero-filled input."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__(cfg, in_ch=1)


def build_coarse(cfg: BackboneConfig, seed: int = 0) -> CoarseReconstructor:
    torch.manual_seed(seed)
    return CoarseReconstructor(cfg)


def reconstruct_coarse(zf: ImageSlice,
                       model: "CoarseReconstructor | BackboneConfig") -> ImageSlice:
    """Run the coarse network on one normalized slice.

    Accepts a built (possibly trained) network or a config, in which case a
    fresh deterministically initialized network is used.
    """
    if isinstance(model, BackboneConfig):
        model = build_coarse(model, seed=0)
    cfg = model.cfg
    pixels = np.asarray(zf.pixels, dtype=np.float64)
    if pixels.shape != (cfg.input_size, cfg.input_size):
        raise ValueError(
            f"expected a {cfg.input_size}x{cfg.input_size} slice, got {pixels.shape}"
        )
    check_normalized(pixels, "zero-filled input")
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        t = torch.as_tensor(pixels, dtype=dtype)[None, None]
        out = model(t)[0, 0].double().cpu().numpy()
    return ImageSlice(out, norm=zf.norm, meta=dict(zf.meta))


def parameter_count(cfg: BackboneConfig) -> int:
    model = build_coarse(cfg, seed=0)
    return sum(p.numel() for p in model.parameters())


# ---------------------------------------------------------------------------
# checkpoints: flat map of named parameter arrays + config JSON

def save_checkpoint(path: str | Path, models: dict[str, nn.Module],
                    config: dict) -> Path:
    """Parameters keyed '<model>.<state_dict key>' in one portable archive."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {}
    for name, model in models.items():
        for key, tensor in model.state_dict().items():
            arrays[f"{name}.{key}"] = tensor.detach().cpu().numpy()
    np.savez(path, **arrays)
    Path(str(path) + ".json").write_text(json.dumps(config, sort_keys=True, indent=1))
    return path


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    with np.load(path) as data:
        arrays = {k: data[k] for k in data.files}
    config = json.loads(Path(str(path) + ".json").read_text())
    return arrays, config


def load_into(model: nn.Module, arrays: dict[str, np.ndarray], prefix: str) -> None:
    state = {}
    skip = len(prefix) + 1
    for key, value in arrays.items():
        if key.startswith(prefix + "."):
            state[key[skip:]] = torch.as_tensor(value)
    model.load_state_dict(state)
