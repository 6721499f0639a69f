"""Synthetic cardiac DWI phantom with analytically known diffusion tensors.

The phantom is a short-axis annulus whose primary eigenvector follows a
linear transmural helix-angle law: at wall depth d in [0, 1] (0 at the
endocardium) the fiber sits in the local wall-tangent plane at angle
ha_endo + (ha_epi - ha_endo) * d from the circumferential axis. Eigenvalues
are constant across the wall, so every downstream quantity (signals, tensor
fits, MD/FA/HA maps, line-profile slopes) has a closed form to test against.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import geometry
from .kspace import ImageSlice
from .validation import check_seed

# classic six-direction scheme: normalized (1,1,0)-family vectors
DEFAULT_DIRECTIONS = np.array(
    [
        [1.0, 1.0, 0.0],
        [1.0, -1.0, 0.0],
        [1.0, 0.0, 1.0],
        [1.0, 0.0, -1.0],
        [0.0, 1.0, 1.0],
        [0.0, 1.0, -1.0],
    ]
) / np.sqrt(2.0)

BACKGROUND_LEVEL = 0.05  # fraction of S0 outside the myocardium


@dataclass
class PhantomSpec:
    """Geometry, tensor, and acquisition parameters of one phantom case."""

    grid_size: int = 96
    lv_center: tuple[float, float] = (48.0, 48.0)  # (row, col)
    r_endo: float = 14.0
    r_epi: float = 32.0
    ha_endo: float = 60.0   # degrees at wall depth 0
    ha_epi: float = -60.0   # degrees at wall depth 1
    eigenvalues: tuple[float, float, float] = (1.6e-3, 0.8e-3, 0.4e-3)  # mm^2/s
    b_values: tuple[float, ...] = (0.0, 150.0, 600.0)  # s/mm^2
    directions: np.ndarray = field(default_factory=lambda: DEFAULT_DIRECTIONS.copy())
    n_b0: int = 1
    s0: float = 1.0
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.directions = np.atleast_2d(np.asarray(self.directions, dtype=np.float64))
        if not self.r_endo < self.r_epi:
            raise ValueError(
                f"degenerate annulus: r_endo ({self.r_endo}) must be < r_epi ({self.r_epi})"
            )
        if not self.r_epi < self.grid_size / 2:
            raise ValueError("r_epi must fit inside the grid")
        lam = self.eigenvalues
        if not (lam[0] >= lam[1] >= lam[2] > 0):
            raise ValueError(f"eigenvalues must satisfy l1 >= l2 >= l3 > 0, got {lam}")
        if self.directions.shape[0] < 6:
            raise ValueError("at least 6 diffusion directions are required")
        norms = np.linalg.norm(self.directions, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-12):
            raise ValueError("every direction must have unit norm (within 1e-12)")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        check_seed(self.seed)

    @property
    def weighted_b_values(self) -> tuple[float, ...]:
        return tuple(b for b in self.b_values if b > 0)


@dataclass
class TensorField:
    """Per-pixel symmetric diffusion tensors plus the myocardium mask."""

    tensors: np.ndarray  # (H, W, 3, 3), mm^2/s
    myo_mask: np.ndarray  # (H, W) bool

    def __post_init__(self):
        self.tensors = np.asarray(self.tensors, dtype=np.float64)
        self.myo_mask = np.asarray(self.myo_mask, dtype=bool)
        if self.tensors.shape[:2] != self.myo_mask.shape or self.tensors.shape[2:] != (3, 3):
            raise ValueError("tensors must be (H, W, 3, 3) matching the mask")

    @property
    def shape(self) -> tuple[int, int]:
        return self.myo_mask.shape


def generate_tensor_field(spec: PhantomSpec) -> TensorField:
    """Build the annular tensor field encoding the linear helix-angle law."""
    shape = (spec.grid_size, spec.grid_size)
    _, _, r = geometry.pixel_offsets(shape, spec.lv_center)
    myo = (r >= spec.r_endo) & (r <= spec.r_epi)

    radial, circ, longitudinal = geometry.wall_frame(shape, spec.lv_center)
    depth = np.clip((r - spec.r_endo) / (spec.r_epi - spec.r_endo), 0.0, 1.0)
    ha = np.radians(spec.ha_endo + (spec.ha_epi - spec.ha_endo) * depth)

    e1 = np.cos(ha)[..., None] * circ + np.sin(ha)[..., None] * longitudinal
    e2 = radial  # radial-most direction orthogonal to e1 (e1 has no radial part)
    e3 = np.cross(e1, e2)

    l1, l2, l3 = spec.eigenvalues
    tensors = (
        l1 * e1[..., :, None] * e1[..., None, :]
        + l2 * e2[..., :, None] * e2[..., None, :]
        + l3 * e3[..., :, None] * e3[..., None, :]
    )
    tensors[~myo] = 0.0
    return TensorField(tensors=tensors, myo_mask=myo)


def simulate_dwis(field: TensorField, spec: PhantomSpec) -> list[ImageSlice]:
    """Noiseless forward signal model: S = S0 * exp(-b g^T D g).

    Emits ``spec.n_b0`` b=0 slices followed by one slice per (weighted
    b-value, direction) pair. Out-of-mask pixels carry the fixed background
    level. Slice metadata records b-value and direction for series assembly.
    """
    if field.shape != (spec.grid_size, spec.grid_size):
        raise ValueError(
            f"field grid {field.shape} does not match spec grid {spec.grid_size}"
        )
    background = BACKGROUND_LEVEL * spec.s0
    base = np.where(field.myo_mask, spec.s0, background)

    slices: list[ImageSlice] = []
    for i in range(spec.n_b0):
        slices.append(ImageSlice(base.copy(), meta={
            "b_value": 0.0, "direction": [0.0, 0.0, 0.0], "index": len(slices),
        }))
    for b in spec.weighted_b_values:
        for g in spec.directions:
            # quadratic form g^T D g per pixel
            q = np.einsum("i,hwij,j->hw", g, field.tensors, g)
            signal = np.where(field.myo_mask, spec.s0 * np.exp(-b * q), background)
            slices.append(ImageSlice(signal, meta={
                "b_value": float(b), "direction": [float(v) for v in g],
                "index": len(slices),
            }))
    return slices


def add_rician_noise(slc: ImageSlice, sigma: float, seed: int,
                     s0: float = 1.0) -> ImageSlice:
    """Magnitude-image noise: sqrt((S + n1)^2 + n2^2), n ~ N(0, (sigma*s0)^2).

    Deterministic for a given seed; sigma=0 returns the input pixels
    unchanged. Output is non-negative by construction.
    """
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    check_seed(seed)
    if sigma == 0:
        return slc.with_pixels(slc.pixels.copy(), noise_sigma=0.0, noise_seed=seed)
    rng = np.random.default_rng(seed)
    std = sigma * s0
    n1 = rng.normal(0.0, std, size=slc.pixels.shape)
    n2 = rng.normal(0.0, std, size=slc.pixels.shape)
    noisy = np.hypot(slc.pixels + n1, n2)
    return slc.with_pixels(noisy, noise_sigma=float(sigma), noise_seed=seed)


def simulate_case(spec: PhantomSpec) -> tuple[TensorField, list[ImageSlice]]:
    """Tensor field plus (optionally noisy) DWI slices for one phantom case."""
    field = generate_tensor_field(spec)
    slices = simulate_dwis(field, spec)
    if spec.noise_sigma > 0:
        slices = [
            add_rician_noise(s, spec.noise_sigma, seed=spec.seed + i, s0=spec.s0)
            for i, s in enumerate(slices)
        ]
    return field, slices


def sample_specs(base: PhantomSpec, n_cases: int, seed: int = 0) -> list[PhantomSpec]:
    """Deterministically jittered phantom specs for building datasets.

    Varies center, radii, and helix-angle endpoints around ``base`` so a
    trained network sees geometric diversity rather than one fixed annulus.
    """
    rng = np.random.default_rng(seed)
    specs = []
    for i in range(n_cases):
        wall = (base.r_epi - base.r_endo) * rng.uniform(0.85, 1.15)
        r_endo = base.r_endo * rng.uniform(0.8, 1.2)
        r_epi = min(r_endo + max(wall, 6.0), base.grid_size / 2 - 2.0)
        center = (
            base.lv_center[0] + rng.uniform(-4.0, 4.0),
            base.lv_center[1] + rng.uniform(-4.0, 4.0),
        )
        specs.append(replace(
            base,
            lv_center=center,
            r_endo=r_endo,
            r_epi=r_epi,
            ha_endo=base.ha_endo + rng.uniform(-8.0, 8.0),
            ha_epi=base.ha_epi + rng.uniform(-8.0, 8.0),
            seed=int(rng.integers(0, 2**31 - 1)),
        ))
    return specs
