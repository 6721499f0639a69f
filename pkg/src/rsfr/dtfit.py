"""Diffusion-tensor post-processing: least-squares fitting and MD/FA/HA maps.

The estimation inverts the standard signal law S = S0 * exp(-b g^T D g) by
ordinary least squares on the log-linearised model, per pixel, over the six
unique tensor coefficients. Helix-angle analysis samples radial spokes at
uniform wall depths and regresses HA against depth, reporting slope, R^2 and
RMSE per spoke; the transmural HA gradient is the median spoke slope.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import geometry
from .kspace import ImageSlice
from .validation import check_binary_mask

B0_THRESHOLD = 1e-9  # b-values at or below this count as unweighted


@dataclass
class DWISeries:
    """A stack of DWI slices with per-slice b-values and unit directions."""

    slices: list[ImageSlice]
    b_values: np.ndarray
    directions: np.ndarray

    def __post_init__(self):
        self.b_values = np.asarray(self.b_values, dtype=np.float64)
        self.directions = np.asarray(self.directions, dtype=np.float64)
        n = len(self.slices)
        if self.b_values.shape != (n,) or self.directions.shape != (n, 3):
            raise ValueError("b_values must be (n,) and directions (n, 3)")
        shapes = {s.pixels.shape for s in self.slices}
        if len(shapes) > 1:
            raise ValueError(f"slices disagree on shape: {shapes}")
        if not np.any(self.b_values <= B0_THRESHOLD):
            raise ValueError("series needs at least one b=0 slice")
        weighted = self.b_values > B0_THRESHOLD
        if weighted.sum() < 6:
            raise ValueError("series needs at least 6 diffusion-weighted slices")
        design = _design_matrix(self.b_values[weighted], self.directions[weighted])
        if np.linalg.matrix_rank(design) < 6:
            raise ValueError(
                "diffusion directions are collinear: design matrix is rank deficient"
            )

    @classmethod
    def from_slices(cls, slices: list[ImageSlice]) -> "DWISeries":
        """Assemble a series from slices whose metadata carries b/direction."""
        b = np.array([s.meta["b_value"] for s in slices], dtype=np.float64)
        g = np.array([s.meta["direction"] for s in slices], dtype=np.float64)
        return cls(slices=list(slices), b_values=b, directions=g)

    @property
    def shape(self) -> tuple[int, int]:
        return self.slices[0].pixels.shape

    def pixel_stack(self) -> np.ndarray:
        return np.stack([s.pixels for s in self.slices], axis=0)


@dataclass
class DiffusionTensorMap:
    """Fitted symmetric tensors, per-pixel fit residual, myocardium mask."""

    tensors: np.ndarray   # (H, W, 3, 3)
    residual: np.ndarray  # (H, W) RMS log-signal misfit, NaN outside mask
    myo_mask: np.ndarray  # (H, W) bool


@dataclass
class LineProfile:
    """HA samples along one radial spoke plus their linear regression."""

    spoke_id: int
    depths: np.ndarray
    ha: np.ndarray
    slope: float
    intercept: float
    r_squared: float
    rmse: float


@dataclass
class DTParams:
    """Scalar parameter maps derived from a fitted tensor field."""

    md: np.ndarray           # mm^2/s
    fa: np.ndarray           # unitless, in [0, 1]
    ha: np.ndarray           # degrees, NaN where undefined
    ha_valid: np.ndarray     # bool
    ha_gradient: float       # degrees per unit wall depth (median spoke slope)
    myo_mask: np.ndarray
    profiles: list[LineProfile] = field(default_factory=list)
    n_skipped_spokes: int = 0


def _design_matrix(b_values: np.ndarray, directions: np.ndarray) -> np.ndarray:
    """Rows b * [gx^2, gy^2, gz^2, 2 gx gy, 2 gx gz, 2 gy gz]."""
    g = directions
    cols = np.stack([
        g[:, 0] ** 2, g[:, 1] ** 2, g[:, 2] ** 2,
        2 * g[:, 0] * g[:, 1], 2 * g[:, 0] * g[:, 2], 2 * g[:, 1] * g[:, 2],
    ], axis=1)
    return b_values[:, None] * cols


def coeffs_to_tensor(theta: np.ndarray) -> np.ndarray:
    """(…, 6) unique coefficients -> (…, 3, 3) symmetric tensors."""
    theta = np.asarray(theta, dtype=np.float64)
    out = np.zeros(theta.shape[:-1] + (3, 3), dtype=np.float64)
    out[..., 0, 0] = theta[..., 0]
    out[..., 1, 1] = theta[..., 1]
    out[..., 2, 2] = theta[..., 2]
    out[..., 0, 1] = out[..., 1, 0] = theta[..., 3]
    out[..., 0, 2] = out[..., 2, 0] = theta[..., 4]
    out[..., 1, 2] = out[..., 2, 1] = theta[..., 5]
    return out


def fit_tensor_lls(series: DWISeries, mask: np.ndarray) -> DiffusionTensorMap:
    """Per-pixel log-linear least-squares tensor fit inside ``mask``.

    S0 is the mean of the b=0 slices. Measurements with S <= 0 are excluded
    per pixel; pixels left with fewer than 6 usable measurements (or with
    S0 <= 0) get a zero tensor and NaN residual.
    """
    mask = check_binary_mask(mask, "mask", shape=series.shape)
    stack = series.pixel_stack()
    is_b0 = series.b_values <= B0_THRESHOLD
    s0 = stack[is_b0].mean(axis=0)

    weighted = ~is_b0
    design = _design_matrix(series.b_values[weighted], series.directions[weighted])
    signals = stack[weighted]  # (n_w, H, W)
    n_w = signals.shape[0]

    h, w = series.shape
    tensors = np.zeros((h, w, 3, 3), dtype=np.float64)
    residual = np.full((h, w), np.nan)

    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        return DiffusionTensorMap(tensors, residual, mask)

    sig = signals[:, rows, cols]             # (n_w, n_pix)
    s0_pix = s0[rows, cols]
    usable = (sig > 0) & (s0_pix[None, :] > 0)
    all_usable = usable.all(axis=0) & (s0_pix > 0)

    # fast path: pixels where every measurement is usable share one solve
    if np.any(all_usable):
        y = -np.log(sig[:, all_usable] / s0_pix[all_usable][None, :])
        theta, *_ = np.linalg.lstsq(design, y, rcond=None)
        res = design @ theta - y
        tensors[rows[all_usable], cols[all_usable]] = coeffs_to_tensor(theta.T)
        residual[rows[all_usable], cols[all_usable]] = np.sqrt((res ** 2).mean(axis=0))

    # slow path: per-pixel exclusion of non-positive measurements
    for idx in np.nonzero(~all_usable)[0]:
        keep = usable[:, idx]
        if s0_pix[idx] <= 0 or keep.sum() < 6:
            continue
        sub = design[keep]
        if np.linalg.matrix_rank(sub) < 6:
            continue
        y = -np.log(sig[keep, idx] / s0_pix[idx])
        theta, *_ = np.linalg.lstsq(sub, y, rcond=None)
        tensors[rows[idx], cols[idx]] = coeffs_to_tensor(theta)
        residual[rows[idx], cols[idx]] = float(
            np.sqrt(((sub @ theta - y) ** 2).mean())
        )

    return DiffusionTensorMap(tensors=tensors, residual=residual, myo_mask=mask)


def eig_sorted(d: np.ndarray, frame: tuple[np.ndarray, np.ndarray] | None = None):
    """Eigen-decomposition with descending eigenvalues and fixed vector signs.

    ``d`` may be a single 3x3 tensor or an (..., 3, 3) field. Signs are
    fixed so the primary eigenvector's circumferential component is >= 0
    when a (circumferential, radial) ``frame`` is supplied (ties broken by
    a non-negative radial component); without a frame, the component of
    largest magnitude is made positive.
    """
    d = np.asarray(d, dtype=np.float64)
    evals, evecs = np.linalg.eigh(d)           # ascending
    evals = evals[..., ::-1]
    evecs = evecs[..., ::-1]                   # columns are eigenvectors

    if frame is None:
        # deterministic generic sign: largest-|component| entry positive
        comp = np.argmax(np.abs(evecs), axis=-2, keepdims=True)
        lead = np.take_along_axis(evecs, comp, axis=-2)
        sign = np.where(lead < 0, -1.0, 1.0)
        evecs = evecs * sign
    else:
        circ, radial = frame
        e1 = evecs[..., :, 0]
        c = np.sum(e1 * circ, axis=-1)
        r = np.sum(e1 * radial, axis=-1)
        flip = (c < 0) | ((c == 0) & (r < 0))
        evecs = evecs.copy()
        evecs[..., :, 0] = np.where(flip[..., None], -e1, e1)
    return evals, evecs


def psd_project(d: np.ndarray) -> np.ndarray:
    """Clamp negative eigenvalues to zero (keeps FA/MD in their ranges)."""
    evals, evecs = np.linalg.eigh(np.asarray(d, dtype=np.float64))
    evals = np.clip(evals, 0.0, None)
    return np.einsum("...ij,...j,...kj->...ik", evecs, evals, evecs)


def compute_md(d: np.ndarray) -> np.ndarray:
    """Mean diffusivity tr(D) / 3."""
    d = np.asarray(d, dtype=np.float64)
    return np.trace(d, axis1=-2, axis2=-1) / 3.0


def compute_fa(d: np.ndarray) -> np.ndarray:
    """Fractional anisotropy sqrt(3/2) * ||lambda - MD|| / ||lambda||.

    Zero tensors yield FA = 0 by convention.
    """
    d = np.asarray(d, dtype=np.float64)
    evals = np.linalg.eigvalsh(d)
    md = evals.mean(axis=-1, keepdims=True)
    num = np.sqrt(((evals - md) ** 2).sum(axis=-1))
    den = np.sqrt((evals ** 2).sum(axis=-1))
    fa = np.sqrt(1.5) * np.divide(num, den, out=np.zeros_like(num), where=den > 0)
    return np.clip(fa, 0.0, 1.0)


def compute_ha(d: np.ndarray, pixel: tuple[int, int],
               lv_center: tuple[float, float]) -> float:
    """Helix angle (degrees) of a single tensor at ``pixel``; NaN if undefined."""
    dx = pixel[1] - lv_center[1]
    dy = lv_center[0] - pixel[0]
    r = float(np.hypot(dx, dy))
    if r == 0:
        raise ValueError("helix angle is undefined at the LV center")
    radial = np.array([dx / r, dy / r, 0.0])
    circ = np.array([-dy / r, dx / r, 0.0])
    longitudinal = np.array([0.0, 0.0, 1.0])
    _, evecs = eig_sorted(d)
    e1 = evecs[..., :, 0]
    ha, valid = geometry.signed_helix_angle(e1, circ, longitudinal, radial)
    return float(ha) if valid else float("nan")


def compute_ha_map(tensors: np.ndarray, myo_mask: np.ndarray,
                   lv_center: tuple[float, float]):
    """HA map in degrees over the mask plus validity flags."""
    myo_mask = np.asarray(myo_mask, dtype=bool)
    radial, circ, longitudinal = geometry.wall_frame(myo_mask.shape, lv_center)
    _, evecs = eig_sorted(tensors)
    e1 = evecs[..., :, 0]
    ha, valid = geometry.signed_helix_angle(e1, circ, longitudinal, radial)
    ha = np.where(myo_mask, ha, np.nan)
    valid = valid & myo_mask
    return ha, valid


def wall_depth_band(myo_mask: np.ndarray,
                    lv_center: tuple[float, float]) -> tuple[float, float]:
    """Endocardial/epicardial radii estimated from the mask (min/max radius)."""
    myo_mask = np.asarray(myo_mask, dtype=bool)
    if not myo_mask.any():
        raise ValueError("empty myocardium mask")
    _, _, r = geometry.pixel_offsets(myo_mask.shape, lv_center)
    return float(r[myo_mask].min()), float(r[myo_mask].max())


def ha_line_profile(ha_map: np.ndarray, myo_mask: np.ndarray,
                    lv_center: tuple[float, float], n_spokes: int = 36,
                    samples_per_spoke: int = 20):
    """Per-spoke linear regression of HA against normalized wall depth.

    Wall depth 0/1 corresponds to the endocardial/epicardial radii estimated
    from the whole mask. Each spoke targets uniform depths with
    nearest-pixel lookup and regresses the looked-up HA against the realized
    depth of that pixel (which removes the quantization bias a fixed target
    grid would introduce). Spokes with fewer than 3 valid samples are
    skipped and counted. Constant-HA spokes report slope 0, RMSE 0 and
    R^2 = 0 (zero-variance convention).
    """
    myo_mask = np.asarray(myo_mask, dtype=bool)
    h, w = myo_mask.shape
    profiles: list[LineProfile] = []
    skipped = 0
    if not myo_mask.any():
        return profiles, n_spokes
    r_lo, r_hi = wall_depth_band(myo_mask, lv_center)
    if r_hi <= r_lo:
        return profiles, n_spokes

    for k in range(n_spokes):
        angle = 2.0 * np.pi * k / n_spokes
        dc, dr = np.cos(angle), -np.sin(angle)  # (col, row) step; angle CCW on display

        seen: set[tuple[int, int]] = set()
        depths, values = [], []
        for d in np.linspace(0.0, 1.0, samples_per_spoke):
            radius = r_lo + d * (r_hi - r_lo)
            row = int(round(lv_center[0] + dr * radius))
            col = int(round(lv_center[1] + dc * radius))
            if not (0 <= row < h and 0 <= col < w):
                continue
            if not myo_mask[row, col] or not np.isfinite(ha_map[row, col]):
                continue
            if (row, col) in seen:
                continue
            seen.add((row, col))
            realized = float(np.hypot(col - lv_center[1], lv_center[0] - row))
            depths.append(np.clip((realized - r_lo) / (r_hi - r_lo), 0.0, 1.0))
            values.append(ha_map[row, col])
        if len(depths) < 3:
            skipped += 1
            continue

        order = np.argsort(depths)
        depths_a = np.asarray(depths)[order]
        values_a = np.asarray(values)[order]
        slope, intercept = np.polyfit(depths_a, values_a, 1)
        pred = slope * depths_a + intercept
        ss_res = float(((values_a - pred) ** 2).sum())
        ss_tot = float(((values_a - values_a.mean()) ** 2).sum())
        r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 0.0
        rmse = float(np.sqrt(ss_res / len(values_a)))
        if ss_tot == 0:
            slope, rmse = 0.0, 0.0
        profiles.append(LineProfile(
            spoke_id=k, depths=depths_a, ha=values_a, slope=float(slope),
            intercept=float(intercept), r_squared=float(np.clip(r2, 0.0, 1.0)),
            rmse=rmse,
        ))
    return profiles, skipped


def ha_gradient(profiles: list[LineProfile]) -> float:
    """Median per-spoke slope, degrees per unit wall depth."""
    if not profiles:
        raise ValueError("no valid line profiles to aggregate")
    return float(np.median([p.slope for p in profiles]))


def compute_dt_params(dtm: DiffusionTensorMap, lv_center: tuple[float, float],
                      n_spokes: int = 36, samples_per_spoke: int = 20) -> DTParams:
    """MD/FA/HA maps plus the transmural HA gradient for one fitted slice.

    Parameter maps are computed from the PSD-projected tensors (raw tensors
    stay available on ``dtm``); out-of-mask pixels are zero/NaN.
    """
    proj = psd_project(dtm.tensors)
    md = np.where(dtm.myo_mask, compute_md(proj), 0.0)
    fa = np.where(dtm.myo_mask, compute_fa(proj), 0.0)
    ha, valid = compute_ha_map(proj, dtm.myo_mask, lv_center)
    profiles, skipped = ha_line_profile(ha, dtm.myo_mask, lv_center,
                                        n_spokes=n_spokes,
                                        samples_per_spoke=samples_per_spoke)
    grad = ha_gradient(profiles) if profiles else float("nan")
    return DTParams(md=md, fa=fa, ha=ha, ha_valid=valid, ha_gradient=grad,
                    myo_mask=dtm.myo_mask, profiles=profiles,
                    n_skipped_spokes=skipped)
