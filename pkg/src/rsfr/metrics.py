"""Image-quality and DT-accuracy metrics plus the rank-sum significance test.

PSNR uses a fixed peak of 1.0 (slices are evaluated in normalized space) so
scores are comparable across methods. SSIM uses a 7x7 Gaussian window with
sigma 1.5 and the standard stabilizers K1=0.01, K2=0.03 scaled to peak 1,
averaged over valid (fully interior) windows. The perceptual distance is a
feature-space L2 over a configured fixed extractor; with the built-in seeded
random extractor it exercises the code path but is not numerically
comparable to published learned-perceptual scores.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations

import numpy as np
from scipy.signal import convolve2d

from .validation import check_binary_mask, check_image

SSIM_WINDOW = 7
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def psnr(ref, test, peak: float = 1.0) -> float:
    """10 log10(peak^2 / MSE); identical images return the +inf sentinel."""
    ref = check_image(ref, "ref")
    test = check_image(test, "test", shape=ref.shape)
    mse = float(((ref - test) ** 2).mean())
    if mse == 0.0:
        return float("inf")
    return 10.0 * math.log10(peak * peak / mse)


def _gaussian_kernel(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    k = np.outer(g, g)
    return k / k.sum()


def ssim(ref, test, peak: float = 1.0) -> float:
    """Mean structural similarity over valid Gaussian windows."""
    ref = check_image(ref, "ref")
    test = check_image(test, "test", shape=ref.shape)
    k = _gaussian_kernel()
    c1 = (SSIM_K1 * peak) ** 2
    c2 = (SSIM_K2 * peak) ** 2

    mu_x = convolve2d(ref, k, mode="valid")
    mu_y = convolve2d(test, k, mode="valid")
    xx = convolve2d(ref * ref, k, mode="valid") - mu_x ** 2
    yy = convolve2d(test * test, k, mode="valid") - mu_y ** 2
    xy = convolve2d(ref * test, k, mode="valid") - mu_x * mu_y

    num = (2 * mu_x * mu_y + c1) * (2 * xy + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (xx + yy + c2)
    return float((num / den).mean())


def perceptual_distance(ref, test, extractor) -> float:
    """Normalized feature-space L2 distance between extractor activations.

    For each feature stage the activations are unit-normalized along the
    channel axis (per spatial location) and compared by mean squared
    difference; stages are summed. Zero iff activations match; symmetric.
    """
    if extractor is None:
        raise ValueError("no feature extractor configured")
    ref = check_image(ref, "ref")
    test = check_image(test, "test", shape=ref.shape)
    feats_a = extractor.features(ref)
    feats_b = extractor.features(test)
    total = 0.0
    for fa, fb in zip(feats_a, feats_b):
        na = _unit_normalize(fa)
        nb = _unit_normalize(fb)
        total += float(((na - nb) ** 2).mean())
    return total


def _unit_normalize(f: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    norm = np.sqrt((f ** 2).sum(axis=0, keepdims=True))
    return f / (norm + eps)


def mae_global(ref_params, test_params, mask=None) -> dict[str, float]:
    """Absolute error of in-mask global means for MD and FA, plus the HA
    gradient scalar: |mean(ref) - mean(test)| per parameter."""
    mask = check_binary_mask(
        mask if mask is not None else ref_params.myo_mask, "mask")
    if not mask.any():
        raise ValueError("empty evaluation mask")
    out = {
        "md": abs(float(ref_params.md[mask].mean())
                  - float(test_params.md[mask].mean())),
        "fa": abs(float(ref_params.fa[mask].mean())
                  - float(test_params.fa[mask].mean())),
        "ha_gradient": abs(ref_params.ha_gradient - test_params.ha_gradient),
    }
    return out


# ---------------------------------------------------------------------------
# Mann-Whitney U

def _rank_with_ties(pooled: np.ndarray) -> np.ndarray:
    order = np.argsort(pooled, kind="mergesort")
    ranks = np.empty(pooled.size, dtype=np.float64)
    sorted_vals = pooled[order]
    i = 0
    while i < pooled.size:
        j = i
        while j + 1 < pooled.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0  # midrank
        i = j + 1
    return ranks


def _u_statistic(ranks_a: np.ndarray, n_a: int, n_b: int) -> float:
    r_a = ranks_a.sum()
    return r_a - n_a * (n_a + 1) / 2.0


def _u_counts(n: int, m: int) -> np.ndarray:
    """counts[u] = number of a/b orderings with exactly u inversions.

    Classic recursion on the last element of the pooled ordering: if it is
    an 'a' it sits after all m 'b's (u - m inversions remain); if a 'b' it
    adds none.
    """
    table: dict[tuple[int, int], np.ndarray] = {}

    def rec(i: int, j: int) -> np.ndarray:
        if (i, j) in table:
            return table[(i, j)]
        if i == 0 or j == 0:
            out = np.zeros(i * j + 1)
            out[0] = 1.0
        else:
            out = np.zeros(i * j + 1)
            a = rec(i - 1, j)
            b = rec(i, j - 1)
            out[j:j + a.size] += a
            out[:b.size] += b
        table[(i, j)] = out
        return out

    return rec(n, m)


def _exact_p_no_ties(u: float, n: int, m: int) -> float:
    """Two-sided exact p from the null distribution of U (no ties)."""
    counts = _u_counts(n, m)
    total = counts.sum()
    nm = n * m
    u_small = min(u, nm - u)
    grid = np.arange(nm + 1)
    low = grid <= u_small + 1e-9
    high = grid >= nm - u_small - 1e-9
    p = counts[low | high].sum() / total
    return float(min(1.0, p))


def _exact_p_enumeration(pooled: np.ndarray, n: int, m: int, u_obs: float) -> float:
    """Two-sided exact p by enumerating all label assignments (handles ties)."""
    ranks = _rank_with_ties(pooled)
    us = np.array([
        ranks[list(combo)].sum() - n * (n + 1) / 2.0
        for combo in combinations(range(n + m), n)
    ])
    nm = n * m
    u_small = min(u_obs, nm - u_obs)
    hit = (us <= u_small + 1e-9) | (us >= nm - u_small - 1e-9)
    return float(min(1.0, hit.mean()))


def mann_whitney_u(sample_a, sample_b) -> tuple[float, float]:
    """Mann-Whitney U statistic and two-sided p-value.

    Exact distribution for min(n, m) <= 20 (full enumeration when ties are
    present and the problem is small, rank-count recursion otherwise);
    normal approximation with tie correction beyond that. All-tied samples
    return p = 1.
    """
    a = np.asarray(sample_a, dtype=np.float64).ravel()
    b = np.asarray(sample_b, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("both samples must be non-empty")
    n, m = a.size, b.size
    pooled = np.concatenate([a, b])
    ranks = _rank_with_ties(pooled)
    u = _u_statistic(ranks[:n], n, m)

    if np.unique(pooled).size == 1:
        return u, 1.0

    has_ties = np.unique(pooled).size < pooled.size
    if min(n, m) <= 20:
        if not has_ties:
            return u, _exact_p_no_ties(u, n, m)
        if math.comb(n + m, n) <= 200_000:
            return u, _exact_p_enumeration(pooled, n, m, u)

    # normal approximation with tie correction
    mu = n * m / 2.0
    _, counts = np.unique(pooled, return_counts=True)
    tie_term = ((counts ** 3 - counts).sum()) / ((n + m) * (n + m - 1))
    sigma2 = n * m / 12.0 * ((n + m + 1) - tie_term)
    if sigma2 <= 0:
        return u, 1.0
    z = (u - mu - (0.5 if u > mu else -0.5 if u < mu else 0.0)) / math.sqrt(sigma2)
    p = 2.0 * (1.0 - _phi(abs(z)))
    return u, float(min(1.0, p))


def _phi(z: float) -> float:
    return 0.5 * (1.0 + math.erf(z / math.sqrt(2.0)))


# ---------------------------------------------------------------------------
# aggregation

@dataclass
class MetricReport:
    """Per-slice image metrics with aggregate formatting helpers."""

    psnr: list[float]
    ssim: list[float]
    perceptual: list[float]

    def summary(self) -> dict:
        finite = finite_only(self.psnr)
        return {
            "psnr": format_mean_std(finite, 2),
            "psnr_excluded_identical": len(self.psnr) - len(finite),
            "ssim": format_mean_std(self.ssim, 3),
            "perceptual": format_mean_std(self.perceptual, 3),
        }


def finite_only(values) -> list[float]:
    """Drop +inf sentinels (identical-image PSNR) before aggregation."""
    return [v for v in values if math.isfinite(v)]


def format_mean_std(values, decimals: int = 3) -> str:
    """Render ``mean (std)`` with a fixed decimal count, e.g. '0.871 (0.038)'.

    Uses the sample standard deviation (ddof=1); a single value reports a
    std of 0.
    """
    arr = np.asarray(list(values), dtype=np.float64)
    if arr.size == 0:
        raise ValueError("cannot aggregate an empty metric list")
    mean = arr.mean()
    std = arr.std(ddof=1) if arr.size > 1 else 0.0
    return f"{mean:.{decimals}f} ({std:.{decimals}f})"
