"""Input validation helpers shared by the estimator API and the functional ops."""

from __future__ import annotations

import numbers

import numpy as np


def check_image(x, name: str = "image", shape: tuple[int, int] | None = None) -> np.ndarray:
    """Validate a single 2D real-valued image and return it as float64."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    if shape is not None and arr.shape != tuple(shape):
        raise ValueError(f"{name} must have shape {tuple(shape)}, got {arr.shape}")
    return arr


def check_slice_stack(X, name: str = "X", shape: tuple[int, int] | None = None) -> np.ndarray:
    """Validate a stack of 2D slices; accepts (H, W) or (n, H, W), returns (n, H, W)."""
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ValueError(f"{name} must be a 2D image or a stack of them, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    if shape is not None and arr.shape[1:] != tuple(shape):
        raise ValueError(f"{name} slices must have shape {tuple(shape)}, got {arr.shape[1:]}")
    return arr


def check_normalized(arr: np.ndarray, name: str = "image", tol: float = 1e-6) -> np.ndarray:
    """Require values in [0, 1] up to ``tol`` slack."""
    lo, hi = float(arr.min()), float(arr.max())
    if lo < -tol or hi > 1.0 + tol:
        raise ValueError(
            f"{name} is not normalized to [0, 1]: range is [{lo:.4g}, {hi:.4g}]"
        )
    return arr


def check_binary_mask(mask, name: str = "mask", shape: tuple[int, int] | None = None) -> np.ndarray:
    arr = np.asarray(mask)
    if shape is not None and arr.shape != tuple(shape):
        raise ValueError(f"{name} must have shape {tuple(shape)}, got {arr.shape}")
    uniq = np.unique(arr)
    if not np.all(np.isin(uniq, (0, 1))):
        raise ValueError(f"{name} must be binary, found values {uniq[:8]}")
    return arr.astype(bool)


def check_seed(seed, name: str = "seed") -> int:
    if not isinstance(seed, numbers.Integral):
        raise TypeError(f"{name} must be an integer, got {type(seed).__name__}")
    return int(seed)


def check_positive(value, name: str) -> float:
    v = float(value)
    if not v > 0:
        raise ValueError(f"{name} must be > 0, got {value}")
    return v


def check_non_negative(value, name: str) -> float:
    v = float(value)
    if v < 0:
        raise ValueError(f"{name} must be >= 0, got {value}")
    return v
