"""Short-axis local wall frame shared by phantom generation and helix-angle analysis.

Conventions (fixed once, used everywhere):

* image axis 0 = row, axis 1 = column; in-plane math coordinates are
  x = column - center_col (rightwards), y = center_row - row (upwards),
  so the frame is right-handed when viewed as displayed;
* radial = unit vector from the LV center to the pixel, in-plane;
* circumferential = radial rotated 90 degrees counter-clockwise in-plane;
* longitudinal = out-of-plane axis (0, 0, 1).
"""

from __future__ import annotations

import numpy as np


def pixel_offsets(shape: tuple[int, int], center: tuple[float, float]):
    """Return (dx, dy, r) arrays for every pixel; center is (row, col)."""
    rows = np.arange(shape[0], dtype=np.float64)[:, None]
    cols = np.arange(shape[1], dtype=np.float64)[None, :]
    dx = np.broadcast_to(cols - center[1], shape).copy()
    dy = np.broadcast_to(center[0] - rows, shape).copy()
    r = np.hypot(dx, dy)
    return dx, dy, r


def wall_frame(shape: tuple[int, int], center: tuple[float, float]):
    """Per-pixel orthonormal (radial, circumferential, longitudinal) frame.

    Returns three (H, W, 3) arrays. At the center pixel (zero radius) the
    radial direction is undefined; (1, 0, 0) is substituted so downstream
    code never divides by zero (the center is never inside the myocardium).
    """
    dx, dy, r = pixel_offsets(shape, center)
    safe_r = np.where(r > 0, r, 1.0)
    ux = np.where(r > 0, dx / safe_r, 1.0)
    uy = np.where(r > 0, dy / safe_r, 0.0)
    radial = np.stack([ux, uy, np.zeros_like(ux)], axis=-1)
    # 90 deg CCW in (x, y): (a, b) -> (-b, a)
    circ = np.stack([-uy, ux, np.zeros_like(ux)], axis=-1)
    longitudinal = np.zeros(shape + (3,), dtype=np.float64)
    longitudinal[..., 2] = 1.0
    return radial, circ, longitudinal


def signed_helix_angle(e1: np.ndarray, circ: np.ndarray, longitudinal: np.ndarray,
                       radial: np.ndarray):
    """Helix angle in degrees from primary eigenvectors, plus validity flags.

    ``e1`` is (..., 3). The eigenvector is treated as an axis: it is flipped
    so its circumferential component is >= 0 (ties broken by a non-negative
    longitudinal component, fixing +90 for purely longitudinal fibers). The
    angle is the signed angle between the wall-tangent projection of e1 and
    the circumferential axis, positive toward the longitudinal axis. Pixels
    whose e1 is (numerically) parallel to the radial axis have no tangent
    projection and are flagged invalid.
    """
    c = np.sum(e1 * circ, axis=-1)
    z = np.sum(e1 * longitudinal, axis=-1)
    rad = np.sum(e1 * radial, axis=-1)
    flip = (c < 0) | ((c == 0) & (z < 0))
    sign = np.where(flip, -1.0, 1.0)
    c, z, rad = c * sign, z * sign, rad * sign
    tangent_norm = np.hypot(c, z)
    valid = tangent_norm > 1e-9
    ha = np.degrees(np.arctan2(z, np.where(valid, c, 1.0)))
    ha = np.where(valid, ha, np.nan)
    return ha, valid
