"""Semantic-prior providers: the pluggable segmentation stage.

The prior is a stack of three soft masks in [0, 1] with descending
confidence scores, produced from the coarse reconstruction by one of:

* ``foundation_model`` — client for an out-of-process zero-shot mask
  service (frozen weights live behind an HTTP endpoint; see the wire
  contract below);
* ``fallback`` — deterministic Otsu threshold + connected components,
  the hermetic desk-scale stand-in;
* ``trained`` — adapter around a user-supplied segmentation network;
* ``reference`` — a ground-truth mask passed straight through (ablation);
* ``none`` — all-zero prior (the no-segmentation ablation arm).

Wire contract of the mask service (JSON over HTTP POST):

    request:  {"image": <base64 of float32 row-major pixel bytes>,
               "height": H, "width": W}
    response: {"masks": [{"mask": {"format": "dense",
                                   "data": <base64 float32 H*W bytes>,
                                   "height": H, "width": W}
                          | {"format": "rle",
                             "counts": [n0, n1, ...],   # row-major runs,
                             "height": H, "width": W},  # starting with 0s
               "score": s}, ...]}

The endpoint URL comes from ``endpoint`` or the RSFR_MASK_SERVICE
environment variable.
"""

from __future__ import annotations

import base64
import enum
import json
import os
import threading
import urllib.error
import urllib.request
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .kspace import ImageSlice
from .validation import check_image, check_normalized

PRIOR_CHANNELS = 3
PRIOR_SIZE = 96

ENDPOINT_ENV_VAR = "RSFR_MASK_SERVICE"


class SegmenterKind(str, enum.Enum):
    FOUNDATION_MODEL = "foundation_model"
    FALLBACK = "fallback"
    TRAINED = "trained"
    REFERENCE = "reference"
    NONE = "none"


class MaskServiceError(RuntimeError):
    """Mask service unreachable or spoke garbage; callers may retry with
    the fallback provider."""


@dataclass
class SemanticPrior:
    """Three soft masks in [0, 1] with descending confidence scores."""

    masks: np.ndarray   # (3, H, W)
    scores: tuple[float, float, float]

    def __post_init__(self):
        self.masks = np.asarray(self.masks, dtype=np.float64)
        if self.masks.ndim != 3 or self.masks.shape[0] != PRIOR_CHANNELS:
            raise ValueError(f"prior must be (3, H, W), got {self.masks.shape}")
        if self.masks.min() < 0 or self.masks.max() > 1:
            raise ValueError("prior masks must lie in [0, 1]")
        self.scores = tuple(float(s) for s in self.scores)
        if len(self.scores) != PRIOR_CHANNELS:
            raise ValueError("exactly 3 scores required")
        if any(a < b for a, b in zip(self.scores, self.scores[1:])):
            raise ValueError(f"scores must be descending, got {self.scores}")

    @classmethod
    def empty(cls, shape: tuple[int, int] = (PRIOR_SIZE, PRIOR_SIZE)) -> "SemanticPrior":
        return cls(np.zeros((PRIOR_CHANNELS,) + shape), (0.0, 0.0, 0.0))


def segment(coarse: ImageSlice, kind: SegmenterKind | str,
            reference_mask: np.ndarray | None = None,
            endpoint: str | None = None,
            trained_model=None) -> SemanticPrior:
    """Produce the semantic prior for one normalized coarse slice."""
    kind = SegmenterKind(kind)
    pixels = check_image(coarse.pixels, "coarse")
    check_normalized(pixels, "coarse")
    if kind is SegmenterKind.NONE:
        return SemanticPrior.empty(pixels.shape)
    if kind is SegmenterKind.REFERENCE:
        if reference_mask is None:
            raise ValueError("reference segmenter needs a reference mask")
        mask = np.asarray(reference_mask, dtype=np.float64)
        if mask.shape != pixels.shape:
            raise ValueError("reference mask shape mismatch")
        masks = np.zeros((PRIOR_CHANNELS,) + pixels.shape)
        masks[0] = np.clip(mask, 0.0, 1.0)
        return SemanticPrior(masks, (1.0, 0.0, 0.0))
    if kind is SegmenterKind.FALLBACK:
        return fallback_segment(coarse)
    if kind is SegmenterKind.TRAINED:
        if trained_model is None:
            raise ValueError("trained segmenter needs a model")
        return trained_segment(coarse, trained_model)
    return foundation_model_client(coarse, endpoint=endpoint)


def otsu_threshold(pixels: np.ndarray, n_bins: int = 256) -> float:
    """Histogram threshold maximizing inter-class variance."""
    lo, hi = float(pixels.min()), float(pixels.max())
    if hi <= lo:
        return hi
    hist, edges = np.histogram(pixels, bins=n_bins, range=(lo, hi))
    hist = hist.astype(np.float64)
    centers = (edges[:-1] + edges[1:]) / 2
    w0 = np.cumsum(hist)
    w1 = w0[-1] - w0
    m0 = np.cumsum(hist * centers)
    mean0 = np.divide(m0, w0, out=np.zeros_like(m0), where=w0 > 0)
    mean1 = np.divide(m0[-1] - m0, w1, out=np.zeros_like(m0), where=w1 > 0)
    between = w0 * w1 * (mean0 - mean1) ** 2
    return float(centers[int(np.argmax(between))])


def fallback_segment(x: ImageSlice) -> SemanticPrior:
    """Otsu foreground -> connected components -> 3 largest as binary masks.

    Scores are component areas as a fraction of the image. Fewer than three
    components leave the remaining channels zero with score 0. Fully
    deterministic.
    """
    pixels = check_image(x.pixels, "input")
    check_normalized(pixels, "input")
    masks = np.zeros((PRIOR_CHANNELS,) + pixels.shape)
    scores = [0.0, 0.0, 0.0]
    if pixels.max() > pixels.min():
        threshold = otsu_threshold(pixels)
        foreground = pixels > threshold
        labels, n_comp = ndimage.label(foreground)
        if n_comp:
            areas = ndimage.sum_labels(np.ones_like(pixels), labels,
                                       index=np.arange(1, n_comp + 1))
            order = np.argsort(areas)[::-1][:PRIOR_CHANNELS]
            for ch, comp_idx in enumerate(order):
                masks[ch] = (labels == comp_idx + 1).astype(np.float64)
                scores[ch] = float(areas[comp_idx]) / pixels.size
    return SemanticPrior(masks, tuple(scores))


def trained_segment(x: ImageSlice, model) -> SemanticPrior:
    """Adapter around a frozen segmentation network.

    ``model`` is a callable mapping a (1, 1, H, W) float tensor to
    (1, K, H, W) mask logits or probabilities; the top 3 channels by mean
    activation become the prior. Weights are never touched.
    """
    import torch

    pixels = check_image(x.pixels, "input")
    with torch.no_grad():
        inp = torch.as_tensor(pixels, dtype=torch.float32)[None, None]
        out = model(inp)
    arr = out.detach().cpu().double().numpy()[0]
    if arr.ndim != 3:
        raise ValueError("trained segmenter must return (1, K, H, W)")
    arr = 1.0 / (1.0 + np.exp(-arr)) if arr.min() < 0 or arr.max() > 1 else arr
    strengths = arr.mean(axis=(1, 2))
    order = np.argsort(strengths)[::-1][:PRIOR_CHANNELS]
    masks = np.zeros((PRIOR_CHANNELS,) + pixels.shape)
    scores = [0.0, 0.0, 0.0]
    for ch, idx in enumerate(order):
        masks[ch] = np.clip(arr[idx], 0.0, 1.0)
        scores[ch] = float(strengths[idx])
    return SemanticPrior(masks, tuple(scores))


# ---------------------------------------------------------------------------
# foundation-model client

def _default_transport(url: str, payload: bytes, timeout: float) -> bytes:
    req = urllib.request.Request(url, data=payload,
                                 headers={"Content-Type": "application/json"})
    with urllib.request.urlopen(req, timeout=timeout) as resp:
        return resp.read()


def decode_mask_entry(entry: dict) -> np.ndarray:
    """Dense or RLE mask payload -> 2D float array."""
    mask = entry["mask"]
    h, w = int(mask["height"]), int(mask["width"])
    if mask.get("format") == "dense":
        raw = base64.b64decode(mask["data"])
        arr = np.frombuffer(raw, dtype="<f4").astype(np.float64)
        if arr.size != h * w:
            raise MaskServiceError(f"dense mask size {arr.size} != {h}x{w}")
        return arr.reshape(h, w)
    if mask.get("format") == "rle":
        counts = mask["counts"]
        if sum(counts) != h * w:
            raise MaskServiceError("RLE runs do not cover the mask")
        flat = np.zeros(h * w, dtype=np.float64)
        pos, value = 0, 0.0
        for run in counts:
            if value:
                flat[pos:pos + run] = 1.0
            pos += run
            value = 1.0 - value
        return flat.reshape(h, w)
    raise MaskServiceError(f"unknown mask format {mask.get('format')!r}")


def _resample_nearest(mask: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if mask.shape == shape:
        return mask
    rows = (np.arange(shape[0]) + 0.5) * mask.shape[0] / shape[0] - 0.5
    cols = (np.arange(shape[1]) + 0.5) * mask.shape[1] / shape[1] - 0.5
    ri = np.clip(np.round(rows).astype(int), 0, mask.shape[0] - 1)
    ci = np.clip(np.round(cols).astype(int), 0, mask.shape[1] - 1)
    return mask[np.ix_(ri, ci)]


class FoundationModelClient:
    """HTTP client for the zero-shot mask service.

    Supports concurrent use with a bounded number of in-flight requests.
    ``transport`` is injectable for tests.
    """

    def __init__(self, endpoint: str | None = None, timeout: float = 30.0,
                 max_in_flight: int = 4, transport=None):
        endpoint = endpoint or os.environ.get(ENDPOINT_ENV_VAR)
        if not endpoint:
            raise MaskServiceError(
                f"no mask-service endpoint configured (set {ENDPOINT_ENV_VAR})"
            )
        self.endpoint = endpoint
        self.timeout = timeout
        self.transport = transport or _default_transport
        self._gate = threading.Semaphore(max_in_flight)

    def propose_masks(self, pixels: np.ndarray) -> SemanticPrior:
        payload = json.dumps({
            "image": base64.b64encode(
                pixels.astype("<f4").tobytes()).decode("ascii"),
            "height": pixels.shape[0],
            "width": pixels.shape[1],
        }).encode("utf-8")
        with self._gate:
            try:
                raw = self.transport(self.endpoint, payload, self.timeout)
            except (urllib.error.URLError, OSError, TimeoutError) as exc:
                raise MaskServiceError(
                    f"mask service unreachable at {self.endpoint}: {exc}"
                ) from exc
        try:
            response = json.loads(raw.decode("utf-8"))
            entries = response["masks"]
            decoded = [(decode_mask_entry(e), float(e["score"])) for e in entries]
        except (KeyError, ValueError, TypeError) as exc:
            raise MaskServiceError(f"malformed mask-service response: {exc}") from exc

        decoded.sort(key=lambda t: -t[1])
        target = (PRIOR_SIZE, PRIOR_SIZE)
        masks = np.zeros((PRIOR_CHANNELS,) + target)
        scores = [0.0, 0.0, 0.0]
        for ch, (mask, score) in enumerate(decoded[:PRIOR_CHANNELS]):
            masks[ch] = np.clip(_resample_nearest(mask, target), 0.0, 1.0)
            scores[ch] = max(score, 0.0)
        return SemanticPrior(masks, tuple(scores))


def foundation_model_client(x: ImageSlice, endpoint: str | None = None,
                            timeout: float = 30.0,
                            transport=None) -> SemanticPrior:
    """One-shot convenience wrapper around :class:`FoundationModelClient`."""
    pixels = check_image(x.pixels, "input")
    client = FoundationModelClient(endpoint=endpoint, timeout=timeout,
                                   transport=transport)
    return client.propose_masks(pixels)
