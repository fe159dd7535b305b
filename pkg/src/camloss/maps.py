"""Class activation maps (CAM), class-agnostic activation maps (CAAM) and map metrics.

Batched helpers work on [N,H,W] tensors and normalise each sample's map
independently; the single-map functions wrap them for one sample.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T

CAM = "cam"
CAAM = "caam"


@dataclass
class ActivationMap:
    values: T.Tensor  # [H,W]
    kind: str
    class_index: int | None = None
    normalized: bool = False

    def numpy(self) -> np.ndarray:
        return self.values.data


def cam_batch(features: T.Tensor, head: T.Tensor, targets) -> T.Tensor:
    """CAM of each sample's target class: sum_k w[target, k] * f_k -> [N,H,W]."""
    targets = np.asarray(targets, dtype=np.intp)
    if features.shape[1] != head.shape[1]:
        raise ValueError(f"feature channels {features.shape[1]} vs head width {head.shape[1]}")
    if targets.size and (targets.min() < 0 or targets.max() >= head.shape[0]):
        raise IndexError(f"class index out of range for {head.shape[0]} classes")
    return T.weighted_channel_sum(features, T.take_rows(head, targets))


def caam_batch(features: T.Tensor) -> T.Tensor:
    """Unweighted channel sum -> [N,H,W]."""
    return T.sum(features, axes=1)


def normalize_batch(maps: T.Tensor) -> T.Tensor:
    """Min-max normalise over the last two axes; constant maps become zeros."""
    axes = (maps.ndim - 2, maps.ndim - 1)
    lo = T.reduce("min", maps, axes, keepdims=True)
    hi = T.reduce("max", maps, axes, keepdims=True)
    span = hi - lo
    # a constant map has numerator 0 everywhere, so any nonzero denominator yields zeros
    span = span + T.Tensor((span.data == 0).astype(span.data.dtype))
    return T.div(maps - T.expand(lo, maps.shape), T.expand(span, maps.shape))


def distance_batch(a: T.Tensor, b: T.Tensor, metric: str = "l1") -> T.Tensor:
    """Per-map mean of |a-b| (l1) or (a-b)^2 (l2) over the last two axes."""
    if a.shape != b.shape:
        raise ValueError(f"map shape mismatch {a.shape} vs {b.shape}")
    d = a - b
    if metric == "l1":
        d = T.abs(d)
    elif metric == "l2":
        d = T.square(d)
    else:
        raise ValueError(f"unknown metric {metric!r}")
    return T.mean(d, axes=(a.ndim - 2, a.ndim - 1))


def compute_cam(features: T.Tensor, head_row: T.Tensor, sample: int, class_index: int | None = None) -> ActivationMap:
    """CAM of one sample for the class whose head weights are ``head_row`` (length K)."""
    head_row = T.as_tensor(head_row)
    if head_row.ndim != 1 or head_row.shape[0] != features.shape[1]:
        raise ValueError(f"head row of shape {head_row.shape} does not match K={features.shape[1]}")
    if not 0 <= sample < features.shape[0]:
        raise IndexError(f"sample index {sample} out of range")
    one = _sample(features, sample)
    values = T.weighted_channel_sum(one, T.reshape(head_row, (1, -1)))
    return ActivationMap(T.reshape(values, values.shape[1:]), CAM, class_index)


def compute_caam(features: T.Tensor, sample: int) -> ActivationMap:
    if not 0 <= sample < features.shape[0]:
        raise IndexError(f"sample index {sample} out of range")
    values = T.sum(_sample(features, sample), axes=(0, 1))
    return ActivationMap(values, CAAM)


def minmax_normalize(amap: ActivationMap) -> ActivationMap:
    return ActivationMap(normalize_batch(amap.values), amap.kind, amap.class_index, True)


def map_distance(a: ActivationMap, b: ActivationMap, metric: str = "l1") -> T.Tensor:
    return distance_batch(a.values, b.values, metric)


def _sample(features: T.Tensor, index: int) -> T.Tensor:
    return T.take_rows(features, [index])


def threshold_iou(normalized_map, mask, threshold: float = 0.5) -> float:
    """IoU of ``{map >= threshold}`` with a binary mask; two empty sets count as 1."""
    values = normalized_map.numpy() if isinstance(normalized_map, ActivationMap) else np.asarray(normalized_map)
    mask = np.asarray(mask).astype(bool)
    if values.shape != mask.shape:
        raise ValueError(f"map shape {values.shape} vs mask shape {mask.shape}")
    region = values >= threshold
    union = np.logical_or(region, mask).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(region, mask).sum() / union)


def upsample_bilinear(maps: np.ndarray, size: int) -> np.ndarray:
    """Resize [..., h, w] maps to [..., size, size] with half-pixel-centre bilinear sampling."""
    maps = np.asarray(maps)
    h, w = maps.shape[-2:]

    def axis_weights(n):
        pos = np.clip((np.arange(size) + 0.5) * n / size - 0.5, 0, n - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n - 1)
        return lo, hi, (pos - lo)

    r0, r1, fr = axis_weights(h)
    c0, c1, fc = axis_weights(w)
    top = maps[..., r0, :] * (1 - fr)[:, None] + maps[..., r1, :] * fr[:, None]
    return top[..., c0] * (1 - fc) + top[..., c1] * fc
