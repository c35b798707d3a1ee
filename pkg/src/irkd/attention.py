"""Grad-CAM attention maps for Teacher and Student feature representations."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, PngImagePlugin

from . import tensor as T
from .backbone import ForwardRecord
from .tensor import GraphError, Tensor


class AttentionMode(str, enum.Enum):
    RAW = "raw"  # gradient-weighted channel sum, untouched
    MINMAX = "minmax"  # per-map min-max rescale only
    RELU_MINMAX = "relu_minmax"  # rectify, then per-map min-max

    @classmethod
    def parse(cls, value) -> AttentionMode:
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(f"unknown attention mode {value!r}; expected one of {[m.value for m in cls]}") from None


@dataclass
class AttentionMap:
    values: Tensor  # N×K×h×w
    mode: AttentionMode
    channel_weights: np.ndarray  # N×K×C, detached

    @property
    def num_classes(self) -> int:
        return self.values.shape[1]


def channel_weights(record: ForwardRecord) -> np.ndarray:
    """Spatially averaged d(logit_k)/d(features) for every class; shape N×K×C.

    Summing a logit over the batch before differentiating is exact because
    samples do not interact in the network.
    """
    features, logits = record.features, record.logits
    if not (features.requires_grad and logits.requires_grad):
        raise GraphError("grad_cam needs a forward record with a live graph between features and logits")
    n, k = logits.shape
    if k == 0:
        raise ValueError("grad_cam: zero classes")
    alpha = np.empty((n, k, features.shape[1]), dtype=features.dtype)
    for cls in range(k):
        target = T.tsum(logits[:, cls])
        grads = T.grad_query(target, features).data
        alpha[:, cls, :] = grads.mean(axis=(2, 3))
    return alpha


def apply_mode(raw: Tensor, mode: AttentionMode) -> Tensor:
    if mode is AttentionMode.RAW:
        return raw
    if mode is AttentionMode.MINMAX:
        return T.minmax_normalize(raw)
    return T.minmax_normalize(T.relu(raw))


def grad_cam(record: ForwardRecord, mode: AttentionMode | str = AttentionMode.RELU_MINMAX, differentiable: bool = False) -> AttentionMap:
    """Per-class attention maps. With ``differentiable`` the maps stay attached to
    the graph through the features only; channel weights are always constants."""
    mode = AttentionMode.parse(mode)
    alpha = channel_weights(record)
    if differentiable:
        feats = record.features
        if feats.is_leaf:
            raise GraphError("differentiable grad_cam requires features produced by a trainable model")
    else:
        feats = record.features.detach()
    values = apply_mode(T.channel_weighted_sum(alpha, feats), mode)
    return AttentionMap(values, mode, alpha)


def heatmap_array(amap: AttentionMap, sample: int, cls: int, size: int | None = None) -> tuple[np.ndarray, dict]:
    n, k, h, w = amap.values.shape
    if not (0 <= sample < n and 0 <= cls < k):
        raise IndexError(f"sample {sample} / class {cls} out of range for maps of shape {amap.values.shape}")
    one = Tensor(amap.values.data[sample, cls][None, None].astype(np.float64))
    if size is not None:
        one = T.bilinear_resize(one, size, size)
    vals = one.data[0, 0]
    meta = {"mode": amap.mode.value, "sample": str(sample), "class": str(cls)}
    if amap.mode is AttentionMode.RAW and (vals < 0).any():
        meta["warning"] = "raw attention map had negative values clamped to 0"
    return np.round(255 * np.clip(vals, 0.0, 1.0)).astype(np.uint8), meta


def export_heatmap(amap: AttentionMap, sample: int, cls: int, path, size: int | None = None,
                   extra: dict[str, str] | None = None) -> dict:
    """Write one (sample, class) map as an 8-bit grayscale PNG upsampled to ``size``.
    ``extra`` entries are stored as additional PNG text chunks."""
    pixels, meta = heatmap_array(amap, sample, cls, size)
    meta.update(extra or {})
    info = PngImagePlugin.PngInfo()
    for key, value in meta.items():
        info.add_text(key, value)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(pixels).save(path, pnginfo=info)
    return meta


def save_maps(amap: AttentionMap, path) -> None:
    T.save_tensor(path, amap.values.data)
