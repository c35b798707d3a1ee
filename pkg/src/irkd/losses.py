"""Training criteria: cross-entropy, softmax distillation, feature matching,
Grad-CAM attention matching, softmax regression, and their weighted sum."""

from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .attention import AttentionMap, AttentionMode
from .backbone import ConfigError, Model
from .tensor import GraphError, ShapeError, Tensor


class Alignment(str, enum.Enum):
    DEGRADE_RESTORE = "degrade_restore"
    FEATURE_INTERP = "feature_interp"


@dataclass
class DistillConfig:
    alpha_fm: float = 0.0
    alpha_at: float = 0.0
    alpha_kd: float = 0.0
    use_sr: bool = False
    alpha_sr: float = 1.0
    attention_mode: AttentionMode = AttentionMode.RELU_MINMAX
    alignment: Alignment = Alignment.DEGRADE_RESTORE

    def __post_init__(self):
        self.attention_mode = AttentionMode.parse(self.attention_mode)
        self.alignment = Alignment(self.alignment)

    def validate(self) -> None:
        for name in ("alpha_fm", "alpha_at", "alpha_kd", "alpha_sr"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise ConfigError(f"{name} must be finite and >= 0, got {value}")

    @property
    def sr_weight(self) -> float:
        return self.alpha_sr if self.use_sr else 0.0

    @property
    def is_plain(self) -> bool:
        return self.alpha_fm == 0 and self.alpha_at == 0 and self.alpha_kd == 0 and self.sr_weight == 0

    def flags(self) -> list[str]:
        """Combinations outside the published presets."""
        return ["sr_with_attention"] if self.use_sr and self.alpha_at > 0 else []

    def to_dict(self) -> dict:
        d = asdict(self)
        d["attention_mode"] = self.attention_mode.value
        d["alignment"] = self.alignment.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> DistillConfig:
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown DistillConfig keys: {sorted(unknown)}")
        return cls(**d)


def _require_detached(t: Tensor, what: str) -> None:
    if t.requires_grad:
        raise GraphError(f"{what} must be detached (frozen Teacher side)")


def one_hot(labels, num_classes: int, dtype=T.DEFAULT_DTYPE) -> Tensor:
    labels = np.asarray(labels, dtype=int)
    out = np.zeros((labels.size, num_classes), dtype=dtype)
    out[np.arange(labels.size), labels] = 1
    return Tensor(out)


def _soft_cross_entropy(target: np.ndarray, probs: Tensor) -> Tensor:
    # mean over batch of -(1/K) sum_k target_k log(probs_k)
    n, k = probs.shape
    logp = T.log(probs)
    return T.tsum(T.mul(Tensor(target.astype(probs.dtype)), logp)) * probs.dtype.type(-1.0 / (n * k))


def ce_loss(probs: Tensor, labels: Tensor | np.ndarray) -> Tensor:
    y = labels.data if isinstance(labels, Tensor) else np.asarray(labels)
    if y.shape != probs.shape:
        raise ShapeError(f"labels {y.shape} do not match probs {probs.shape}")
    if not (np.isin(y, (0, 1)).all() and (y.sum(axis=1) == 1).all()):
        raise ValueError("ce_loss labels must be one-hot rows")
    return _soft_cross_entropy(y, probs)


def kd_loss(teacher_probs: Tensor, student_probs: Tensor) -> Tensor:
    """Softmax distillation without temperature."""
    _require_detached(teacher_probs, "teacher_probs")
    if teacher_probs.shape != student_probs.shape:
        raise ShapeError(f"teacher {teacher_probs.shape} vs student {student_probs.shape}")
    return _soft_cross_entropy(teacher_probs.data, student_probs)


def _align(teacher: Tensor, student: Tensor, alignment: Alignment, what: str) -> Tensor:
    if teacher.shape[:2] != student.shape[:2]:
        raise ShapeError(f"{what}: teacher {teacher.shape} and student {student.shape} differ in batch/channel dims")
    if teacher.shape[2:] == student.shape[2:]:
        return student
    if Alignment(alignment) is Alignment.DEGRADE_RESTORE:
        raise ShapeError(f"{what}: spatial sizes {teacher.shape[2:]} vs {student.shape[2:]} under DEGRADE_RESTORE")
    return T.bilinear_resize(student, *teacher.shape[2:])


def fm_loss(teacher_features: Tensor, student_features: Tensor, alignment: Alignment = Alignment.DEGRADE_RESTORE) -> Tensor:
    """(1/|Omega|) sum_i ||f_t,i - f_s,i||^2, averaged over the batch."""
    _require_detached(teacher_features, "teacher_features")
    if teacher_features.shape[1] != student_features.shape[1]:
        raise ShapeError(f"fm_loss: channel mismatch {teacher_features.shape[1]} vs {student_features.shape[1]}")
    s = _align(teacher_features, student_features, alignment, "fm_loss")
    n, _, h, w = teacher_features.shape
    diff = T.sub(teacher_features, s)
    return T.tsum(T.square(diff)) * s.dtype.type(1.0 / (n * h * w))


def at_plus_loss(teacher_maps: AttentionMap, student_maps: AttentionMap, alignment: Alignment = Alignment.DEGRADE_RESTORE) -> Tensor:
    """Mean squared difference of per-class attention maps over classes, positions and batch."""
    if teacher_maps.mode is not student_maps.mode:
        raise ValueError(f"attention mode mismatch: {teacher_maps.mode.value} vs {student_maps.mode.value}")
    _require_detached(teacher_maps.values, "teacher attention maps")
    s = _align(teacher_maps.values, student_maps.values, alignment, "at_plus_loss")
    return T.mean(T.square(T.sub(teacher_maps.values, s)))


def sr_loss(student_features: Tensor, teacher: Model, teacher_probs: Tensor) -> Tensor:
    """Student features routed through the frozen Teacher head, matched to the Teacher's own output."""
    if not teacher.frozen:
        raise GraphError("sr_loss requires a frozen teacher")
    _require_detached(teacher_probs, "teacher_probs")
    probs = T.softmax(teacher.head(student_features))
    return _soft_cross_entropy(teacher_probs.data, probs)


def total_loss(ce: Tensor, fm: Tensor | None, at: Tensor | None, kd: Tensor | None, config: DistillConfig, sr: Tensor | None = None) -> Tensor:
    config.validate()
    total = ce
    for weight, term in (
        (config.alpha_fm, fm),
        (config.alpha_at, at),
        (config.alpha_kd, kd),
        (config.sr_weight, sr),
    ):
        if weight == 0 or term is None:
            continue
        total = T.add(total, T.mul(term, weight))
    return total
