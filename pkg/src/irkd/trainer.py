"""Teacher training, Student distillation, Adam, alpha grid search and multi-seed runs."""

from __future__ import annotations

import json
import logging
import math
import statistics
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from . import tensor as T
from .attention import grad_cam
from .backbone import ConfigError, Model, ModelConfig, build_model, forward_with_features, load_checkpoint, save_checkpoint
from .data import DatasetManifest, augment, balanced_indices, check_factor, degrade, sample_seed
from .losses import DistillConfig, at_plus_loss, ce_loss, fm_loss, kd_loss, one_hot, sr_loss, total_loss
from .metrics import evaluate_arrays

log = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    learning_rate: float = 1e-4
    seed: int = 0
    magnification: int = 1
    augment: bool = True
    distill: DistillConfig | None = None

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.learning_rate >= 0:
            raise ConfigError("learning_rate must be non-negative")
        check_factor(self.magnification)
        if self.distill is not None:
            self.distill.validate()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["distill"] = None if self.distill is None else self.distill.to_dict()
        return d


# -- Adam -------------------------------------------------------------------------


@dataclass
class AdamState:
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: list[np.ndarray], grads: list[np.ndarray | None], state: AdamState, lr: float,
              betas: tuple[float, float] = ADAM_BETAS, eps: float = ADAM_EPS) -> AdamState:
    """One bias-corrected Adam update, in place on ``params``."""
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    b1, b2 = betas
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape or state.m[i].shape != p.shape:
            raise ValueError(f"shape mismatch for parameter {i}: {p.shape} vs grad {g.shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient at optimizer step {state.step}")
        m, v = state.m[i], state.v[i]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p -= (lr * (m / bc1) / (np.sqrt(v / bc2) + eps)).astype(p.dtype)
    return state


# -- reports -----------------------------------------------------------------------


@dataclass
class RunReport:
    name: str
    seed: int
    config: dict
    epochs: list[dict] = field(default_factory=list)
    selected_epoch: int = -1
    test_accuracy: float = float("nan")
    test_kappa: float = float("nan")
    test_per_class: list = field(default_factory=list)
    teacher_hash: str | None = None
    flags: list[str] = field(default_factory=list)
    meta: dict = field(default_factory=dict)  # provenance (resolved experiment config, code version)

    @property
    def best_val_kappa(self) -> float:
        return self.epochs[self.selected_epoch]["val_kappa"]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> RunReport:
        return cls(**d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path) -> RunReport:
        return cls.from_dict(json.loads(Path(path).read_text()))


def select_epoch(val_kappas: list[float]) -> int:
    """Index of the best validation kappa; earliest wins ties."""
    return int(np.argmax(np.asarray(val_kappas)))


def run_name(config: TrainConfig, prefix: str | None = None) -> str:
    d = config.distill
    if prefix is None:
        prefix = "teacher" if d is None else "student"
    parts = [prefix, f"seed{config.seed}", f"mag{config.magnification}"]
    if d is not None:
        parts += [f"fm{d.alpha_fm:g}", f"at{d.alpha_at:g}", f"kd{d.alpha_kd:g}"]
        if d.use_sr:
            parts.append(f"sr{d.alpha_sr:g}")
        if d.alpha_at:
            parts.append(d.attention_mode.value)
    return "_".join(parts)


# -- training loop --------------------------------------------------------------------


@dataclass
class RunResult:
    model: Model
    report: RunReport


def _batch_images(images: np.ndarray, idx: np.ndarray, seed: int, epoch: int, offset: int, use_aug: bool) -> np.ndarray:
    if not use_aug:
        return images[idx]
    return np.stack([augment(images[j], sample_seed(seed, epoch, offset + i)) for i, j in enumerate(idx)])


def _distill_terms(student_rec, teacher: Model, x_hi: np.ndarray, cfg: DistillConfig) -> dict:
    teacher_rec = forward_with_features(teacher, x_hi)
    t_feats = teacher_rec.features.detach()
    t_probs = teacher_rec.probs.detach()
    terms = {}
    if cfg.alpha_fm > 0:
        terms["fm"] = fm_loss(t_feats, student_rec.features, cfg.alignment)
    if cfg.alpha_at > 0:
        t_maps = grad_cam(teacher_rec, cfg.attention_mode, differentiable=False)
        s_maps = grad_cam(student_rec, cfg.attention_mode, differentiable=True)
        terms["at"] = at_plus_loss(t_maps, s_maps, cfg.alignment)
    if cfg.alpha_kd > 0:
        terms["kd"] = kd_loss(t_probs, student_rec.probs)
    if cfg.sr_weight > 0:
        terms["sr"] = sr_loss(student_rec.features, teacher, t_probs)
    return terms


def train(config: TrainConfig, model_config: ModelConfig, data: DatasetManifest, teacher: Model | None = None,
          out_dir=None, name: str | None = None, loss_log: Callable[[dict], None] | None = None) -> RunResult:
    """Shared loop for Teacher, plain Student and distilled Student runs."""
    config.validate()
    model_config.validate()
    cfg = config.distill
    if cfg is not None and not cfg.is_plain and teacher is None:
        raise ValueError("distillation terms enabled but no teacher given")
    if teacher is not None:
        if teacher.config.num_classes != model_config.num_classes:
            raise ConfigError(
                f"teacher has {teacher.config.num_classes} classes, student {model_config.num_classes}"
            )
        if cfg is not None and (cfg.alpha_fm > 0 or cfg.sr_weight > 0) and teacher.config.feature_channels != model_config.feature_channels:
            raise ConfigError(
                f"teacher feature channels {teacher.config.feature_channels} != student {model_config.feature_channels}"
            )
        if not teacher.frozen:
            teacher.freeze()
    if data.num_classes != model_config.num_classes:
        raise ConfigError(f"dataset has {data.num_classes} classes, model {model_config.num_classes}")
    if not data.split("val"):
        raise ValueError("dataset has no validation split")

    name = name or run_name(config)
    factor = config.magnification
    k = model_config.num_classes
    x_train, y_train = data.arrays("train")
    x_val, y_val = data.arrays("val")
    x_val = degrade(x_val, factor)

    model = build_model(model_config, config.seed)
    params = list(model.parameters.values())
    state = AdamState()
    teacher_hash = teacher.param_hash() if teacher is not None else None

    steps = math.ceil(len(y_train) / config.batch_size)
    report = RunReport(name=name, seed=config.seed, config=config.to_dict(), teacher_hash=teacher_hash,
                       flags=cfg.flags() if cfg is not None else [])
    best_kappa, best_params = -math.inf, None
    global_step = 0
    for epoch in range(config.epochs):
        order = balanced_indices(y_train, steps * config.batch_size, sample_seed(config.seed, epoch, 0, stream=1), k)
        sums: dict[str, float] = {}
        for step in range(steps):
            idx = order[step * config.batch_size:(step + 1) * config.batch_size]
            x_hi = _batch_images(x_train, idx, config.seed, epoch, step * config.batch_size, config.augment)
            x_lo = degrade(x_hi, factor)
            rec = forward_with_features(model, x_lo)
            ce = ce_loss(rec.probs, one_hot(y_train[idx], k))
            terms = _distill_terms(rec, teacher, x_hi, cfg) if cfg is not None and not cfg.is_plain else {}
            total = total_loss(ce, terms.get("fm"), terms.get("at"), terms.get("kd"),
                               cfg if cfg is not None else DistillConfig(), sr=terms.get("sr"))
            model.zero_grad()
            T.backward(total)
            adam_step([p.data for p in params], [p.grad for p in params], state, config.learning_rate)
            entry = {"step": global_step, "ce": ce.item(), **{t: v.item() for t, v in terms.items()}, "total": total.item()}
            for key in ("fm", "at", "kd"):
                entry.setdefault(key, 0.0)
            if loss_log is not None:
                loss_log(entry)
            for key, value in entry.items():
                if key != "step":
                    sums[key] = sums.get(key, 0.0) + value
            global_step += 1
        val = evaluate_arrays(model, x_val, y_val, k)
        report.epochs.append({"epoch": epoch, "train": {key: v / steps for key, v in sums.items()},
                              "val_accuracy": val["accuracy"], "val_kappa": val["kappa"]})
        log.info("%s epoch %d: loss %.4f val acc %.3f kappa %.3f", name, epoch, sums["total"] / steps,
                 val["accuracy"], val["kappa"])
        if val["kappa"] > best_kappa:
            best_kappa = val["kappa"]
            best_params = {n: p.data.copy() for n, p in model.parameters.items()}

    report.selected_epoch = select_epoch([e["val_kappa"] for e in report.epochs])
    for n, p in model.parameters.items():
        p.data = best_params[n]
    x_test, y_test = data.arrays("test")
    test = evaluate_arrays(model, degrade(x_test, factor), y_test, k)
    report.test_accuracy, report.test_kappa, report.test_per_class = test["accuracy"], test["kappa"], test["per_class"]

    if teacher is not None and teacher.param_hash() != teacher_hash:
        raise RuntimeError("frozen teacher parameters changed during distillation")
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(model, out_dir / f"{name}.ckpt")
        report.save(out_dir / f"{name}.report.json")
    return RunResult(model, report)


class _JsonLines:
    def __init__(self, path):
        self.fh = open(path, "w")

    def __call__(self, entry: dict) -> None:
        self.fh.write(json.dumps(entry, sort_keys=True) + "\n")

    def close(self) -> None:
        self.fh.close()


def _run_with_log(config, model_config, data, teacher, out_dir, name) -> RunResult:
    if out_dir is None:
        return train(config, model_config, data, teacher=teacher, name=name)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    name = name or run_name(config)
    sink = _JsonLines(out_dir / f"{name}.losses.jsonl")
    try:
        return train(config, model_config, data, teacher=teacher, out_dir=out_dir, name=name, loss_log=sink)
    finally:
        sink.close()


def train_teacher(config: TrainConfig, model_config: ModelConfig, data: DatasetManifest, out_dir=None,
                  name: str | None = None) -> RunResult:
    """Cross-entropy training on full-resolution inputs."""
    if config.distill is not None:
        raise ConfigError("teacher training takes no distillation config")
    if config.magnification != 1:
        raise ConfigError("the teacher is trained at magnification factor 1")
    return _run_with_log(config, model_config, data, None, out_dir, name)


def train_baseline(config: TrainConfig, model_config: ModelConfig, data: DatasetManifest, out_dir=None,
                   name: str | None = None) -> RunResult:
    """Cross-entropy only, at ``config.magnification``."""
    return _run_with_log(replace(config, distill=None), model_config, data, None, out_dir,
                         name or run_name(replace(config, distill=None), "baseline"))


def distill_student(teacher, config: TrainConfig, data: DatasetManifest, model_config: ModelConfig | None = None,
                    out_dir=None, name: str | None = None) -> RunResult:
    """Distil a frozen teacher (Model or checkpoint path) into a Student trained on degraded inputs."""
    if config.distill is None:
        raise ConfigError("distill_student needs config.distill")
    if not isinstance(teacher, Model):
        teacher = load_checkpoint(teacher)
    else:
        teacher = teacher.clone()
    teacher.freeze()
    model_config = model_config or ModelConfig.from_dict(asdict(teacher.config))
    return _run_with_log(config, model_config, data, teacher, out_dir, name)


# -- orchestration --------------------------------------------------------------------


def best_alpha(results: dict[float, RunReport]) -> float:
    """Highest validation kappa; ties go to the smaller alpha."""
    return min(results, key=lambda a: (-results[a].best_val_kappa, a))


def grid_search_alpha(base: TrainConfig, alphas: Iterable[float], runner: Callable[[TrainConfig], RunReport],
                      terms: tuple[str, ...] = ("alpha_fm", "alpha_at")) -> tuple[TrainConfig, dict[str, dict[float, RunReport]]]:
    """Sequential per-term sweep: each term in ``terms`` is swept with the others at
    their current best, in the given order."""
    alphas = sorted(set(float(a) for a in alphas))
    if not alphas:
        raise ValueError("alpha grid is empty")
    if base.distill is None:
        raise ConfigError("grid search needs a distillation config")
    current = base
    history: dict[str, dict[float, RunReport]] = {}
    for term in terms:
        history[term] = {}
        for a in alphas:
            cfg = replace(current, distill=replace(current.distill, **{term: a}))
            history[term][a] = runner(cfg)
        current = replace(current, distill=replace(current.distill, **{term: best_alpha(history[term])}))
    return current, history


@dataclass
class Aggregate:
    seeds: list[int]
    accuracy_mean: float
    accuracy_std: float
    kappa_mean: float
    kappa_std: float
    val_kappa_mean: float
    reports: list[RunReport] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["reports"] = [r.name for r in self.reports]
        return d


def aggregate(reports: list[RunReport]) -> Aggregate:
    """Mean and sample standard deviation of test metrics (std 0 for a single run)."""
    if not reports:
        raise ValueError("no reports to aggregate")
    acc = [r.test_accuracy for r in reports]
    kap = [r.test_kappa for r in reports]

    def sd(xs):
        return statistics.stdev(xs) if len(xs) > 1 else 0.0

    return Aggregate([r.seed for r in reports], statistics.fmean(acc), sd(acc), statistics.fmean(kap), sd(kap),
                     statistics.fmean(r.best_val_kappa for r in reports), list(reports))


class SeedFailure(RuntimeError):
    def __init__(self, seed: int, cause: BaseException):
        super().__init__(f"run failed for seed {seed}: {cause}")
        self.seed = seed


def multi_seed(run: Callable[[int], RunReport], seeds: list[int]) -> Aggregate:
    if not seeds:
        raise ValueError("multi_seed needs at least one seed")
    reports = []
    for s in seeds:
        try:
            reports.append(run(s))
        except Exception as exc:
            raise SeedFailure(s, exc) from exc
    return aggregate(reports)
