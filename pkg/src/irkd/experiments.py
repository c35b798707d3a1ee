"""Desk-scale experiment drivers shared by the scripts and the acceptance suite.

A :class:`DeskExperiment` owns one synthetic dataset and memoises every run it
performs, so the resolution ladder, the distillation comparison and the
normalisation ablation can share teachers and baselines.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from .backbone import Model, ModelConfig, save_checkpoint
from .data import DatasetManifest, generate_synthetic, load_manifest
from .losses import DistillConfig
from .trainer import RunReport, RunResult, TrainConfig, distill_student, run_name, train_baseline, train_teacher


@dataclass
class DeskSetup:
    classes: int = 4
    per_class: int = 200
    size: int = 32
    data_seed: int = 1
    block_channels: list = field(default_factory=lambda: [16, 32, 64])
    learning_rate: float = 1e-3
    epochs: int = 20
    batch_size: int = 32
    seeds: tuple[int, ...] = (0, 1, 2)
    # picked by 3-seed mean validation kappa at factor 8 over a small (alpha_fm, alpha_at) grid
    alpha_fm: float = 0.1
    alpha_at: float = 1.0

    def model_config(self) -> ModelConfig:
        return ModelConfig(input_channels=3, block_channels=list(self.block_channels), num_classes=self.classes,
                           input_size=self.size)

    def train_config(self, seed: int, magnification: int = 1, distill: DistillConfig | None = None) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size, learning_rate=self.learning_rate,
                           seed=seed, magnification=magnification, distill=distill)

    def fm_at(self, mode: str = "relu_minmax") -> DistillConfig:
        return DistillConfig(alpha_fm=self.alpha_fm, alpha_at=self.alpha_at, attention_mode=mode)

    def methods(self) -> dict[str, DistillConfig]:
        """The distillation rows of the method table, keyed by their table label."""
        return {
            "KD": DistillConfig(alpha_kd=1.0),
            "FM+KD": DistillConfig(alpha_fm=self.alpha_fm, alpha_kd=1.0),
            "FM+SR": DistillConfig(alpha_fm=self.alpha_fm, use_sr=True),
            "FM": DistillConfig(alpha_fm=self.alpha_fm),
            "AT+": DistillConfig(alpha_at=self.alpha_at),
            "FM+AT+": self.fm_at(),
        }


@dataclass
class TimedRun:
    report: RunReport
    seconds: float
    model: Model | None = None


class DeskExperiment:
    def __init__(self, setup: DeskSetup, root):
        self.setup = setup
        self.root = Path(root)
        self.runs: dict[str, TimedRun] = {}
        self.teacher_hashes: dict[int, str] = {}
        manifest = self.root / "data" / "manifest.csv"
        if manifest.exists():
            self.data: DatasetManifest = load_manifest(manifest)
        else:
            self.data = generate_synthetic(setup.per_class, setup.classes, setup.size, setup.data_seed, self.root / "data")

    def _record(self, key: str, fn) -> TimedRun:
        if key not in self.runs:
            start = time.perf_counter()
            result: RunResult = fn()
            run = TimedRun(result.report, time.perf_counter() - start, result.model)
            out = self.root / "runs" / key
            out.mkdir(parents=True, exist_ok=True)
            result.report.save(out / "report.json")
            save_checkpoint(result.model, out / "model.ckpt")
            self.runs[key] = run
        return self.runs[key]

    def teacher(self, seed: int) -> TimedRun:
        cfg = self.setup.train_config(seed)
        run = self._record(run_name(cfg, "teacher"),
                           lambda: train_teacher(cfg, self.setup.model_config(), self.data))
        self.teacher_hashes.setdefault(seed, run.model.param_hash())
        return run

    def baseline(self, seed: int, magnification: int) -> TimedRun:
        """Plain cross-entropy student; at factor 1 this is the teacher run itself."""
        if magnification == 1:
            return self.teacher(seed)
        cfg = self.setup.train_config(seed, magnification)
        return self._record(run_name(cfg, "baseline"),
                            lambda: train_baseline(cfg, self.setup.model_config(), self.data))

    def distill(self, seed: int, magnification: int, distill: DistillConfig) -> TimedRun:
        teacher = self.teacher(seed).model
        cfg = self.setup.train_config(seed, magnification, distill)
        return self._record(run_name(cfg), lambda: distill_student(teacher, cfg, self.data))

    # -- the three desk-scale studies --------------------------------------------------

    def resolution_ladder(self, factors=(1, 2, 4, 8)) -> dict[int, list[float]]:
        """Baseline test accuracy per magnification factor, one entry per seed."""
        return {f: [self.baseline(s, f).report.test_accuracy for s in self.setup.seeds] for f in factors}

    def distillation_gain(self, magnification: int = 8) -> dict[str, list[float]]:
        return {
            "baseline": [self.baseline(s, magnification).report.test_accuracy for s in self.setup.seeds],
            "fm_at": [self.distill(s, magnification, self.setup.fm_at()).report.test_accuracy for s in self.setup.seeds],
        }

    def mode_ablation(self, magnification: int = 8) -> dict[str, list[float]]:
        """Selected-epoch validation kappa of the FM+AT student under each attention mode."""
        return {mode: [self.distill(s, magnification, self.setup.fm_at(mode)).report.best_val_kappa
                       for s in self.setup.seeds]
                for mode in ("relu_minmax", "raw", "minmax")}

    def pipeline_seconds(self, magnification: int = 8) -> float:
        """Wall time of teacher + baseline + FM+AT student over all seeds."""
        total = 0.0
        for s in self.setup.seeds:
            total += self.teacher(s).seconds + self.baseline(s, magnification).seconds
            total += self.distill(s, magnification, self.setup.fm_at()).seconds
        return total

    def method_table(self, factors=(2, 4, 8)) -> list[RunReport]:
        """Every report behind the method table: teacher, baseline and each distillation
        preset at each factor, over all seeds."""
        reports = [self.teacher(s).report for s in self.setup.seeds]
        for f in factors:
            for s in self.setup.seeds:
                reports.append(self.baseline(s, f).report)
                reports += [self.distill(s, f, d).report for d in self.setup.methods().values()]
        return reports

    def teacher_invariance(self) -> dict[str, bool]:
        """For every distillation run: recorded teacher hash equals the teacher's hash
        at training time and the teacher's current hash."""
        out = {}
        for key, run in self.runs.items():
            if run.report.teacher_hash is None:
                continue
            seed = run.report.seed
            out[key] = run.report.teacher_hash == self.teacher_hashes[seed] == self.teacher(seed).model.param_hash()
        return out

    def summary(self) -> dict:
        return {"setup": asdict(self.setup),
                "runs": {k: {"test_accuracy": r.report.test_accuracy, "test_kappa": r.report.test_kappa,
                             "best_val_kappa": r.report.best_val_kappa, "seconds": r.seconds}
                         for k, r in self.runs.items()}}

    def save_summary(self, path=None) -> Path:
        path = Path(path or self.root / "summary.json")
        path.write_text(json.dumps(self.summary(), indent=2, sort_keys=True))
        return path


def with_overrides(setup: DeskSetup, **kw) -> DeskSetup:
    return replace(setup, **kw)
