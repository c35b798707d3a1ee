"""Command-line entry point binding data generation, training, evaluation and export.

Every run writes into its own directory under the output root (``--out``, else the
``IRKD_OUTPUT_ROOT`` environment variable, else ``./runs``)::

    <root>/<run name>/config.json   resolved experiment config
    <root>/<run name>/report.json   RunReport with provenance in "meta"
    <root>/<run name>/losses.jsonl  a {"meta": ...} header, then one line per step
    <root>/<run name>/model.ckpt    selected checkpoint

Failures exit non-zero after printing ``<kind> error: <message>`` and a final
JSON line ``{"error": {"kind": ..., "message": ...}}`` on stderr.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from . import __version__
from .attention import AttentionMode, export_heatmap, grad_cam, save_maps
from .backbone import CheckpointError, ConfigError, Model, ModelConfig, forward_with_features, load_checkpoint, save_checkpoint
from .data import MAGNIFICATION_LABELS, ManifestError, degrade, generate_synthetic, load_manifest
from .losses import DistillConfig
from .metrics import evaluate_split
from .trainer import RunReport, TrainConfig, aggregate, best_alpha, run_name, train

ENV_OUTPUT_ROOT = "IRKD_OUTPUT_ROOT"
CODE_VERSION = f"irkd {__version__}"

EXIT_RUNTIME, EXIT_USAGE, EXIT_CONFIG, EXIT_MISSING, EXIT_DATA = 1, 2, 3, 4, 5

log = logging.getLogger("irkd")


def code_hash(version: str = CODE_VERSION) -> str:
    """Git blob hash of the code version string."""
    raw = version.encode()
    return hashlib.sha1(b"blob %d\0" % len(raw) + raw).hexdigest()


# -- experiment config ------------------------------------------------------------


@dataclass
class DataConfig:
    """Where the images come from: a manifest CSV, else synthetic generation parameters
    (used by ``synth-data``)."""

    manifest: str | None = None
    classes: int = 4
    per_class: int = 200
    size: int = 32
    seed: int = 1


TRAIN_KEYS = ("epochs", "batch_size", "learning_rate", "seed", "magnification", "augment")


@dataclass
class ExperimentConfig:
    """JSON sections ``model``, ``train``, ``distill``, ``data`` plus a ``teacher``
    checkpoint path. Defaults are those of the underlying dataclasses."""

    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    data: DataConfig = field(default_factory=DataConfig)
    teacher: str | None = None

    def to_dict(self) -> dict:
        train = {k: getattr(self.train, k) for k in TRAIN_KEYS}
        return {"model": asdict(self.model), "train": train, "distill": self.distill.to_dict(),
                "data": asdict(self.data), "teacher": self.teacher}

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentConfig:
        if not isinstance(d, dict):
            raise ConfigError("experiment config must be a JSON object")
        _reject_unknown(d, {"model", "train", "distill", "data", "teacher"}, "experiment config")
        train = d.get("train", {})
        _reject_unknown(train, set(TRAIN_KEYS), "train section")
        data = d.get("data", {})
        _reject_unknown(data, {f.name for f in fields(DataConfig)}, "data section")
        try:
            exp = cls(
                model=ModelConfig.from_dict(d.get("model", {})),
                train=TrainConfig(**train),
                distill=DistillConfig.from_dict(d.get("distill", {})),
                data=DataConfig(**data),
                teacher=d.get("teacher"),
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        return exp

    def validate(self) -> None:
        self.model.validate()
        self.train.validate()
        self.distill.validate()

    def train_config(self, with_distill: bool) -> TrainConfig:
        return replace(self.train, distill=self.distill if with_distill else None)


def _reject_unknown(d: dict, allowed: set, where: str) -> None:
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be a JSON object")
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")


def load_experiment(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: malformed JSON ({exc})") from exc
    return ExperimentConfig.from_dict(raw)


# flag dest -> (section, key); applied after the config file, so flags win
FLAG_TARGETS = {
    "epochs": ("train", "epochs"), "batch_size": ("train", "batch_size"), "lr": ("train", "learning_rate"),
    "seed": ("train", "seed"), "magnification": ("train", "magnification"), "augment": ("train", "augment"),
    "blocks": ("model", "block_channels"), "input_size": ("model", "input_size"),
    "alpha_fm": ("distill", "alpha_fm"), "alpha_at": ("distill", "alpha_at"), "alpha_kd": ("distill", "alpha_kd"),
    "sr": ("distill", "use_sr"), "alpha_sr": ("distill", "alpha_sr"), "mode": ("distill", "attention_mode"),
    "alignment": ("distill", "alignment"), "data": ("data", "manifest"), "teacher": (None, "teacher"),
}


def resolve_experiment(args: argparse.Namespace) -> ExperimentConfig:
    """Defaults, then the ``--config`` file, then explicit flags."""
    base = load_experiment(args.config).to_dict() if getattr(args, "config", None) else ExperimentConfig().to_dict()
    for dest, (section, key) in FLAG_TARGETS.items():
        value = getattr(args, dest, None)
        if value is None:
            continue
        if section is None:
            base[key] = value
        else:
            base[section][key] = value
    exp = ExperimentConfig.from_dict(base)
    exp.validate()
    return exp


# -- run plumbing -----------------------------------------------------------------


def output_root(args) -> Path:
    return Path(args.out or os.environ.get(ENV_OUTPUT_ROOT) or "runs")


def _meta(exp: ExperimentConfig | None = None, **extra) -> dict:
    meta = {"code_version": CODE_VERSION, "code_hash": code_hash()}
    if exp is not None:
        meta["config"] = exp.to_dict()
    meta.update(extra)
    return meta


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _load_data(exp: ExperimentConfig):
    if not exp.data.manifest:
        raise ConfigError("no dataset given: pass --data MANIFEST or set data.manifest")
    return load_manifest(exp.data.manifest)


def _load_teacher(path) -> Model:
    if not Path(path).exists():
        raise FileNotFoundError(f"teacher checkpoint not found: {path}")
    return load_checkpoint(path).freeze()


def execute_run(exp_dict: dict, kind: str, root: str) -> dict:
    """One training run into ``root/<run name>``; returns the report as a dict.
    Module-level so that worker processes can import it."""
    exp = ExperimentConfig.from_dict(exp_dict)
    exp.validate()
    data = _load_data(exp)
    if kind == "teacher":
        if exp.train.magnification != 1:
            raise ConfigError("the teacher is trained at magnification factor 1")
        cfg, teacher = exp.train_config(False), None
        name = run_name(cfg)
    else:
        cfg = exp.train_config(True)
        teacher = None
        if not exp.distill.is_plain:
            if not exp.teacher:
                raise ConfigError("distillation weights are set but no --teacher checkpoint was given")
            teacher = _load_teacher(exp.teacher.format(seed=exp.train.seed))
        name = run_name(cfg)
    run_dir = Path(root) / name
    run_dir.mkdir(parents=True, exist_ok=True)
    meta = _meta(exp)
    _write_json(run_dir / "config.json", meta)
    with open(run_dir / "losses.jsonl", "w") as fh:
        fh.write(json.dumps({"meta": meta}, sort_keys=True) + "\n")
        sink = lambda entry: fh.write(json.dumps(entry, sort_keys=True) + "\n")  # noqa: E731
        result = train(cfg, exp.model, data, teacher=teacher, name=name, loss_log=sink)
    result.report.meta = meta
    save_checkpoint(result.model, run_dir / "model.ckpt", meta=meta)
    result.report.save(run_dir / "report.json")
    return result.report.to_dict()


def _fan_out(jobs: int, tasks: list[tuple]) -> list[dict]:
    """Run ``execute_run`` over tasks, in worker processes when ``jobs`` > 1.
    Results keep task order, so the worker count never changes outputs."""
    if jobs <= 1 or len(tasks) <= 1:
        return [execute_run(*t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(execute_run, *zip(*tasks)))


def _seeds(args, exp: ExperimentConfig) -> list[int]:
    if getattr(args, "seeds", None):
        return args.seeds
    return [exp.train.seed]


def _per_seed(exp: ExperimentConfig, seed: int) -> dict:
    d = exp.to_dict()
    d["train"]["seed"] = seed
    return d


def _summarise(reports: list[dict], root: Path, kind: str) -> None:
    for r in reports:
        print(f"{r['name']}: test accuracy {r['test_accuracy']:.4f} kappa {r['test_kappa']:.4f} "
              f"(epoch {r['selected_epoch']})")
    if len(reports) > 1:
        agg = aggregate([RunReport.from_dict(r) for r in reports])
        print(f"mean over seeds {agg.seeds}: accuracy {agg.accuracy_mean:.4f}±{agg.accuracy_std:.4f} "
              f"kappa {agg.kappa_mean:.4f}±{agg.kappa_std:.4f}")
        stem = reports[0]["name"].replace(f"seed{reports[0]['seed']}_", "")
        _write_json(root / f"{stem}.aggregate.json", {**agg.to_dict(), "meta": _meta()})


# -- subcommands ------------------------------------------------------------------------


def cmd_synth_data(args) -> int:
    out = Path(args.out or Path(os.environ.get(ENV_OUTPUT_ROOT) or "runs") / "synthetic")
    manifest = generate_synthetic(args.per_class, args.classes, args.size, args.seed, out)
    digest = dataset_hash(out)
    info = {"dataset_hash": digest, "records": len(manifest.records),
            "generator": {"classes": args.classes, "per_class": args.per_class, "size": args.size, "seed": args.seed},
            **_meta()}
    _write_json(out / "dataset.json", info)
    print(f"wrote {len(manifest.records)} images to {out}")
    print(f"dataset hash {digest}")
    return 0


def dataset_hash(root) -> str:
    """SHA-256 over the manifest, class names and image bytes."""
    root = Path(root)
    h = hashlib.sha256()
    for name in ("manifest.csv", "classes.json"):
        h.update((root / name).read_bytes())
    for p in sorted((root / "images").iterdir()):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def cmd_teacher_train(args) -> int:
    exp = resolve_experiment(args)
    root = output_root(args)
    tasks = [(_per_seed(exp, s), "teacher", str(root)) for s in _seeds(args, exp)]
    _summarise(_fan_out(args.jobs, tasks), root, "teacher")
    return 0


def cmd_distill(args) -> int:
    exp = resolve_experiment(args)
    root = output_root(args)
    tasks = [(_per_seed(exp, s), "student", str(root)) for s in _seeds(args, exp)]
    _summarise(_fan_out(args.jobs, tasks), root, "student")
    return 0


def cmd_grid(args) -> int:
    """Sequential per-term sweep; the alphas of one term run in parallel."""
    exp = resolve_experiment(args)
    root = output_root(args)
    terms = [f"alpha_{t}" for t in args.terms]
    alphas = sorted(set(args.alphas))
    history = {}
    current = exp
    for term in terms:
        dicts = []
        for a in alphas:
            d = current.to_dict()
            d["distill"][term] = a
            dicts.append(d)
        reports = _fan_out(args.jobs, [(d, "student", str(root)) for d in dicts])
        history[term] = {a: RunReport.from_dict(r) for a, r in zip(alphas, reports)}
        chosen = best_alpha(history[term])
        current = ExperimentConfig.from_dict({**current.to_dict(),
                                              "distill": {**current.distill.to_dict(), term: chosen}})
        for a in alphas:
            r = history[term][a]
            print(f"{term}={a:g}: val kappa {r.best_val_kappa:.4f} test accuracy {r.test_accuracy:.4f}"
                  + ("  <- best" if a == chosen else ""))
    summary = {
        "best": current.to_dict(),
        "history": {t: {f"{a:g}": {"report": r.name, "val_kappa": r.best_val_kappa, "test_accuracy": r.test_accuracy}
                        for a, r in h.items()} for t, h in history.items()},
        **_meta(exp),
    }
    root.mkdir(parents=True, exist_ok=True)
    _write_json(root / f"grid_seed{exp.train.seed}_mag{exp.train.magnification}.json", summary)
    return 0


def _checkpoint(path) -> Model:
    if not Path(path).exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def cmd_eval(args) -> int:
    model = _checkpoint(args.checkpoint)
    if not Path(args.data).exists():
        raise FileNotFoundError(f"manifest not found: {args.data}")
    manifest = load_manifest(args.data)
    acc, kappa, per = evaluate_split(model, manifest, args.split, args.magnification)
    result = {"checkpoint": str(args.checkpoint), "split": args.split, "magnification": args.magnification,
              "accuracy": acc, "kappa": kappa, "per_class": per, **_meta(source=model.meta)}
    print(f"{'split':<8}{'mag':>6}{'accuracy':>10}{'kappa':>9}")
    print(f"{args.split:<8}{MAGNIFICATION_LABELS[args.magnification]:>6}{acc:>10.4f}{kappa:>9.4f}")
    for k, a in enumerate(per):
        print(f"  class {k}: " + ("n/a" if a is None else f"{a:.4f}"))
    out = Path(args.out) if args.out else Path(args.checkpoint).with_name(f"eval_{args.split}_mag{args.magnification}.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_json(out, result)
    return 0


def cmd_attention_export(args) -> int:
    model = _checkpoint(args.checkpoint).freeze()
    manifest = load_manifest(args.data)
    images, labels = manifest.arrays(args.split)
    indices = args.indices if args.indices else list(range(min(4, len(labels))))
    for i in indices:
        if not 0 <= i < len(labels):
            raise ConfigError(f"sample index {i} out of range for split {args.split} ({len(labels)} images)")
    x = degrade(images[indices], args.magnification)
    amap = grad_cam(forward_with_features(model, x), args.mode)
    classes = args.classes if args.classes else list(range(model.config.num_classes))
    out = Path(args.out or output_root(args) / "attention")
    out.mkdir(parents=True, exist_ok=True)
    meta = _meta(source=model.meta)
    extra = {"code_hash": meta["code_hash"], "checkpoint": str(args.checkpoint),
             "magnification": str(args.magnification)}
    written = []
    for row, i in enumerate(indices):
        for k in classes:
            path = out / f"{args.split}{i:04d}_label{labels[i]}_class{k}_mag{args.magnification}_{args.mode}.png"
            export_heatmap(amap, row, k, path, size=model.config.input_size, extra=extra)
            written.append(path.name)
    save_maps(amap, out / f"maps_mag{args.magnification}_{args.mode}.atd")
    _write_json(out / "export.json", {"files": written, "indices": indices, "classes": classes,
                                      "mode": args.mode, **meta})
    print(f"wrote {len(written)} heatmaps to {out}")
    return 0


# -- report ------------------------------------------------------------------------------


def method_label(report: RunReport) -> str:
    d = report.config.get("distill")
    if d is None:
        return "teacher" if report.name.startswith("teacher") else "baseline"
    cfg = DistillConfig.from_dict(d)
    parts = []
    if cfg.alpha_fm:
        parts.append("FM")
    if cfg.alpha_at:
        parts.append("AT+" if cfg.attention_mode is AttentionMode.RELU_MINMAX else f"AT({cfg.attention_mode.value})")
    if cfg.alpha_kd:
        parts.append("KD")
    if cfg.sr_weight:
        parts.append("SR")
    return "+".join(parts) or "baseline"


METHOD_ORDER = ["teacher", "baseline", "KD", "FM+KD", "FM+SR", "FM", "AT+", "FM+AT+"]


def collect_reports(paths) -> list[RunReport]:
    found = []
    for p in paths:
        p = Path(p)
        if not p.exists():
            raise FileNotFoundError(f"report path not found: {p}")
        files = [p] if p.is_file() else sorted(p.rglob("report.json"))
        found += [RunReport.load(f) for f in files]
    if not found:
        raise FileNotFoundError(f"no report.json files under {', '.join(map(str, paths))}")
    return found


def build_table(reports: list[RunReport]) -> list[dict]:
    """One row per (method, magnification) with mean and sample std over seeds."""
    groups: dict[tuple[str, int], list[RunReport]] = {}
    for r in reports:
        groups.setdefault((method_label(r), int(r.config["magnification"])), []).append(r)

    def order(key):
        m, mag = key
        return (METHOD_ORDER.index(m) if m in METHOD_ORDER else len(METHOD_ORDER), m, mag)

    rows = []
    for key in sorted(groups, key=order):
        agg = aggregate(sorted(groups[key], key=lambda r: r.seed))
        rows.append({"method": key[0], "magnification": key[1], "n": len(agg.seeds), "seeds": agg.seeds,
                     "accuracy_mean": agg.accuracy_mean, "accuracy_std": agg.accuracy_std,
                     "kappa_mean": agg.kappa_mean, "kappa_std": agg.kappa_std})
    return rows


def render_table(rows: list[dict]) -> str:
    mags = sorted({r["magnification"] for r in rows})
    methods = list(dict.fromkeys(r["method"] for r in rows))
    cell = {(r["method"], r["magnification"]): r for r in rows}
    head = f"{'method':<14}" + "".join(f"{MAGNIFICATION_LABELS.get(m, m):>32}" for m in mags)
    sub = f"{'':<14}" + "".join(f"{'accuracy':>16}{'kappa':>16}" for _ in mags)
    lines = [head, sub]
    for method in methods:
        line = f"{method:<14}"
        for m in mags:
            r = cell.get((method, m))
            if r is None:
                line += f"{'-':>16}{'-':>16}"
            else:
                line += f"{r['accuracy_mean']:>9.3f}±{r['accuracy_std']:<6.3f}{r['kappa_mean']:>9.3f}±{r['kappa_std']:<6.3f}"
        lines.append(line.rstrip())
    return "\n".join(lines) + "\n"


def render_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["method", "magnification", "n", "accuracy_mean", "accuracy_std", "kappa_mean", "kappa_std"])
    for r in rows:
        writer.writerow([r["method"], r["magnification"], r["n"], repr(r["accuracy_mean"]), repr(r["accuracy_std"]),
                         repr(r["kappa_mean"]), repr(r["kappa_std"])])
    return buf.getvalue()


def cmd_report(args) -> int:
    rows = build_table(collect_reports(args.runs))
    text = render_table(rows)
    print(text, end="")
    out = Path(args.out or output_root(args))
    out.mkdir(parents=True, exist_ok=True)
    (out / "table.txt").write_text(text)
    (out / "table.csv").write_text(render_csv(rows))
    _write_json(out / "table.json", {"rows": rows, **_meta()})
    return 0


# -- argument parsing ------------------------------------------------------------------


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _experiment_flags(p: argparse.ArgumentParser, distill: bool) -> None:
    p.add_argument("--config", help="experiment config JSON (flags override it)")
    p.add_argument("--data", help="manifest CSV")
    p.add_argument("--out", help=f"output root (default ${ENV_OUTPUT_ROOT} or ./runs)")
    p.add_argument("--seed", type=int)
    p.add_argument("--seeds", type=_ints, help="comma-separated seeds for a multi-seed run")
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--blocks", type=_ints, help="conv block widths, e.g. 16,32,64")
    p.add_argument("--input-size", type=int)
    p.add_argument("--augment", action=argparse.BooleanOptionalAction, default=None)
    if distill:
        p.add_argument("--teacher", help="teacher checkpoint; '{seed}' is replaced by the run seed")
        p.add_argument("--magnification", type=int, choices=sorted(MAGNIFICATION_LABELS))
        p.add_argument("--alpha-fm", type=float)
        p.add_argument("--alpha-at", type=float)
        p.add_argument("--alpha-kd", type=float)
        p.add_argument("--sr", action="store_true", default=None, help="enable the softmax-regression term")
        p.add_argument("--alpha-sr", type=float)
        p.add_argument("--mode", choices=[m.value for m in AttentionMode])
        p.add_argument("--alignment", choices=["degrade_restore", "feature_interp"])


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="irkd", description="Inter-resolution knowledge distillation experiments")
    parser.add_argument("--version", action="version", version=f"{CODE_VERSION} ({code_hash()[:12]})")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth-data", help="generate the synthetic texture dataset")
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--per-class", type=int, default=200)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--out", help="dataset directory")
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("teacher-train", help="train a teacher at full resolution")
    _experiment_flags(p, distill=False)
    p.set_defaults(func=cmd_teacher_train)

    p = sub.add_parser("distill", help="train a student on degraded inputs (plain when all weights are 0)")
    _experiment_flags(p, distill=True)
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("grid", help="sequential per-term alpha sweep")
    _experiment_flags(p, distill=True)
    p.add_argument("--alphas", type=_floats, default=[0, 0.01, 0.1, 1, 10, 100])
    p.add_argument("--terms", type=lambda s: s.split(","), default=["fm", "at"], help="e.g. fm,at")
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--magnification", type=int, default=1, choices=sorted(MAGNIFICATION_LABELS))
    p.add_argument("--out", help="JSON output file")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("attention-export", help="write Grad-CAM heatmaps as PNG")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--indices", type=_ints)
    p.add_argument("--classes", type=_ints)
    p.add_argument("--magnification", type=int, default=1, choices=sorted(MAGNIFICATION_LABELS))
    p.add_argument("--mode", default="relu_minmax", choices=[m.value for m in AttentionMode])
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_attention_export)

    p = sub.add_parser("report", help="aggregate report.json files into a comparison table")
    p.add_argument("runs", nargs="+", help="run directories or report files")
    p.add_argument("--out", help="directory for table.txt / table.csv")
    p.set_defaults(func=cmd_report)
    return parser


def _fail(kind: str, code: int, message: str) -> int:
    print(f"{kind} error: {message}", file=sys.stderr)
    print(json.dumps({"error": {"kind": kind, "message": message}}), file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _fail("usage", EXIT_USAGE, str(exc))
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        return _fail("missing-file", EXIT_MISSING, str(exc))
    except ConfigError as exc:
        return _fail("config", EXIT_CONFIG, str(exc))
    except (ManifestError, CheckpointError) as exc:
        return _fail("data", EXIT_DATA, str(exc))
    except Exception as exc:  # noqa: BLE001 - last-resort reporting for the CLI
        return _fail("runtime", EXIT_RUNTIME, f"{type(exc).__name__}: {exc}")


if __name__ == "__main__":
    sys.exit(main())
