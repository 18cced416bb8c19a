"""Experiment orchestration: seeded pipeline stages, reports and analysis exports.

Every stage reads and writes files under one output directory and records
what it wrote in ``manifest.json``. Wall-clock numbers (latency, peak
memory, epoch times) go to ``timing.json`` only, so all other outputs are
reproducible bit for bit from the config and seed.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import resource
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .config import ConfigError, ExperimentConfig
from .distill import (DistillTrace, Evaluation, NumericFailure, evaluate, teacher_logits, train_fixed,
                      train_supervised)
from .featurizer import (SPLITS, DatasetSplit, build_dataset_from_frames, dataset_manifest, ingest_iq,
                         load_dataset, save_dataset)
from .models import (Model, Student, Teacher, check_student_smaller, config_hash, load_checkpoint,
                     save_checkpoint)
from .ppoctrl import DynamicResult, dynamic_distill
from .sigmodel import IqFrame, read_archive, sample_fleet, save_fleet, synthesize_fleet_frames, write_archive

log = logging.getLogger(__name__)

STUDENT_MODES = ("nkd", "fixed", "dynamic")
FRAMES_FILE = "frames.drfx"
FLEET_FILE = "fleet.json"
DATASET_FILE = "dataset.npz"
TEACHER_FILE = "teacher.ckpt"
TIMING_FILE = "timing.json"
MANIFEST_FILE = "manifest.json"


class MissingDependency(RuntimeError):
    """A stage needs an artifact that an earlier stage has not produced."""


# ---------------------------------------------------------------- seeding

def stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for one named purpose under a root seed."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]))


# ---------------------------------------------------------------- analysis

@dataclass
class PcaResult:
    coords: np.ndarray           # (B, dims)
    components: np.ndarray       # (dims, D), unit rows
    explained_variance: np.ndarray
    explained_ratio: np.ndarray
    mean: np.ndarray


def pca_project(features: np.ndarray, dims: int = 2) -> PcaResult:
    """Project centred rows onto the top ``dims`` covariance eigenvectors.

    Each component's largest-magnitude entry is made positive so the
    projection is deterministic.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"features must be 2-D, got shape {x.shape}")
    b, d = x.shape
    if b <= dims:
        raise ValueError(f"need more than {dims} rows, got {b}")
    if dims > d:
        raise ValueError(f"cannot keep {dims} components of {d}-dimensional features")
    mean = x.mean(axis=0)
    xc = x - mean
    if not xc.any():
        raise ValueError("features have zero variance")
    cov = xc.T @ xc / (b - 1)
    evals, evecs = np.linalg.eigh(cov)
    evals, evecs = evals[::-1].clip(min=0.0), evecs[:, ::-1]
    comps = evecs[:, :dims].T.copy()
    pivot = np.abs(comps).argmax(axis=1)
    comps *= np.sign(comps[np.arange(dims), pivot])[:, None]
    return PcaResult(xc @ comps.T, comps, evals[:dims], evals[:dims] / evals.sum(), mean)


def silhouette(points: np.ndarray, labels: np.ndarray) -> float:
    """Mean silhouette coefficient with Euclidean distance.

    Points in singleton clusters score 0.
    """
    x = np.asarray(points, dtype=np.float64)
    labels = np.asarray(labels)
    uniq, inv = np.unique(labels, return_inverse=True)
    n = x.shape[0]
    if not 2 <= uniq.size <= n - 1:
        raise ValueError(f"need between 2 and {n - 1} clusters, got {uniq.size}")
    sq = (x * x).sum(axis=1)
    dist = np.sqrt(np.maximum(sq[:, None] + sq[None, :] - 2.0 * x @ x.T, 0.0))
    np.fill_diagonal(dist, 0.0)
    onehot = np.zeros((n, uniq.size))
    onehot[np.arange(n), inv] = 1.0
    sums = dist @ onehot
    counts = onehot.sum(axis=0)
    own = counts[inv]
    a = np.divide(sums[np.arange(n), inv], own - 1, out=np.zeros(n), where=own > 1)
    other = sums / counts
    other[np.arange(n), inv] = np.inf
    b = other.min(axis=1)
    denom = np.maximum(a, b)
    s = np.divide(b - a, denom, out=np.zeros(n), where=denom > 0)
    s[own == 1] = 0.0
    return float(s.mean())


def forward_latency_ms(model: Model, sample: np.ndarray, runs: int = 1000, warmup: int = 10) -> float:
    """Median single-sample eval forward time in milliseconds."""
    x = np.asarray(sample)[None]
    for _ in range(warmup):
        model.predict_logits(x)
    times = np.empty(runs)
    for i in range(runs):
        t0 = time.perf_counter()
        model.predict_logits(x)
        times[i] = time.perf_counter() - t0
    return float(np.median(times) * 1e3)


def peak_rss_mb() -> float:
    """Peak resident memory of this process (Linux reports KiB)."""
    return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024.0


# ---------------------------------------------------------------- workspace

def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class Workspace:
    """Output directory with a manifest of every file each command wrote."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def path(self, *parts: str) -> Path:
        p = self.root.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def require(self, rel: str, hint: str) -> Path:
        p = self.root / rel
        if not p.exists():
            raise MissingDependency(f"{p} not found; run `{hint}` first")
        return p

    def _load(self, name: str) -> dict:
        p = self.root / name
        return json.loads(p.read_text()) if p.exists() else {}

    def record(self, key: str, cfg: ExperimentConfig, outputs: Sequence[Path], args: dict | None = None) -> None:
        manifest = self._load(MANIFEST_FILE)
        manifest.setdefault("version", __version__)
        entry = {"args": args or {}, "config_hash": cfg.digest(), "seed": cfg.seed,
                 "outputs": {p.relative_to(self.root).as_posix(): _sha256(p) for p in sorted(set(outputs))}}
        manifest.setdefault("commands", {})[key] = entry
        manifest["unhashed"] = [TIMING_FILE]
        (self.root / MANIFEST_FILE).write_text(json.dumps(manifest, indent=2, sort_keys=True))
        (self.root / "config.json").write_text(cfg.to_json())

    def timing(self, key: str, values: dict) -> None:
        timing = self._load(TIMING_FILE)
        timing[key] = values
        timing["peak_rss_mb"] = peak_rss_mb()
        (self.root / TIMING_FILE).write_text(json.dumps(timing, indent=2, sort_keys=True))


def _write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True))
    return path


# ---------------------------------------------------------------- data stages

def synth(cfg: ExperimentConfig, ws: Workspace) -> list[Path]:
    """Sample a fleet and write it with its frame archive."""
    if cfg.fleet is None:
        raise ConfigError("config.fleet", "synth needs a fleet spec")
    try:
        fleet = sample_fleet(stream(cfg.seed, "fleet"), cfg.fleet.num_devices, cfg.fleet.ranges)
    except ValueError as exc:
        raise ConfigError("config.fleet.ranges", str(exc)) from None
    frames = synthesize_fleet_frames(fleet, cfg.channel, cfg.fleet.per_device, stream(cfg.seed, "frames"),
                                     cfg.waveform)
    save_fleet(ws.path(FLEET_FILE), fleet)
    write_archive(ws.path(FRAMES_FILE), frames)
    outputs = [ws.path(FLEET_FILE), ws.path(FRAMES_FILE)]
    ws.record("synth", cfg, outputs)
    return outputs


def ingest(cfg: ExperimentConfig, ws: Workspace) -> list[Path]:
    """Cut raw captures into frames and store them in the archive format."""
    spec = cfg.ingest
    if spec is None:
        raise ConfigError("config.ingest", "ingest needs a capture path and layout")
    if not Path(spec.path).exists():
        raise MissingDependency(f"capture {spec.path} not found")
    try:
        frames = ingest_iq(spec.path, spec.layout())
    except ValueError as exc:
        raise ConfigError("config.ingest", str(exc)) from None
    if not frames:
        raise ConfigError("config.ingest.path", f"no frames found under {spec.path}")
    write_archive(ws.path(FRAMES_FILE), frames)
    outputs = [ws.path(FRAMES_FILE)]
    ws.record("ingest", cfg, outputs, {"path": spec.path})
    return outputs


def load_frames(ws: Workspace) -> list[IqFrame]:
    return read_archive(ws.require(FRAMES_FILE, "synth` or `ingest"))


def featurize(cfg: ExperimentConfig, ws: Workspace) -> list[Path]:
    """STFT features, stratified split and training augmentation."""
    frames = load_frames(ws)
    if len({f.label for f in frames}) < 2:
        raise ConfigError("config.fleet.num_devices", "classification needs frames from at least 2 labels")
    if frames[0].n < cfg.stft.window_len:
        raise ConfigError("config.stft.window_len",
                          f"window of {cfg.stft.window_len} is longer than the {frames[0].n}-sample frames")
    try:
        ds = build_dataset_from_frames(frames, cfg.stft, stream(cfg.seed, "dataset"), cfg.augment)
    except ValueError as exc:
        raise ConfigError("config.fleet.per_device", str(exc)) from None
    save_dataset(ws.path(DATASET_FILE), ds)
    rows = dataset_manifest(ds, frames, FRAMES_FILE)
    outputs = [ws.path(DATASET_FILE), _write_json(ws.path("dataset_manifest.json"), rows)]
    ws.record("featurize", cfg, outputs)
    return outputs


def load_data(ws: Workspace) -> DatasetSplit:
    return load_dataset(ws.require(DATASET_FILE, "featurize"))


# ---------------------------------------------------------------- models

def make_teacher(cfg: ExperimentConfig, ds: DatasetSplit) -> Teacher:
    tcfg = dataclasses.replace(cfg.teacher, input_dim=ds.input_shape[0], num_classes=ds.num_classes)
    return Teacher(tcfg, stream(cfg.seed, "teacher-init"))


def make_student(cfg: ExperimentConfig, ds: DatasetSplit) -> Student:
    """Same initial weights for every mode under one seed."""
    scfg = dataclasses.replace(cfg.student, num_classes=ds.num_classes)
    return Student(scfg, stream(cfg.seed, "student-init"))


def mode_label(mode: str, tau: float | None = None) -> str:
    if mode not in STUDENT_MODES:
        raise ConfigError("--mode", f"expected one of {STUDENT_MODES}, got {mode!r}")
    return f"fixed_tau{tau:g}" if mode == "fixed" else mode


@dataclass
class ModelResult:
    """Test-split numbers for one trained model and the files they come from."""
    label: str
    mode: str
    tau: float | None
    param_count: int
    config_hash: str
    test_accuracy: float
    final_val_accuracy: float | None
    silhouette: float
    confusion: list[list[float]]
    checkpoint: str
    trace: str
    confusion_csv: str
    features_csv: str
    controller_trace: str | None = None


@dataclass
class RunReport:
    config_hash: str
    seed: int
    dataset: dict
    models: dict[str, ModelResult] = field(default_factory=dict)
    timing: str = TIMING_FILE

    def ranking(self) -> list[str]:
        students = [r for r in self.models.values() if r.mode != "teacher"]
        return [r.label for r in sorted(students, key=lambda r: (-r.test_accuracy, r.label))]

    def to_dict(self) -> dict:
        return {"config_hash": self.config_hash, "seed": self.seed, "dataset": self.dataset,
                "models": {k: dataclasses.asdict(v) for k, v in self.models.items()},
                "ranking": self.ranking(), "timing": self.timing}


def _dataset_summary(ds: DatasetSplit) -> dict:
    return {"num_classes": ds.num_classes, "input_shape": list(ds.input_shape),
            **{f"{s}_size": len(ds.split(s)) for s in SPLITS}}


def write_confusion_csv(path: Path, ev: Evaluation) -> Path:
    """Raw counts, rows = true label; accuracy is trace / total."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["true"] + [f"pred_{j}" for j in range(ev.counts.shape[1])])
        for i, row in enumerate(ev.counts):
            w.writerow([i] + row.tolist())
    return path


def read_confusion_csv(path: str | Path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    return np.array([[int(v) for v in r[1:]] for r in rows], dtype=np.int64)


def write_features_csv(path: Path, labels: np.ndarray, coords: np.ndarray) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label", "pc1", "pc2"])
        for lab, (a, b) in zip(labels, coords):
            w.writerow([int(lab), repr(float(a)), repr(float(b))])
    return path


def analyze(model: Model, ds: DatasetSplit, ws: Workspace, name: str, split: str = "test") -> dict:
    """Evaluate, export PCA features and write both as CSV plus a JSON summary."""
    part = ds.split(split)
    if model.num_classes != ds.num_classes:
        raise ConfigError("--checkpoint", f"model has {model.num_classes} classes, dataset has {ds.num_classes}")
    ev = evaluate(model, part)
    pca = pca_project(model.embed(part.x))
    sil = silhouette(pca.coords, part.y)
    conf_csv = write_confusion_csv(ws.path("eval", f"{name}_{split}_confusion.csv"), ev)
    feat_csv = write_features_csv(ws.path("features", f"{name}_{split}.csv"), part.y, pca.coords)
    summary = {"model": name, "split": split, "accuracy": ev.accuracy, "correct": ev.correct, "total": ev.total,
               "confusion": ev.confusion.tolist(), "silhouette_pca": sil,
               "explained_variance": pca.explained_variance.tolist(),
               "explained_ratio": pca.explained_ratio.tolist(),
               "confusion_csv": conf_csv.relative_to(ws.root).as_posix(),
               "features_csv": feat_csv.relative_to(ws.root).as_posix()}
    summary_path = _write_json(ws.path("eval", f"{name}_{split}.json"), summary)
    summary["files"] = [conf_csv, feat_csv, summary_path]
    return summary


def _result(label: str, mode: str, tau, model: Model, ckpt: Path, trace_csv: Path, trace: DistillTrace,
            summary: dict, ws: Workspace, controller_csv: Path | None = None) -> ModelResult:
    rel = lambda p: p.relative_to(ws.root).as_posix()  # noqa: E731
    return ModelResult(label, mode, tau, model.param_count(), config_hash(model), summary["accuracy"],
                       trace.records[-1].val_acc if trace.records else None, summary["silhouette_pca"],
                       summary["confusion"], rel(ckpt), rel(trace_csv), summary["confusion_csv"],
                       summary["features_csv"], rel(controller_csv) if controller_csv else None)


def _save_trace(ws: Workspace, label: str, trace: DistillTrace) -> tuple[Path, Path]:
    csv_path, json_path = ws.path("traces", f"{label}.csv"), ws.path("traces", f"{label}.json")
    trace.to_csv(csv_path)
    trace.to_json(json_path)
    return csv_path, json_path


def train_teacher(cfg: ExperimentConfig, ws: Workspace, ds: DatasetSplit | None = None) -> ModelResult:
    ds = ds if ds is not None else load_data(ws)
    teacher = make_teacher(cfg, ds)
    try:
        trace = train_supervised(teacher, ds, cfg.teacher_train.as_distill(), stream(cfg.seed, "teacher-train"))
    except NumericFailure:
        save_checkpoint(ws.path("teacher.last_good.ckpt"), teacher)
        raise
    ckpt = ws.path(TEACHER_FILE)
    save_checkpoint(ckpt, teacher)
    trace_csv, trace_json = _save_trace(ws, "teacher", trace)
    summary = analyze(teacher, ds, ws, "teacher")
    res = _result("teacher", "teacher", None, teacher, ckpt, trace_csv, trace, summary, ws)
    report = _write_json(ws.path("reports", "teacher.json"), dataclasses.asdict(res))
    ws.record("train-teacher", cfg, [ckpt, ckpt.with_suffix(".json"), trace_csv, trace_json, report,
                                     *summary["files"]])
    ws.timing("teacher", {"train_wall_s": trace.wall_time,
                          "latency_ms": forward_latency_ms(teacher, ds.test.x[0], cfg.latency_runs)})
    return res


def load_teacher(ws: Workspace) -> Model:
    return load_checkpoint(ws.require(TEACHER_FILE, "train-teacher"))


def train_student(cfg: ExperimentConfig, ds: DatasetSplit, mode: str, tau: float | None = None,
                  t_logits: np.ndarray | None = None) -> tuple[Student, DistillTrace, DynamicResult | None]:
    """Train one student; every mode shares its init weights and batch order."""
    student = make_student(cfg, ds)
    rng = stream(cfg.seed, "student-train")
    dcfg = cfg.distill
    if mode == "nkd":
        return student, train_supervised(student, ds, dataclasses.replace(dcfg, kd_mode="none"), rng), None
    if t_logits is None:
        raise MissingDependency(f"mode {mode!r} needs teacher logits")
    if mode == "fixed":
        tau = dcfg.tau if tau is None else tau
        fcfg = dataclasses.replace(dcfg, kd_mode="fixed", tau=tau)
        try:
            fcfg.validate()
        except ValueError as exc:
            raise ConfigError("--tau", str(exc)) from None
        return student, train_fixed(student, t_logits, ds, fcfg, rng), None
    if mode == "dynamic":
        res = dynamic_distill(student, t_logits, ds, dataclasses.replace(dcfg, kd_mode="dynamic"), cfg.controller,
                              rng, stream(cfg.seed, "controller"))
        return student, res.trace, res
    raise ConfigError("--mode", f"expected one of {STUDENT_MODES}, got {mode!r}")


def distill(cfg: ExperimentConfig, ws: Workspace, mode: str, tau: float | None = None,
            ds: DatasetSplit | None = None, teacher: Model | None = None,
            t_logits: np.ndarray | None = None, record: bool = True) -> tuple[ModelResult, list[Path]]:
    """Train, checkpoint, evaluate and report one student."""
    ds = ds if ds is not None else load_data(ws)
    if mode == "fixed" and tau is None:
        tau = cfg.distill.tau
    label = mode_label(mode, tau)
    if mode != "nkd" and t_logits is None:
        teacher = teacher if teacher is not None else load_teacher(ws)
        t_logits = teacher_logits(teacher, ds.train.x)
    if teacher is not None:
        try:
            check_student_smaller(make_student(cfg, ds), teacher)
        except ValueError as exc:
            raise ConfigError("config.student", str(exc)) from None
    try:
        student, trace, dyn = train_student(cfg, ds, mode, tau, t_logits)
    except NumericFailure as exc:
        failed = make_student(cfg, ds)
        failed.load_state_dict(exc.state)
        save_checkpoint(ws.path("students", f"{label}.last_good.ckpt"), failed)
        raise
    ckpt = ws.path("students", f"{label}.ckpt")
    save_checkpoint(ckpt, student)
    trace_csv, trace_json = _save_trace(ws, label, trace)
    outputs = [ckpt, ckpt.with_suffix(".json"), trace_csv, trace_json]
    controller_csv = None
    if dyn is not None:
        controller_csv = ws.path("traces", f"{label}_controller.csv")
        dyn.controller.to_csv(controller_csv)
        outputs.append(controller_csv)
    summary = analyze(student, ds, ws, label)
    outputs += summary["files"]
    res = _result(label, mode, tau if mode == "fixed" else None, student, ckpt, trace_csv, trace, summary, ws,
                  controller_csv)
    outputs.append(_write_json(ws.path("reports", f"{label}.json"), dataclasses.asdict(res)))
    ws.timing(label, {"train_wall_s": trace.wall_time,
                      "latency_ms": forward_latency_ms(student, ds.test.x[0], cfg.latency_runs)})
    if record:
        ws.record(f"distill:{label}", cfg, outputs, {"mode": mode, "tau": tau})
    return res, outputs


def compare(cfg: ExperimentConfig, ws: Workspace) -> RunReport:
    """NKD, every fixed temperature and the dynamic controller, ranked by test accuracy."""
    ds = load_data(ws)
    teacher = load_teacher(ws)
    t_logits = teacher_logits(teacher, ds.train.x)
    report = RunReport(cfg.digest(), cfg.seed, _dataset_summary(ds))
    teacher_report = ws.root / "reports" / "teacher.json"
    if teacher_report.exists():
        report.models["teacher"] = ModelResult(**json.loads(teacher_report.read_text()))
    outputs: list[Path] = []
    runs = [("nkd", None)] + [("fixed", t) for t in cfg.fixed_taus] + [("dynamic", None)]
    for mode, tau in runs:
        res, files = distill(cfg, ws, mode, tau, ds=ds, teacher=teacher, t_logits=t_logits, record=False)
        report.models[res.label] = res
        outputs += files
    outputs.append(_write_json(ws.path("report.json"), report.to_dict()))
    outputs.append(write_ranking(ws.path("ranking.csv"), report))
    ws.record("compare", cfg, outputs)
    return report


def write_ranking(path: Path, report: RunReport) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["rank", "label", "mode", "tau", "test_accuracy", "final_val_accuracy", "silhouette_pca",
                    "param_count"])
        for k, label in enumerate(report.ranking(), 1):
            r = report.models[label]
            w.writerow([k, r.label, r.mode, "" if r.tau is None else r.tau, repr(r.test_accuracy),
                        repr(r.final_val_accuracy), repr(r.silhouette), r.param_count])
    return path


def eval_checkpoint(cfg: ExperimentConfig, ws: Workspace, checkpoint: str | Path, split: str = "test") -> dict:
    model = _load_model(checkpoint)
    ds = load_data(ws)
    summary = analyze(model, ds, ws, Path(checkpoint).stem, split)
    ws.record(f"eval:{Path(checkpoint).stem}:{split}", cfg, summary.pop("files"), {"split": split})
    return summary


def export_features(cfg: ExperimentConfig, ws: Workspace, checkpoint: str | Path, split: str = "test") -> Path:
    model = _load_model(checkpoint)
    part = load_data(ws).split(split)
    pca = pca_project(model.embed(part.x))
    name = Path(checkpoint).stem
    out = write_features_csv(ws.path("features", f"{name}_{split}.csv"), part.y, pca.coords)
    meta = _write_json(ws.path("features", f"{name}_{split}.json"),
                       {"rows": len(part), "explained_variance": pca.explained_variance.tolist(),
                        "explained_ratio": pca.explained_ratio.tolist(),
                        "silhouette_pca": silhouette(pca.coords, part.y)})
    ws.record(f"export-features:{name}:{split}", cfg, [out, meta], {"split": split})
    return out


def _load_model(checkpoint: str | Path) -> Model:
    if not Path(checkpoint).exists():
        raise MissingDependency(f"checkpoint {checkpoint} not found")
    try:
        return load_checkpoint(checkpoint)
    except ValueError as exc:
        raise ConfigError("--checkpoint", str(exc)) from None


def run_all(cfg: ExperimentConfig, out: str | Path) -> RunReport:
    """synth, featurize, train-teacher and compare in one call."""
    ws = Workspace(out)
    synth(cfg, ws)
    featurize(cfg, ws)
    train_teacher(cfg, ws)
    return compare(cfg, ws)

