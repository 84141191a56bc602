"""Experiment driver: source training, target streams, runs, sweeps and reports."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .adaptation import AdaptationConfig, EntropyRanking, RunResult, TestTimeAdapter, run_stream
from .autodiff import no_grad
from .checkpoint import Checkpoint, ModelConfig
from .data import CorruptionSpec, corrupt, gen_dataset
from .model import RUNNING, MicroVMamba, train_source
from .ss2d import IDENTITY, Permutation, all_permutations

REPORT_VERSION = 1
ADAPT_COLUMNS = ("method", "corruption", "severity", "seed", "k", "iters", "lr", "batch_size", "mode",
                 "execution", "polarity", "n_samples", "accuracy")
SWEEP_COLUMNS = ("axis", "value", "seed", "method", "corruption", "severity", "accuracy")
SUMMARY_COLUMNS = ("axis", "value", "method", "n_seeds", "mean_accuracy", "std_accuracy")

AXES = {
    "k": (1, 2, 4, 6, 8),
    "iters": (1, 2, 3, 5),
    "batch": (8, 16, 32, 64),
    "polarity": ("lowest", "highest"),
    "eval-perm": tuple(p.name for p in all_permutations()),
    "aggregation": ("trust", "repetition", "ensemble"),
}


def percent(acc: float) -> str:
    return f"{100.0 * acc:.1f}"


def evaluate(model, images, labels, perm: Permutation = IDENTITY, *, norm_mode: str = RUNNING,
             batch_size: int = 256) -> float:
    """Top-1 accuracy. ``model`` is a :class:`MicroVMamba` or anything with ``predict``."""
    images, labels = np.asarray(images), np.asarray(labels)
    if len(labels) == 0:
        return float("nan")
    if not isinstance(model, MicroVMamba):
        return float(np.mean(np.asarray(model.predict(images)) == labels))
    correct = 0
    for s in range(0, len(labels), batch_size):
        with no_grad():
            logits = model.forward(images[s:s + batch_size], perm, norm_mode=norm_mode).data
        correct += int(np.sum(logits.argmax(axis=1) == labels[s:s + batch_size]))
    return correct / len(labels)


# -- experiment configuration ----------------------------------------------

@dataclass
class SourceConfig:
    seed: int = 0
    n_images: int = 1280
    epochs: int = 15
    lr: float = 3e-3
    batch_size: int = 32


@dataclass
class StreamConfig:
    seed: int = 0
    n_images: int = 1024
    corruption: str = "gaussian_noise"
    severity: int = 3

    @property
    def data_seed(self) -> int:
        # keeps target images disjoint in seed space from any source set
        return 10_000 + self.seed


@dataclass
class ExperimentConfig:
    source: SourceConfig = field(default_factory=SourceConfig)
    stream: StreamConfig = field(default_factory=StreamConfig)
    adaptation: AdaptationConfig = field(default_factory=AdaptationConfig)
    checkpoint_path: str | None = None
    checkpoint_sha256: str | None = None

    def to_dict(self) -> dict:
        return {
            "source": asdict(self.source),
            "stream": asdict(self.stream),
            "adaptation": self.adaptation.to_dict(),
            "checkpoint_path": self.checkpoint_path,
            "checkpoint_sha256": self.checkpoint_sha256,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return cls(SourceConfig(**d["source"]), StreamConfig(**d["stream"]),
                   AdaptationConfig.from_dict(d["adaptation"]), d.get("checkpoint_path"),
                   d.get("checkpoint_sha256"))


def sha256_of(ckpt: Checkpoint) -> str:
    return hashlib.sha256(ckpt.to_bytes()).hexdigest()


def build_source(cfg: SourceConfig, model_config: ModelConfig | None = None) -> Checkpoint:
    ds = gen_dataset(cfg.seed, cfg.n_images)
    (xtr, ytr), (xte, yte) = ds.train, ds.test
    return train_source(xtr, ytr, model_config, epochs=cfg.epochs, lr=cfg.lr, batch_size=cfg.batch_size,
                        seed=cfg.seed, eval_images=xte, eval_labels=yte)


def target_stream(cfg: StreamConfig) -> tuple[np.ndarray, np.ndarray]:
    ds = gen_dataset(cfg.data_seed, cfg.n_images, test_fraction=1.0)
    images = corrupt(ds.images, CorruptionSpec(cfg.corruption, cfg.severity, cfg.seed))
    return images, ds.labels


def resolve_checkpoint(cfg: ExperimentConfig) -> Checkpoint:
    """Load the configured checkpoint (verifying its digest) or train one from ``cfg.source``."""
    if cfg.checkpoint_path:
        ckpt = Checkpoint.load(cfg.checkpoint_path)
        digest = sha256_of(ckpt)
        if cfg.checkpoint_sha256 and digest != cfg.checkpoint_sha256:
            raise ValueError(f"checkpoint {cfg.checkpoint_path} digest {digest} != recorded {cfg.checkpoint_sha256}")
    else:
        ckpt = build_source(cfg.source)
    cfg.checkpoint_sha256 = sha256_of(ckpt)
    return ckpt


# -- run reports -------------------------------------------------------------

@dataclass
class RunReport:
    config: dict
    accuracy: dict[str, float]
    per_corruption: dict[str, dict[str, float]]
    entropies: list[dict]
    timings: dict[str, float]
    diversity: dict[str, dict[str, float]]
    batch_accuracy: list[float] = field(default_factory=list)
    version: int = REPORT_VERSION

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunReport":
        d = json.loads(text)
        if d.get("version") != REPORT_VERSION:
            raise ValueError(f"report version {d.get('version')} unsupported")
        return cls(**d)

    def experiment(self) -> ExperimentConfig:
        return ExperimentConfig.from_dict(self.config)


def run_experiment(cfg: ExperimentConfig, checkpoint: Checkpoint | None = None,
                   ranking: EntropyRanking | None = None) -> tuple[RunReport, RunResult]:
    t0 = time.perf_counter()
    ckpt = checkpoint if checkpoint is not None else resolve_checkpoint(cfg)
    if checkpoint is not None:
        cfg.checkpoint_sha256 = sha256_of(ckpt)
    t_source = time.perf_counter() - t0
    images, labels = target_stream(cfg.stream)
    res = run_stream(ckpt, images, cfg.adaptation, labels, ranking=ranking)
    method = cfg.adaptation.method
    key = f"{cfg.stream.corruption}-{cfg.stream.severity}"
    entropies = [] if res.ranking is None else res.ranking.to_dict()["ranking"]
    report = RunReport(
        config=cfg.to_dict(),
        accuracy={method: res.accuracy},
        per_corruption={method: {key: res.accuracy}},
        entropies=entropies,
        timings={"source": t_source, **res.timings},
        diversity=res.diversity,
        batch_accuracy=res.batch_accuracy,
    )
    return report, res


def reproduce(report: RunReport) -> RunReport:
    """Re-run a report from its embedded configuration."""
    return run_experiment(report.experiment())[0]


def adapt_csv_rows(report: RunReport) -> list[dict]:
    cfg = report.experiment()
    a, s = cfg.adaptation, cfg.stream
    return [{
        "method": m, "corruption": s.corruption, "severity": s.severity, "seed": s.seed, "k": a.k,
        "iters": a.iters, "lr": repr(a.lr), "batch_size": a.batch_size, "mode": a.mode, "execution": a.execution,
        "polarity": a.polarity, "n_samples": s.n_images, "accuracy": percent(acc),
    } for m, acc in report.accuracy.items()]


def write_csv(path, columns: Sequence[str], rows: Sequence[dict]) -> Path:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({c: r[c] for c in columns})
    path = Path(path)
    path.write_text(buf.getvalue())
    return path


def read_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


# -- sweeps ------------------------------------------------------------------

def sweep(axis: str, base: ExperimentConfig, seeds: Sequence[int], values: Sequence | None = None,
          checkpoints: dict[int, Checkpoint] | None = None) -> list[dict]:
    """Rows of ``SWEEP_COLUMNS``; accuracies are fractions, not percents."""
    if axis not in AXES:
        raise ValueError(f"unknown axis {axis!r}; expected one of {tuple(AXES)}")
    values = AXES[axis] if values is None else values
    rows = []
    for seed in seeds:
        cfg = ExperimentConfig.from_dict(base.to_dict())
        cfg.source.seed = seed
        cfg.stream.seed = seed
        ckpt = (checkpoints or {}).get(seed) or resolve_checkpoint(cfg)
        images, labels = target_stream(cfg.stream)
        ranking = None
        if axis != "aggregation" and cfg.adaptation.method in ("trust", "ensemble"):
            ranking = TestTimeAdapter.from_config(ckpt, cfg.adaptation).fit(images).ranking_
        if axis == "eval-perm":
            res = run_stream(ckpt, images, cfg.adaptation, labels, ranking=ranking, probe_perms=list(values))
            for v in values:
                rows.append(_row(axis, v, seed, cfg, res.probe_accuracy[v]))
            continue
        for v in values:
            a = cfg.adaptation.to_dict()
            if axis == "k":
                a["k"] = int(v)
            elif axis == "iters":
                a["iters"] = int(v)
            elif axis == "batch":
                a["batch_size"] = int(v)
            elif axis == "polarity":
                a["polarity"] = v
            elif axis == "aggregation":
                a["method"] = v
            acfg = AdaptationConfig.from_dict(a)
            # ranking reuse is only valid while the calibration batches are unchanged
            rk = ranking if axis != "batch" else None
            res = run_stream(ckpt, images, acfg, labels, ranking=rk)
            rows.append(_row(axis, v, seed, cfg, res.accuracy, method=acfg.method))
    return rows


def _row(axis, value, seed, cfg: ExperimentConfig, acc: float, method: str | None = None) -> dict:
    return {"axis": axis, "value": value, "seed": seed, "method": method or cfg.adaptation.method,
            "corruption": cfg.stream.corruption, "severity": cfg.stream.severity, "accuracy": acc}


def summarize(rows: Sequence[dict]) -> list[dict]:
    """Mean/std over seeds per (axis, value, method), preserving first-seen order."""
    groups: dict[tuple, list[float]] = {}
    for r in rows:
        key = (r.get("axis", "adapt"), str(r.get("value", "")), r["method"])
        acc = float(r["accuracy"])
        groups.setdefault(key, []).append(acc)
    out = []
    for (axis, value, method), accs in groups.items():
        out.append({"axis": axis, "value": value, "method": method, "n_seeds": len(accs),
                    "mean_accuracy": f"{float(np.mean(accs)):.4f}", "std_accuracy": f"{float(np.std(accs)):.4f}"})
    return out


def format_table(summary: Sequence[dict]) -> str:
    head = f"{'axis':<12}{'value':<14}{'method':<14}{'seeds':>6}{'mean':>10}{'std':>10}"
    lines = [head, "-" * len(head)]
    for r in summary:
        lines.append(f"{r['axis']:<12}{r['value']:<14}{r['method']:<14}{r['n_seeds']:>6}"
                     f"{r['mean_accuracy']:>10}{r['std_accuracy']:>10}")
    return "\n".join(lines)
