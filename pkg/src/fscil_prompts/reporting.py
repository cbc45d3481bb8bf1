"""Experiment execution, run records, comparison tables and plots."""

from __future__ import annotations

import csv
import io
import json
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import RunConfig, render_config
from .data import SyntheticDataset, synthesize_dataset, vocabulary_words
from .encoders import EncoderSpec, build_toy_bundle, pretrain_toy_alignment
from .exceptions import ConfigurationError
from .prompts import init_prompts
from .protocol import (
    SessionMetrics,
    build_session_stream,
    load_manifest,
    metrics_rows,
    run_fscil,
    summarize,
)

METRIC_COLUMNS = ["session", "t", "A_t", "pd_so_far"]
ABLATION_VARIANTS = ("full", "no_accumulation", "no_vision_prompts", "no_regularization")


def atomic_write(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _csv_text(rows: Sequence[dict], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    return buf.getvalue()


def mean_and_se(values: Sequence[float]) -> tuple[float, float]:
    """Mean and standard error (sample std / sqrt(n)); the SE of one value is 0."""
    arr = np.asarray(values, dtype=float)
    if arr.size < 2:
        return float(arr.mean()), 0.0
    return float(arr.mean()), float(arr.std(ddof=1) / math.sqrt(arr.size))


@dataclass
class RunRecord:
    config: dict
    per_seed: dict[str, dict] = field(default_factory=dict)
    aggregate: dict = field(default_factory=dict)
    wall_clock_seconds: float = 0.0

    @classmethod
    def from_metrics(cls, config: dict, per_seed: dict[int, SessionMetrics], seconds: float = 0.0):
        record = cls(config, {str(s): m.to_dict() for s, m in per_seed.items()}, {}, seconds)
        record.aggregate = aggregate(list(per_seed.values()))
        return record

    def mean_metrics(self) -> SessionMetrics:
        return summarize(self.aggregate["session_accuracies"]["mean"])

    def to_json(self) -> str:
        return json.dumps(
            {
                "config": self.config,
                "per_seed": self.per_seed,
                "aggregate": self.aggregate,
                "wall_clock_seconds": self.wall_clock_seconds,
            },
            indent=2,
            sort_keys=True,
        ) + "\n"

    @classmethod
    def load(cls, path) -> "RunRecord":
        data = json.loads(Path(path).read_text())
        record = cls(data.get("config", {}), data["per_seed"], data.get("aggregate", {}), data.get("wall_clock_seconds", 0.0))
        if not record.aggregate:
            record.aggregate = aggregate(
                [SessionMetrics(**m) for m in record.per_seed.values()]
            )
        return record


def aggregate(metrics: Sequence[SessionMetrics]) -> dict:
    n_sessions = len(metrics[0].session_accuracies)
    if any(len(m.session_accuracies) != n_sessions for m in metrics):
        raise ConfigurationError("seeds disagree on the number of sessions")
    per_session = [mean_and_se([m.session_accuracies[t] for m in metrics]) for t in range(n_sessions)]
    avg = mean_and_se([m.avg for m in metrics])
    pd = mean_and_se([m.pd for m in metrics])
    return {
        "session_accuracies": {"mean": [p[0] for p in per_session], "se": [p[1] for p in per_session]},
        "avg": {"mean": avg[0], "se": avg[1]},
        "pd": {"mean": pd[0], "se": pd[1]},
        "num_seeds": len(metrics),
    }


class Experiment:
    """Backbone and benchmark built once from a config, reused across seeds,
    grid cells and ablation variants."""

    def __init__(self, config: RunConfig):
        self.config = config
        self.dataset = self._dataset()
        self.bundle = self._backbone()
        self.manifest = load_manifest(config.stream.manifest) if config.stream.manifest else None

    def _dataset(self) -> SyntheticDataset:
        s = self.config.stream
        return synthesize_dataset(
            s.num_classes, s.per_class, s.image_size, seed=s.dataset_seed, noise=s.noise, contrast=s.contrast
        )

    def _backbone(self):
        cfg = self.config
        if cfg.adapter_path:
            from .adapters import load_clip_checkpoint

            bundle = load_clip_checkpoint(cfg.adapter_path)
            if bundle.image_shape[1] != cfg.stream.image_size:
                raise ConfigurationError(
                    f"stream image_size {cfg.stream.image_size} does not match the checkpoint "
                    f"input size {bundle.image_shape[1]}"
                )
            return bundle
        toy = cfg.toy
        bundle = build_toy_bundle(
            EncoderSpec(toy.num_layers, toy.d_nlp, toy.num_heads, toy.text_max_len, "language"),
            EncoderSpec(toy.num_layers, toy.d_cv, toy.num_heads, toy.vision_max_len, "vision"),
            seed=toy.seed,
            joint_dim=toy.joint_dim,
            image_size=cfg.stream.image_size,
            patch_size=toy.patch_size,
            vocab=vocabulary_words() + ["a", "photo", "of"],
            logit_scale=toy.logit_scale,
        )
        available = 48 - len(self.dataset.class_names)
        corpus = synthesize_dataset(
            available, toy.corpus_per_class, cfg.stream.image_size, seed=toy.corpus_seed,
            exclude=self.dataset.class_names, noise=toy.corpus_noise,
        )
        return pretrain_toy_alignment(
            bundle, corpus, toy.pretrain_steps, seed=toy.seed, batch_size=toy.pretrain_batch_size,
            learning_rate=toy.pretrain_learning_rate, benchmark_classes=self.dataset.class_names,
        )

    def run_seed(self, seed: int, L: int | None = None, D: int | None = None, ablation: str | None = None):
        cfg = self.config
        L = cfg.L if L is None else L
        D = cfg.D if D is None else D
        ablation = cfg.ablation if ablation is None else ablation
        s = cfg.stream
        stream = build_session_stream(
            self.dataset, s.base_classes, s.way, s.shot, s.sessions, seed,
            base_shot=s.base_shot, manifest=self.manifest,
        )
        bank = init_prompts(L, D, self.bundle.d_nlp, self.bundle.d_cv, seed, num_layers=self.bundle.num_layers)
        return run_fscil(self.bundle, bank, stream, self.dataset, cfg.optimizer, ablation, seed)

    def run(self, L=None, D=None, ablation=None, log_dir=None) -> RunRecord:
        start = time.perf_counter()
        per_seed = {}
        for seed in self.config.seeds:
            metrics, log = self.run_seed(seed, L, D, ablation)
            per_seed[seed] = metrics
            if log_dir is not None:
                lines = "".join(json.dumps(r, sort_keys=True) + "\n" for r in log)
                atomic_write(Path(log_dir) / f"train_log_seed{seed}.jsonl", lines)
        snapshot = self.config.to_dict()
        snapshot.update({k: v for k, v in dict(L=L, D=D, ablation=ablation).items() if v is not None})
        return RunRecord.from_metrics(snapshot, per_seed, time.perf_counter() - start)


def metrics_csv(metrics: SessionMetrics) -> str:
    return _csv_text(metrics_rows(metrics), METRIC_COLUMNS)


def write_run_outputs(record: RunRecord, config: RunConfig, out_dir) -> None:
    out = Path(out_dir)
    atomic_write(out / "config.json", render_config(config))
    atomic_write(out / "record.json", record.to_json())
    atomic_write(out / "metrics.csv", metrics_csv(record.mean_metrics()))
    for seed, m in record.per_seed.items():
        atomic_write(out / f"metrics_seed{seed}.csv", metrics_csv(SessionMetrics(**m)))


def grid_argmax(cells: dict[tuple[int, int], float]) -> tuple[int, int]:
    """Best (L, D) cell; ties go to the smaller D, then the smaller L."""
    return max(cells, key=lambda ld: (cells[ld], -ld[1], -ld[0]))


def grid_csv(cells: dict[tuple[int, int], tuple[float, float]], best) -> str:
    rows = [
        {"L": L, "D": D, "avg_mean": m, "avg_se": se, "best": int((L, D) == best)}
        for (L, D), (m, se) in sorted(cells.items())
    ]
    return _csv_text(rows, ["L", "D", "avg_mean", "avg_se", "best"])


def render_grid(cells: dict[tuple[int, int], tuple[float, float]], best) -> str:
    Ls = sorted({L for L, _ in cells})
    Ds = sorted({D for _, D in cells})
    width = 16
    lines = ["L \\ D".ljust(8) + "".join(str(D).rjust(width) for D in Ds)]
    for L in Ls:
        row = str(L).ljust(8)
        for D in Ds:
            if (L, D) in cells:
                m, se = cells[(L, D)]
                text = f"{m:.2f} ({se:.2f})" + ("*" if (L, D) == best else " ")
            else:
                text = ""
            row += text.rjust(width)
        lines.append(row)
    return "\n".join(lines) + "\n"


def ablation_csv(curves: dict[str, SessionMetrics]) -> str:
    rows = []
    for variant, metrics in curves.items():
        for row in metrics_rows(metrics):
            rows.append({"variant": variant, **row})
    return _csv_text(rows, ["variant"] + METRIC_COLUMNS)


def plot_curves(curves: dict[str, SessionMetrics], path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    labels = {
        "full": "Full Model",
        "no_accumulation": "No Accumulation",
        "no_vision_prompts": "No Vision Prompts",
        "no_regularization": "No Regularization",
    }
    fig, ax = plt.subplots(figsize=(6, 4))
    for variant, metrics in curves.items():
        accs = metrics.session_accuracies
        ax.plot(range(len(accs)), accs, marker="o", label=labels.get(variant, variant))
    ax.set_xlabel("session")
    ax.set_ylabel("top-1 accuracy (%)")
    ax.legend()
    fig.tight_layout()
    path = Path(path)
    tmp = path.with_name(f".{path.stem}.tmp{path.suffix}")
    fig.savefig(tmp, metadata={"Software": None})
    plt.close(fig)
    os.replace(tmp, path)


def report_rows(records: dict[str, RunRecord]) -> tuple[list[str], list[dict]]:
    n_max = max(len(r.aggregate["session_accuracies"]["mean"]) for r in records.values())
    columns = ["run"] + [str(t) for t in range(n_max)] + ["Avg", "PD"]
    rows = []
    for name, record in records.items():
        metrics = record.mean_metrics()
        row = {"run": name}
        for t in range(n_max):
            accs = metrics.session_accuracies
            row[str(t)] = f"{accs[t]:.2f}" if t < len(accs) else ""
        row["Avg"] = f"{metrics.avg:.2f}"
        row["PD"] = f"{metrics.pd:.2f}"
        rows.append(row)
    return columns, rows


def render_report(records: dict[str, RunRecord]) -> tuple[str, str]:
    """(text table, CSV) with sessions as columns plus Avg and PD."""
    columns, rows = report_rows(records)
    widths = {c: max(len(c), *(len(r[c]) for r in rows)) for c in columns}
    lines = ["  ".join(c.rjust(widths[c]) if c != "run" else c.ljust(widths[c]) for c in columns)]
    for r in rows:
        lines.append("  ".join(r[c].rjust(widths[c]) if c != "run" else r[c].ljust(widths[c]) for c in columns))
    return "\n".join(lines) + "\n", _csv_text(rows, columns)


def find_records(root) -> dict[str, RunRecord]:
    root = Path(root)
    found = {}
    for path in sorted(root.rglob("record.json")):
        name = str(path.parent.relative_to(root)) if path.parent != root else root.name
        found[name] = RunRecord.load(path)
    return found
