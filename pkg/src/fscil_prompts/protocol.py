"""Few-shot class-incremental session streams, evaluation and metrics."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import SyntheticDataset
from .exceptions import ConfigurationError, ProtocolError


@dataclass
class Session:
    index: int
    classes: list[int]  # dataset class ids
    train_idx: np.ndarray
    eval_idx: np.ndarray


@dataclass
class SessionStream:
    sessions: list[Session]
    way: int
    shot: int

    @property
    def num_sessions(self) -> int:
        return len(self.sessions)

    def seen_classes(self, t: int) -> list[int]:
        return [c for s in self.sessions[: t + 1] for c in s.classes]


@dataclass(frozen=True)
class Violation:
    requirement: str  # "disjoint_classes" | "base_larger" | "uniform_sessions" | "empty_session"
    sessions: tuple[int, ...]
    message: str


@dataclass
class SessionMetrics:
    session_accuracies: list[float] = field(default_factory=list)
    pd: float = 0.0
    avg: float = 0.0

    def to_dict(self) -> dict:
        return {"session_accuracies": list(self.session_accuracies), "pd": self.pd, "avg": self.avg}


def load_manifest(path) -> dict:
    """Split manifest: ``{"base": [names], "sessions": [[names], ...]}``."""
    manifest = json.loads(Path(path).read_text())
    if not isinstance(manifest.get("base"), list) or not isinstance(manifest.get("sessions"), list):
        raise ConfigurationError(f"{path}: manifest needs 'base' and 'sessions' lists")
    return manifest


def _class_order(dataset, base_classes, way, sessions, rng, manifest):
    if manifest is not None:
        lookup = {name: i for i, name in enumerate(dataset.class_names)}
        try:
            groups = [[lookup[n] for n in manifest["base"]]]
            groups += [[lookup[n] for n in s] for s in manifest["sessions"]]
        except KeyError as exc:
            raise ConfigurationError(f"manifest class {exc.args[0]!r} not in dataset") from None
        return groups
    needed = base_classes + way * sessions
    if needed > dataset.num_classes:
        raise ConfigurationError(
            f"stream needs {needed} classes, dataset has {dataset.num_classes}"
        )
    order = rng.permutation(dataset.num_classes)[:needed].tolist()
    groups = [sorted(order[:base_classes])]
    for s in range(sessions):
        start = base_classes + s * way
        groups.append(sorted(order[start : start + way]))
    return groups


def build_session_stream(
    dataset: SyntheticDataset,
    base_classes: int,
    way: int,
    shot: int,
    sessions: int,
    seed: int = 0,
    *,
    base_shot: int | None = None,
    manifest: dict | None = None,
) -> SessionStream:
    """Seeded assignment of classes to sessions and of examples to splits.

    With a fixed train/test split (``dataset.is_train``) training examples
    come from the train pool (all of them for the base session unless
    ``base_shot`` is given) and evaluation uses every test example. Without
    one, ``base_shot`` defaults to half of each base class and evaluation
    uses every example not drawn for training.
    """
    if min(base_classes, way, shot) < 1 or sessions < 0:
        raise ConfigurationError("base_classes, way and shot must be positive")
    rng = np.random.default_rng(seed)
    groups = _class_order(dataset, base_classes, way, sessions, rng, manifest)
    labels = np.asarray(dataset.labels)
    split = dataset.is_train
    out = []
    for t, classes in enumerate(groups):
        train, evals = [], []
        for c in classes:
            members = np.flatnonzero(labels == c)
            if split is not None:
                pool, test = members[split[members]], members[~split[members]]
            else:
                pool, test = members, None
            if t > 0:
                k = shot
            elif base_shot is not None:
                k = base_shot
            else:
                k = len(pool) if split is not None else len(pool) // 2
            if k > len(pool) or (test is None and k >= len(pool)) or k < 1:
                raise ConfigurationError(
                    f"class {dataset.class_names[c]!r} has {len(pool)} examples, cannot draw {k} "
                    "training examples and keep evaluation data"
                )
            picked = np.sort(rng.choice(pool, k, replace=False))
            train.append(picked)
            evals.append(test if test is not None else np.setdiff1d(pool, picked))
        out.append(Session(t, list(classes), np.concatenate(train), np.concatenate(evals)))
    return SessionStream(out, way, shot)


def validate_stream(stream: SessionStream) -> list[Violation]:
    """Every violated FSCIL requirement; an empty list means the stream is valid."""
    violations = []
    sessions = stream.sessions
    if not sessions:
        return [Violation("empty_session", (), "stream has no sessions")]
    for s in sessions:
        if not s.classes or len(s.train_idx) == 0:
            violations.append(Violation("empty_session", (s.index,), f"session {s.index} is empty"))
    for a in range(len(sessions)):
        for b in range(a + 1, len(sessions)):
            shared = set(sessions[a].classes) & set(sessions[b].classes)
            if shared:
                violations.append(
                    Violation(
                        "disjoint_classes",
                        (a, b),
                        f"sessions {a} and {b} share classes {sorted(shared)}",
                    )
                )
    base = sessions[0]
    for s in sessions[1:]:
        if len(base.classes) <= len(s.classes):
            violations.append(
                Violation(
                    "base_larger",
                    (0, s.index),
                    f"base session has {len(base.classes)} classes, session {s.index} has {len(s.classes)}",
                )
            )
        if len(base.train_idx) <= len(s.train_idx):
            violations.append(
                Violation(
                    "base_larger",
                    (0, s.index),
                    f"base session has {len(base.train_idx)} training examples, "
                    f"session {s.index} has {len(s.train_idx)}",
                )
            )
    incremental = sessions[1:]
    if incremental:
        ref = incremental[0]
        for s in incremental[1:]:
            if len(s.classes) != len(ref.classes) or len(s.train_idx) != len(ref.train_idx):
                violations.append(
                    Violation(
                        "uniform_sessions",
                        (ref.index, s.index),
                        f"session {s.index} has {len(s.classes)} classes / {len(s.train_idx)} examples, "
                        f"session {ref.index} has {len(ref.classes)} / {len(ref.train_idx)}",
                    )
                )
    return violations


def cumulative_accuracy(per_session_correct: Sequence) -> float:
    """Top-1 accuracy (percent) over the union of the given sessions' eval sets.

    Each entry is a boolean array of per-example correctness for one session
    (classified over every class seen so far).
    """
    if not per_session_correct:
        raise ProtocolError("no session results")
    total = correct = 0
    for t, result in enumerate(per_session_correct):
        if result is None:
            raise ProtocolError(f"missing evaluation results for session {t}")
        result = np.asarray(result, dtype=bool)
        total += result.size
        correct += int(result.sum())
    if total == 0:
        raise ProtocolError("evaluation sets are empty")
    return 100.0 * correct / total


def summarize(session_accuracies: Sequence[float]) -> SessionMetrics:
    accs = [float(a) for a in session_accuracies]
    if not accs:
        raise ProtocolError("no session accuracies to summarize")
    return SessionMetrics(accs, accs[0] - accs[-1], float(np.mean(accs)))


def metrics_rows(metrics: SessionMetrics) -> list[dict]:
    """Rows of the metrics CSV: session, t, A_t, pd_so_far."""
    accs = metrics.session_accuracies
    return [
        {"session": "base" if t == 0 else f"session_{t}", "t": t, "A_t": a, "pd_so_far": accs[0] - a}
        for t, a in enumerate(accs)
    ]


def run_fscil(
    bundle,
    bank,
    stream: SessionStream,
    dataset: SyntheticDataset,
    cfg=None,
    ablation: str = "full",
    seed: int = 0,
    *,
    template: str | None = None,
    eval_batch_size: int = 256,
):
    """Run every session in order and return ``(SessionMetrics, log records)``.

    ``ablation="zero_shot"`` skips training and classifies with template
    prototypes.
    """
    from .estimator import PromptTunedClassifier
    from .trainer import OptimizerConfig

    if dataset.images is None:
        raise ProtocolError("dataset has no images to train or evaluate on")
    problems = validate_stream(stream)
    if problems:
        raise ProtocolError("invalid session stream: " + "; ".join(v.message for v in problems))
    cfg = cfg or OptimizerConfig()
    params = dict(vars(cfg))
    if template is not None:
        params["template"] = template
    model = PromptTunedClassifier(
        bundle=bundle,
        init_bank=bank,
        prompt_length=bank.length if bank is not None else 2,
        prompt_depth=bank.depth if bank is not None else None,
        ablation=ablation,
        random_state=seed,
        **params,
    )
    names = np.asarray(dataset.class_names, dtype=object)
    accuracies = []
    for t, session in enumerate(stream.sessions):
        X = dataset.images[session.train_idx]
        y = names[dataset.labels[session.train_idx]]
        if t == 0:
            model.fit(X, y)
        else:
            model.partial_fit(X, y)
        correct = []
        for past in stream.sessions[: t + 1]:
            idx = past.eval_idx
            chunks = [idx[i : i + eval_batch_size] for i in range(0, len(idx), eval_batch_size)]
            pred = [model.predict(dataset.images[c]) for c in chunks]
            correct.append(np.concatenate(pred) == names[dataset.labels[idx]])
        accuracies.append(cumulative_accuracy(correct))
    return summarize(accuracies), list(model.training_log_)
