"""Per-session prompt optimisation with class-count gradient regularisation."""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .classifier import ClassRegistry, cosine_logits, prototype_features
from .encoders import DualEncoderBundle, encode_image
from .exceptions import ConfigurationError, InvariantError, ProtocolError
from .prompts import GPromptBank, compile_plan

TRAIN_ABLATIONS = ("full", "no_accumulation", "no_vision_prompts", "no_regularization")


@dataclass
class OptimizerConfig:
    learning_rate: float = 0.00325
    weight_decay: float = 1e-5
    momentum: float = 0.9
    warmup_fraction: float = 0.1
    epochs: int = 3
    batch_size: int = 32
    incremental_epochs: int = 5
    incremental_batch_size: int = 4
    alpha_floor: float = 0.0

    def validate(self) -> "OptimizerConfig":
        if not self.learning_rate > 0:
            raise ConfigurationError("learning_rate must be positive")
        if self.epochs < 1 or self.incremental_epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if self.batch_size < 1 or self.incremental_batch_size < 1:
            raise ConfigurationError("batch sizes must be >= 1")
        if not 0.0 <= self.warmup_fraction <= 1.0:
            raise ConfigurationError("warmup_fraction must lie in [0, 1]")
        if self.weight_decay < 0 or not 0 <= self.momentum < 1:
            raise ConfigurationError("weight_decay must be >= 0 and momentum in [0, 1)")
        if not 0.0 <= self.alpha_floor <= 1.0:
            raise ConfigurationError("alpha_floor must lie in [0, 1]")
        return self

    def for_session(self, session: int) -> tuple[int, int]:
        """(epochs, batch_size) for a session index."""
        if session == 0:
            return self.epochs, self.batch_size
        return self.incremental_epochs, self.incremental_batch_size


@dataclass
class RegularizerState:
    class_counts: list[int] = field(default_factory=list)
    enabled: bool = True
    alpha_floor: float = 0.0


def alpha(t: int, state: RegularizerState) -> float:
    """|C_t| / sum_{tau <= t} |C_tau|, floored at ``state.alpha_floor``."""
    if t < 1:
        raise ProtocolError("the scaling factor is only defined for incremental sessions t >= 1")
    if len(state.class_counts) <= t:
        raise ProtocolError(f"class counts known for {len(state.class_counts)} sessions, need {t + 1}")
    counts = state.class_counts[: t + 1]
    if any(c <= 0 for c in counts):
        raise ProtocolError("class counts must be positive")
    return max(counts[t] / sum(counts), state.alpha_floor)


def session_alpha(t: int, state: RegularizerState) -> float:
    """Scaling actually applied by the trainer: 1 for the base session or
    when regularisation is switched off."""
    if t == 0 or not state.enabled:
        return 1.0
    return alpha(t, state)


def scale_prompt_gradients(bank: GPromptBank, alpha_t: float) -> None:
    """Multiply the gradients of prompts and projection by ``alpha_t`` in place."""
    if alpha_t == 1.0:
        return
    for p in (bank.prompts, bank.projection):
        if p.grad is not None:
            p.grad.mul_(alpha_t)


def warmup_cosine(step: int, total: int, warmup_fraction: float) -> float:
    """Learning-rate multiplier: linear warmup to 1, then cosine decay to 0."""
    warmup = math.ceil(warmup_fraction * total)
    if step < warmup:
        return (step + 1) / warmup
    decay = max(total - warmup, 1)
    return 0.5 * (1.0 + math.cos(math.pi * (step - warmup) / decay))


def _split_ablation(ablation: str) -> tuple[str, bool]:
    if ablation not in TRAIN_ABLATIONS:
        raise ConfigurationError(f"unknown training ablation {ablation!r}")
    if ablation == "no_regularization":
        return "full", False
    return ablation, True


def prompt_loss(
    bundle: DualEncoderBundle,
    bank: GPromptBank,
    names: Sequence[str],
    images: torch.Tensor,
    labels: torch.Tensor,
    ablation: str = "full",
) -> torch.Tensor:
    """Cross-entropy of the cosine softmax over all ``names``."""
    plan_ablation, _ = _split_ablation(ablation)
    plan = compile_plan(bank, plan_ablation)
    protos = prototype_features(bundle, names, bank, ablation=plan_ablation)
    feats = encode_image(bundle, images, plan.vision_hooks)
    logits = cosine_logits(feats, protos, bundle.logit_scale)
    return F.cross_entropy(logits, labels)


def train_session(
    bundle: DualEncoderBundle,
    bank: GPromptBank,
    registry: ClassRegistry,
    images,
    labels,
    cfg: OptimizerConfig,
    reg: RegularizerState,
    session: int,
    ablation: str = "full",
    seed: int = 0,
    *,
    max_steps: int | None = None,
    log: Callable[[dict], None] | None = None,
) -> list[float]:
    """Optimise ``bank`` on one session and return the per-epoch mean loss.

    ``labels`` index into ``registry`` (all registered classes are scored).
    The optimizer state is created fresh for every session. ``log`` receives
    one record per step: session, epoch, step, loss, lr, alpha.
    """
    if not bundle.frozen:
        raise ProtocolError("bundle must be frozen before prompt tuning")
    cfg.validate()
    images = torch.as_tensor(images, dtype=bundle.dtype)
    labels = torch.as_tensor(labels, dtype=torch.long)
    if len(images) == 0:
        raise ProtocolError(f"session {session} has no training data")
    if len(images) != len(labels):
        raise ProtocolError("images and labels differ in length")
    if int(labels.max()) >= len(registry) or int(labels.min()) < 0:
        raise ProtocolError("labels refer to unregistered classes")
    _, regularize = _split_ablation(ablation)
    reg = RegularizerState(reg.class_counts, reg.enabled and regularize, reg.alpha_floor)
    alpha_t = session_alpha(session, reg)

    epochs, batch_size = cfg.for_session(session)
    steps_per_epoch = math.ceil(len(images) / batch_size)
    total = epochs * steps_per_epoch
    if max_steps is not None:
        total = min(total, max_steps)
    if total == 0:
        return []

    before = bundle.checksum()
    names = registry.names
    optimizer = torch.optim.SGD(
        bank.parameters(), lr=cfg.learning_rate, momentum=cfg.momentum, weight_decay=cfg.weight_decay
    )
    scheduler = torch.optim.lr_scheduler.LambdaLR(
        optimizer, lambda s: warmup_cosine(s, total, cfg.warmup_fraction)
    )
    rng = np.random.default_rng([seed, session])
    curve, step = [], 0
    for epoch in range(epochs):
        order = rng.permutation(len(images))
        losses = []
        for start in range(0, len(order), batch_size):
            if step >= total:
                break
            idx = torch.as_tensor(order[start : start + batch_size])
            lr = optimizer.param_groups[0]["lr"]
            optimizer.zero_grad()
            loss = prompt_loss(bundle, bank, names, images[idx], labels[idx], ablation)
            loss.backward()
            scale_prompt_gradients(bank, alpha_t)
            optimizer.step()
            scheduler.step()
            bank.version += 1
            losses.append(loss.item())
            if log is not None:
                log(dict(session=session, epoch=epoch, step=step, loss=losses[-1], lr=lr, alpha=alpha_t))
            step += 1
        if losses:
            curve.append(float(np.mean(losses)))
    registry.invalidate()
    if bundle.checksum() != before:
        raise InvariantError("frozen backbone weights changed during prompt tuning")
    return curve


def write_log_jsonl(records: Sequence[dict], path) -> None:
    with open(path, "w") as fh:
        for record in records:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def gradient_check(
    loss_fn: Callable[[], torch.Tensor],
    params: Sequence[torch.Tensor],
    epsilon: float = 1e-4,
    sample_size: int = 50,
    seed: int = 0,
    floor: float = 1e-8,
) -> float:
    """Max relative error between autograd and central differences over
    ``sample_size`` random coordinates of ``params``.

    The relative error of a coordinate is |a - n| / max(|a|, |n|, floor).
    """
    for p in params:
        p.grad = None
    loss_fn().backward()
    analytic = [p.grad.detach().clone() for p in params]
    sizes = np.array([p.numel() for p in params])
    rng = np.random.default_rng(seed)
    flat = rng.choice(sizes.sum(), size=min(sample_size, int(sizes.sum())), replace=False)
    bounds = np.cumsum(sizes)
    worst = 0.0
    with torch.no_grad():
        for k in flat:
            which = int(np.searchsorted(bounds, k, side="right"))
            offset = int(k - (bounds[which - 1] if which else 0))
            view = params[which].view(-1)
            original = view[offset].item()
            view[offset] = original + epsilon
            plus = float(loss_fn())
            view[offset] = original - epsilon
            minus = float(loss_fn())
            view[offset] = original
            numeric = (plus - minus) / (2 * epsilon)
            exact = float(analytic[which].view(-1)[offset])
            err = abs(exact - numeric) / max(abs(exact), abs(numeric), floor)
            worst = max(worst, err)
    return worst


def finite_difference_check(
    bundle: DualEncoderBundle,
    bank: GPromptBank,
    batch,
    epsilon: float = 1e-4,
    sample_size: int = 50,
    *,
    ablation: str = "full",
    seed: int = 0,
    floor: float = 1e-8,
) -> float:
    """Gradient check of the prompt loss in float64 on copies of the models.

    ``batch`` is ``(images, labels, class_names)``.
    """
    images, labels, names = batch
    bundle64 = copy.deepcopy(bundle).to(torch.float64)
    bank64 = copy.deepcopy(bank).to(torch.float64)
    images = torch.as_tensor(images, dtype=torch.float64)
    labels = torch.as_tensor(labels, dtype=torch.long)

    def loss_fn():
        return prompt_loss(bundle64, bank64, names, images, labels, ablation)

    return gradient_check(loss_fn, [bank64.prompts, bank64.projection], epsilon, sample_size, seed, floor)
