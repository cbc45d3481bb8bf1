"""Cosine-similarity classification against text class prototypes."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .encoders import DualEncoderBundle, encode_image, encode_text, fill_template
from .exceptions import DataError, NumericError, ProtocolError
from .prompts import GPromptBank, compile_plan

DEFAULT_TEMPLATE = "a photo of a <category>"


@dataclass(frozen=True)
class RegistryEntry:
    class_id: int
    class_name: str
    session_id: int


@dataclass
class ClassRegistry:
    """Classes seen so far, in registration order.

    The prototype cache is keyed by the prompt bank identity and version so
    that any parameter update invalidates it.
    """

    entries: list[RegistryEntry] = field(default_factory=list)
    prototype_cache: torch.Tensor | None = None
    cache_key: tuple | None = None

    def register(self, names: Iterable[str], session_id: int) -> list[int]:
        if self.entries and session_id < self.entries[-1].session_id:
            raise ProtocolError(
                f"session {session_id} registered after session {self.entries[-1].session_id}"
            )
        known = set(self.names)
        ids = []
        for name in names:
            name = str(name)
            if not name.strip():
                raise DataError("class names must be non-empty")
            if name in known:
                raise ProtocolError(f"class {name!r} is already registered")
            entry = RegistryEntry(len(self.entries), name, session_id)
            self.entries.append(entry)
            known.add(name)
            ids.append(entry.class_id)
        self.invalidate()
        return ids

    def invalidate(self) -> None:
        self.prototype_cache = None
        self.cache_key = None

    @property
    def names(self) -> list[str]:
        return [e.class_name for e in self.entries]

    def index(self, name: str) -> int:
        for e in self.entries:
            if e.class_name == name:
                return e.class_id
        raise KeyError(name)

    def size_through(self, session_id: int) -> int:
        return sum(1 for e in self.entries if e.session_id <= session_id)

    def __len__(self) -> int:
        return len(self.entries)


@dataclass
class Prediction:
    probabilities: np.ndarray  # (Z,) or (B, Z)
    predicted_class: int | np.ndarray


def _cache_key(bank: GPromptBank | None, template: str | None, ablation: str):
    if bank is None:
        return ("zero_shot", template)
    return ("learned", id(bank), bank.version, ablation)


def prototype_features(
    bundle: DualEncoderBundle,
    names: Sequence[str],
    bank: GPromptBank | None = None,
    template: str | None = DEFAULT_TEMPLATE,
    ablation: str = "full",
) -> torch.Tensor:
    """L2-normalised text prototypes (Z, d_joint), differentiable w.r.t. the
    bank. Without a bank the template captions run through the plain
    frozen forward (zero-shot mode)."""
    for name in names:
        if not str(name).strip():
            raise DataError("class names must be non-empty")
    if bank is None:
        tokens = bundle.tokenize([fill_template(template, n) for n in names])
        feats = encode_text(bundle, tokens)
    else:
        tokens = bundle.tokenize(names)
        feats = encode_text(bundle, tokens, compile_plan(bank, ablation).language_hooks)
    return F.normalize(feats, dim=-1)


def encode_class_prototypes(
    bundle: DualEncoderBundle,
    bank: GPromptBank | None,
    registry: ClassRegistry,
    template: str | None = DEFAULT_TEMPLATE,
    ablation: str = "full",
) -> ClassRegistry:
    """Fill ``registry.prototype_cache`` unless it is still valid."""
    if not len(registry):
        raise ProtocolError("no classes registered")
    key = _cache_key(bank, template, ablation)
    if registry.prototype_cache is None or registry.cache_key != key:
        with torch.no_grad():
            registry.prototype_cache = prototype_features(bundle, registry.names, bank, template, ablation)
        registry.cache_key = key
    return registry


def cosine_logits(image_embedding: torch.Tensor, prototypes: torch.Tensor, logit_scale=1.0) -> torch.Tensor:
    norms = image_embedding.norm(dim=-1, keepdim=True)
    if bool((norms == 0).any()):
        raise NumericError("zero-norm image embedding")
    return logit_scale * (image_embedding / norms) @ F.normalize(prototypes, dim=-1).T


def classify(image_embedding, registry: ClassRegistry, logit_scale: float = 1.0) -> Prediction:
    """Softmax over scaled cosine similarities to every registered class."""
    if registry.prototype_cache is None:
        raise ProtocolError("prototype cache is empty; call encode_class_prototypes first")
    protos = registry.prototype_cache
    emb = torch.as_tensor(image_embedding, dtype=protos.dtype)
    with torch.no_grad():
        probs = cosine_logits(emb, protos, float(logit_scale)).softmax(dim=-1).numpy()
    return Prediction(probs, probs.argmax(axis=-1) if probs.ndim == 2 else int(probs.argmax()))


def zero_shot_classify(
    bundle: DualEncoderBundle,
    images,
    registry: ClassRegistry,
    template: str = DEFAULT_TEMPLATE,
) -> Prediction:
    fill_template(template, "x")
    encode_class_prototypes(bundle, None, registry, template)
    with torch.no_grad():
        emb = encode_image(bundle, torch.as_tensor(images))
    return classify(emb, registry, float(bundle.logit_scale))
