"""Learnable language prompts, the shared language-to-vision projection, and
their compilation into per-layer injection hooks."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .encoders import LayerForwardHook
from .exceptions import ConfigurationError, DataError

ABLATIONS = ("full", "no_accumulation", "no_vision_prompts")


class GPromptBank(nn.Module):
    """Prompt tokens of shape (depth, length, d_nlp) plus a d_nlp x d_cv
    projection shared by every layer.

    ``version`` is bumped by the trainer after each parameter update so that
    cached class prototypes can tell when they went stale.
    """

    def __init__(self, prompts: torch.Tensor, projection: torch.Tensor, mode: str = "deep", seed=None):
        super().__init__()
        if prompts.dim() != 3 or projection.dim() != 2:
            raise ConfigurationError("prompts must be (D, L, d_nlp), projection (d_nlp, d_cv)")
        if prompts.shape[2] != projection.shape[0]:
            raise ConfigurationError("prompt width does not match projection input width")
        if mode not in ("deep", "shallow"):
            raise ConfigurationError(f"unknown prompt mode {mode!r}")
        if mode == "shallow" and prompts.shape[0] != 1:
            raise ConfigurationError("shallow mode requires depth 1")
        self.prompts = nn.Parameter(prompts)
        self.projection = nn.Parameter(projection)
        self.mode = mode
        self.seed = seed
        self.version = 0

    @property
    def depth(self) -> int:
        return self.prompts.shape[0]

    @property
    def length(self) -> int:
        return self.prompts.shape[1]

    @property
    def d_nlp(self) -> int:
        return self.projection.shape[0]

    @property
    def d_cv(self) -> int:
        return self.projection.shape[1]

    def extra_repr(self) -> str:
        return f"L={self.length}, D={self.depth}, d_nlp={self.d_nlp}, d_cv={self.d_cv}, mode={self.mode}"


def init_prompts(
    L: int,
    D: int,
    d_nlp: int,
    d_cv: int,
    seed: int = 0,
    *,
    num_layers: int | None = None,
    mode: str | None = None,
    dtype: torch.dtype = torch.float32,
) -> GPromptBank:
    """Seeded bank: prompt entries have std 0.02, projection entries std 1/sqrt(d_nlp)."""
    if L < 1 or D < 1:
        raise ConfigurationError(f"need L >= 1 and D >= 1, got L={L}, D={D}")
    if num_layers is not None and D > num_layers:
        raise ConfigurationError(f"prompt depth D={D} exceeds encoder depth K={num_layers}")
    mode = mode or ("shallow" if D == 1 else "deep")
    gen = torch.Generator().manual_seed(seed)
    prompts = torch.randn(D, L, d_nlp, generator=gen, dtype=dtype) * 0.02
    projection = torch.randn(d_nlp, d_cv, generator=gen, dtype=dtype) / np.sqrt(d_nlp)
    return GPromptBank(prompts, projection, mode=mode, seed=seed)


def project_prompts(bank: GPromptBank, layer: int) -> torch.Tensor:
    """Vision prompts (L, d_cv) for 1-based ``layer``."""
    if not 1 <= layer <= bank.depth:
        raise ConfigurationError(f"layer {layer} outside [1, {bank.depth}]")
    return bank.prompts[layer - 1] @ bank.projection


@dataclass
class PromptPlan:
    language_hooks: list[LayerForwardHook] = field(default_factory=list)
    vision_hooks: list[LayerForwardHook] = field(default_factory=list)
    ablation: str = "full"


def compile_plan(bank: GPromptBank, ablation: str = "full") -> PromptPlan:
    """Language side: fresh prompts at every layer up to D, earlier prompt
    outputs discarded (replacement). Vision side: fresh projected prompts put
    in front of the carried ones (accumulation), or replacement under
    ``no_accumulation``, or nothing under ``no_vision_prompts``."""
    if ablation not in ABLATIONS:
        raise ConfigurationError(f"unknown prompt ablation {ablation!r}")
    D = bank.depth
    language = [
        LayerForwardHook(i, bank.prompts[i - 1], "prepend", discard_prompt_outputs=i < D)
        for i in range(1, D + 1)
    ]
    vision = []
    if ablation != "no_vision_prompts":
        replace = ablation == "no_accumulation"
        vision = [
            LayerForwardHook(i, project_prompts(bank, i), "append", discard_prompt_outputs=replace and i < D)
            for i in range(1, D + 1)
        ]
    return PromptPlan(language, vision, ablation)


_MAGIC = b"GPB1"


def save_bank(bank: GPromptBank, path) -> None:
    """Write ``GPB1`` + u32 header length + JSON header + float32 LE payloads
    (prompts, then projection, both row-major)."""
    header = {
        "L": bank.length,
        "D": bank.depth,
        "d_NLP": bank.d_nlp,
        "d_CV": bank.d_cv,
        "mode": bank.mode,
        "seed": bank.seed,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    prompts = bank.prompts.detach().cpu().numpy().astype("<f4", copy=False)
    projection = bank.projection.detach().cpu().numpy().astype("<f4", copy=False)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(np.ascontiguousarray(prompts).tobytes())
        fh.write(np.ascontiguousarray(projection).tobytes())
    tmp.replace(path)


def load_bank(path) -> GPromptBank:
    data = Path(path).read_bytes()
    if data[:4] != _MAGIC:
        raise DataError(f"{path}: not a prompt bank file")
    (n,) = struct.unpack("<I", data[4:8])
    header = json.loads(data[8 : 8 + n])
    D, L, d_nlp, d_cv = header["D"], header["L"], header["d_NLP"], header["d_CV"]
    payload = np.frombuffer(data[8 + n :], dtype="<f4")
    n_prompts = D * L * d_nlp
    if payload.size != n_prompts + d_nlp * d_cv:
        raise DataError(f"{path}: payload size does not match header {header}")
    prompts = torch.from_numpy(payload[:n_prompts].reshape(D, L, d_nlp).astype(np.float32))
    projection = torch.from_numpy(payload[n_prompts:].reshape(d_nlp, d_cv).astype(np.float32))
    return GPromptBank(prompts, projection, mode=header["mode"], seed=header.get("seed"))
