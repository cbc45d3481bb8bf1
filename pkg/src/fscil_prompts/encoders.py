"""Frozen dual-encoder backbone with per-layer prompt injection.

Both towers are stacks of pre-norm transformer blocks. A forward pass keeps
two blocks of hidden states apart: the *real* tokens (text tokens or image
patches, which carry positional embeddings) and the *prompt* tokens injected
by :class:`LayerForwardHook` objects. At every layer the prompt block is
spliced into the sequence, the layer runs on the concatenation, and the
outputs are split again, so hooks can replace or accumulate prompt tokens
without touching the real-token positions.
"""

from __future__ import annotations

import hashlib
import zlib
from dataclasses import dataclass
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .exceptions import CapacityError, ConfigurationError, DataError, ProtocolError

MODALITIES = ("language", "vision")
INJECTION_MODES = ("prepend", "append")

PAD_ID, BOS_ID, EOS_ID = 0, 1, 2


@dataclass(frozen=True)
class EncoderSpec:
    num_layers: int
    embed_dim: int
    num_heads: int
    max_seq_len: int
    modality: str

    def validate(self) -> "EncoderSpec":
        for name in ("num_layers", "embed_dim", "num_heads", "max_seq_len"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigurationError(f"{name} must be a positive integer, got {value!r}")
        if self.embed_dim % self.num_heads:
            raise ConfigurationError(
                f"embed_dim={self.embed_dim} is not divisible by num_heads={self.num_heads}"
            )
        if self.modality not in MODALITIES:
            raise ConfigurationError(f"unknown modality {self.modality!r}")
        return self


@dataclass
class LayerForwardHook:
    """Prompt injection policy for one layer (1-based ``layer_index``).

    ``injected_tokens`` (shape ``(n, embed_dim)``) are placed in front of the
    prompt states carried over from the previous layer. With
    ``discard_prompt_outputs`` the prompt outputs of this layer are dropped
    instead of being carried to the next one.
    """

    layer_index: int
    injected_tokens: torch.Tensor | None = None
    injection_mode: str = "prepend"
    discard_prompt_outputs: bool = False

    def __post_init__(self):
        if self.injection_mode not in INJECTION_MODES:
            raise ConfigurationError(f"unknown injection mode {self.injection_mode!r}")
        if self.injected_tokens is not None and self.injected_tokens.dim() != 2:
            raise ConfigurationError("injected_tokens must be a (num_tokens, embed_dim) matrix")


class TokenBatch(NamedTuple):
    ids: torch.Tensor  # (B, S) int64, right-padded
    eos_index: torch.Tensor  # (B,) position of the end sentinel


class WordTokenizer:
    """Deterministic word-level tokenizer with hashed fallback buckets.

    Names are lowercased and split on whitespace; every word becomes one
    token. Known words get dedicated ids, unknown ones are hashed (crc32,
    so stable across processes) into ``num_buckets`` shared ids.
    """

    def __init__(self, words: Iterable[str] = (), num_buckets: int = 32):
        self.words = sorted({w.lower() for w in words})
        self.num_buckets = num_buckets
        self._ids = {w: 3 + i for i, w in enumerate(self.words)}

    @property
    def vocab_size(self) -> int:
        return 3 + len(self.words) + self.num_buckets

    def word_id(self, word: str) -> int:
        if word in self._ids:
            return self._ids[word]
        return 3 + len(self.words) + zlib.crc32(word.encode("utf-8")) % self.num_buckets

    def encode(self, text: str) -> list[int]:
        words = str(text).lower().split()
        if not words:
            raise DataError(f"cannot tokenize empty text {text!r}")
        return [BOS_ID] + [self.word_id(w) for w in words] + [EOS_ID]

    def __call__(self, texts: Sequence[str]) -> TokenBatch:
        encoded = [self.encode(t) for t in texts]
        width = max(len(e) for e in encoded)
        ids = torch.full((len(encoded), width), PAD_ID, dtype=torch.long)
        for row, seq in enumerate(encoded):
            ids[row, : len(seq)] = torch.tensor(seq)
        eos = torch.tensor([len(seq) - 1 for seq in encoded], dtype=torch.long)
        return TokenBatch(ids, eos)


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, causal: bool = False) -> torch.Tensor:
        B, S, D = x.shape
        q, k, v = self.qkv(x).view(B, S, 3, self.heads, D // self.heads).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-1, -2) * (D // self.heads) ** -0.5
        if causal:
            mask = torch.ones(S, S, dtype=torch.bool, device=x.device).triu(1)
            scores = scores.masked_fill(mask, float("-inf"))
        out = scores.softmax(dim=-1) @ v
        return self.out(out.transpose(1, 2).reshape(B, S, D))


class TransformerBlock(nn.Module):
    """Pre-norm block: x + attn(ln(x)), then x + mlp(ln(x))."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.ln_1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.ln_2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, mlp_ratio * dim), nn.GELU(), nn.Linear(mlp_ratio * dim, dim)
        )

    def forward(self, x: torch.Tensor, causal: bool = False) -> torch.Tensor:
        x = x + self.attn(self.ln_1(x), causal)
        return x + self.mlp(self.ln_2(x))


def _splice(real: torch.Tensor, prompts: torch.Tensor, mode: str) -> torch.Tensor:
    # prepend keeps the leading sentinel (BOS/CLS) at position 0
    if mode == "prepend":
        return torch.cat([real[:, :1], prompts, real[:, 1:]], dim=1)
    return torch.cat([real, prompts], dim=1)


def _unsplice(seq: torch.Tensor, n_prompts: int, mode: str):
    if mode == "prepend":
        real = torch.cat([seq[:, :1], seq[:, 1 + n_prompts :]], dim=1)
        return real, seq[:, 1 : 1 + n_prompts]
    n_real = seq.shape[1] - n_prompts
    return seq[:, :n_real], seq[:, n_real:]


def index_hooks(hooks, num_layers: int) -> dict[int, LayerForwardHook]:
    if not hooks:
        return {}
    items = hooks.values() if isinstance(hooks, Mapping) else hooks
    indexed = {}
    for hook in items:
        if not 1 <= hook.layer_index <= num_layers:
            raise ConfigurationError(
                f"hook layer_index {hook.layer_index} outside [1, {num_layers}]"
            )
        if hook.layer_index in indexed:
            raise ConfigurationError(f"duplicate hook for layer {hook.layer_index}")
        indexed[hook.layer_index] = hook
    return indexed


class TransformerEncoder(nn.Module):
    """A stack of layers with hook-driven prompt propagation.

    ``layers`` may be any modules called as ``layer(x, causal)``; this is what
    lets the pretrained-checkpoint adapter reuse the same forward logic.
    """

    def __init__(
        self,
        spec: EncoderSpec,
        layers: Sequence[nn.Module],
        pre_norm: nn.Module | None = None,
        final_norm: nn.Module | None = None,
        causal: bool = False,
    ):
        super().__init__()
        self.spec = spec.validate()
        if len(layers) != spec.num_layers:
            raise ConfigurationError(f"expected {spec.num_layers} layers, got {len(layers)}")
        self.layers = nn.ModuleList(layers)
        self.pre_norm = pre_norm if pre_norm is not None else nn.Identity()
        self.final_norm = final_norm if final_norm is not None else nn.Identity()
        self.causal = causal
        self.default_mode = "prepend" if spec.modality == "language" else "append"

    def forward(
        self,
        x: torch.Tensor,
        pool_index: torch.Tensor,
        hooks=None,
        record: list | None = None,
    ) -> torch.Tensor:
        """Run all layers over real-token embeddings ``x`` (B, S, d).

        Returns the final-normed hidden state at ``pool_index`` (positions in
        real-token coordinates). ``record``, when given, receives the number
        of prompt tokens entering each layer.
        """
        hooks = index_hooks(hooks, self.spec.num_layers)
        B, n_real, d = x.shape
        x = self.pre_norm(x)
        prompts = x.new_zeros(B, 0, d)
        mode = self.default_mode
        for index, layer in enumerate(self.layers, start=1):
            hook = hooks.get(index)
            if hook is not None:
                mode = hook.injection_mode
                if hook.injected_tokens is not None:
                    fresh = hook.injected_tokens
                    if fresh.shape[-1] != d:
                        raise ConfigurationError(
                            f"layer {index}: injected width {fresh.shape[-1]} != embed_dim {d}"
                        )
                    fresh = fresh.to(dtype=x.dtype).unsqueeze(0).expand(B, -1, -1)
                    prompts = torch.cat([fresh, prompts], dim=1)
            n_prompts = prompts.shape[1]
            if n_real + n_prompts > self.spec.max_seq_len:
                raise CapacityError(
                    f"layer {index}: {n_real} tokens + {n_prompts} prompts exceed "
                    f"max_seq_len={self.spec.max_seq_len}"
                )
            if record is not None:
                record.append(n_prompts)
            if n_prompts:
                out = layer(_splice(x, prompts, mode), self.causal)
                x, prompts = _unsplice(out, n_prompts, mode)
            else:
                x = layer(x, self.causal)
            if hook is not None and hook.discard_prompt_outputs:
                prompts = prompts[:, :0]
        x = self.final_norm(x)
        return x[torch.arange(B, device=x.device), pool_index]


class TextEmbedding(nn.Module):
    def __init__(self, vocab_size: int, dim: int, max_len: int):
        super().__init__()
        self.token = nn.Embedding(vocab_size, dim)
        self.position = nn.Parameter(torch.randn(max_len, dim) * 0.01)

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        return self.token(ids) + self.position[: ids.shape[1]]


class PatchEmbedding(nn.Module):
    """Cuts images into non-overlapping patches and prepends a [CLS] token."""

    def __init__(self, channels: int, image_size: int, patch_size: int, dim: int):
        super().__init__()
        if image_size % patch_size:
            raise ConfigurationError("image_size must be a multiple of patch_size")
        self.channels = channels
        self.image_size = image_size
        self.patch_size = patch_size
        self.num_patches = (image_size // patch_size) ** 2
        self.proj = nn.Linear(channels * patch_size**2, dim, bias=False)
        self.cls = nn.Parameter(torch.randn(dim) * 0.02)
        self.position = nn.Parameter(torch.randn(self.num_patches + 1, dim) * 0.01)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        p = self.patch_size
        patches = F.unfold(images, kernel_size=p, stride=p).transpose(1, 2)
        x = self.proj(patches)
        cls = self.cls.to(x.dtype).expand(x.shape[0], 1, -1)
        return torch.cat([cls, x], dim=1) + self.position


class DualEncoderBundle(nn.Module):
    """Language and vision towers plus their output projections.

    All weights are frozen by :meth:`freeze`; after that the bundle is only
    ever read. ``logit_scale`` is a frozen buffer applied to cosine logits.
    """

    def __init__(
        self,
        language: TransformerEncoder,
        vision: TransformerEncoder,
        text_embed: nn.Module,
        patch_embed: nn.Module,
        text_out_proj: nn.Module,
        vision_out_proj: nn.Module,
        tokenizer,
        logit_scale: float = 1.0,
        image_shape: tuple[int, int, int] | None = None,
    ):
        super().__init__()
        if language.spec.modality != "language" or vision.spec.modality != "vision":
            raise ConfigurationError("towers must be (language, vision) in that order")
        if language.spec.num_layers != vision.spec.num_layers:
            raise ConfigurationError("language and vision towers need the same depth K")
        if vision.spec.embed_dim <= language.spec.embed_dim:
            raise ConfigurationError(
                f"vision width {vision.spec.embed_dim} must exceed language width "
                f"{language.spec.embed_dim}"
            )
        self.language = language
        self.vision = vision
        self.text_embed = text_embed
        self.patch_embed = patch_embed
        self.text_out_proj = text_out_proj
        self.vision_out_proj = vision_out_proj
        self.tokenizer = tokenizer
        self.image_shape = image_shape
        self.register_buffer("logit_scale", torch.tensor(float(logit_scale)))
        self.frozen = False

    @property
    def num_layers(self) -> int:
        return self.language.spec.num_layers

    @property
    def d_nlp(self) -> int:
        return self.language.spec.embed_dim

    @property
    def d_cv(self) -> int:
        return self.vision.spec.embed_dim

    @property
    def d_joint(self) -> int:
        return self.text_out_proj.weight.shape[0]

    @property
    def dtype(self) -> torch.dtype:
        return self.text_out_proj.weight.dtype

    def freeze(self) -> "DualEncoderBundle":
        self.requires_grad_(False)
        self.eval()
        self.frozen = True
        return self

    def tokenize(self, texts: Sequence[str]) -> TokenBatch:
        return self.tokenizer(list(texts))

    def weight_checksums(self) -> dict[str, str]:
        """sha256 digest of every parameter and buffer, keyed by name."""
        out = {}
        for name, tensor in self.state_dict().items():
            data = tensor.detach().cpu().contiguous().numpy().tobytes()
            out[name] = hashlib.sha256(data).hexdigest()
        return out

    def checksum(self) -> str:
        digest = hashlib.sha256()
        for name, value in sorted(self.weight_checksums().items()):
            digest.update(f"{name}:{value};".encode())
        return digest.hexdigest()


def encode_text(bundle: DualEncoderBundle, tokens: TokenBatch, hooks=None, record=None):
    """Joint-space text features read at the [EOS] position."""
    emb = bundle.text_embed(tokens.ids)
    hidden = bundle.language(emb, tokens.eos_index, hooks, record)
    return bundle.text_out_proj(hidden)


def encode_image(bundle: DualEncoderBundle, images: torch.Tensor, hooks=None, record=None):
    """Joint-space image features read at the [CLS] position."""
    emb = bundle.patch_embed(images.to(bundle.dtype))
    pool = torch.zeros(emb.shape[0], dtype=torch.long, device=emb.device)
    hidden = bundle.vision(emb, pool, hooks, record)
    return bundle.vision_out_proj(hidden)


def build_toy_bundle(
    spec_lang: EncoderSpec,
    spec_vis: EncoderSpec,
    seed: int = 0,
    *,
    joint_dim: int | None = None,
    image_size: int = 16,
    patch_size: int = 4,
    channels: int = 3,
    vocab: Iterable[str] = (),
    num_buckets: int = 32,
    logit_scale: float = 1.0,
) -> DualEncoderBundle:
    """Randomly initialised (seeded) toy bundle; call ``freeze`` or
    :func:`pretrain_toy_alignment` before using it for prompt tuning."""
    spec_lang.validate()
    spec_vis.validate()
    if spec_lang.modality != "language" or spec_vis.modality != "vision":
        raise ConfigurationError("expected (language, vision) encoder specs")
    if spec_vis.embed_dim <= spec_lang.embed_dim:
        raise ConfigurationError(
            f"d_CV={spec_vis.embed_dim} must be larger than d_NLP={spec_lang.embed_dim}"
        )
    if spec_lang.num_layers != spec_vis.num_layers:
        raise ConfigurationError("both towers need the same number of layers")
    joint_dim = spec_lang.embed_dim if joint_dim is None else joint_dim
    if not 1 <= joint_dim <= spec_lang.embed_dim:
        raise ConfigurationError(
            f"joint dimension {joint_dim} must be in [1, d_NLP={spec_lang.embed_dim}]"
        )
    num_patches = (image_size // patch_size) ** 2
    if spec_vis.max_seq_len < num_patches + 1:
        raise ConfigurationError(
            f"vision max_seq_len={spec_vis.max_seq_len} cannot hold {num_patches} patches + [CLS]"
        )
    tokenizer = WordTokenizer(vocab, num_buckets)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        d_l, d_v = spec_lang.embed_dim, spec_vis.embed_dim
        language = TransformerEncoder(
            spec_lang,
            [TransformerBlock(d_l, spec_lang.num_heads) for _ in range(spec_lang.num_layers)],
            final_norm=nn.LayerNorm(d_l),
            causal=True,
        )
        vision = TransformerEncoder(
            spec_vis,
            [TransformerBlock(d_v, spec_vis.num_heads) for _ in range(spec_vis.num_layers)],
            pre_norm=nn.LayerNorm(d_v),
            final_norm=nn.LayerNorm(d_v),
        )
        bundle = DualEncoderBundle(
            language=language,
            vision=vision,
            text_embed=TextEmbedding(tokenizer.vocab_size, d_l, spec_lang.max_seq_len),
            patch_embed=PatchEmbedding(channels, image_size, patch_size, d_v),
            text_out_proj=nn.Linear(d_l, joint_dim, bias=False),
            vision_out_proj=nn.Linear(d_v, joint_dim, bias=False),
            tokenizer=tokenizer,
            logit_scale=logit_scale,
            image_shape=(channels, image_size, image_size),
        )
    return bundle


def fill_template(template: str, name: str) -> str:
    if "<category>" not in template:
        raise DataError(f"template {template!r} has no <category> placeholder")
    return template.replace("<category>", name)


def pretrain_toy_alignment(
    bundle: DualEncoderBundle,
    corpus,
    steps: int,
    *,
    seed: int = 0,
    batch_size: int = 32,
    learning_rate: float = 2e-3,
    temperature: float = 0.1,
    template: str = "a photo of a <category>",
    benchmark_classes: Iterable[str] = (),
) -> DualEncoderBundle:
    """Contrastively align a fresh toy bundle on ``corpus``, then freeze it.

    ``corpus`` needs ``images`` (N, C, H, W), integer ``labels`` and
    ``class_names``. Each step draws distinct classes, one image per class,
    and minimises the symmetric InfoNCE loss over cosine similarities of the
    projected image and caption embeddings.
    """
    overlap = set(corpus.class_names) & set(benchmark_classes)
    if overlap:
        raise ProtocolError(f"pretraining classes overlap the benchmark: {sorted(overlap)}")
    if bundle.frozen:
        raise ProtocolError("bundle is already frozen")
    if steps > 0:
        rng = np.random.default_rng(seed)
        labels = np.asarray(corpus.labels)
        by_class = [np.flatnonzero(labels == c) for c in range(len(corpus.class_names))]
        by_class_ids = [c for c, idx in enumerate(by_class) if len(idx)]
        if len(by_class_ids) < 2:
            raise DataError("pretraining corpus needs at least two populated classes")
        captions = bundle.tokenize([fill_template(template, n) for n in corpus.class_names])
        images = torch.as_tensor(np.asarray(corpus.images), dtype=bundle.dtype)
        optimizer = torch.optim.Adam(bundle.parameters(), lr=learning_rate)
        bundle.train()
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            for _ in range(steps):
                chosen = rng.choice(by_class_ids, min(batch_size, len(by_class_ids)), replace=False)
                picks = [int(rng.choice(by_class[c])) for c in chosen]
                img = F.normalize(encode_image(bundle, images[picks]), dim=-1)
                sel = torch.as_tensor(chosen)
                txt = F.normalize(
                    encode_text(bundle, TokenBatch(captions.ids[sel], captions.eos_index[sel])),
                    dim=-1,
                )
                logits = img @ txt.T / temperature
                target = torch.arange(len(chosen))
                loss = 0.5 * (F.cross_entropy(logits, target) + F.cross_entropy(logits.T, target))
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
    return bundle.freeze()


def count_parameters(bundle: DualEncoderBundle | int, prompts) -> tuple[int, int, float]:
    """(frozen, learnable, learnable fraction) for a bundle and a prompt bank.

    ``bundle`` may also be a plain integer frozen-parameter total, e.g. the
    size reported for a checkpoint that is not loaded.
    """
    if isinstance(bundle, (int, np.integer)):
        frozen = int(bundle)
    else:
        frozen = sum(p.numel() for p in bundle.parameters())
    learnable = sum(p.numel() for p in prompts.parameters())
    return frozen, learnable, learnable / (learnable + frozen)
