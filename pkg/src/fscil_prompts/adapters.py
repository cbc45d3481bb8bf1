"""Wrap a pretrained Hugging Face CLIP checkpoint as a :class:`DualEncoderBundle`.

The wrapped bundle reuses the checkpoint's own modules (embeddings, encoder
layers, norms, projections), so the prompt hooks run against the real
weights. ``transformers`` is imported lazily; the toy backbone never needs it.
"""

from __future__ import annotations

import torch
from torch import nn

from .encoders import DualEncoderBundle, EncoderSpec, TokenBatch, TransformerEncoder


class _HFLayer(nn.Module):
    """Adapts ``CLIPEncoderLayer(hidden, mask)`` to ``layer(x, causal)``."""

    def __init__(self, layer: nn.Module):
        super().__init__()
        self.layer = layer

    def forward(self, x: torch.Tensor, causal: bool = False) -> torch.Tensor:
        mask = None
        if causal:
            S = x.shape[1]
            mask = torch.full((S, S), float("-inf"), dtype=x.dtype, device=x.device).triu(1)
            mask = mask[None, None]
        out = self.layer(x, mask)
        return out[0] if isinstance(out, tuple) else out


class _TextEmbed(nn.Module):
    def __init__(self, embeddings: nn.Module):
        super().__init__()
        self.embeddings = embeddings

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        return self.embeddings(input_ids=ids)


class _PatchEmbed(nn.Module):
    def __init__(self, embeddings: nn.Module):
        super().__init__()
        self.embeddings = embeddings

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.embeddings(images)


class HFTokenizer:
    """Turns a CLIP tokenizer into the bundle's ``texts -> TokenBatch`` contract."""

    def __init__(self, tokenizer, eos_token_id: int | None = None):
        self.tokenizer = tokenizer
        self.eos_token_id = tokenizer.eos_token_id if eos_token_id is None else eos_token_id

    def __call__(self, texts) -> TokenBatch:
        ids = self.tokenizer(list(texts), padding=True, return_tensors="pt")["input_ids"]
        eos = (ids == self.eos_token_id).int().argmax(dim=-1)
        return TokenBatch(ids.long(), eos.long())


def bundle_from_hf_clip(model, tokenizer=None, prompt_capacity: int = 128) -> DualEncoderBundle:
    """Build a frozen bundle around a ``transformers.CLIPModel``.

    ``prompt_capacity`` is how many injected tokens each tower accepts on top
    of its positional length. The checkpoint's learned temperature becomes
    the bundle's ``logit_scale``.
    """
    text, vision = model.text_model, model.vision_model
    scale = model.logit_scale.detach()
    # meta-device models (built only to count parameters) hold no values
    logit_scale = 1.0 if scale.is_meta else float(scale.exp())
    tcfg, vcfg = model.config.text_config, model.config.vision_config
    spec_l = EncoderSpec(
        tcfg.num_hidden_layers, tcfg.hidden_size, tcfg.num_attention_heads,
        tcfg.max_position_embeddings + prompt_capacity, "language",
    )
    num_positions = (vcfg.image_size // vcfg.patch_size) ** 2 + 1
    spec_v = EncoderSpec(
        vcfg.num_hidden_layers, vcfg.hidden_size, vcfg.num_attention_heads,
        num_positions + prompt_capacity, "vision",
    )
    language = TransformerEncoder(
        spec_l, [_HFLayer(m) for m in text.encoder.layers], final_norm=text.final_layer_norm, causal=True
    )
    vision_tower = TransformerEncoder(
        spec_v, [_HFLayer(m) for m in vision.encoder.layers],
        pre_norm=vision.pre_layrnorm, final_norm=vision.post_layernorm,
    )
    bundle = DualEncoderBundle(
        language=language,
        vision=vision_tower,
        text_embed=_TextEmbed(text.embeddings),
        patch_embed=_PatchEmbed(vision.embeddings),
        text_out_proj=model.text_projection,
        vision_out_proj=model.visual_projection,
        tokenizer=HFTokenizer(tokenizer) if tokenizer is not None else None,
        logit_scale=logit_scale,
        image_shape=(vcfg.num_channels, vcfg.image_size, vcfg.image_size),
    )
    return bundle.freeze()


def load_clip_checkpoint(path, prompt_capacity: int = 128) -> DualEncoderBundle:
    """Load a CLIP checkpoint directory (or hub id) and wrap it."""
    from transformers import CLIPModel, CLIPTokenizer

    model = CLIPModel.from_pretrained(path, attn_implementation="eager")
    tokenizer = CLIPTokenizer.from_pretrained(path)
    return bundle_from_hf_clip(model, tokenizer, prompt_capacity)
