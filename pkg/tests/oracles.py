"""Independent reference implementations used as test oracles.

None of these call the package's hook machinery; they rebuild each
computation from the bundle's raw modules in the most literal way.
"""

from __future__ import annotations

import math

import numpy as np
import torch


def reference_text_forward(bundle, ids, eos_index, prompts=None):
    """Materialize [BOS, g_i, words, EOS] at every layer.

    Layers 1..D get fresh prompts that overwrite the previous layer's prompt
    outputs; deeper layers carry the layer-D prompt outputs unchanged in place.
    """
    enc = bundle.language
    h = bundle.text_embed(ids)
    h = enc.pre_norm(h)
    n = 0
    depth = 0 if prompts is None else prompts.shape[0]
    B = h.shape[0]
    for i, layer in enumerate(enc.layers, start=1):
        if i <= depth:
            g = prompts[i - 1].to(h.dtype).unsqueeze(0).expand(B, -1, -1)
            h = torch.cat([h[:, :1], g, h[:, 1 + n :]], dim=1)
            n = g.shape[1]
        h = layer(h, True)
    h = enc.final_norm(h)
    # the sentinel stays at 0, so every real position after it shifts by n
    pooled = torch.stack([h[b, int(eos_index[b]) + n] for b in range(B)])
    return bundle.text_out_proj(pooled)


def reference_image_forward(bundle, images, prompts=None, projection=None, accumulate=True):
    """Materialize [CLS, patches, prompts] with the projected prompts of
    layer i placed in front of everything carried from layer i-1
    (accumulation), or overwriting it (replacement)."""
    enc = bundle.vision
    h = enc.pre_norm(bundle.patch_embed(images.to(bundle.dtype)))
    n_real = h.shape[1]
    depth = 0 if prompts is None else prompts.shape[0]
    B = h.shape[0]
    for i, layer in enumerate(enc.layers, start=1):
        if i <= depth:
            fresh = (prompts[i - 1] @ projection).to(h.dtype).unsqueeze(0).expand(B, -1, -1)
            carried = h[:, n_real:] if accumulate else h[:, n_real:n_real]
            h = torch.cat([h[:, :n_real], fresh, carried], dim=1)
        h = layer(h, False)
    h = enc.final_norm(h)
    return bundle.vision_out_proj(h[:, 0])


def loop_matmul(a, b):
    """Triple-loop matrix product."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            out[i, j] = sum(a[i, k] * b[k, j] for k in range(a.shape[1]))
    return out


def softmax_rows(logits):
    out = []
    for row in np.asarray(logits, dtype=float):
        m = max(row)
        e = [math.exp(v - m) for v in row]
        s = sum(e)
        out.append([v / s for v in e])
    return np.array(out)


def cosine_table(images, prototypes, scale=1.0):
    out = np.zeros((len(images), len(prototypes)))
    for i, u in enumerate(np.asarray(images, dtype=float)):
        for j, v in enumerate(np.asarray(prototypes, dtype=float)):
            out[i, j] = scale * float(u @ v) / (math.sqrt(u @ u) * math.sqrt(v @ v))
    return out


def recount_accuracy(per_session_correct):
    right = total = 0
    for flags in per_session_correct:
        for f in flags:
            right += bool(f)
            total += 1
    return 100.0 * right / total


def hand_metrics(accs):
    return accs[0] - accs[-1], sum(accs) / len(accs)


def hand_alpha(counts, t):
    return counts[t] / sum(counts[: t + 1])
