"""Multi-scale bi-directional attention between visual and text features.

Layout conventions: visual maps are (B, C, H, W), flattened visual tokens
(B, N, C) with N = H * W in row-major order, text features (B, L, C) with a
boolean ``valid`` mask of shape (B, L) marking non-padding tokens.
"""
from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


def flatten_map(v: torch.Tensor) -> torch.Tensor:
    """(B, C, H, W) -> (B, N, C)."""
    return v.flatten(2).transpose(1, 2)


def unflatten_map(x: torch.Tensor, hw: tuple[int, int]) -> torch.Tensor:
    """(B, N, C) -> (B, C, H, W)."""
    return x.transpose(1, 2).reshape(x.shape[0], x.shape[2], *hw)


def project_map(linear: nn.Linear, v: torch.Tensor) -> torch.Tensor:
    """Apply a per-pixel linear map to a (B, C, H, W) tensor."""
    return linear(v.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)


def region_sum(q: torch.Tensor, extent: int) -> torch.Tensor:
    """Sum of ``q`` over the extent x extent window centred at every pixel.

    Windows are clipped at the border: out-of-image positions contribute
    nothing, which zero padding gives for free on a sum.
    """
    if extent < 1 or extent % 2 == 0:
        raise ValueError(f"window extent must be a positive odd integer, got {extent}")
    if extent == 1:
        return q
    c = q.shape[1]
    kernel = q.new_ones(c, 1, extent, extent)
    return F.conv2d(q, kernel, padding=extent // 2, groups=c)


def run_sum(q: torch.Tensor, valid: torch.Tensor, length: int) -> torch.Tensor:
    """Sum of ``q`` over the token run [i, i + length) for every start i.

    Runs are clipped at the sentence end and skip padding tokens.
    """
    if length < 1:
        raise ValueError(f"run length must be positive, got {length}")
    q = q * valid.unsqueeze(-1).to(q.dtype)
    if length == 1:
        return q
    padded = F.pad(q, (0, 0, 0, length - 1))
    n = q.shape[1]
    return sum(padded[:, j:j + n] for j in range(length))


def attention_logits(q: torch.Tensor, k: torch.Tensor, dim: int) -> torch.Tensor:
    return q @ k.transpose(1, 2) / math.sqrt(dim)


def masked_softmax(logits: torch.Tensor, key_valid: torch.Tensor | None) -> torch.Tensor:
    """Softmax over the last axis with invalid keys excluded exactly."""
    if key_valid is not None:
        logits = logits.masked_fill(~key_valid.unsqueeze(1), float("-inf"))
    return torch.softmax(logits, dim=-1)


def baseline_cross_attention(v, e, valid, w_q, w_k, w_v, return_weights=False):
    """Single-pixel / single-word cross attention.

    ``v`` is (B, C, H, W), ``e`` (B, L, C_t). Returns the attended values as a
    (B, C_v, H, W) map, optionally with the (B, N, L) attention weights.
    """
    q = flatten_map(project_map(w_q, v))
    k = w_k(e)
    weights = masked_softmax(attention_logits(q, k, q.shape[-1]), valid)
    out = unflatten_map(weights @ w_v(e), v.shape[2:])
    return (out, weights) if return_weights else out


def pixel_word_logits(v, e, w_q, w_k) -> torch.Tensor:
    """Unsummed scaled dot products (B, N, L) of projected pixels and words."""
    return attention_logits(flatten_map(project_map(w_q, v)), w_k(e), w_q.out_features)


def word_pixel_logits(e, v, w_q, w_k) -> torch.Tensor:
    """Unsummed scaled dot products (B, L, N) of projected words and pixels."""
    return attention_logits(w_q(e), flatten_map(project_map(w_k, v)), w_q.out_features)


def region_rows(logits, valid, extent: int, hw) -> torch.Tensor:
    """Window-summed queries from pixel logits, softmaxed over words.

    The logit of a window-summed query is the window sum of the per-pixel
    logits, so the box filter runs on the L logit maps instead of the
    attention channels.
    """
    maps = unflatten_map(logits, hw)
    return masked_softmax(flatten_map(region_sum(maps, extent)), valid)


def sequence_rows(logits, valid, length: int) -> torch.Tensor:
    """Run-summed queries from word logits, softmaxed over pixels."""
    return masked_softmax(run_sum(logits, valid, length), None)


def region_logit_rows(v, e, valid, w_q, w_k, extent: int) -> torch.Tensor:
    """Per-scale text-to-image weights (B, N, L) for one window extent."""
    return region_rows(pixel_word_logits(v, e, w_q, w_k), valid, extent, v.shape[2:])


def sequence_logit_rows(e, valid, v, w_q, w_k, length: int) -> torch.Tensor:
    """Per-scale image-to-text weights (B, L, N) for one token-run length."""
    return sequence_rows(word_pixel_logits(e, v, w_q, w_k), valid, length)


def mix_scales(per_scale, lam: torch.Tensor) -> torch.Tensor:
    """Weighted sum of post-softmax attention matrices."""
    if len(per_scale) != lam.shape[0]:
        raise ValueError(f"{len(per_scale)} scales but {lam.shape[0]} mixture weights")
    shape = per_scale[0].shape
    if any(w.shape != shape for w in per_scale):
        raise ValueError("per-scale attention matrices differ in shape")
    return sum(l * w for l, w in zip(lam, per_scale))


def apply_alignment(weights: torch.Tensor, values: torch.Tensor) -> torch.Tensor:
    """(B, Q, K) @ (B, K, C) -> (B, Q, C)."""
    if weights.shape[-1] != values.shape[1]:
        raise ValueError(f"attention over {weights.shape[-1]} keys but {values.shape[1]} values")
    return weights @ values


class MBA(nn.Module):
    """Bi-directional multi-scale attention with zero-initialised residual gates.

    The visual map is refined with text gathered over windows of
    ``region_sizes``; the text is refined with visual context gathered per
    token run of ``run_lengths``. Each direction has its own projections and
    scale-mixture weights.
    """

    def __init__(self, vis_dim: int, text_dim: int, attn_dim: int,
                 region_sizes=(1, 3, 5), run_lengths=(1, 2, 3)):
        super().__init__()
        self.region_sizes = tuple(region_sizes)
        self.run_lengths = tuple(run_lengths)
        self.attn_dim = attn_dim
        # text-to-image direction
        self.q_img = nn.Linear(vis_dim, attn_dim)
        self.k_txt = nn.Linear(text_dim, attn_dim)
        self.v_txt = nn.Linear(text_dim, vis_dim)
        # image-to-text direction
        self.q_txt = nn.Linear(text_dim, attn_dim)
        self.k_img = nn.Linear(vis_dim, attn_dim)
        self.v_img = nn.Linear(vis_dim, text_dim)
        self.lambda_img = nn.Parameter(torch.full((len(self.region_sizes),), 1.0 / len(self.region_sizes)))
        self.lambda_txt = nn.Parameter(torch.full((len(self.run_lengths),), 1.0 / len(self.run_lengths)))
        self.gamma_v = nn.Parameter(torch.zeros(vis_dim))
        self.gamma_e = nn.Parameter(torch.zeros(text_dim))

    def image_weights(self, v, e, valid, per_scale=False):
        logits = pixel_word_logits(v, e, self.q_img, self.k_txt)
        scales = [region_rows(logits, valid, r, v.shape[2:]) for r in self.region_sizes]
        return scales if per_scale else mix_scales(scales, self.lambda_img)

    def text_weights(self, v, e, valid, per_scale=False):
        logits = word_pixel_logits(e, v, self.q_txt, self.k_img)
        scales = [sequence_rows(logits, valid, r) for r in self.run_lengths]
        return scales if per_scale else mix_scales(scales, self.lambda_txt)

    def forward(self, v, e, valid):
        w_img = self.image_weights(v, e, valid)
        w_txt = self.text_weights(v, e, valid)
        v_new = unflatten_map(apply_alignment(w_img, self.v_txt(e)), v.shape[2:])
        e_new = apply_alignment(w_txt, self.v_img(flatten_map(v)))
        v_out = v + self.gamma_v.view(1, -1, 1, 1) * v_new
        e_out = e + self.gamma_e * e_new
        return v_out, e_out


def mba_step(v, e, valid, module: MBA):
    return module(v, e, valid)
