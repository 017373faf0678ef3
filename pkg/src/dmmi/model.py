"""The full dual-branch network."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .decoders import ContextClueRecovery, DecoderState, PooledPair, PoolPair, Prediction, TextToImageDecoder
from .encoder import FeatureEncoder
from .losses import LossBreakdown, loss_ce, loss_con, loss_sim


@dataclass
class ForwardOutput:
    prediction: Prediction
    state: DecoderState
    fused: list
    e4: torch.Tensor
    e_hat: torch.Tensor | None = None
    pooled: PooledPair | None = None


class DMMI(nn.Module):
    def __init__(self, vocab_size, channels=(16, 32, 64, 128), stem_channels=16, text_dim=64,
                 attn_dim=(64, 64, 64, 64), max_len=20, text_layers=2, heads=8,
                 region_sizes=(1, 3, 5), run_lengths=(1, 2, 3), decoder_dims=(64, 32),
                 embed_dim=64, stem_stride=1):
        super().__init__()
        self.encoder = FeatureEncoder(vocab_size, channels, stem_channels, text_dim, attn_dim,
                                      max_len, text_layers, heads, region_sizes, run_lengths,
                                      stem_stride)
        self.t2i = TextToImageDecoder(channels, text_dim, decoder_dims, embed_dim, heads)
        self.ccr = ContextClueRecovery(text_dim, decoder_dims[0], heads)
        self.pool = PoolPair(embed_dim, text_dim, embed_dim)

    @classmethod
    def from_config(cls, cfg, vocab_size):
        return cls(vocab_size, channels=tuple(cfg.channels), stem_channels=cfg.stem_channels,
                   text_dim=cfg.text_dim, attn_dim=tuple(cfg.attn_dim), max_len=cfg.max_len,
                   text_layers=cfg.text_layers, heads=cfg.heads,
                   region_sizes=tuple(cfg.region_sizes), run_lengths=tuple(cfg.run_lengths),
                   decoder_dims=tuple(cfg.decoder_dims), embed_dim=cfg.embed_dim,
                   stem_stride=cfg.stem_stride)

    def forward(self, image, ids, valid, erased_ids=None) -> ForwardOutput:
        """``image`` is (B, 3, H, W). Passing ``erased_ids`` also runs the image-to-text branch."""
        fused, e4, _ = self.encoder(image, ids, valid)
        state, pred = self.t2i(fused, e4, valid, image.shape[2:])
        out = ForwardOutput(pred, state, fused, e4)
        if erased_ids is not None:
            e_erased = self.encoder.text(erased_ids, valid)
            out.e_hat = self.ccr(e_erased, state.v_g, valid)
            out.pooled = self.pool(state.v_d, e4, valid)
        return out

    def losses(self, out: ForwardOutput, masks, valid, delta, tau=0.05,
               use_sim=True, use_con=True, sim_target=None) -> LossBreakdown:
        """``sim_target`` replaces the (detached) E*4 reconstruction target when given."""
        l_ce = loss_ce(out.prediction.logits, masks)
        zero = l_ce.new_zeros(())
        l_sim = loss_sim(out.e_hat, out.e4 if sim_target is None else sim_target, valid, delta) if use_sim else zero
        l_con = loss_con(out.pooled.v_o, out.pooled.e_o, delta, tau) if use_con else zero
        return LossBreakdown(l_ce, l_sim, l_con)

    @torch.no_grad()
    def predict(self, image, ids, valid) -> torch.Tensor:
        return self(image, ids, valid).prediction.mask
