"""Training loop, learning-rate schedule and evaluation."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .checkpoint import (Checkpoint, load_checkpoint, model_tensors, optimizer_tensors,
                         restore_model, restore_optimizer, save_checkpoint)
from .config import RunConfig
from .losses import LossBreakdown
from .metrics import MetricsState, accumulate, finalize
from .model import DMMI
from .synthetic import Sample, encode_mask_rle
from .text import TokenSequence, Vocab, erase_phrase, template_vocab, tokenize

log = logging.getLogger(__name__)


class NonFiniteLoss(RuntimeError):
    pass


def lr_schedule(step: int, cfg: RunConfig) -> float:
    """Polynomial decay from lr0 at step 0 to zero at total_steps."""
    if not 0 <= step <= cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps}]")
    return cfg.lr0 * (1 - step / cfg.total_steps) ** cfg.poly_power


@dataclass
class Dataset:
    """Samples pre-tokenised and stacked as tensors."""

    images: torch.Tensor      # (S, 3, H, W) float32
    masks: torch.Tensor       # (S, H, W) bool
    tokens: list
    spans: list
    delta: torch.Tensor       # (S,) float32
    settings: list
    sample_ids: list

    def __len__(self):
        return len(self.tokens)

    @classmethod
    def from_samples(cls, samples: list[Sample], vocab: Vocab, max_len: int) -> "Dataset":
        images = torch.from_numpy(np.stack([s.image for s in samples]).astype(np.float32)).permute(0, 3, 1, 2)
        masks = torch.from_numpy(np.stack([s.mask for s in samples]))
        return cls(images=images.contiguous(), masks=masks,
                   tokens=[tokenize(s.expression, vocab, max_len) for s in samples],
                   spans=[[(a, b) for a, b in s.entity_spans if b <= max_len] for s in samples],
                   delta=torch.tensor([float(s.delta) for s in samples]),
                   settings=[s.setting for s in samples],
                   sample_ids=[s.sample_id for s in samples])


def _stack(seqs: list[TokenSequence]):
    ids = torch.from_numpy(np.stack([s.ids for s in seqs]))
    valid = torch.from_numpy(np.stack([s.words_mask for s in seqs]))
    return ids, valid


@dataclass
class Batch:
    images: torch.Tensor
    masks: torch.Tensor
    ids: torch.Tensor
    valid: torch.Tensor
    erased_ids: torch.Tensor
    delta: torch.Tensor

    def to(self, dtype):
        return Batch(self.images.to(dtype), self.masks, self.ids, self.valid,
                     self.erased_ids, self.delta.to(dtype))


def make_batch(data: Dataset, index, seed: int, step: int, vocab: Vocab) -> Batch:
    """Assemble a batch; each sentence gets a fresh erasure keyed by (seed, step, slot)."""
    index = [int(i) for i in index]
    toks = [data.tokens[i] for i in index]
    erased = []
    for slot, i in enumerate(index):
        if data.spans[i]:
            erased.append(erase_phrase(data.tokens[i], data.spans[i], [seed, 2, step, slot],
                                       mask_id=vocab.mask_id))
        else:
            erased.append(data.tokens[i])
    ids, valid = _stack(toks)
    erased_ids, _ = _stack(erased)
    return Batch(data.images[index], data.masks[index], ids, valid, erased_ids, data.delta[index])


def batch_indices(n: int, batch_size: int, seed: int, step: int) -> np.ndarray:
    """Samples for a step: epoch-wise permutations keyed by (seed, epoch)."""
    start = step * batch_size
    out = []
    while len(out) < batch_size:
        epoch, pos = divmod(start + len(out), n)
        perm = np.random.default_rng([seed, 1, epoch]).permutation(n)
        out.extend(perm[pos:pos + batch_size - len(out)])
    return np.asarray(out)


def build_model(cfg: RunConfig, vocab: Vocab) -> DMMI:
    torch.manual_seed(cfg.seed)
    return DMMI.from_config(cfg, len(vocab))


def build_optimizer(model, cfg: RunConfig):
    return torch.optim.AdamW(model.parameters(), lr=cfg.lr0, betas=tuple(cfg.betas),
                             eps=cfg.eps, weight_decay=cfg.weight_decay, foreach=True)


def train_step(model: DMMI, optimizer, batch: Batch, step: int, cfg: RunConfig) -> LossBreakdown:
    """One AdamW update at the scheduled learning rate for ``step``."""
    lr = lr_schedule(step, cfg)
    for g in optimizer.param_groups:
        g["lr"] = lr
    model.train()
    out = model(batch.images, batch.ids, batch.valid, erased_ids=batch.erased_ids)
    parts = model.losses(out, batch.masks, batch.valid, batch.delta, cfg.tau, cfg.use_sim, cfg.use_con)
    total = parts.total
    if not torch.isfinite(total):
        raise NonFiniteLoss(f"non-finite loss at step {step}: {parts.as_floats()}")
    optimizer.zero_grad(set_to_none=True)
    total.backward()
    optimizer.step()
    return parts


class Trainer:
    """Owns the model, optimizer and loss log for one run directory."""

    def __init__(self, cfg: RunConfig, train_data: Dataset, vocab: Vocab | None = None,
                 out_dir=None):
        self.cfg = cfg
        self.vocab = vocab or template_vocab()
        self.data = train_data
        self.model = build_model(cfg, self.vocab)
        self.optimizer = build_optimizer(self.model, cfg)
        self.step = 0
        self.out_dir = Path(out_dir or cfg.out_dir)
        self.log_path = self.out_dir / "loss_log.jsonl"

    def resume(self, path):
        ckpt = load_checkpoint(path)
        restore_model(self.model, ckpt.tensors)
        restore_optimizer(self.model, self.optimizer, ckpt.tensors)
        if ckpt.rng.get("seed", self.cfg.seed) != self.cfg.seed:
            raise ValueError("checkpoint was trained with a different seed")
        self.step = ckpt.step
        return self

    def checkpoint(self) -> Checkpoint:
        tensors = {**model_tensors(self.model), **optimizer_tensors(self.model, self.optimizer)}
        return Checkpoint(tensors, self.cfg.to_dict(), self.step,
                          {"seed": self.cfg.seed, "next_step": self.step})

    def save(self, path=None) -> Path:
        path = Path(path or self.out_dir / f"checkpoint_{self.step:06d}.ckpt")
        path.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(path, self.checkpoint())
        return path

    def run(self, until: int | None = None, write_log: bool = True) -> list[dict]:
        until = self.cfg.total_steps if until is None else min(until, self.cfg.total_steps)
        records = []
        if write_log:
            self.out_dir.mkdir(parents=True, exist_ok=True)
        logf = open(self.log_path, "a") if write_log else None
        try:
            while self.step < until:
                idx = batch_indices(len(self.data), self.cfg.batch_size, self.cfg.seed, self.step)
                batch = make_batch(self.data, idx, self.cfg.seed, self.step, self.vocab)
                lr = lr_schedule(self.step, self.cfg)
                try:
                    parts = train_step(self.model, self.optimizer, batch, self.step, self.cfg)
                except NonFiniteLoss:
                    self._dump_failure(batch)
                    raise
                self.step += 1
                rec = {"step": self.step, "lr": lr, **parts.as_floats()}
                records.append(rec)
                if logf and (self.step % self.cfg.log_every == 0 or self.step == until):
                    logf.write(json.dumps(rec) + "\n")
                if self.cfg.checkpoint_every and self.step % self.cfg.checkpoint_every == 0:
                    self.save()
        finally:
            if logf:
                logf.close()
        return records

    def _dump_failure(self, batch: Batch):
        self.out_dir.mkdir(parents=True, exist_ok=True)
        path = self.out_dir / f"nonfinite_step{self.step:06d}.json"
        bad = {n: bool(torch.isfinite(p).all()) for n, p in self.model.named_parameters()}
        with open(path, "w") as f:
            json.dump({"step": self.step, "finite_params": bad,
                       "delta": batch.delta.tolist(), "ids": batch.ids.tolist()}, f)
        log.error("non-finite loss; diagnostics written to %s", path)


@torch.no_grad()
def predict_masks(model: DMMI, data: Dataset, batch_size: int = 64) -> np.ndarray:
    model.eval()
    out = []
    for start in range(0, len(data), batch_size):
        sl = slice(start, start + batch_size)
        ids, valid = _stack(data.tokens[sl])
        out.append(model.predict(data.images[sl], ids, valid).numpy())
    return np.concatenate(out) if out else np.zeros((0,) + tuple(data.masks.shape[1:]), dtype=bool)


def evaluate_model(model: DMMI, data: Dataset, batch_size: int = 64):
    preds = predict_masks(model, data, batch_size)
    state = MetricsState()
    by_setting = {}
    for p, g, s in zip(preds, data.masks.numpy(), data.settings):
        accumulate(state, p, g, s)
        accumulate(by_setting.setdefault(s, MetricsState()), p, g, s)
    return finalize(state), {s: finalize(st) for s, st in sorted(by_setting.items())}


def prediction_records(model: DMMI, data: Dataset, batch_size: int = 64) -> list[dict]:
    preds = predict_masks(model, data, batch_size)
    return [{"sample_id": sid, "setting": s, "mask_rle": [list(r) for r in encode_mask_rle(p)],
             "image_size": list(p.shape)}
            for sid, s, p in zip(data.sample_ids, data.settings, preds)]


def loss_is_finite(records) -> bool:
    return all(math.isfinite(r[k]) for r in records for k in ("l_ce", "l_sim", "l_con", "total"))
