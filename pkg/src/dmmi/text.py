"""Tokenisation, entity-phrase chunking/erasure and the toy text encoder."""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn as nn

from .synthetic import COLORS, PAIR_TEMPLATES, PLURAL_TEMPLATES, PLURALS, SHAPES, SINGULAR_TEMPLATES

PAD, MASK, UNK = "<pad>", "<mask>", "<unk>"
MAX_LEN = 20
TAGS = ("ADJ", "NOUN", "OTHER")


@dataclass
class Vocab:
    token_to_id: dict[str, int]
    tags: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        ids = sorted(self.token_to_id.values())
        if ids != list(range(len(ids))):
            raise ValueError("vocabulary ids must be dense from 0")
        for tok in (PAD, MASK, UNK):
            if tok not in self.token_to_id:
                raise ValueError(f"vocabulary lacks special token {tok}")
        if self.token_to_id[PAD] != 0:
            raise ValueError("PAD must have id 0")
        bad = {t for t in self.tags.values() if t not in TAGS}
        if bad:
            raise ValueError(f"unknown tags {sorted(bad)}")
        self.id_to_token = {i: t for t, i in self.token_to_id.items()}

    @property
    def pad_id(self) -> int:
        return self.token_to_id[PAD]

    @property
    def mask_id(self) -> int:
        return self.token_to_id[MASK]

    @property
    def unk_id(self) -> int:
        return self.token_to_id[UNK]

    def __len__(self):
        return len(self.token_to_id)

    @classmethod
    def build(cls, words, tags=None) -> "Vocab":
        tokens = [PAD, MASK, UNK]
        for w in words:
            if w not in tokens:
                tokens.append(w)
        return cls({t: i for i, t in enumerate(tokens)}, dict(tags or {}))

    def to_json(self) -> str:
        return json.dumps({"tokens": self.token_to_id, "tags": self.tags}, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Vocab":
        d = json.loads(text)
        return cls({k: int(v) for k, v in d["tokens"].items()}, d.get("tags", {}))

    def save(self, path):
        with open(path, "w") as f:
            f.write(self.to_json())

    @classmethod
    def load(cls, path) -> "Vocab":
        with open(path) as f:
            return cls.from_json(f.read())


def template_vocab() -> Vocab:
    """Vocabulary covering every word the synthetic generator can emit."""
    words = []
    for t in SINGULAR_TEMPLATES + PLURAL_TEMPLATES + PAIR_TEMPLATES:
        words.extend(w for w in t.split() if not w.startswith("{"))
    tags = {}
    for c in COLORS:
        words.append(c)
        tags[c] = "ADJ"
    for s in SHAPES:
        words += [s, PLURALS[s]]
        tags[s] = tags[PLURALS[s]] = "NOUN"
    for w in words:
        tags.setdefault(w, "OTHER")
    return Vocab.build(words, tags)


@dataclass(frozen=True)
class TokenSequence:
    ids: np.ndarray
    valid_len: int
    is_erased: bool = False

    @property
    def words_mask(self) -> np.ndarray:
        return np.arange(len(self.ids)) < self.valid_len


def tokenize(text: str, vocab: Vocab, max_len: int = MAX_LEN) -> TokenSequence:
    words = text.lower().split()
    if not words:
        raise ValueError("cannot tokenize empty text")
    words = words[:max_len]
    ids = np.full(max_len, vocab.pad_id, dtype=np.int64)
    ids[:len(words)] = [vocab.token_to_id.get(w, vocab.unk_id) for w in words]
    return TokenSequence(ids, len(words))


_PHRASE = re.compile(r"A*N+")


def chunk_entity_phrases(tokens: TokenSequence, vocab: Vocab) -> list[tuple[int, int]]:
    """Maximal ``ADJ* NOUN+`` runs over the lexicon tags."""
    letters = []
    for i in tokens.ids[:tokens.valid_len]:
        tag = vocab.tags.get(vocab.id_to_token[int(i)], "OTHER")
        letters.append({"ADJ": "A", "NOUN": "N"}.get(tag, "O"))
    return [m.span() for m in _PHRASE.finditer("".join(letters))]


def erase_phrase(tokens: TokenSequence, spans, rng_seed, vocab: Vocab | None = None,
                 mask_id: int | None = None) -> TokenSequence:
    """Replace the tokens of one uniformly chosen span with MASK."""
    if not spans:
        raise ValueError("no entity span to erase")
    if mask_id is None:
        mask_id = vocab.mask_id if vocab is not None else 1
    rng = np.random.default_rng(rng_seed)
    start, end = spans[int(rng.integers(len(spans)))]
    if not 0 <= start < end <= tokens.valid_len:
        raise ValueError(f"span ({start}, {end}) outside valid tokens")
    ids = tokens.ids.copy()
    ids[start:end] = mask_id
    return replace(tokens, ids=ids, is_erased=True)


def batch_tokens(seqs) -> tuple[torch.Tensor, torch.Tensor]:
    """Stack token sequences into (ids, valid) tensors of shape (B, L)."""
    ids = torch.as_tensor(np.stack([s.ids for s in seqs]))
    valid = torch.as_tensor(np.stack([s.words_mask for s in seqs]))
    return ids, valid


class EncoderBlock(nn.Module):
    """Post-norm self-attention block with padding masked out as keys."""

    def __init__(self, dim: int, heads: int, ff_mult: int = 4):
        super().__init__()
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm1 = nn.LayerNorm(dim)
        self.ff = nn.Sequential(nn.Linear(dim, ff_mult * dim), nn.GELU(), nn.Linear(ff_mult * dim, dim))
        self.norm2 = nn.LayerNorm(dim)

    def forward(self, x, valid):
        a, _ = self.attn(x, x, x, key_padding_mask=~valid, need_weights=False)
        x = self.norm1(x + a)
        return self.norm2(x + self.ff(x))


class TextEncoder(nn.Module):
    """Embedding + learned positions + a short self-attention stack.

    Produces features of shape (B, L, C_t); positions beyond ``valid`` are
    computed but carry no information into valid positions.
    """

    def __init__(self, vocab_size: int, dim: int = 64, max_len: int = MAX_LEN,
                 layers: int = 2, heads: int = 8):
        super().__init__()
        self.embed = nn.Embedding(vocab_size, dim)
        self.pos = nn.Parameter(torch.randn(max_len, dim) * 0.02)
        self.blocks = nn.ModuleList(EncoderBlock(dim, heads) for _ in range(layers))

    def forward(self, ids, valid):
        if ids.shape[1] != self.pos.shape[0]:
            raise ValueError(f"expected sequence length {self.pos.shape[0]}, got {ids.shape[1]}")
        x = self.embed(ids) + self.pos
        for block in self.blocks:
            x = block(x, valid)
        return x


def encode_text(tokens: TokenSequence, encoder: TextEncoder) -> torch.Tensor:
    """Single-sequence convenience wrapper returning (C_t, L)."""
    ids, valid = batch_tokens([tokens])
    return encoder(ids, valid)[0].T
