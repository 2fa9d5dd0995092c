"""Caption tokenizer and a small trainable text encoder with a learned null condition."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import torch
from torch import Tensor, nn

from .errors import ContractError, FormatError
from .layers import MLP, Attention, LayerNorm, sinusoidal

PAD, UNK = "<pad>", "<unk>"

COLORS = ("red", "green", "blue")
SPEEDS = ("slow", "fast")
# caption words plus accepted synonyms; synonyms share the canonical id
TEMPLATE_WORDS = ("a", "ball", "bouncing") + COLORS + SPEEDS
SYNONYMS = {"slowly": "slow", "quickly": "fast"}


class Vocabulary:
    def __init__(self, tokens: list[str], synonyms: dict[str, str] | None = None):
        if tokens[:2] != [PAD, UNK]:
            raise FormatError("vocabulary must start with <pad>, <unk>")
        if len(set(tokens)) != len(tokens):
            raise FormatError("vocabulary has duplicate tokens")
        self.tokens = list(tokens)
        self.index = {w: i for i, w in enumerate(tokens)}
        for alias, canon in (synonyms or {}).items():
            if canon in self.index:
                self.index.setdefault(alias, self.index[canon])

    @classmethod
    def default(cls) -> "Vocabulary":
        return cls([PAD, UNK, *TEMPLATE_WORDS], SYNONYMS)

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def unk_id(self) -> int:
        return 1

    def tokenize(self, caption: str) -> list[int]:
        words = caption.lower().split()
        if not words:
            return [self.pad_id]
        return [self.index.get(w, self.unk_id) for w in words]

    def word(self, idx: int) -> str:
        return self.tokens[idx]

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([ln for ln in lines if ln], SYNONYMS)


@dataclass
class TextCondition:
    tokens: list[int]
    embeddings: Tensor  # (L, E)
    is_null: bool


@dataclass
class TextBatch:
    """Padded token batch; null items are encoded as the learned null sequence."""

    tokens: Tensor  # (B, L) int64
    mask: Tensor  # (B, L) bool, True = real token
    null: Tensor  # (B,) bool

    @classmethod
    def from_captions(cls, vocab: Vocabulary, captions: list[str], null: list[bool] | Tensor | None = None) -> "TextBatch":
        return cls.from_token_lists([vocab.tokenize(c) for c in captions], null)

    @classmethod
    def from_token_lists(cls, token_lists: list[list[int]], null: list[bool] | Tensor | None = None) -> "TextBatch":
        if not token_lists:
            raise ContractError("empty text batch")
        length = max(len(t) for t in token_lists)
        tokens = torch.zeros(len(token_lists), length, dtype=torch.long)
        mask = torch.zeros(len(token_lists), length, dtype=torch.bool)
        for i, t in enumerate(token_lists):
            tokens[i, : len(t)] = torch.tensor(t, dtype=torch.long)
            mask[i, : len(t)] = True
        if null is None:
            null_t = torch.zeros(len(token_lists), dtype=torch.bool)
        else:
            null_t = torch.as_tensor(null, dtype=torch.bool).clone()
        return cls(tokens, mask, null_t)

    def __len__(self) -> int:
        return self.tokens.shape[0]

    def select(self, idx: Tensor) -> "TextBatch":
        return TextBatch(self.tokens[idx], self.mask[idx], self.null[idx])

    def as_null(self) -> "TextBatch":
        return TextBatch(self.tokens, self.mask, torch.ones_like(self.null))

    def with_null(self, null: Tensor) -> "TextBatch":
        return TextBatch(self.tokens, self.mask, null.to(torch.bool))


class TextEncoder(nn.Module):
    """Token embedding + sinusoidal positions + one pre-norm self-attention block."""

    def __init__(self, vocab_size: int, dim: int, heads: int):
        super().__init__()
        self.dim = dim
        self.embed = nn.Embedding(vocab_size, dim)
        self.norm1 = LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = LayerNorm(dim)
        self.mlp = MLP(dim)
        self.null = nn.Parameter(torch.zeros(1, dim))

    def forward(self, batch: TextBatch) -> tuple[Tensor, Tensor]:
        """Returns embeddings (B, L, E) and key mask (B, L)."""
        b, length = batch.tokens.shape
        pos = sinusoidal(torch.arange(length), self.dim)
        h = self.embed(batch.tokens) + pos
        h = h + self.attn(self.norm1(h), key_mask=batch.mask)
        h = h + self.mlp(self.norm2(h))
        null = batch.null.view(b, 1, 1)
        null_seq = torch.cat([self.null.expand(b, 1, self.dim), h.new_zeros(b, length - 1, self.dim)], dim=1)
        h = torch.where(null, null_seq, h)
        null_mask = torch.zeros_like(batch.mask)
        null_mask[:, 0] = True
        mask = torch.where(batch.null.view(b, 1), null_mask, batch.mask)
        return h, mask

    def encode_text(self, tokens: list[int]) -> TextCondition:
        if not tokens:
            raise ContractError("encode_text needs at least one token")
        emb, _ = self.forward(TextBatch.from_token_lists([tokens]))
        return TextCondition(list(tokens), emb[0], False)

    def null_condition(self) -> TextCondition:
        return TextCondition([], self.null, True)
