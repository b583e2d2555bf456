"""Desk-scale encoder-decoder transformer host.

Pre-LN blocks with explicit ``nn.Identity`` adapter slots after the
self-attention and feed-forward sublayers, and attention projections
named ``q_proj``/``k_proj``/``v_proj``/``out_proj`` so the instrumentation
plan can address every insertion site by a stable dotted path.

The word-level vocabulary reserves a sentinel block compatible with the
codec's T5-style naming, so SentT' strings tokenize 1:1 with whitespace
splitting.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .codec import SentinelNamer, SentTPair, make_sentinel_namer
from .errors import ConfigError, ContractViolationError

PAD_TOKEN, BOS_TOKEN, EOS_TOKEN, UNK_TOKEN = "<pad>", "<s>", "</s>", "<unk>"
SPECIAL_TOKENS = (PAD_TOKEN, BOS_TOKEN, EOS_TOKEN, UNK_TOKEN)
PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3


class Vocabulary:
    """Word-level token table: specials, a reserved sentinel block, then words."""

    def __init__(self, token_to_id: dict[str, int], n_sentinels: int):
        self.token_to_id = dict(token_to_id)
        self.id_to_token = {i: t for t, i in self.token_to_id.items()}
        self.n_sentinels = n_sentinels
        if len(self.id_to_token) != len(self.token_to_id):
            raise ConfigError("vocabulary has duplicate ids")

    def __len__(self) -> int:
        return len(self.token_to_id)

    @classmethod
    def build(cls, token_iter: Iterable[str], n_sentinels: int) -> "Vocabulary":
        mapping: dict[str, int] = {tok: i for i, tok in enumerate(SPECIAL_TOKENS)}
        for i in range(n_sentinels):
            mapping[f"<extra_id_{i}>"] = len(mapping)
        for tok in sorted(set(token_iter) - set(mapping)):
            mapping[tok] = len(mapping)
        return cls(mapping, n_sentinels)

    @property
    def sentinel_namer(self) -> SentinelNamer:
        return make_sentinel_namer(self.n_sentinels)

    def encode(self, text: str) -> list[int]:
        return [self.token_to_id.get(tok, UNK_ID) for tok in text.split()]

    def decode(self, ids: Sequence[int]) -> str:
        # sentinels are kept: the codec needs them to re-align tags
        toks = [self.id_to_token.get(int(i), UNK_TOKEN) for i in ids]
        return " ".join(t for t in toks if t not in (PAD_TOKEN, BOS_TOKEN, EOS_TOKEN))

    def save(self, path) -> None:
        payload = {"n_sentinels": self.n_sentinels, "tokens": self.token_to_id}
        Path(path).write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n",
                              encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(payload["tokens"], payload["n_sentinels"])


@dataclass(frozen=True)
class ToyHostConfig:
    vocab_size: int
    h: int = 64
    n_enc: int = 2
    n_dec: int = 2
    n_heads: int = 4
    ff_width: int = 256
    max_len: int = 24       # maximum surface tokens per sentence
    n_sentinels: int = 32
    dropout: float = 0.0

    def __post_init__(self):
        if self.h % self.n_heads != 0:
            raise ConfigError(f"h={self.h} not divisible by n_heads={self.n_heads}")
        if self.n_sentinels < self.max_len + 1:
            raise ConfigError(
                f"n_sentinels={self.n_sentinels} cannot cover max_len={self.max_len} tokens"
            )
        if self.vocab_size < len(SPECIAL_TOKENS) + self.n_sentinels:
            raise ConfigError("vocab_size smaller than specials plus sentinel block")
        if min(self.vocab_size, self.h, self.n_enc, self.n_dec, self.ff_width) < 1:
            raise ConfigError("all size fields must be >= 1")

    @property
    def n_layers(self) -> int:
        return self.n_enc + self.n_dec

    @property
    def n_positions(self) -> int:
        # bos + interleaved sentinels/tokens (2L+1) + eos, with slack
        return 2 * self.max_len + 4

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ToyHostConfig":
        return cls(**json.loads(text))


class MultiHeadAttention(nn.Module):

    def __init__(self, h: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = h // n_heads
        self.q_proj = nn.Linear(h, h, bias=False)
        self.k_proj = nn.Linear(h, h, bias=False)
        self.v_proj = nn.Linear(h, h, bias=False)
        self.out_proj = nn.Linear(h, h, bias=False)

    def _split(self, x: Tensor) -> Tensor:
        b, t, _ = x.shape
        return x.view(b, t, self.n_heads, self.head_dim).transpose(1, 2)

    def forward(self, query: Tensor, key_value: Tensor, mask: Tensor | None = None) -> Tensor:
        q = self._split(self.q_proj(query))
        k = self._split(self.k_proj(key_value))
        v = self._split(self.v_proj(key_value))
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        if mask is not None:
            scores = scores.masked_fill(~mask, float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        out = (attn @ v).transpose(1, 2).contiguous()
        b, t = out.shape[:2]
        return self.out_proj(out.view(b, t, -1))


class FeedForward(nn.Module):

    def __init__(self, h: int, ff_width: int):
        super().__init__()
        self.w_in = nn.Linear(h, ff_width)
        self.w_out = nn.Linear(ff_width, h)

    def forward(self, x: Tensor) -> Tensor:
        return self.w_out(F.gelu(self.w_in(x)))


class EncoderBlock(nn.Module):

    def __init__(self, cfg: ToyHostConfig):
        super().__init__()
        self.self_attn_norm = nn.LayerNorm(cfg.h)
        self.self_attn = MultiHeadAttention(cfg.h, cfg.n_heads)
        self.self_attn_adapter = nn.Identity()
        self.ff_norm = nn.LayerNorm(cfg.h)
        self.ff = FeedForward(cfg.h, cfg.ff_width)
        self.ff_adapter = nn.Identity()
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, x: Tensor, mask: Tensor | None) -> Tensor:
        normed = self.self_attn_norm(x)
        h = self.self_attn(normed, normed, mask)
        x = x + self.dropout(self.self_attn_adapter(h))
        h = self.ff(self.ff_norm(x))
        x = x + self.dropout(self.ff_adapter(h))
        return x


class DecoderBlock(nn.Module):

    def __init__(self, cfg: ToyHostConfig):
        super().__init__()
        self.self_attn_norm = nn.LayerNorm(cfg.h)
        self.self_attn = MultiHeadAttention(cfg.h, cfg.n_heads)
        self.self_attn_adapter = nn.Identity()
        self.cross_attn_norm = nn.LayerNorm(cfg.h)
        self.cross_attn = MultiHeadAttention(cfg.h, cfg.n_heads)
        self.ff_norm = nn.LayerNorm(cfg.h)
        self.ff = FeedForward(cfg.h, cfg.ff_width)
        self.ff_adapter = nn.Identity()
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, x: Tensor, memory: Tensor,
                self_mask: Tensor | None, cross_mask: Tensor | None) -> Tensor:
        normed = self.self_attn_norm(x)
        h = self.self_attn(normed, normed, self_mask)
        x = x + self.dropout(self.self_attn_adapter(h))
        h = self.cross_attn(self.cross_attn_norm(x), memory, cross_mask)
        x = x + self.dropout(h)
        h = self.ff(self.ff_norm(x))
        x = x + self.dropout(self.ff_adapter(h))
        return x


class ToyEncoderDecoder(nn.Module):

    def __init__(self, cfg: ToyHostConfig):
        super().__init__()
        self.config = cfg
        self.token_embedding = nn.Embedding(cfg.vocab_size, cfg.h, padding_idx=PAD_ID)
        self.pos_embedding = nn.Embedding(cfg.n_positions, cfg.h)
        self.encoder_blocks = nn.ModuleList(EncoderBlock(cfg) for _ in range(cfg.n_enc))
        self.encoder_norm = nn.LayerNorm(cfg.h)
        self.decoder_blocks = nn.ModuleList(DecoderBlock(cfg) for _ in range(cfg.n_dec))
        self.decoder_norm = nn.LayerNorm(cfg.h)
        self.lm_head = nn.Linear(cfg.h, cfg.vocab_size, bias=False)

    def _embed(self, ids: Tensor) -> Tensor:
        if ids.shape[-1] > self.config.n_positions:
            raise ContractViolationError(
                f"sequence length {ids.shape[-1]} exceeds the position table "
                f"({self.config.n_positions})"
            )
        positions = torch.arange(ids.shape[-1], device=ids.device)
        return self.token_embedding(ids) + self.pos_embedding(positions)

    def encode(self, src_ids: Tensor, src_mask: Tensor) -> Tensor:
        x = self._embed(src_ids)
        attn_mask = src_mask[:, None, None, :]  # queries attend only real keys
        for block in self.encoder_blocks:
            x = block(x, attn_mask)
        return self.encoder_norm(x)

    def decode(self, dec_ids: Tensor, memory: Tensor, src_mask: Tensor) -> Tensor:
        x = self._embed(dec_ids)
        t = dec_ids.shape[-1]
        causal = torch.tril(torch.ones(t, t, dtype=torch.bool, device=dec_ids.device))
        self_mask = causal[None, None, :, :]
        cross_mask = src_mask[:, None, None, :]
        for block in self.decoder_blocks:
            x = block(x, memory, self_mask, cross_mask)
        return self.lm_head(self.decoder_norm(x))

    def forward(self, src_ids: Tensor, src_mask: Tensor, dec_input_ids: Tensor) -> Tensor:
        return self.decode(dec_input_ids, self.encode(src_ids, src_mask), src_mask)


def build_toy_host(cfg: ToyHostConfig, seed: int = 0) -> ToyEncoderDecoder:
    """Deterministically initialized host; same (cfg, seed) gives identical weights."""
    torch.manual_seed(seed)
    return ToyEncoderDecoder(cfg)


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


# ---------------------------------------------------------------------------
# Batching and decoding
# ---------------------------------------------------------------------------

@dataclass
class Seq2SeqBatch:
    src_ids: Tensor        # (B, S) long
    src_mask: Tensor       # (B, S) bool
    dec_input_ids: Tensor  # (B, T) long, BOS-prefixed
    target_ids: Tensor     # (B, T) long, EOS-suffixed, PAD elsewhere


def pad_id_rows(rows: Sequence[Sequence[int]], pad: int = PAD_ID) -> Tensor:
    width = max(len(r) for r in rows)
    out = torch.full((len(rows), width), pad, dtype=torch.long)
    for i, row in enumerate(rows):
        out[i, : len(row)] = torch.tensor(row, dtype=torch.long)
    return out


def encode_texts(vocab: Vocabulary, texts: Sequence[str]) -> tuple[Tensor, Tensor]:
    rows = [vocab.encode(t) for t in texts]
    if any(not r for r in rows):
        raise ContractViolationError("cannot batch an empty token sequence")
    ids = pad_id_rows(rows)
    return ids, ids != PAD_ID


def make_seq2seq_batch(vocab: Vocabulary, pairs: Sequence[SentTPair]) -> Seq2SeqBatch:
    src_ids, src_mask = encode_texts(vocab, [p.input_text for p in pairs])
    out_rows = [vocab.encode(p.output_text) for p in pairs]
    dec_rows = [[BOS_ID, *row] for row in out_rows]
    tgt_rows = [[*row, EOS_ID] for row in out_rows]
    return Seq2SeqBatch(
        src_ids=src_ids,
        src_mask=src_mask,
        dec_input_ids=pad_id_rows(dec_rows),
        target_ids=pad_id_rows(tgt_rows),
    )


@torch.no_grad()
def greedy_decode(
    model: ToyEncoderDecoder,
    src_ids: Tensor,
    src_mask: Tensor,
    max_new_tokens: int,
) -> list[list[int]]:
    """Deterministic argmax decoding until EOS or the length cap."""
    was_training = model.training
    model.eval()
    try:
        batch = src_ids.shape[0]
        memory = model.encode(src_ids, src_mask)
        ys = torch.full((batch, 1), BOS_ID, dtype=torch.long, device=src_ids.device)
        finished = torch.zeros(batch, dtype=torch.bool, device=src_ids.device)
        for _ in range(max_new_tokens):
            logits = model.decode(ys, memory, src_mask)[:, -1]
            nxt = logits.argmax(dim=-1)
            nxt = torch.where(finished, torch.full_like(nxt, PAD_ID), nxt)
            ys = torch.cat([ys, nxt[:, None]], dim=1)
            finished |= nxt == EOS_ID
            if bool(finished.all()):
                break
        outputs = []
        for row in ys[:, 1:].tolist():
            toks = []
            for tok in row:
                if tok in (EOS_ID, PAD_ID):
                    break
                toks.append(tok)
            outputs.append(toks)
        return outputs
    finally:
        if was_training:
            model.train()
