"""Input formatting and the small self-attention text encoder.

Mention inputs are laid out as ``[CLS] left [MS] mention [ME] right`` and
entity inputs as ``[CLS] title [ENT] description``.  The encoder is a
pre-norm transformer with learned positional embeddings; its output row 0 is
the sentence vector.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

PAD, UNK, CLS, MS, ME, ENT = "[PAD]", "[UNK]", "[CLS]", "[MS]", "[ME]", "[ENT]"
RESERVED = (PAD, UNK, CLS, MS, ME, ENT)

_TOKEN_RE = re.compile(r"[a-z0-9]+(?:['-][a-z0-9]+)*|[^\sa-z0-9]")


def split_words(text: str) -> list[str]:
    """Lowercase and split into word and punctuation tokens."""
    return _TOKEN_RE.findall(text.lower())


class Vocabulary:
    """Token to id map with a fixed reserved block at ids 0..5."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list[str] = list(RESERVED)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(self.itos)}
        for tok in tokens:
            self.add(tok)

    def add(self, token: str) -> int:
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def id(self, token: str) -> int:
        return self.stoi.get(token, self.stoi[UNK])

    def ids(self, tokens: Iterable[str]) -> list[int]:
        return [self.id(t) for t in tokens]

    @property
    def pad_id(self) -> int:
        return self.stoi[PAD]

    @classmethod
    def build(cls, texts: Iterable[str], min_count: int = 1) -> "Vocabulary":
        counts = Counter(tok for text in texts for tok in split_words(text))
        # sorted for a vocabulary independent of corpus order
        kept = sorted(t for t, c in counts.items() if c >= min_count and t not in RESERVED)
        return cls(kept)

    def save(self, path: str | Path) -> None:
        """One non-reserved token per line; line n holds id ``len(RESERVED) + n``."""
        Path(path).write_text("".join(t + "\n" for t in self.itos[len(RESERVED):]), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(lines)


@dataclass(frozen=True)
class TokenizedContext:
    """One formatted encoder input.

    ``raw_positions[i]`` is the position in ``ids`` of raw-context token ``i``
    or -1 when truncation dropped it.  The raw context is ``left + mention +
    right`` on the mention side and the description on the entity side.
    """

    ids: tuple[int, ...]
    tokens: tuple[str, ...]
    kind: str
    span: tuple[int, int]
    raw_positions: tuple[int, ...]

    @property
    def mention_span(self) -> tuple[int, int] | None:
        return self.span if self.kind == "mention" else None

    @property
    def title_span(self) -> tuple[int, int] | None:
        return self.span if self.kind == "entity" else None

    def __len__(self) -> int:
        return len(self.ids)


def tokenize_mention(
    context_left: str | Sequence[str],
    mention: str | Sequence[str],
    context_right: str | Sequence[str],
    vocab: Vocabulary,
    max_len: int = 128,
) -> TokenizedContext:
    """Format ``[CLS] left [MS] mention [ME] right``.

    Over-length contexts lose tokens from both far ends, keeping the mention
    centered; the mention and its markers are never cut.
    """
    left = _words(context_left)
    mid = _words(mention)
    right = _words(context_right)
    if not mid:
        raise ValueError("mention is empty")
    if len(mid) + 3 > max_len:
        raise ValueError(f"mention of {len(mid)} tokens plus markers exceeds max_len={max_len}")
    budget = max_len - 3 - len(mid)
    if len(left) + len(right) <= budget:
        n_left, n_right = len(left), len(right)
    else:
        n_left = min(len(left), max(budget // 2, budget - len(right)))
        n_right = min(len(right), budget - n_left)
    kept_left = left[len(left) - n_left:]
    kept_right = right[:n_right]
    tokens = [CLS, *kept_left, MS, *mid, ME, *kept_right]

    positions = [-1] * (len(left) - n_left) + list(range(1, 1 + n_left))
    start = 2 + n_left
    positions += list(range(start, start + len(mid)))
    after = start + len(mid) + 1
    positions += list(range(after, after + n_right)) + [-1] * (len(right) - n_right)
    return TokenizedContext(
        ids=tuple(vocab.ids(tokens)),
        tokens=tuple(tokens),
        kind="mention",
        span=(start, start + len(mid)),
        raw_positions=tuple(positions),
    )


def tokenize_entity(
    title: str | Sequence[str],
    description: str | Sequence[str],
    vocab: Vocabulary,
    max_len: int = 128,
) -> TokenizedContext:
    """Format ``[CLS] title [ENT] description``, cutting the description tail."""
    head = _words(title)
    desc = _words(description)
    if not head:
        raise ValueError("entity title is empty")
    if len(head) + 2 > max_len:
        raise ValueError(f"title of {len(head)} tokens does not fit max_len={max_len}")
    n_desc = min(len(desc), max_len - 2 - len(head))
    tokens = [CLS, *head, ENT, *desc[:n_desc]]
    base = 2 + len(head)
    positions = list(range(base, base + n_desc)) + [-1] * (len(desc) - n_desc)
    return TokenizedContext(
        ids=tuple(vocab.ids(tokens)),
        tokens=tuple(tokens),
        kind="entity",
        span=(1, 1 + len(head)),
        raw_positions=tuple(positions),
    )


def _words(text: str | Sequence[str]) -> list[str]:
    return split_words(text) if isinstance(text, str) else list(text)


# ---------------------------------------------------------------- encoder


@dataclass
class EncoderOutput:
    Y: Tensor
    lengths: np.ndarray
    attention: np.ndarray | None = None

    @property
    def sentence_vec(self) -> Tensor:
        return self.Y[:, 0, :]


class TextEncoder:
    """Pre-norm transformer encoder over padded id batches.

    ``params`` maps names to tracked tensors.  The final-block attention is
    kept (head-averaged, detached) for probing.
    """

    def __init__(
        self,
        vocab_size: int,
        dim: int = 64,
        max_len: int = 128,
        n_layers: int = 2,
        n_heads: int = 4,
        ffn_dim: int | None = None,
        rng: np.random.Generator | None = None,
        pad_id: int = 0,
    ):
        if dim % n_heads:
            raise ValueError(f"dim={dim} is not divisible by n_heads={n_heads}")
        rng = rng or np.random.default_rng(0)
        self.vocab_size, self.dim, self.max_len = vocab_size, dim, max_len
        self.n_layers, self.n_heads = n_layers, n_heads
        self.ffn_dim = ffn_dim or 2 * dim
        self.pad_id = pad_id
        p: dict[str, Tensor] = {}
        p["tok_emb"] = _param(rng.normal(0.0, 0.1, (vocab_size, dim)))
        p["pos_emb"] = _param(rng.normal(0.0, 0.1, (max_len, dim)))
        for i in range(n_layers):
            pre = f"block{i}."
            p[pre + "ln1.g"] = _param(np.ones(dim))
            p[pre + "ln1.b"] = _param(np.zeros(dim))
            for name in ("wq", "wk", "wv", "wo"):
                p[pre + name] = _param(_glorot(rng, dim, dim))
            p[pre + "bo"] = _param(np.zeros(dim))
            p[pre + "ln2.g"] = _param(np.ones(dim))
            p[pre + "ln2.b"] = _param(np.zeros(dim))
            p[pre + "w1"] = _param(_glorot(rng, dim, self.ffn_dim))
            p[pre + "b1"] = _param(np.zeros(self.ffn_dim))
            p[pre + "w2"] = _param(_glorot(rng, self.ffn_dim, dim))
            p[pre + "b2"] = _param(np.zeros(dim))
        self.params = p

    def pad(self, contexts: Sequence[TokenizedContext]) -> tuple[np.ndarray, np.ndarray]:
        lengths = np.array([len(tc) for tc in contexts], dtype=np.intp)
        width = int(lengths.max())
        ids = np.full((len(contexts), width), self.pad_id, dtype=np.intp)
        for row, tc in enumerate(contexts):
            ids[row, : len(tc)] = tc.ids
        return ids, lengths

    def encode(self, contexts: Sequence[TokenizedContext]) -> EncoderOutput:
        ids, lengths = self.pad(contexts)
        return self.encode_ids(ids, lengths)

    def encode_ids(self, ids: np.ndarray, lengths: np.ndarray) -> EncoderOutput:
        p = self.params
        B, L = ids.shape
        if L > self.max_len:
            raise ValueError(f"sequence length {L} exceeds max_len={self.max_len}")
        if ids.size and (ids.min() < 0 or ids.max() >= self.vocab_size):
            raise IndexError(f"token id out of range for vocabulary of size {self.vocab_size}")
        key_mask = (np.arange(L)[None, :] < lengths[:, None])[:, None, None, :]
        H, dh = self.n_heads, self.dim // self.n_heads
        x = ad.take(p["tok_emb"], ids) + p["pos_emb"][:L]
        attn = None
        for i in range(self.n_layers):
            pre = f"block{i}."
            h = ad.layer_norm(x, p[pre + "ln1.g"], p[pre + "ln1.b"])
            q = _heads(h @ p[pre + "wq"], B, L, H, dh)
            k = _heads(h @ p[pre + "wk"], B, L, H, dh)
            v = _heads(h @ p[pre + "wv"], B, L, H, dh)
            scores = ad.scale(q @ ad.swapaxes(k, -1, -2), 1.0 / np.sqrt(dh))
            a = ad.softmax(scores, axis=-1, mask=key_mask)
            ctx = ad.reshape(ad.swapaxes(a @ v, 1, 2), (B, L, self.dim))
            x = x + (ctx @ p[pre + "wo"] + p[pre + "bo"])
            h2 = ad.layer_norm(x, p[pre + "ln2.g"], p[pre + "ln2.b"])
            ff = ad.relu(h2 @ p[pre + "w1"] + p[pre + "b1"]) @ p[pre + "w2"] + p[pre + "b2"]
            x = x + ff
            attn = a.data
        head_avg = None if attn is None else attn.mean(axis=1)
        return EncoderOutput(Y=x, lengths=lengths, attention=head_avg)

    def cls_attention(self, contexts: Sequence[TokenizedContext]) -> list[np.ndarray]:
        """Final-block, head-averaged attention from position 0 to each token."""
        if self.n_layers == 0:
            raise ValueError("encoder has no attention blocks")
        out = self.encode(contexts)
        return [out.attention[b, 0, : len(tc)].copy() for b, tc in enumerate(contexts)]


def _heads(x: Tensor, B: int, L: int, H: int, dh: int) -> Tensor:
    return ad.swapaxes(ad.reshape(x, (B, L, H, dh)), 1, 2)


def _param(values: np.ndarray) -> Tensor:
    return Tensor(values, requires_grad=True)


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, shape or (fan_in, fan_out))
