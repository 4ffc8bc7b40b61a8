"""Mention/entity representations, fusion and scoring.

Each side owns an independent text encoder, hub projection, graph attention
stack and fusion weight.  The representation is ``v = v_sen + lam * v_graph``
where ``v_sen`` is the encoder's row 0 and ``v_graph`` the central node
after the attention stack; pairs score by raw inner product.
"""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .data import Example
from .graph import GraphInit, build_flat, build_hierarchical, init_nodes_batch
from .hgan import HganStack, stack_forward_batch
from .text import TextEncoder, Vocabulary


class EncoderMode(str, enum.Enum):
    FUSED = "fused"
    SENTENCE_ONLY = "sentence_only"
    GRAPH_ONLY = "graph_only"
    NODE_MEAN = "node_mean"
    FLAT_GAT = "flat_gat"


@dataclass
class ModelConfig:
    dim: int = 64
    max_len: int = 128
    enc_layers: int = 2
    enc_heads: int = 4
    ffn_dim: int | None = None
    hgan_layers: int = 3
    hgan_heads: int = 8
    head_merge: str = "mean"
    leaky_slope: float = 0.01
    lambda_init: float = 0.5
    freeze_lambda: bool = False
    mode_mention: str = EncoderMode.FUSED.value
    mode_entity: str = EncoderMode.FUSED.value

    def __post_init__(self):
        EncoderMode(self.mode_mention)
        EncoderMode(self.mode_entity)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def fuse(v_sen: Tensor, v_graph: Tensor, lam: Tensor | float) -> Tensor:
    """``v_sen + lam * v_graph``."""
    if v_sen.shape != v_graph.shape:
        raise ShapeError(f"fuse: {v_sen.shape} vs {v_graph.shape}")
    return ad.add(v_sen, ad.mul(lam, v_graph))


def score(v_m, v_e) -> float:
    v_m, v_e = np.asarray(getattr(v_m, "data", v_m)), np.asarray(getattr(v_e, "data", v_e))
    if v_m.shape != v_e.shape:
        raise ShapeError(f"score: {v_m.shape} vs {v_e.shape}")
    return float(np.dot(v_m, v_e))


def score_matrix(v_m: Tensor, v_e: Tensor) -> Tensor:
    """All-pairs inner products (B_m, B_e) between mention and entity rows."""
    if v_m.shape[-1] != v_e.shape[-1]:
        raise ShapeError(f"score_matrix: widths {v_m.shape[-1]} and {v_e.shape[-1]} differ")
    return ad.matmul(v_m, ad.transpose(v_e))


class SideEncoder:
    """One tower: text encoder, hub projection, attention stack and lambda."""

    def __init__(self, vocab_size: int, cfg: ModelConfig, mode: str, rng: np.random.Generator, pad_id: int = 0):
        self.cfg = cfg
        self.mode = EncoderMode(mode)
        self.text = TextEncoder(
            vocab_size, cfg.dim, cfg.max_len, cfg.enc_layers, cfg.enc_heads, cfg.ffn_dim, rng=rng, pad_id=pad_id
        )
        self.graph_init = GraphInit(cfg.dim, rng)
        self.hgan = HganStack(cfg.dim, cfg.hgan_layers, cfg.hgan_heads, rng, cfg.leaky_slope, cfg.head_merge)
        self.lam = Tensor(np.array(cfg.lambda_init), requires_grad=not cfg.freeze_lambda)

    @property
    def params(self) -> dict[str, Tensor]:
        out = {f"text.{k}": v for k, v in self.text.params.items()}
        out.update({f"graph.{k}": v for k, v in self.graph_init.params.items()})
        out.update({f"hgan.{k}": v for k, v in self.hgan.params.items()})
        out["lambda"] = self.lam
        return out

    def trainable(self) -> dict[str, Tensor]:
        """Parameters the current mode actually reads."""
        p = self.params
        if self.mode is EncoderMode.SENTENCE_ONLY:
            return {k: v for k, v in p.items() if k.startswith("text.")}
        if self.mode is EncoderMode.GRAPH_ONLY:
            p = {k: v for k, v in p.items() if k != "lambda"}
        if self.mode is EncoderMode.NODE_MEAN:
            p = {k: v for k, v in p.items() if not k.startswith("hgan.")}
        if self.mode is EncoderMode.FLAT_GAT:
            p = {k: v for k, v in p.items() if not k.startswith("graph.")}
        return {k: v for k, v in p.items() if v.requires_grad}

    def represent(self, examples: Sequence[Example]) -> Tensor:
        """(B, d) representations for a batch of prepared examples."""
        out = self.text.encode([ex.tc for ex in examples])
        v_sen = out.Y[:, 0, :]
        mode = self.mode
        if mode is EncoderMode.SENTENCE_ONLY:
            return v_sen
        build = build_flat if mode is EncoderMode.FLAT_GAT else build_hierarchical
        graphs = [build(ex.units) for ex in examples]
        nodes = init_nodes_batch(graphs, out.Y, [ex.tc.span for ex in examples], self.graph_init.w_triple)
        if mode is EncoderMode.NODE_MEAN:
            weights = nodes.node_mask / nodes.node_mask.sum(axis=1, keepdims=True)
            pooled = ad.matmul(Tensor(weights[:, None, :]), nodes.H)
            return fuse(v_sen, ad.reshape(pooled, v_sen.shape), self.lam)
        H, _ = stack_forward_batch(nodes, self.hgan)
        v_graph = H[:, 0, :]
        if mode is EncoderMode.GRAPH_ONLY:
            return v_graph
        return fuse(v_sen, v_graph, self.lam)


class BiEncoder:
    """Independent mention and entity towers sharing only the vocabulary."""

    def __init__(self, vocab: Vocabulary, cfg: ModelConfig | None = None, seed: int = 0):
        self.vocab = vocab
        self.cfg = cfg or ModelConfig()
        rng = np.random.default_rng(seed)
        self.mention = SideEncoder(len(vocab), self.cfg, self.cfg.mode_mention, rng, vocab.pad_id)
        self.entity = SideEncoder(len(vocab), self.cfg, self.cfg.mode_entity, rng, vocab.pad_id)

    @property
    def params(self) -> dict[str, Tensor]:
        out = {f"mention.{k}": v for k, v in self.mention.params.items()}
        out.update({f"entity.{k}": v for k, v in self.entity.params.items()})
        return out

    def trainable(self) -> dict[str, Tensor]:
        out = {f"mention.{k}": v for k, v in self.mention.trainable().items()}
        out.update({f"entity.{k}": v for k, v in self.entity.trainable().items()})
        return out

    def batch_scores(self, mentions: Sequence[Example], entities: Sequence[Example]) -> Tensor:
        return score_matrix(self.mention.represent(mentions), self.entity.represent(entities))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.params
        missing = sorted(set(params) - set(state))
        if missing:
            raise KeyError(f"checkpoint lacks parameters: {missing[:5]}")
        for k, p in params.items():
            if state[k].shape != p.shape:
                raise ShapeError(f"{k}: checkpoint shape {state[k].shape} != model shape {p.shape}")
            p.data = np.array(state[k], dtype=p.data.dtype)

    def set_modes(self, mode_mention: str | None = None, mode_entity: str | None = None) -> None:
        if mode_mention is not None:
            self.mention.mode = EncoderMode(mode_mention)
            self.cfg.mode_mention = self.mention.mode.value
        if mode_entity is not None:
            self.entity.mode = EncoderMode(mode_entity)
            self.cfg.mode_entity = self.entity.mode.value

    def meta(self) -> dict:
        return {"model": self.cfg.to_dict(), "vocab": self.vocab.itos[6:]}

    @classmethod
    def from_checkpoint(cls, tensors: dict[str, np.ndarray], meta: dict) -> "BiEncoder":
        model = cls(Vocabulary(meta["vocab"]), ModelConfig.from_dict(meta["model"]), seed=0)
        model.load_state_dict(tensors)
        return model


def represent_all(side: SideEncoder, examples: Sequence[Example], batch_size: int = 64) -> np.ndarray:
    """Encode without recording gradients; returns (n, d)."""
    rows = []
    with ad.no_grad():
        for i in range(0, len(examples), batch_size):
            rows.append(side.represent(examples[i : i + batch_size]).data)
    return np.concatenate(rows, axis=0) if rows else np.zeros((0, side.cfg.dim))
