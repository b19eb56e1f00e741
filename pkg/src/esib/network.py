"""One encoder-compressor-decoder network and its batch plumbing."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .corpus import CLS, Problem, Vocabulary
from .decoder import BatchTrace, TreeDecoder
from .encoder import EncodedBatch, EncoderConfig, ProblemEncoder, truncate
from .expr import ExprToken, is_slot_token, slot_index, to_preorder
from .vib import Compressor, LatentBottleneck


@dataclass(frozen=True)
class ModelConfig:
    hidden_dim: int = 64
    embedding_dim: int = 64
    latent_dim: int = 16
    dropout: float = 0.5
    max_text_length: int = 150


@dataclass
class Batch:
    ids: list[str]
    word_ids: torch.Tensor
    slot_ids: torch.Tensor
    lengths: torch.Tensor
    targets: list[list[int]]

    def __len__(self) -> int:
        return len(self.ids)


def target_ids(problem: Problem, vocab: Vocabulary) -> list[int]:
    return [vocab.output_to_id[str(t)] for t in to_preorder(problem.target)]


def make_batch(problems: Sequence[Problem], vocab: Vocabulary, max_length: int = 150, with_targets: bool = True) -> Batch:
    rows, slots = [], []
    for p in problems:
        words = [CLS] + truncate(list(p.text), max_length, p.id)
        rows.append(vocab.encode_words(words))
        slots.append([slot_index(w) if is_slot_token(w) and slot_index(w) <= vocab.max_slots else 0 for w in words])
    M = max((len(r) for r in rows), default=1)
    word_ids = torch.zeros(len(rows), M, dtype=torch.long)
    slot_ids = torch.zeros(len(rows), M, dtype=torch.long)
    for i, (r, s) in enumerate(zip(rows, slots)):
        word_ids[i, : len(r)] = torch.tensor(r)
        slot_ids[i, : len(s)] = torch.tensor(s)
    lengths = torch.tensor([len(r) for r in rows], dtype=torch.long)
    targets = [target_ids(p, vocab) for p in problems] if with_targets else []
    return Batch([p.id for p in problems], word_ids, slot_ids, lengths, targets)


@dataclass
class NetOutput:
    encoded: EncodedBatch
    latent: LatentBottleneck
    trace: BatchTrace


class ESIBNet(nn.Module):
    def __init__(self, vocab: Vocabulary, config: ModelConfig = ModelConfig()):
        super().__init__()
        self.vocab = vocab
        self.config = config
        self.encoder = ProblemEncoder(
            EncoderConfig(
                vocab_size=len(vocab),
                embedding_dim=config.embedding_dim,
                hidden_dim=config.hidden_dim,
                max_slots=vocab.max_slots,
                max_length=config.max_text_length,
                dropout=config.dropout,
            )
        )
        self.compressor = Compressor(config.hidden_dim, config.latent_dim)
        self.decoder = TreeDecoder(
            config.hidden_dim, config.embedding_dim, vocab.n_ops, vocab.n_consts, vocab.max_slots, config.dropout
        )

    def reset_parameters(self, seed: int) -> None:
        """Uniform init in +-1/sqrt(d) from a dedicated generator."""
        gen = torch.Generator().manual_seed(seed % (2**63))
        bound = 1.0 / math.sqrt(self.config.hidden_dim)
        with torch.no_grad():
            for p in self.parameters():
                p.copy_(torch.empty_like(p).uniform_(-bound, bound, generator=gen))

    def encode(self, batch: Batch) -> EncodedBatch:
        enc = self.encoder(batch.word_ids, batch.slot_ids, batch.lengths)
        dtype = next(self.parameters()).dtype
        if enc.states.dtype != dtype:
            raise TypeError("parameter/activation dtype mismatch")
        return enc

    def forward(self, batch: Batch, eps: torch.Tensor | None) -> NetOutput:
        enc = self.encode(batch)
        latent = self.compressor(enc.pooled, eps)
        trace = self.decoder.teacher_forced(enc, latent.initial_state, batch.targets)
        return NetOutput(enc, latent, trace)

    def output_token(self, token_id: int) -> ExprToken:
        return ExprToken.parse(self.vocab.output_tokens[token_id])

    # ------------------------------------------------------------------
    # checkpoints: flat named arrays with config and vocabulary embedded

    def save(self, path: str | Path, extra: dict | None = None) -> None:
        arrays = {f"param/{k}": v.detach().cpu().numpy() for k, v in self.state_dict().items()}
        meta = {"model": asdict(self.config), "vocab": self.vocab.to_dict(), "extra": extra or {}}
        arrays["__meta__"] = np.array(json.dumps(meta))
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def load(cls, path: str | Path) -> "ESIBNet":
        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(str(data["__meta__"]))
            net = cls(Vocabulary.from_dict(meta["vocab"]), ModelConfig(**meta["model"]))
            state = {k[len("param/"):]: torch.from_numpy(data[k].copy()) for k in data.files if k.startswith("param/")}
        dtype = next(iter(state.values())).dtype
        net.to(dtype)
        net.load_state_dict(state)
        net.checkpoint_meta = meta
        return net
