"""Compact trainable problem encoder.

A bidirectional GRU (two directional passes) over word embeddings, with a pooling marker prepended
at position 0 and every quantity slot ``Ni`` embedded through a learnable
quantity table instead of the word table.  Both directions are projected
to the decoder width ``d``; the projected state at position 0 is the
pooled latent ``v``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import torch
from torch import nn

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    embedding_dim: int = 64
    hidden_dim: int = 64
    max_slots: int = 10
    max_length: int = 150
    dropout: float = 0.5

    def __post_init__(self):
        if min(self.vocab_size, self.embedding_dim, self.hidden_dim, self.max_slots) < 1:
            raise ValueError("encoder dimensions must be >= 1")


@dataclass
class EncodedBatch:
    """Encoder output for a padded batch.

    ``states`` is (B, M, d) with the pooling marker at position 0,
    ``quantities`` is (B, max_slots, d) holding the encoded state at the
    first occurrence of each slot (zeros where absent) and ``n_slots``
    counts the slots usable by the decoder.
    """

    states: torch.Tensor
    mask: torch.Tensor
    pooled: torch.Tensor
    quantities: torch.Tensor
    n_slots: torch.Tensor
    slot_positions: list[list[int]]

    def __len__(self) -> int:
        return self.states.shape[0]

    def select(self, i: int) -> "EncodedProblem":
        m = int(self.mask[i].sum())
        k = int(self.n_slots[i])
        return EncodedProblem(
            states=self.states[i, :m],
            pooled=self.pooled[i],
            quantities=self.quantities[i, :k],
            slot_positions=self.slot_positions[i],
        )


@dataclass
class EncodedProblem:
    states: torch.Tensor
    pooled: torch.Tensor
    quantities: torch.Tensor
    slot_positions: list[int]


class ProblemEncoder(nn.Module):
    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        self.embedding = nn.Embedding(config.vocab_size, config.embedding_dim, padding_idx=0)
        self.quantity_table = nn.Parameter(torch.empty(config.max_slots, config.embedding_dim))
        self.rnn_forward = nn.GRU(config.embedding_dim, config.hidden_dim, batch_first=True)
        self.rnn_backward = nn.GRU(config.embedding_dim, config.hidden_dim, batch_first=True)
        self.project = nn.Linear(2 * config.hidden_dim, config.hidden_dim)
        self.dropout = nn.Dropout(config.dropout)
        nn.init.normal_(self.quantity_table)

    def forward(self, word_ids: torch.Tensor, slot_ids: torch.Tensor, lengths: torch.Tensor) -> EncodedBatch:
        """Encode a padded batch.

        ``word_ids``/``slot_ids`` are (B, M) with the pooling marker already
        at position 0; ``slot_ids`` holds ``i`` where the token is ``Ni`` and
        0 elsewhere.  The word embedding is used only where ``slot_ids`` is 0,
        so encodings depend on slot identity and never on numeric values.
        """
        B, M = word_ids.shape
        words = self.embedding(word_ids)
        table = torch.cat([torch.zeros_like(self.quantity_table[:1]), self.quantity_table], 0)
        slots = table[slot_ids]
        emb = torch.where((slot_ids > 0).unsqueeze(-1), slots, words)
        emb = self.dropout(emb)
        # right-padded sequences: the backward pass runs over each sequence
        # reversed within its own length so padding never leaks into it
        steps = torch.arange(M)
        mask = steps.unsqueeze(0) < lengths.unsqueeze(1)
        rev = (lengths.unsqueeze(1) - 1 - steps).clamp_min(0)
        rev = torch.where(mask, rev, steps.unsqueeze(0).expand(B, M))
        rev_e = rev.unsqueeze(-1)
        fwd, _ = self.rnn_forward(emb)
        bwd, _ = self.rnn_backward(emb.gather(1, rev_e.expand(-1, -1, emb.shape[-1])))
        bwd = bwd.gather(1, rev_e.expand(-1, -1, bwd.shape[-1]))
        states = torch.tanh(self.project(torch.cat([fwd, bwd], -1)))
        states = states * mask.unsqueeze(-1)

        n_q = self.config.max_slots
        positions: list[list[int]] = []
        gather = torch.zeros(B, n_q, dtype=torch.long)
        n_slots = torch.zeros(B, dtype=torch.long)
        slot_cpu = slot_ids.tolist()
        for b in range(B):
            first: dict[int, int] = {}
            for pos, s in enumerate(slot_cpu[b][: int(lengths[b])]):
                if s and s not in first:
                    first[s] = pos
            # slots must be contiguous from N1 to be addressable
            k = 0
            while k + 1 in first:
                k += 1
            pos_list = [first[i] for i in range(1, k + 1)]
            positions.append(pos_list)
            n_slots[b] = k
            if k:
                gather[b, :k] = torch.tensor(pos_list)
        quantities = torch.gather(states, 1, gather.unsqueeze(-1).expand(B, n_q, states.shape[-1]))
        qmask = torch.arange(n_q).unsqueeze(0) < n_slots.unsqueeze(1)
        quantities = quantities * qmask.unsqueeze(-1)
        return EncodedBatch(states, mask, states[:, 0], quantities, n_slots, positions)


def truncate(word_ids: list[int], max_length: int, problem_id: str = "") -> list[int]:
    if len(word_ids) > max_length:
        log.warning("problem %s truncated from %d to %d tokens", problem_id, len(word_ids), max_length)
        return word_ids[:max_length]
    return word_ids
