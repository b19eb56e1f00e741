"""Goal-driven tree decoder.

Expressions are produced in pre-order.  Each step pops a goal vector,
refines it (with the embedding of the completed left sibling when the goal
is a right child), attends over the encoder states, and predicts a token.
Operators spawn left/right child goals; leaves close subtrees, which are
merged bottom-up into subtree embeddings.

Two execution paths share the same node functions:

* :meth:`TreeDecoder.teacher_forced` processes a whole batch of known
  target trees level by level (subtree embeddings bottom-up by height,
  goals top-down by depth), which is what training uses;
* :class:`DecoderState` plus :meth:`TreeDecoder.step` advance one token at
  a time for greedy and beam decoding.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .encoder import EncodedBatch, EncodedProblem
from .expr import BindingError, ExprToken, ExprTree, from_preorder

log = logging.getLogger(__name__)


class DecoderStateError(RuntimeError):
    pass


class _Gate(nn.Module):
    """tanh(W x) * sigmoid(W_g x)."""

    def __init__(self, n_in: int, n_out: int):
        super().__init__()
        self.value = nn.Linear(n_in, n_out)
        self.gate = nn.Linear(n_in, n_out)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.tanh(self.value(x)) * torch.sigmoid(self.gate(x))


@dataclass
class NodeOutput:
    log_probs: torch.Tensor  # (n, V), -inf on masked slots
    hidden: torch.Tensor  # (n, d)
    goal: torch.Tensor  # refined goal g
    context: torch.Tensor  # attention context G
    attention: torch.Tensor  # (n, M)


@dataclass
class StepOutput:
    distribution: torch.Tensor
    hidden: torch.Tensor
    context: torch.Tensor


@dataclass
class DecodeTrace:
    """Teacher-forced outputs for one problem (steps in pre-order)."""

    log_probs: torch.Tensor  # (n, V)
    hidden: torch.Tensor  # (n, d)
    targets: torch.Tensor  # (n,)

    @property
    def steps(self) -> list[StepOutput]:
        return [
            StepOutput(self.log_probs[i].exp(), self.hidden[i], None) for i in range(len(self.targets))
        ]

    @property
    def y_tree(self) -> torch.Tensor:
        return self.hidden.reshape(-1)

    @property
    def y_mean(self) -> torch.Tensor:
        return self.hidden.mean(0)

    def nll(self) -> torch.Tensor:
        return -self.log_probs.gather(1, self.targets.unsqueeze(1)).sum()

    def __len__(self) -> int:
        return len(self.targets)


@dataclass
class BatchTrace:
    """Teacher-forced outputs for a batch; nodes sorted by (problem, step)."""

    log_probs: torch.Tensor  # (N, V)
    hidden: torch.Tensor  # (N, d)
    targets: torch.Tensor  # (N,)
    problem: torch.Tensor  # (N,) problem index of each node
    n_problems: int

    def per_problem_sum(self, values: torch.Tensor) -> torch.Tensor:
        out = values.new_zeros(self.n_problems)
        return out.index_add(0, self.problem, values)

    def nll(self) -> torch.Tensor:
        """Per-problem negative log-likelihood of the forced targets."""
        picked = self.log_probs.gather(1, self.targets.unsqueeze(1)).squeeze(1)
        return -self.per_problem_sum(picked)

    def hidden_mean(self) -> torch.Tensor:
        counts = torch.bincount(self.problem, minlength=self.n_problems).to(self.hidden.dtype)
        sums = self.hidden.new_zeros(self.n_problems, self.hidden.shape[1]).index_add(0, self.problem, self.hidden)
        return sums / counts.clamp_min(1).unsqueeze(1)

    def problem_trace(self, i: int) -> DecodeTrace:
        sel = (self.problem == i).nonzero().squeeze(1)
        return DecodeTrace(self.log_probs[sel], self.hidden[sel], self.targets[sel])

    def detach(self) -> "BatchTrace":
        return BatchTrace(self.log_probs.detach(), self.hidden.detach(), self.targets, self.problem, self.n_problems)


@dataclass
class TreeLayout:
    """Parent/child structure of a batch of pre-order target sequences."""

    tokens: np.ndarray
    problem: np.ndarray
    left: np.ndarray  # child index or -1
    right: np.ndarray
    sibling: np.ndarray  # completed left sibling of a right child, or -1
    depth: np.ndarray
    height: np.ndarray

    @classmethod
    def build(cls, sequences: Sequence[Sequence[int]], n_ops: int) -> "TreeLayout":
        tokens, problem, left, right, sibling, depth = [], [], [], [], [], []
        for b, seq in enumerate(sequences):
            base = len(tokens)
            # stack of (parent node index, which side to fill next)
            pending: list[list[int]] = []
            for j, tok in enumerate(seq):
                idx = base + j
                tokens.append(tok)
                problem.append(b)
                left.append(-1)
                right.append(-1)
                sibling.append(-1)
                if pending:
                    parent, side = pending[-1]
                    if side == 0:
                        left[parent] = idx
                        pending[-1][1] = 1
                    else:
                        right[parent] = idx
                        sibling[idx] = left[parent]
                        pending.pop()
                    depth.append(depth[parent] + 1)
                elif j == 0:
                    depth.append(0)
                else:
                    raise DecoderStateError(f"sequence {b} continues after a complete tree")
                if tok < n_ops:
                    pending.append([idx, 0])
            if pending or not seq:
                raise DecoderStateError(f"sequence {b} is not a complete pre-order tree")
        n = len(tokens)
        left_a, right_a = np.array(left, dtype=np.int64), np.array(right, dtype=np.int64)
        height = np.zeros(n, dtype=np.int64)
        for idx in range(n - 1, -1, -1):
            if left_a[idx] >= 0:
                height[idx] = 1 + max(height[left_a[idx]], height[right_a[idx]])
        return cls(
            np.array(tokens, dtype=np.int64), np.array(problem, dtype=np.int64),
            left_a, right_a, np.array(sibling, dtype=np.int64), np.array(depth, dtype=np.int64), height,
        )


class TreeDecoder(nn.Module):
    def __init__(
        self,
        hidden_dim: int,
        embedding_dim: int,
        n_ops: int,
        n_consts: int,
        max_slots: int,
        dropout: float = 0.5,
    ):
        super().__init__()
        d, e = hidden_dim, embedding_dim
        self.hidden_dim = d
        self.n_ops, self.n_consts, self.max_slots = n_ops, n_consts, max_slots
        self.refine_root = _Gate(d, d)
        self.refine_right = _Gate(2 * d, d)
        self.attn_keys = nn.Linear(d, d, bias=False)
        self.attn_query = nn.Linear(2 * d, d)
        self.attn_score = nn.Linear(d, 1, bias=False)
        self.to_hidden = nn.Linear(2 * d, d)
        self.op_scores = nn.Linear(d, n_ops)
        self.leaf_attn = nn.Linear(2 * d, d)
        self.leaf_score = nn.Linear(d, 1, bias=False)
        self.const_embedding = nn.Parameter(torch.empty(n_consts, d))
        self.op_embedding = nn.Embedding(n_ops, e)
        self.left_child = _Gate(2 * d + e, d)
        self.right_child = _Gate(2 * d + e, d)
        self.merge_gate = _Gate(2 * d + e, d)
        self.dropout = nn.Dropout(dropout)
        nn.init.normal_(self.const_embedding)

    @property
    def n_outputs(self) -> int:
        return self.n_ops + self.n_consts + self.max_slots

    @property
    def slot_offset(self) -> int:
        return self.n_ops + self.n_consts

    # ------------------------------------------------------------------
    # node functions shared by both execution paths

    def attention_weights(self, goal, root_goal, keys, mask) -> torch.Tensor:
        """Additive attention; ``keys`` is (n, M, d), ``mask`` (n, M)."""
        query = self.attn_query(torch.cat([goal, root_goal], -1)).unsqueeze(1)
        energy = self.attn_score(torch.tanh(keys + query)).squeeze(-1)
        energy = energy.masked_fill(~mask, -math.inf)
        return torch.softmax(energy, -1)

    def attention_context(self, states, root_goal, goal=None, sibling=None) -> torch.Tensor:
        """Context vector for a single problem given (M, d) encoder states.

        Mirrors the three query cases: a left/root goal alone, or a right
        goal together with its completed left sibling.
        """
        if goal is None:
            goal = root_goal
        g = self.refine(goal.unsqueeze(0), None if sibling is None else sibling.unsqueeze(0))
        keys = self.attn_keys(states).unsqueeze(0)
        mask = torch.ones(1, states.shape[0], dtype=torch.bool)
        w = self.attention_weights(g, root_goal.unsqueeze(0), keys, mask)
        return torch.bmm(w.unsqueeze(1), states.unsqueeze(0)).squeeze(1).squeeze(0)

    def refine(self, goal, sibling=None, has_sibling=None) -> torch.Tensor:
        goal = self.dropout(goal)
        plain = self.refine_root(goal)
        if sibling is None:
            return plain
        with_sib = self.refine_right(torch.cat([goal, self.dropout(sibling)], -1))
        if has_sibling is None:
            return with_sib
        return torch.where(has_sibling.unsqueeze(-1), with_sib, plain)

    def predict(self, goal, context, leaf_candidates, slot_mask) -> tuple[torch.Tensor, torch.Tensor]:
        """Masked log-distribution over the output vocabulary and the step hidden state.

        ``leaf_candidates`` is (n, n_consts + max_slots, d): constant
        embeddings followed by the problem's quantity states.
        """
        hidden = torch.tanh(self.to_hidden(torch.cat([goal, context], -1)))
        ops = self.op_scores(hidden)
        h = hidden.unsqueeze(1).expand(-1, leaf_candidates.shape[1], -1)
        leaves = self.leaf_score(torch.tanh(self.leaf_attn(torch.cat([h, leaf_candidates], -1)))).squeeze(-1)
        scores = torch.cat([ops, leaves], -1)
        allowed = torch.cat([torch.ones_like(slot_mask[:, :1]).expand(-1, self.n_ops + self.n_consts), slot_mask], -1)
        scores = scores.masked_fill(~allowed, -math.inf)
        return torch.log_softmax(scores, -1), hidden

    def spawn_children(self, goal, context, op_ids) -> tuple[torch.Tensor, torch.Tensor]:
        x = torch.cat([self.dropout(goal), self.dropout(context), self.dropout(self.op_embedding(op_ids))], -1)
        return self.left_child(x), self.right_child(x)

    def merge(self, op_embedding, left, right) -> torch.Tensor:
        x = torch.cat([self.dropout(op_embedding), self.dropout(left), self.dropout(right)], -1)
        return self.merge_gate(x)

    def leaf_embedding(self, token_ids, quantities) -> torch.Tensor:
        """Embedding of leaf tokens; ``quantities`` is (n, max_slots, d) aligned with ``token_ids``."""
        const_idx = (token_ids - self.n_ops).clamp(0, self.n_consts - 1)
        slot_idx = (token_ids - self.slot_offset).clamp(0, self.max_slots - 1)
        consts = self.const_embedding[const_idx]
        slots = quantities.gather(1, slot_idx.view(-1, 1, 1).expand(-1, 1, quantities.shape[-1])).squeeze(1)
        return torch.where((token_ids < self.slot_offset).unsqueeze(-1), consts, slots)

    def node_outputs(self, goal, sibling, has_sibling, root_goal, keys, states, mask, leaf_candidates, slot_mask):
        g = self.refine(goal, sibling, has_sibling)
        w = self.attention_weights(g, root_goal, keys, mask)
        context = torch.bmm(w.unsqueeze(1), states).squeeze(1)
        log_probs, hidden = self.predict(g, context, leaf_candidates, slot_mask)
        return NodeOutput(log_probs, hidden, g, context, w)

    def leaf_candidates(self, quantities: torch.Tensor) -> torch.Tensor:
        consts = self.const_embedding.unsqueeze(0).expand(quantities.shape[0], -1, -1)
        return torch.cat([consts, quantities], 1)

    @staticmethod
    def slot_mask(n_slots: torch.Tensor, max_slots: int) -> torch.Tensor:
        return torch.arange(max_slots).unsqueeze(0) < n_slots.unsqueeze(1)

    # ------------------------------------------------------------------
    # teacher forcing

    def teacher_forced(self, enc: EncodedBatch, root_goal: torch.Tensor, targets: Sequence[Sequence[int]]) -> BatchTrace:
        """Follow ``targets`` (output-token ids in pre-order) for every problem."""
        n_slots = enc.n_slots.tolist()
        for b, seq in enumerate(targets):
            for tok in seq:
                if tok >= self.slot_offset and tok - self.slot_offset >= n_slots[b]:
                    raise BindingError(
                        f"target of problem {b} uses slot N{tok - self.slot_offset + 1} "
                        f"but only {n_slots[b]} are available"
                    )
        layout = TreeLayout.build(targets, self.n_ops)
        N = len(layout.tokens)
        d = self.hidden_dim
        tokens = torch.from_numpy(layout.tokens)
        problem = torch.from_numpy(layout.problem)
        dtype = root_goal.dtype

        # subtree embeddings, bottom-up
        subtree = root_goal.new_zeros(N, d)
        leaves = np.nonzero(layout.left < 0)[0]
        if len(leaves):
            li = torch.from_numpy(leaves)
            emb = self.leaf_embedding(tokens[li], enc.quantities[problem[li]])
            subtree = subtree.index_copy(0, li, emb)
        for h in range(1, int(layout.height.max()) + 1):
            idx = torch.from_numpy(np.nonzero(layout.height == h)[0])
            merged = self.merge(
                self.op_embedding(tokens[idx]),
                subtree[torch.from_numpy(layout.left)[idx]],
                subtree[torch.from_numpy(layout.right)[idx]],
            )
            subtree = subtree.index_copy(0, idx, merged)

        # goals and predictions, top-down
        keys_all = self.attn_keys(enc.states)
        cands_all = self.leaf_candidates(enc.quantities)
        smask_all = self.slot_mask(enc.n_slots, self.max_slots)
        goals = root_goal.new_zeros(N, d)
        roots = torch.from_numpy(np.nonzero(layout.depth == 0)[0])
        goals = goals.index_copy(0, roots, root_goal[problem[roots]])
        log_probs = root_goal.new_zeros(N, self.n_outputs)
        hidden = root_goal.new_zeros(N, d)
        left_t = torch.from_numpy(layout.left)
        right_t = torch.from_numpy(layout.right)
        sib_t = torch.from_numpy(layout.sibling)
        for k in range(int(layout.depth.max()) + 1):
            idx = torch.from_numpy(np.nonzero(layout.depth == k)[0])
            b = problem[idx]
            has_sib = sib_t[idx] >= 0
            sib = subtree[sib_t[idx].clamp_min(0)]
            out = self.node_outputs(
                goals[idx], sib, has_sib, root_goal[b], keys_all[b], enc.states[b], enc.mask[b],
                cands_all[b], smask_all[b],
            )
            log_probs = log_probs.index_copy(0, idx, out.log_probs)
            hidden = hidden.index_copy(0, idx, out.hidden)
            is_op = tokens[idx] < self.n_ops
            if is_op.any():
                op_idx = idx[is_op]
                q_l, q_r = self.spawn_children(out.goal[is_op], out.context[is_op], tokens[op_idx])
                goals = goals.index_copy(0, left_t[op_idx], q_l)
                goals = goals.index_copy(0, right_t[op_idx], q_r)
        return BatchTrace(log_probs.to(dtype), hidden, tokens, problem, len(targets))

    # ------------------------------------------------------------------
    # stepwise decoding

    def step(self, states: Sequence["DecoderState"], enc: EncodedProblem, root_goal: torch.Tensor) -> NodeOutput:
        """Pop the next goal of each state and predict; states are not advanced."""
        goal = torch.stack([s.goals[-1] for s in states])
        has_sib = torch.tensor([s.left is not None for s in states])
        sib = torch.stack([s.left if s.left is not None else torch.zeros_like(root_goal) for s in states])
        n = len(states)
        m = enc.states.shape[0]
        keys = self.attn_keys(enc.states).unsqueeze(0).expand(n, -1, -1)
        quantities = _pad_quantities(enc.quantities, self.max_slots).unsqueeze(0).expand(n, -1, -1)
        smask = self.slot_mask(torch.tensor([enc.quantities.shape[0]]), self.max_slots).expand(n, -1)
        return self.node_outputs(
            goal, sib, has_sib, root_goal.unsqueeze(0).expand(n, -1), keys,
            enc.states.unsqueeze(0).expand(n, -1, -1), torch.ones(n, m, dtype=torch.bool),
            self.leaf_candidates(quantities), smask,
        )


def _pad_quantities(q: torch.Tensor, max_slots: int) -> torch.Tensor:
    if q.shape[0] == max_slots:
        return q
    return torch.cat([q, q.new_zeros(max_slots - q.shape[0], q.shape[1])], 0)


@dataclass
class DecoderState:
    """Stacks of one partial expression during stepwise decoding."""

    goals: list
    depths: list = field(default_factory=lambda: [0])
    subtrees: list = field(default_factory=list)  # (embedding, completed?)
    left: torch.Tensor | None = None
    tokens: tuple = ()
    score: float = 0.0
    pushes: int = 1
    pops: int = 0
    merges: int = 0

    @classmethod
    def start(cls, root_goal: torch.Tensor) -> "DecoderState":
        return cls(goals=[root_goal])

    @property
    def done(self) -> bool:
        return not self.goals

    def copy(self) -> "DecoderState":
        return DecoderState(
            list(self.goals), list(self.depths), list(self.subtrees), self.left, self.tokens, self.score,
            self.pushes, self.pops, self.merges,
        )

    def advance(self, decoder: TreeDecoder, token: int, goal, context, quantities, log_prob: float = 0.0) -> None:
        """Apply ``token`` predicted from the popped goal's refined ``goal``/``context``."""
        if not self.goals:
            raise DecoderStateError("advance on a finished expression")
        self.goals.pop()
        depth = self.depths.pop()
        self.pops += 1
        self.tokens = self.tokens + (token,)
        self.score += log_prob
        tok = torch.tensor([token])
        if token < decoder.n_ops:
            q_l, q_r = decoder.spawn_children(goal.unsqueeze(0), context.unsqueeze(0), tok)
            self.goals.append(q_r[0])
            self.goals.append(q_l[0])
            self.depths += [depth + 1, depth + 1]
            self.pushes += 2
            self.subtrees.append((decoder.op_embedding(tok)[0], False))
            self.left = None
            return
        t = decoder.leaf_embedding(tok, _pad_quantities(quantities, decoder.max_slots).unsqueeze(0))[0]
        while self.subtrees and self.subtrees[-1][1]:
            if len(self.subtrees) < 2:
                raise DecoderStateError("merge needs an operator below the completed subtree")
            sub, _ = self.subtrees.pop()
            op, _ = self.subtrees.pop()
            t = decoder.merge(op.unsqueeze(0), sub.unsqueeze(0), t.unsqueeze(0))[0]
            self.merges += 1
        self.subtrees.append((t, True))
        self.left = t

    def expression(self, decoder: TreeDecoder, output_tokens: Sequence[str]) -> ExprTree:
        return from_preorder([ExprToken.parse(output_tokens[t]) for t in self.tokens])


def feasible_tokens(state: DecoderState, decoder: TreeDecoder, max_len: int, max_depth: int | None) -> torch.Tensor:
    """Tokens that keep the expression completable within ``max_len``/``max_depth``."""
    pending_after_pop = len(state.goals) - 1
    t = len(state.tokens) + 1
    ok = torch.ones(decoder.n_outputs, dtype=torch.bool)
    op_ok = t + pending_after_pop + 2 <= max_len and (max_depth is None or state.depths[-1] < max_depth)
    if not op_ok:
        ok[: decoder.n_ops] = False
    if t + pending_after_pop > max_len:
        ok[:] = False
    return ok


# --------------------------------------------------------------------------
# search


@dataclass
class Hypothesis:
    tokens: tuple[int, ...]
    score: float


@dataclass
class SearchResult:
    hypotheses: list[Hypothesis]
    diagnostics: list[str] = field(default_factory=list)


def _expand(decoder, states, enc, root_goal, max_len, max_depth):
    out = decoder.step(states, enc, root_goal)
    lp = out.log_probs.detach().double()
    for i, s in enumerate(states):
        lp[i, ~feasible_tokens(s, decoder, max_len, max_depth)] = -math.inf
    return out, lp


@torch.no_grad()
def greedy_decode(
    decoder: TreeDecoder,
    enc: EncodedProblem,
    root_goal: torch.Tensor,
    max_len: int = 50,
    max_depth: int | None = None,
) -> DecoderState:
    """Argmax decoding; ties go to the smallest token id."""
    state = DecoderState.start(root_goal)
    while not state.done:
        out, lp = _expand(decoder, [state], enc, root_goal, max_len, max_depth)
        if not torch.isfinite(lp[0]).any():
            raise DecoderStateError("no feasible token")
        tok = int(torch.argmax(lp[0]))
        state.advance(decoder, tok, out.goal[0], out.context[0], enc.quantities, float(lp[0, tok]))
    return state


@torch.no_grad()
def beam_search(
    decoder: TreeDecoder,
    enc: EncodedProblem,
    root_goal: torch.Tensor,
    beam_size: int = 5,
    max_len: int = 50,
    max_depth: int | None = None,
) -> SearchResult:
    """Beam search over pre-order expressions.

    Completed hypotheses keep competing for beam slots, so ``beam_size=1``
    is exactly greedy decoding.  Candidates are ranked by total log-prob,
    ties by token-id sequence.
    """
    if beam_size < 1:
        raise ValueError("beam_size must be >= 1")
    beam = [DecoderState.start(root_goal)]
    while not all(s.done for s in beam):
        active = [s for s in beam if not s.done]
        out, lp = _expand(decoder, active, enc, root_goal, max_len, max_depth)
        candidates = [(s.score, s.tokens, s, None, None) for s in beam if s.done]
        for i, s in enumerate(active):
            row = lp[i]
            finite = torch.isfinite(row).nonzero().squeeze(1).tolist()
            for tok in finite:
                candidates.append((s.score + float(row[tok]), s.tokens + (tok,), s, i, tok))
        if not candidates:
            return SearchResult([], [f"no hypothesis completes within {max_len} tokens"])
        candidates.sort(key=lambda c: (-c[0], c[1]))
        new_beam = []
        for score, _, parent, i, tok in candidates[:beam_size]:
            if i is None:
                new_beam.append(parent)
                continue
            child = parent.copy()
            child.advance(decoder, tok, out.goal[i], out.context[i], enc.quantities, 0.0)
            child.score = score
            new_beam.append(child)
        beam = new_beam
    ranked = sorted(beam, key=lambda s: (-s.score, s.tokens))
    return SearchResult([Hypothesis(s.tokens, s.score) for s in ranked])


@torch.no_grad()
def greedy_decode_batch(
    decoder: TreeDecoder,
    enc: EncodedBatch,
    root_goal: torch.Tensor,
    max_len: int = 50,
) -> list[tuple[int, ...]]:
    """Greedy decoding of every problem in a batch at once (validation fast path)."""
    B = len(enc)
    states = [DecoderState.start(root_goal[b]) for b in range(B)]
    keys_all = decoder.attn_keys(enc.states)
    cands_all = decoder.leaf_candidates(enc.quantities)
    smask_all = decoder.slot_mask(enc.n_slots, decoder.max_slots)
    while True:
        active = [b for b in range(B) if not states[b].done]
        if not active:
            break
        idx = torch.tensor(active)
        goal = torch.stack([states[b].goals[-1] for b in active])
        has_sib = torch.tensor([states[b].left is not None for b in active])
        sib = torch.stack([states[b].left if states[b].left is not None else goal.new_zeros(goal.shape[1]) for b in active])
        out = decoder.node_outputs(
            goal, sib, has_sib, root_goal[idx], keys_all[idx], enc.states[idx], enc.mask[idx],
            cands_all[idx], smask_all[idx],
        )
        lp = out.log_probs.double()
        for j, b in enumerate(active):
            lp[j, ~feasible_tokens(states[b], decoder, max_len, None)] = -math.inf
        toks = torch.argmax(lp, 1).tolist()
        for j, b in enumerate(active):
            states[b].advance(decoder, toks[j], out.goal[j], out.context[j], enc.quantities[b], float(lp[j, toks[j]]))
    return [s.tokens for s in states]
