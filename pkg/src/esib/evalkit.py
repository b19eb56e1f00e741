"""Inference-time evaluation: answer/expression accuracy, Diversity, solving."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import torch

from .corpus import Problem
from .decoder import beam_search
from .expr import (
    ExprError,
    ExprTree,
    QuantityMap,
    abstract_quantities,
    answers_match,
    evaluate,
    from_preorder,
    preorder_string,
    to_infix,
    to_preorder,
)
from .network import ESIBNet, make_batch
from .objectives import AlignmentError


@dataclass
class ProblemRecord:
    id: str
    predicted: ExprTree | None
    predicted_answer: float | None
    answer_correct: bool
    expression_match: bool

    def to_dict(self, qmap: QuantityMap | None = None) -> dict:
        return {
            "id": self.id,
            "predicted": preorder_string(self.predicted) if self.predicted is not None else None,
            "predicted_infix": to_infix(self.predicted, qmap) if self.predicted is not None else None,
            "predicted_answer": self.predicted_answer,
            "answer_correct": self.answer_correct,
            "expression_match": self.expression_match,
        }


@dataclass
class EvalReport:
    answer_acc: float
    expression_acc: float
    records: list[ProblemRecord] = field(default_factory=list)

    @property
    def diversity(self) -> float:
        return self.answer_acc - self.expression_acc

    def summary(self) -> dict:
        return {
            "n": len(self.records),
            "answer_acc": self.answer_acc,
            "expression_acc": self.expression_acc,
            "diversity": self.diversity,
        }


def compute_metrics(predictions: Mapping[str, ExprTree | None], gold: Sequence[Problem]) -> EvalReport:
    """Score top-1 predictions keyed by problem id.

    A gold problem without a prediction counts as wrong on both axes.
    """
    known = {p.id for p in gold}
    unknown = [pid for pid in predictions if pid not in known]
    if unknown:
        raise AlignmentError(f"predictions for unknown problem ids: {unknown[:5]}")
    records = []
    for p in sorted(gold, key=lambda p: p.id):
        tree = predictions.get(p.id)
        value = None
        expr_ok = tree is not None and to_preorder(tree) == to_preorder(p.target)
        ans_ok = expr_ok
        if tree is not None:
            try:
                value = evaluate(tree, p.qmap)
                ans_ok = ans_ok or answers_match(value, p.answer)
            except ExprError:
                value = None
        records.append(ProblemRecord(p.id, tree, value, ans_ok, expr_ok))
    n = len(records)
    answer_acc = sum(r.answer_correct for r in records) / n if n else 0.0
    expression_acc = sum(r.expression_match for r in records) / n if n else 0.0
    return EvalReport(answer_acc, expression_acc, records)


@dataclass
class Solution:
    infix: str
    preorder: str
    answer: float
    score: float


@torch.no_grad()
def rank_solutions(
    net: ESIBNet, problem_tokens: Sequence[str], qmap: QuantityMap, beam: int = 5, max_len: int = 50,
    diagnostics: list[str] | None = None,
) -> list[Solution]:
    net.eval()
    fake = Problem.__new__(Problem)
    object.__setattr__(fake, "id", "query")
    object.__setattr__(fake, "text", tuple(problem_tokens))
    batch = make_batch([fake], net.vocab, net.config.max_text_length, with_targets=False)
    enc = net.encode(batch)
    latent = net.compressor(enc.pooled, None)
    result = beam_search(net.decoder, enc.select(0), latent.initial_state[0], beam, max_len)
    if diagnostics is not None:
        diagnostics.extend(result.diagnostics)
    solutions = []
    for hyp in result.hypotheses:
        tree = from_preorder([net.output_token(t) for t in hyp.tokens])
        try:
            value = evaluate(tree, qmap)
        except ExprError as exc:
            if diagnostics is not None:
                diagnostics.append(f"dropped {preorder_string(tree)}: {exc}")
            continue
        solutions.append(Solution(to_infix(tree, qmap), preorder_string(tree), value, hyp.score))
    return solutions


def solve(problem_text: str, checkpoint: str | Path | ESIBNet, beam: int = 5, max_len: int = 50) -> list[Solution]:
    """Ranked solutions (infix, pre-order, answer, log-prob score) for raw text."""
    net = checkpoint if isinstance(checkpoint, ESIBNet) else ESIBNet.load(checkpoint)
    tokens, qmap = abstract_quantities(problem_text, net.vocab.max_slots)
    return rank_solutions(net, tokens, qmap, beam, max_len)


@torch.no_grad()
def predict(net: ESIBNet, problems: Sequence[Problem], beam: int = 5, max_len: int = 50) -> dict[str, ExprTree | None]:
    """Top-1 beam prediction per problem (z = mu, no dropout)."""
    net.eval()
    out: dict[str, ExprTree | None] = {}
    chunk = 64
    for i in range(0, len(problems), chunk):
        part = problems[i : i + chunk]
        batch = make_batch(part, net.vocab, net.config.max_text_length, with_targets=False)
        enc = net.encode(batch)
        latent = net.compressor(enc.pooled, None)
        for j, p in enumerate(part):
            result = beam_search(net.decoder, enc.select(j), latent.initial_state[j], beam, max_len)
            out[p.id] = (
                from_preorder([net.output_token(t) for t in result.hypotheses[0].tokens])
                if result.hypotheses else None
            )
    return out


def evaluate_model(net: ESIBNet, problems: Sequence[Problem], beam: int = 5, max_len: int = 50) -> EvalReport:
    return compute_metrics(predict(net, problems, beam, max_len), problems)


def format_table(rows: Sequence[tuple[str, EvalReport]]) -> str:
    """Plain-text table with Answer-Acc / Equation-Acc / Diversity columns (percent)."""
    width = max([len("Model")] + [len(name) for name, _ in rows])
    lines = [f"{'Model':<{width}}  Answer-Acc  Equation-Acc  Diversity"]
    for name, r in rows:
        lines.append(
            f"{name:<{width}}  {100 * r.answer_acc:10.1f}  {100 * r.expression_acc:12.1f}  {100 * r.diversity:9.1f}"
        )
    return "\n".join(lines)


def write_report(report: EvalReport, gold: Sequence[Problem], out_dir: str | Path, name: str = "eval") -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    qmaps = {p.id: p.qmap for p in gold}
    with (out / f"{name}_records.jsonl").open("w") as fh:
        for r in report.records:
            fh.write(json.dumps(r.to_dict(qmaps.get(r.id)), ensure_ascii=False) + "\n")
    (out / f"{name}_summary.json").write_text(json.dumps(report.summary(), indent=2) + "\n")
    (out / f"{name}_table.txt").write_text(format_table([(name, report)]) + "\n")
