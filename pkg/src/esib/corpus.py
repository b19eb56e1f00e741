"""Problem corpora: JSON-lines loading, synthetic generation, splits, vocabularies."""

from __future__ import annotations

import json
import logging
import random
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

from .expr import (
    DEFAULT_CONSTANTS,
    MAX_SLOTS,
    OPERATORS,
    ExprError,
    ExprTree,
    QuantityMap,
    abstract_quantities,
    answers_match,
    evaluate,
    format_number,
    parse_infix,
    to_infix,
)

log = logging.getLogger(__name__)

PAD, UNK, CLS = "<pad>", "<unk>", "<cls>"
SPECIAL_TOKENS = (PAD, UNK, CLS)


class CorpusFormatError(ValueError):
    pass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Problem:
    id: str
    text: tuple[str, ...]
    qmap: QuantityMap
    target: ExprTree
    answer: float
    raw_text: str = ""
    expression: str = ""
    family: str = ""

    def __post_init__(self):
        missing = [s for s in self.target.slots() if s > len(self.qmap)]
        if missing:
            raise ExprError(f"{self.id}: target uses unbound slots {missing}")
        value = evaluate(self.target, self.qmap)
        if not answers_match(value, self.answer):
            raise ExprError(f"{self.id}: expression gives {value}, record says {self.answer}")

    @classmethod
    def from_record(
        cls,
        record: dict,
        constants: Sequence[float] = DEFAULT_CONSTANTS,
        max_slots: int = MAX_SLOTS,
    ) -> "Problem":
        text, qmap = abstract_quantities(record["text"], max_slots)
        target = parse_infix(record["expression"], qmap, constants)
        return cls(
            id=str(record["id"]),
            text=tuple(text),
            qmap=qmap,
            target=target,
            answer=float(record["answer"]),
            raw_text=record["text"],
            expression=record["expression"],
            family=record.get("family", ""),
        )

    def to_record(self) -> dict:
        rec = {
            "id": self.id,
            "text": self.raw_text,
            "expression": self.expression or to_infix(self.target, self.qmap),
            "answer": self.answer,
        }
        if self.family:
            rec["family"] = self.family
        return rec


@dataclass
class LoadReport:
    path: str
    loaded: int = 0
    skipped: int = 0
    reasons: Counter = field(default_factory=Counter)

    @property
    def total(self) -> int:
        return self.loaded + self.skipped


def load_corpus_with_report(
    path: str | Path,
    constants: Sequence[float] = DEFAULT_CONSTANTS,
    max_slots: int = MAX_SLOTS,
) -> tuple[list[Problem], LoadReport]:
    path = Path(path)
    report = LoadReport(str(path))
    problems: list[Problem] = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                problems.append(Problem.from_record(json.loads(line), constants, max_slots))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                report.skipped += 1
                report.reasons[type(exc).__name__] += 1
                log.debug("%s:%d skipped: %s", path, lineno, exc)
    report.loaded = len(problems)
    if report.total and report.skipped * 2 > report.total:
        raise CorpusFormatError(
            f"{path}: {report.skipped} of {report.total} records invalid ({dict(report.reasons)})"
        )
    return problems, report


def load_corpus(path: str | Path, **kwargs) -> list[Problem]:
    """Load a JSON-lines corpus, skipping (and logging) invalid records."""
    problems, report = load_corpus_with_report(path, **kwargs)
    if report.skipped:
        log.warning("%s: skipped %d of %d records", path, report.skipped, report.total)
    return problems


def write_corpus(problems: Iterable[Problem], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for p in problems:
            fh.write(json.dumps(p.to_record(), ensure_ascii=False) + "\n")


# --------------------------------------------------------------------------
# synthetic word problems


@dataclass(frozen=True)
class Template:
    """One question type.  ``texts`` are alternative wordings; ``expressions``
    are equivalent solution forms, one of which is picked per problem."""

    family: str
    name: str
    sample: Callable[[random.Random], dict]
    texts: tuple[str, ...]
    expressions: tuple[str, ...]


_NAMES = ("Tom", "Lily", "Uncle Jack", "Mary", "Xiao Ming", "Anna", "Peter", "Grandma")
_ITEMS = ("pencils", "notebooks", "apples", "kites", "books", "cups")

_DISTRACTORS = (
    "There are {k} trees along the road.",
    "The school has {k} classrooms.",
    "{name} is {k} years old.",
    "The shop opened {k} years ago.",
    "A bus carries {k} passengers.",
)


def _ints(lo: int, hi: int, k: int) -> Callable[[random.Random], dict]:
    keys = "abcd"[:k]
    return lambda rng: {key: rng.randint(lo, hi) for key in keys}


def _speed(rng):
    b = rng.randint(2, 9)
    c = rng.randint(1, 8)
    return {"a": rng.randint(5, 60), "b": b, "c": c}


def _clock(rng):
    a = rng.randint(5, 11)
    return {"a": a, "b": a + rng.randint(2, 12), "c": rng.randint(30, 120)}


def _percent(rng):
    p = rng.randint(5, 45)
    q = rng.randint(5, 45)
    return {"p": f"{p}%", "q": f"{q}%", "c": rng.randint(20, 400)}


def _price(rng):
    a, b = rng.randint(2, 12), rng.randint(2, 15)
    return {"a": a, "b": b, "c": a * b + rng.randint(1, 50)}


def _work(rng):
    return {"a": rng.randint(2, 20), "b": rng.randint(2, 20), "c": rng.randint(2, 6)}


def _growth(rng):
    return {"a": rng.randint(10, 200), "b": rng.randint(2, 3), "c": rng.randint(2, 4)}


def _circle(rng):
    return {"r": rng.randint(2, 30)}


BUILTIN_TEMPLATES: tuple[Template, ...] = (
    Template(
        "speed", "car_speed", _speed,
        (
            "From place A to place B, a bicycle travels {a} kilometers per hour and arrives in {b} hours. "
            "If a car takes only {c} hours, how many kilometers per hour does the car travel?",
            "{name} drove from place A to place B in {b} hours at {a} kilometers per hour. "
            "Coming back took {c} hours. What was the speed on the way back?",
        ),
        ("a*b/c", "a/c*b"),
    ),
    Template(
        "speed", "distance", _speed,
        (
            "From place A to place B, a bicycle travels {a} kilometers per hour and arrives in {b} hours. "
            "A car would take {c} hours. How many kilometers is it from place A to place B?",
            "{name} drove from place A to place B in {b} hours at {a} kilometers per hour. "
            "Coming back took {c} hours. How far apart are the two places?",
        ),
        ("a*b", "b*a"),
    ),
    Template(
        "speed", "clock_distance", _clock,
        (
            "A train leaves from place A at {a} o'clock and arrives at place B at {b} o'clock. "
            "The train travels {c} kilometers per hour. How many kilometers is the distance between the two places?",
            "A ship sets off at {a} o'clock and docks at {b} o'clock, sailing {c} kilometers each hour. "
            "How far does it sail?",
        ),
        ("(b-a)*c", "b*c-a*c"),
    ),
    Template(
        "percent", "whole_length", _percent,
        (
            "A car travels {p} of the whole journey from place A to place B in the first hour and {q} "
            "in the second hour, a total of {c} kilometers in two hours. How many kilometers is the total length?",
            "{name} read {p} of a book on Monday and {q} on Tuesday, {c} pages in all. How many pages does the book have?",
        ),
        ("c/(p+q)",),
    ),
    Template(
        "percent", "remaining", _percent,
        (
            "A car travels {p} of the whole journey from place A to place B in the first hour and {q} "
            "in the second hour, a total of {c} kilometers in two hours. How many kilometers are left?",
            "{name} read {p} of a book on Monday and {q} on Tuesday, {c} pages in all. How many pages are still unread?",
        ),
        ("c/(p+q)-c",),
    ),
    Template(
        "price", "change", _price,
        (
            "{name} buys {a} {item} at {b} yuan each and pays with {c} yuan. How much change is given?",
            "Each of the {item} costs {b} yuan. {name} hands over {c} yuan for {a} of them. How much money comes back?",
        ),
        ("c-a*b", "c-b*a"),
    ),
    Template(
        "price", "cost", _price,
        (
            "{name} buys {a} {item} at {b} yuan each and has {c} yuan in a wallet. How much do the {item} cost?",
            "Each of the {item} costs {b} yuan. {name} has {c} yuan and takes {a} of them. What is the total price?",
        ),
        ("a*b", "b*a"),
    ),
    Template(
        "work", "together_days", _work,
        (
            "Team A can finish a job in {a} days and team B can finish it in {b} days. "
            "They have {c} workers each. How many days do they need working together?",
            "A pipe fills a pool in {a} hours and another pipe fills it in {b} hours. "
            "The pool is {c} meters deep. How many hours do both pipes need together?",
        ),
        ("1/(1/a+1/b)",),
    ),
    Template(
        "work", "fraction_done", _work,
        (
            "Team A can finish a job in {a} days and team B can finish it in {b} days. "
            "What fraction of the job is done if they work together for {c} days?",
            "A pipe fills a pool in {a} hours and another pipe fills it in {b} hours. "
            "What part of the pool is filled when both run for {c} hours?",
        ),
        ("(1/a+1/b)*c", "c/a+c/b"),
    ),
    Template(
        "growth", "compound", _growth,
        (
            "A colony starts with {a} cells and every day the count is multiplied by {b}. "
            "How many cells are there after {c} days?",
        ),
        ("a*b^c",),
    ),
    Template(
        "geometry", "circle_area", _circle,
        ("A circular pond has a radius of {r} meters. What is its area in square meters?",),
        ("3.14*r*r", "r*r*3.14"),
    ),
    Template(
        "geometry", "circumference", _circle,
        ("A wheel has a diameter of {r} centimeters. How long is its rim?",),
        ("3.14*r", "r*3.14"),
    ),
)


def _fill(expression: str, values: dict) -> str:
    out = []
    for ch in expression:
        out.append(str(values[ch]) if ch in values else ch)
    return "".join(out)


def _make_problem(
    rng: random.Random, template: Template, pid: str, distractor_rate: float
) -> Problem:
    while True:
        values = {k: str(v) for k, v in template.sample(rng).items()}
        nums = list(values.values())
        reserved = {format_number(c) for c in DEFAULT_CONSTANTS}
        if len(set(nums)) == len(nums) and not reserved & set(nums):
            break
    wording = rng.choice(template.texts)
    text = wording.format(name=rng.choice(_NAMES), item=rng.choice(_ITEMS), **values)
    if rng.random() < distractor_rate:
        taken = set(nums)
        k = str(rng.randint(2, 99))
        while k in taken:
            k = str(rng.randint(2, 99))
        extra = rng.choice(_DISTRACTORS).format(k=k, name=rng.choice(_NAMES))
        sentences = text.split(". ")
        at = rng.randint(0, len(sentences) - 1)
        sentences.insert(at, extra.rstrip("."))
        text = ". ".join(sentences)
    expression = _fill(rng.choice(template.expressions), values)
    words, qmap = abstract_quantities(text)
    target = parse_infix(expression, qmap)
    return Problem(
        id=pid,
        text=tuple(words),
        qmap=qmap,
        target=target,
        answer=evaluate(target, qmap),
        raw_text=text,
        expression=expression,
        family=template.family,
    )


def generate_synthetic(
    n: int,
    seed: int,
    templates: Sequence[Template] = BUILTIN_TEMPLATES,
    distractor_rate: float = 0.3,
) -> list[Problem]:
    """Deterministic templated problems; ids are ``syn<seed>-<index>``."""
    if n < 1:
        raise ConfigError("n must be >= 1")
    if not templates:
        raise ConfigError("at least one template is required")
    rng = random.Random(seed)
    return [
        _make_problem(rng, rng.choice(templates), f"syn{seed}-{i:06d}", distractor_rate)
        for i in range(n)
    ]


def templates_by_family(families: Iterable[str] | None) -> tuple[Template, ...]:
    if families is None:
        return BUILTIN_TEMPLATES
    wanted = set(families)
    unknown = wanted - {t.family for t in BUILTIN_TEMPLATES}
    if unknown:
        raise ConfigError(f"unknown template families: {sorted(unknown)}")
    return tuple(t for t in BUILTIN_TEMPLATES if t.family in wanted)


def split(
    problems: Sequence[Problem], fractions: Sequence[float] = (0.8, 0.1, 0.1), seed: int = 0
) -> tuple[list[Problem], list[Problem], list[Problem]]:
    if len(fractions) != 3 or any(f <= 0 for f in fractions):
        raise ConfigError("need three positive split fractions")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions sum to {sum(fractions)}, not 1")
    order = list(range(len(problems)))
    random.Random(seed).shuffle(order)
    n = len(order)
    n_train = round(fractions[0] * n)
    n_val = min(round(fractions[1] * n), n - n_train)
    parts = (order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:])
    return tuple([problems[i] for i in part] for part in parts)


# --------------------------------------------------------------------------
# vocabularies


@dataclass
class Vocabulary:
    """Input word ids plus the fixed output token list.

    Output ids are laid out as operators, then constants, then slots
    ``N1..N{max_slots}``, so slot ``Ni`` has id ``slot_offset + i - 1``.
    """

    words: list[str]
    constants: tuple[float, ...] = DEFAULT_CONSTANTS
    max_slots: int = MAX_SLOTS

    def __post_init__(self):
        if tuple(self.words[: len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise ValueError("special tokens must occupy the first ids")
        self.word_to_id = {w: i for i, w in enumerate(self.words)}
        self.output_tokens = (
            list(OPERATORS)
            + [format_number(c) for c in self.constants]
            + [f"N{i}" for i in range(1, self.max_slots + 1)]
        )
        self.output_to_id = {t: i for i, t in enumerate(self.output_tokens)}

    @classmethod
    def build(
        cls,
        problems: Iterable[Problem],
        min_count: int = 1,
        constants: Sequence[float] = DEFAULT_CONSTANTS,
        max_slots: int = MAX_SLOTS,
    ) -> "Vocabulary":
        counts = Counter(w for p in problems for w in p.text)
        slot_words = [f"N{i}" for i in range(1, max_slots + 1)]
        for w in slot_words:
            counts.pop(w, None)
        ranked = sorted((w for w, c in counts.items() if c >= min_count), key=lambda w: (-counts[w], w))
        return cls(list(SPECIAL_TOKENS) + slot_words + ranked, tuple(constants), max_slots)

    def __len__(self) -> int:
        return len(self.words)

    @property
    def n_ops(self) -> int:
        return len(OPERATORS)

    @property
    def n_consts(self) -> int:
        return len(self.constants)

    @property
    def slot_offset(self) -> int:
        return self.n_ops + self.n_consts

    @property
    def n_outputs(self) -> int:
        return len(self.output_tokens)

    def encode_words(self, words: Sequence[str]) -> list[int]:
        unk = self.word_to_id[UNK]
        return [self.word_to_id.get(w, unk) for w in words]

    def to_dict(self) -> dict:
        return {"words": self.words, "constants": list(self.constants), "max_slots": self.max_slots}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        return cls(list(d["words"]), tuple(d["constants"]), int(d["max_slots"]))
