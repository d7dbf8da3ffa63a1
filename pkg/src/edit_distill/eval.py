"""Answer extraction, accuracy scoring, report comparison, and judging.

The grading contract implemented here: answers are compared
case-insensitively after whitespace collapsing; a parenthesized option
letter anywhere in the answer segment normalizes the whole answer to that
letter in parentheses; otherwise the trimmed free-form text is compared
verbatim. A missing extraction always counts as wrong.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from . import lm
from .prompts import JUDGE, render_prompt
from .records import Question
from .tok import Vocab, decode, tokenize_text

# Scanned token-wise, so it is found whether the text carries normal
# punctuation ("Therefore, the answer is") or the tokenizer's spaced form
# ("Therefore , the answer is") as produced by decoding model output.
_MARKER_TOKENS = ("Therefore", ",", "the", "answer", "is")

_OPTION_RE = re.compile(r"\(\s*([A-Za-z])\s*\)")


def extract_answer(cot: str) -> str | None:
    """Answer segment after the last "Therefore, the answer is" marker.

    Returns the trailing text trimmed of whitespace and a terminal period,
    reduced to "(X)" when a parenthesized option letter is present; None
    when the marker never occurs.
    """
    tokens = [t for t, _, _ in tokenize_text(cot)]
    n = len(_MARKER_TOKENS)
    last = -1
    for i in range(len(tokens) - n + 1):
        if tuple(tokens[i : i + n]) == _MARKER_TOKENS:
            last = i
    if last < 0:
        return None
    tail = tokens[last + n :]
    while tail and tail[-1] == ".":
        tail.pop()
    segment = " ".join(tail).strip()
    m = _OPTION_RE.search(segment)
    if m:
        return f"({m.group(1)})"
    return segment if segment else None


def normalize_answer(answer: str | None) -> str | None:
    """Canonical comparison form: "(x)" for option letters, else the
    lowercased token-joined text without a terminal period."""
    if answer is None:
        return None
    m = _OPTION_RE.search(answer)
    if m:
        return f"({m.group(1).lower()})"
    tokens = [t for t, _, _ in tokenize_text(answer)]
    while tokens and tokens[-1] == ".":
        tokens.pop()
    return " ".join(tokens).lower()


def answers_match(extracted: str | None, gold: str) -> bool:
    norm = normalize_answer(extracted)
    return norm is not None and norm == normalize_answer(gold)


def accuracy(records: Sequence[tuple[str | None, str]]) -> float:
    """Fraction of (extracted, gold) pairs that match; None counts wrong."""
    if not records:
        raise ValueError("empty record list")
    hits = sum(1 for extracted, gold in records if answers_match(extracted, gold))
    return hits / len(records)


@dataclass(frozen=True)
class Outcome:
    id: str
    task: str
    extracted: str | None
    gold: str
    correct: bool


@dataclass(frozen=True)
class EvalReport:
    method: str
    seed: int
    per_task: dict[str, float]
    overall: float
    outcomes: tuple[Outcome, ...] = field(default_factory=tuple)

    @classmethod
    def from_outcomes(
        cls, method: str, seed: int, outcomes: Sequence[Outcome]
    ) -> "EvalReport":
        if not outcomes:
            raise ValueError("empty outcome list")
        by_task: dict[str, list[bool]] = {}
        for o in outcomes:
            by_task.setdefault(o.task, []).append(o.correct)
        per_task = {t: sum(v) / len(v) for t, v in sorted(by_task.items())}
        overall = sum(o.correct for o in outcomes) / len(outcomes)
        return cls(
            method=method,
            seed=seed,
            per_task=per_task,
            overall=overall,
            outcomes=tuple(outcomes),
        )

    def to_json(self) -> str:
        payload = {
            "method": self.method,
            "seed": self.seed,
            "per_task": self.per_task,
            "overall": self.overall,
            "outcomes": [
                {
                    "id": o.id,
                    "task": o.task,
                    "extracted": o.extracted,
                    "gold": o.gold,
                    "correct": o.correct,
                }
                for o in self.outcomes
            ],
        }
        return json.dumps(payload, ensure_ascii=False, sort_keys=True, indent=2)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "EvalReport":
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        outcomes = tuple(
            Outcome(
                id=o["id"],
                task=o["task"],
                extracted=o["extracted"],
                gold=o["gold"],
                correct=o["correct"],
            )
            for o in raw["outcomes"]
        )
        return cls(
            method=raw["method"],
            seed=raw["seed"],
            per_task=dict(raw["per_task"]),
            overall=raw["overall"],
            outcomes=outcomes,
        )


def evaluate_model(
    params: lm.Params,
    vocab: Vocab,
    questions: Sequence[Question],
    method: str,
    seed: int,
    max_new: int = 256,
) -> EvalReport:
    """Greedy-generate a chain per question and grade the final answers."""
    from .train import prompt_ids

    prompts = [prompt_ids(vocab, q.question) for q in questions]
    continuations = lm.batch_generate(params, prompts, max_new=max_new)
    outcomes = []
    for q, cont in zip(questions, continuations):
        text = decode(cont, vocab)
        extracted = extract_answer(text)
        outcomes.append(
            Outcome(
                id=q.id,
                task=q.task,
                extracted=extracted,
                gold=q.gold_answer,
                correct=answers_match(extracted, q.gold_answer),
            )
        )
    return EvalReport.from_outcomes(method, seed, outcomes)


def compare(reports: Sequence[EvalReport], baseline: str | None = None) -> str:
    """Aligned accuracy table across methods with deltas vs a baseline.

    The baseline defaults to the first report's method. All reports must
    cover the same task set.
    """
    if len(reports) < 2:
        raise ValueError("need at least two reports to compare")
    tasks = set(reports[0].per_task)
    for r in reports[1:]:
        if set(r.per_task) != tasks:
            diff = sorted(set(r.per_task) ^ tasks)
            raise ValueError(f"mismatched task sets: {', '.join(diff)}")
    base_name = baseline or reports[0].method
    base = next((r for r in reports if r.method == base_name), None)
    if base is None:
        raise ValueError(f"baseline method {base_name!r} not among reports")

    rows = [*sorted(tasks), "AVG"]

    def value(r: EvalReport, row: str) -> float:
        return r.overall if row == "AVG" else r.per_task[row]

    headers = ["task"]
    for r in reports:
        headers.append(r.method)
        if r.method != base_name:
            headers.append(f"d({r.method})")
    table = [headers]
    for row in rows:
        cells = [row]
        for r in reports:
            cells.append(f"{100 * value(r, row):.1f}")
            if r.method != base_name:
                cells.append(f"{100 * (value(r, row) - value(base, row)):+.1f}")
        table.append(cells)
    widths = [max(len(line[c]) for line in table) for c in range(len(headers))]
    lines = [
        "  ".join(cell.ljust(widths[c]) for c, cell in enumerate(line)).rstrip()
        for line in table
    ]
    return "\n".join(lines)


def judge_prompt(question: str, reference: str, answers: Sequence[str]) -> str:
    """Render the three-assistant chain-quality judging prompt."""
    if len(answers) != 3:
        raise ValueError("judge prompt requires exactly 3 answers")
    return render_prompt(
        JUDGE,
        {
            "question": question,
            "reference": reference,
            "answer_1": answers[0],
            "answer_2": answers[1],
            "answer_3": answers[2],
        },
    )


_SCORE_RE = re.compile(
    r"^Score of AI Assistant ([123]):\s*([0-9]+(?:\.[0-9]+)?)\s*$", re.MULTILINE
)


def parse_judge(output: str) -> tuple[float, float, float]:
    """Parse the three "Score of AI Assistant k:" lines, validating range."""
    found: dict[int, float] = {}
    for m in _SCORE_RE.finditer(output):
        found[int(m.group(1))] = float(m.group(2))
    missing = [k for k in (1, 2, 3) if k not in found]
    if missing:
        raise ValueError(
            "missing score for assistant " + ", ".join(str(k) for k in missing)
        )
    out_of_range = [k for k in (1, 2, 3) if not 1 <= found[k] <= 10]
    if out_of_range:
        raise ValueError(
            "score out of range [1,10] for assistant "
            + ", ".join(str(k) for k in out_of_range)
        )
    return found[1], found[2], found[3]
