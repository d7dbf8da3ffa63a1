"""Synthetic bracket-completion task with a simulated teacher.

Questions present a prefix of a balanced-bracket word over (), {}, <>;
the gold answer is the closing sequence. The simulated teacher writes a
step-by-step stack trace ending in "Therefore, the answer is ...". Wrong
chains flip exactly one stack operation at a chosen step and propagate
the broken stack forward, so each dual pair shares most tokens and
diverges at a localized span plus the final answer.

Everything here is driven by one seed: question sampling, which questions
the teacher gets wrong, and where each corruption lands. The generator
also writes teacher fixtures and replays the real annotate/rectify/corrupt
pipeline against them, so the dual records it returns are exactly what the
offline pipeline reproduces.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .datasets import (
    annotate,
    corrupt,
    merge_correct,
    pair_dual,
    partition,
    rectify,
    sample_joint_examples,
)
from .prompts import AHP, CCP, CEP, PromptTemplate, render_prompt, shared_fewshot
from .records import CoTRecord, DualRecord, Question
from .teacher import TeacherConfig, request_key, user_message, write_fixture

TASK_NAME = "dyck_completion"
TASK_DESCRIPTION = "Correctly close a Dyck-n word"
QUESTION_PREFIX = "Complete the rest of the sequence. Input:"

OPENERS = "({<"
CLOSERS = ")}>"
CLOSE_OF = {o: c for o, c in zip(OPENERS, CLOSERS)}

PREFIX_LEN = 7
WRONG_RATE = 0.3


def fixture_teacher_config(fixture_dir: str | Path, **overrides) -> TeacherConfig:
    """The one offline teacher config shared by generator and pipeline.

    Fixture lookup hashes the full request, so both sides must agree on
    these sampling parameters byte for byte.
    """
    return TeacherConfig(
        endpoint="",
        model="sim-teacher",
        temperature=0.2,
        top_p=1.0,
        max_new_tokens=2048,
        fixture_dir=str(fixture_dir),
        **overrides,
    )


def run_stack(symbols: Sequence[str]) -> list[str]:
    """Reference stack semantics: openers push, closers pop their match."""
    stack: list[str] = []
    for sym in symbols:
        if sym in OPENERS:
            stack.append(sym)
        else:
            if not stack or CLOSE_OF[stack[-1]] != sym:
                raise ValueError(f"invalid prefix {' '.join(symbols)}")
            stack.pop()
    return stack


def closing_sequence(stack: Sequence[str]) -> str:
    return " ".join(CLOSE_OF[sym] for sym in reversed(stack))


def _stack_str(stack: Sequence[str]) -> str:
    return " ".join(stack) if stack else "empty"


def render_trace(symbols: Sequence[str], stacks: Sequence[Sequence[str]]) -> str:
    """Stack-trace chain of thought for the given per-step stack states."""
    final = stacks[-1]
    lines = [
        "We should process each input one by one and keep track of the "
        "stack configuration.",
        "0: empty stack",
    ]
    for i, (sym, stack) in enumerate(zip(symbols, stacks), start=1):
        lines.append(f"{i}: {sym} ; stack: {_stack_str(stack)}")
    lines.append(
        f'The final stack is "{_stack_str(final)}". '
        f"Therefore, the answer is {closing_sequence(final)}."
    )
    return "\n".join(lines)


def correct_trace(symbols: Sequence[str]) -> str:
    stacks = []
    stack: list[str] = []
    for sym in symbols:
        if sym in OPENERS:
            stack.append(sym)
        else:
            stack.pop()
        stacks.append(list(stack))
    return render_trace(symbols, stacks)


def _corrupted_stacks(
    symbols: Sequence[str], flip_step: int, wrong_push: str | None
) -> list[list[str]]:
    """Stack states with one flipped operation at flip_step (1-based).

    At the flipped step an opener pushes ``wrong_push`` instead of itself,
    or a closer's pop is skipped. Later steps run mechanically against the
    broken stack: openers push, closers blindly pop whatever is on top.
    """
    stacks = []
    stack: list[str] = []
    for i, sym in enumerate(symbols, start=1):
        if i == flip_step:
            if wrong_push is not None:
                stack.append(wrong_push)
            # else: skipped pop, stack unchanged
        elif sym in OPENERS:
            stack.append(sym)
        elif stack:
            stack.pop()
        stacks.append(list(stack))
    return stacks


def corrupted_trace(symbols: Sequence[str], rng: np.random.Generator) -> str:
    """A wrong trace whose final answer provably differs from the gold."""
    gold_answer = closing_sequence(run_stack(symbols))
    order = rng.permutation(len(symbols))
    for idx in order:
        step = int(idx) + 1
        sym = symbols[idx]
        if sym in OPENERS:
            others = [o for o in OPENERS if o != sym]
            wrong = others[int(rng.integers(len(others)))]
            stacks = _corrupted_stacks(symbols, step, wrong)
        else:
            stacks = _corrupted_stacks(symbols, step, None)
        final = stacks[-1]
        if final and closing_sequence(final) != gold_answer:
            return render_trace(symbols, stacks)
    raise AssertionError(
        f"no corrupting flip found for {' '.join(symbols)}"
    )  # unreachable: flipping an opener that survives to the final stack always works


def sample_prefix(rng: np.random.Generator, length: int = PREFIX_LEN) -> tuple[str, ...]:
    """One valid bracket prefix of the given length with a nonempty stack."""
    while True:
        symbols: list[str] = []
        depth = 0
        for _ in range(length):
            push = depth == 0 or rng.random() < 0.6
            if push:
                symbols.append(OPENERS[int(rng.integers(3))])
                depth += 1
            else:
                stack = run_stack(symbols)
                symbols.append(CLOSE_OF[stack[-1]])
                depth -= 1
        if depth > 0:
            return tuple(symbols)


def question_text(symbols: Sequence[str]) -> str:
    return f"{QUESTION_PREFIX} {' '.join(symbols)}"


@dataclass(frozen=True)
class SynthBundle:
    """Everything one seeded generation run produces."""

    task_description: str
    fewshot_examples: tuple[tuple[str, str, str], ...]
    train_questions: tuple[Question, ...]
    heldout_questions: tuple[Question, ...]
    fixture_dir: str
    annotated: tuple[CoTRecord, ...]
    d_plus: tuple[CoTRecord, ...]
    d_minus: tuple[CoTRecord, ...]
    d_minus_plus: tuple[CoTRecord, ...]
    d_plus_minus: tuple[CoTRecord, ...]
    duals: tuple[DualRecord, ...]
    merged: tuple[CoTRecord, ...]

    def corpus_texts(self) -> list[str]:
        texts = [q.question for q in self.train_questions]
        texts += [r.cot for r in self.annotated]
        texts += [r.cot for r in self.d_minus_plus]
        texts += [r.cot for r in self.d_plus_minus]
        return texts

    def cep_template(self) -> PromptTemplate:
        cep_slots, _ = shared_fewshot(self.fewshot_examples)
        return CEP.with_examples(cep_slots)

    def ahp_template(self) -> PromptTemplate:
        _, ahp_slots = shared_fewshot(self.fewshot_examples)
        return AHP.with_examples(ahp_slots)

    def save_fewshot(self, path: str | Path) -> None:
        payload = {
            "task_description": self.task_description,
            "examples": [list(e) for e in self.fewshot_examples],
        }
        Path(path).write_text(
            json.dumps(payload, ensure_ascii=False, sort_keys=True, indent=2) + "\n",
            encoding="utf-8",
        )


def _make_fewshot(rng: np.random.Generator) -> tuple[tuple[str, str, str], ...]:
    examples = []
    seen = set()
    while len(examples) < 3:
        symbols = sample_prefix(rng, length=4)
        if symbols in seen:
            continue
        seen.add(symbols)
        answer = closing_sequence(run_stack(symbols))
        examples.append((question_text(symbols), answer, correct_trace(symbols)))
    return tuple(examples)


def synth_dyck(
    n: int,
    seed: int,
    heldout: int = 0,
    out_dir: str | Path | None = None,
    wrong_rate: float = WRONG_RATE,
) -> SynthBundle:
    """Generate a seeded task instance and replay it through the pipeline.

    Writes teacher fixtures under ``out_dir`` (a temporary convention of
    ``fixtures/`` inside it) and returns the full bundle: questions plus
    gold answers, the fixture directory, and every derived record set.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if out_dir is None:
        raise ValueError("out_dir is required to hold fixtures")
    rng = np.random.default_rng(seed)
    fixture_dir = Path(out_dir) / "fixtures"
    fixture_dir.mkdir(parents=True, exist_ok=True)

    fewshot = _make_fewshot(rng)
    fewshot_questions = {e[0] for e in fewshot}

    # distinct prefixes for train + heldout
    prefixes: list[tuple[str, ...]] = []
    seen: set[tuple[str, ...]] = set()
    while len(prefixes) < n + heldout:
        symbols = sample_prefix(rng)
        if symbols in seen or question_text(symbols) in fewshot_questions:
            continue
        seen.add(symbols)
        prefixes.append(symbols)
    train_prefixes = prefixes[:n]
    heldout_prefixes = prefixes[n:]

    def make_question(symbols: tuple[str, ...]) -> Question:
        return Question.make(
            task=TASK_NAME,
            question=question_text(symbols),
            gold_answer=closing_sequence(run_stack(symbols)),
        )

    train_questions = tuple(make_question(s) for s in train_prefixes)
    heldout_questions = tuple(make_question(s) for s in heldout_prefixes)

    wrong_flags = rng.random(n) < wrong_rate
    if not wrong_flags.any():
        wrong_flags[0] = True  # the corruption prompt needs at least one wrong chain

    config = fixture_teacher_config(fixture_dir)
    cep_slots, ahp_slots = shared_fewshot(fewshot)
    cep = CEP.with_examples(cep_slots)
    ahp = AHP.with_examples(ahp_slots)

    def stash(prompt: str, content: str) -> None:
        key = request_key(config, user_message(prompt))
        write_fixture(fixture_dir, key, content)

    # teacher annotation responses (sometimes wrong on purpose)
    for symbols, q, is_wrong in zip(train_prefixes, train_questions, wrong_flags):
        prompt = render_prompt(
            cep, {"task_description": TASK_DESCRIPTION, "question": q.question}
        )
        content = corrupted_trace(symbols, rng) if is_wrong else correct_trace(symbols)
        stash(prompt, content)

    annotated = annotate(train_questions, cep, config, TASK_DESCRIPTION)
    d_plus, d_minus = partition(annotated)

    # answer-hint responses rectify every originally wrong chain
    by_id = {q.id: s for q, s in zip(train_questions, train_prefixes)}
    for r in d_minus:
        prompt = render_prompt(
            ahp,
            {
                "task_description": TASK_DESCRIPTION,
                "question": r.question,
                "answer": r.gold_answer,
            },
        )
        stash(prompt, correct_trace(by_id[r.id]))
    d_minus_plus = rectify(d_minus, ahp, config, TASK_DESCRIPTION)

    # contrastive responses corrupt every originally correct chain
    joint = sample_joint_examples(d_minus, d_minus_plus, count=3, seed=seed)
    slots = [
        {"question": q, "right_response": right, "wrong_response": wrong}
        for q, right, wrong in joint
    ]
    ccp = CCP.with_examples(slots)
    for r in d_plus:
        prompt = render_prompt(
            ccp,
            {
                "task_description": TASK_DESCRIPTION,
                "question": r.question,
                "right_response": r.cot,
            },
        )
        stash(prompt, corrupted_trace(by_id[r.id], rng))
    d_plus_minus = corrupt(d_plus, CCP, joint, config, TASK_DESCRIPTION)

    duals = pair_dual(d_plus, d_plus_minus, d_minus, d_minus_plus)
    merged = merge_correct(d_plus, d_minus_plus)

    return SynthBundle(
        task_description=TASK_DESCRIPTION,
        fewshot_examples=fewshot,
        train_questions=train_questions,
        heldout_questions=heldout_questions,
        fixture_dir=str(fixture_dir),
        annotated=tuple(annotated),
        d_plus=tuple(d_plus),
        d_minus=tuple(d_minus),
        d_minus_plus=tuple(d_minus_plus),
        d_plus_minus=tuple(d_plus_minus),
        duals=tuple(duals),
        merged=tuple(merged),
    )
