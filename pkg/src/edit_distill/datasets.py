"""Dataset construction: annotate, partition, rectify, corrupt, pair, merge.

The flow mirrors the two-sided data recipe: the teacher annotates every
question; chains are split by final-answer correctness; wrong chains are
rewritten into correct ones with an answer hint; correct chains are
corrupted through contrastive examples; the four sets pair up into dual
records and merge into the supervised-training set.

Teacher outputs that defeat their purpose (a rectification that is still
wrong, a corruption that is still right) are dropped and logged rather
than retried, so every retained record keeps its set's contract exact.
"""

from __future__ import annotations

import json
import logging
from typing import Sequence

import numpy as np

from .eval import answers_match, extract_answer
from .prompts import CCP, PromptTemplate, render_prompt
from .records import CoTRecord, DualRecord, Question
from .teacher import (
    PartialOutputError,
    TeacherClient,
    TeacherConfig,
    user_message,
)

log = logging.getLogger(__name__)


def _run_teacher(
    client: TeacherClient,
    prompts: Sequence[tuple[str, str]],
) -> dict[str, str]:
    """Send (id, prompt) pairs; raise with failed ids if any request dies."""
    keyed = [(rid, user_message(text)) for rid, text in prompts]
    results, failed = client.complete_many(keyed)
    if failed:
        raise PartialOutputError(failed, results)
    return results


def annotate(
    questions: Sequence[Question],
    cep: PromptTemplate,
    teacher: TeacherConfig,
    task_description: str,
) -> list[CoTRecord]:
    """Extract one chain per question and grade it against the gold answer."""
    client = TeacherClient(teacher)
    prompts = [
        (
            q.id,
            render_prompt(
                cep,
                {"task_description": task_description, "question": q.question},
            ),
        )
        for q in questions
    ]
    responses = _run_teacher(client, prompts)
    records = []
    for q in questions:
        cot = responses[q.id]
        pred = extract_answer(cot)
        records.append(
            CoTRecord(
                id=q.id,
                task=q.task,
                question=q.question,
                gold_answer=q.gold_answer,
                cot=cot,
                pred_answer=pred,
                correct=answers_match(pred, q.gold_answer),
                origin="teacher",
            )
        )
    return records


def partition(records: Sequence[CoTRecord]) -> tuple[list[CoTRecord], list[CoTRecord]]:
    """Split annotated records into (correct, wrong) by final answer."""
    for r in records:
        if r.correct is None:
            raise ValueError(f"record {r.id} has no correctness flag")
    d_plus = [r for r in records if r.correct]
    d_minus = [r for r in records if not r.correct]
    return d_plus, d_minus


def rectify(
    d_minus: Sequence[CoTRecord],
    ahp: PromptTemplate,
    teacher: TeacherConfig,
    task_description: str,
) -> list[CoTRecord]:
    """Rewrite wrong chains with the gold answer as a hint.

    Outputs whose extracted answer still misses the gold are dropped and
    logged; the returned set contains only verified-correct chains.
    """
    client = TeacherClient(teacher)
    prompts = [
        (
            r.id,
            render_prompt(
                ahp,
                {
                    "task_description": task_description,
                    "question": r.question,
                    "answer": r.gold_answer,
                },
            ),
        )
        for r in d_minus
    ]
    responses = _run_teacher(client, prompts)
    kept = []
    dropped = 0
    for r in d_minus:
        cot = responses[r.id]
        pred = extract_answer(cot)
        if not answers_match(pred, r.gold_answer):
            dropped += 1
            log.warning("rectify: output for %s still wrong, dropping", r.id)
            continue
        kept.append(
            CoTRecord(
                id=r.id,
                task=r.task,
                question=r.question,
                gold_answer=r.gold_answer,
                cot=cot,
                pred_answer=pred,
                correct=True,
                origin="rectified",
            )
        )
    if dropped:
        log.info("rectify: dropped %d of %d records", dropped, len(d_minus))
    return kept


def sample_joint_examples(
    d_minus: Sequence[CoTRecord],
    d_minus_plus: Sequence[CoTRecord],
    count: int = 3,
    seed: int = 0,
) -> list[tuple[str, str, str]]:
    """Pair wrong chains with their rectified twins as (q, right, wrong).

    Pairs are joined by record id and sampled with a seeded generator so
    the corruption prompt's in-context block is reproducible.
    """
    rectified_by_id = {r.id: r for r in d_minus_plus}
    joint = [
        (r.question, rectified_by_id[r.id].cot, r.cot)
        for r in d_minus
        if r.id in rectified_by_id
    ]
    if not joint:
        raise ValueError("no joined (wrong, rectified) pairs available")
    rng = np.random.default_rng(seed)
    take = min(count, len(joint))
    idx = rng.choice(len(joint), size=take, replace=False)
    return [joint[i] for i in sorted(idx)]


def corrupt(
    d_plus: Sequence[CoTRecord],
    ccp: PromptTemplate,
    joint_examples: Sequence[tuple[str, str, str]],
    teacher: TeacherConfig,
    task_description: str,
) -> list[CoTRecord]:
    """Produce wrong twins for correct chains via contrastive examples.

    Outputs whose extracted answer still equals the gold are dropped and
    logged; the returned set contains only verified-wrong chains.
    """
    if not joint_examples:
        raise ValueError("corrupt requires joint in-context examples")
    slots = [
        {"question": q, "right_response": right, "wrong_response": wrong}
        for q, right, wrong in joint_examples
    ]
    template = ccp.with_examples(slots)
    client = TeacherClient(teacher)
    prompts = [
        (
            r.id,
            render_prompt(
                template,
                {
                    "task_description": task_description,
                    "question": r.question,
                    "right_response": r.cot,
                },
            ),
        )
        for r in d_plus
    ]
    responses = _run_teacher(client, prompts)
    kept = []
    dropped = 0
    for r in d_plus:
        cot = responses[r.id]
        pred = extract_answer(cot)
        if answers_match(pred, r.gold_answer):
            dropped += 1
            log.warning("corrupt: output for %s still correct, dropping", r.id)
            continue
        kept.append(
            CoTRecord(
                id=r.id,
                task=r.task,
                question=r.question,
                gold_answer=r.gold_answer,
                cot=cot,
                pred_answer=pred,
                correct=False,
                origin="corrupted",
            )
        )
    if dropped:
        log.info("corrupt: dropped %d of %d records", dropped, len(d_plus))
    return kept


def pair_dual(
    d_plus: Sequence[CoTRecord],
    d_plus_minus: Sequence[CoTRecord],
    d_minus: Sequence[CoTRecord],
    d_minus_plus: Sequence[CoTRecord],
) -> list[DualRecord]:
    """Join the four sets into dual records by id.

    pos_dual pairs an original correct chain with its corruption; neg_dual
    pairs a rectified chain with the original wrong one. Records without a
    counterpart are omitted with a logged count.
    """
    duals: list[DualRecord] = []
    unmatched = 0

    corrupted_by_id = {r.id: r for r in d_plus_minus}
    for r in d_plus:
        twin = corrupted_by_id.get(r.id)
        if twin is None:
            unmatched += 1
            continue
        duals.append(
            DualRecord(
                id=r.id,
                question=r.question,
                cot_pos=r.cot,
                cot_neg=twin.cot,
                source="pos_dual",
            )
        )

    rectified_by_id = {r.id: r for r in d_minus_plus}
    for r in d_minus:
        twin = rectified_by_id.get(r.id)
        if twin is None:
            unmatched += 1
            continue
        duals.append(
            DualRecord(
                id=r.id,
                question=r.question,
                cot_pos=twin.cot,
                cot_neg=r.cot,
                source="neg_dual",
            )
        )
    if unmatched:
        log.info("pair_dual: omitted %d records without counterparts", unmatched)
    return duals


def merge_correct(
    d_plus: Sequence[CoTRecord], d_minus_plus: Sequence[CoTRecord]
) -> list[CoTRecord]:
    """Concatenate the correct sets, deduplicating by id.

    Passing an empty rectified set reproduces the ablation that trains on
    original correct chains only.
    """
    merged: list[CoTRecord] = []
    seen: set[str] = set()
    for r in list(d_plus) + list(d_minus_plus):
        if not r.correct:
            raise ValueError(f"record {r.id} in merge input is not correct")
        if r.id in seen:
            continue
        seen.add(r.id)
        merged.append(r)
    return merged


MISTAKE_CATEGORIES = {"a": "LEs", "b": "KEs", "c": "MCEs", "d": "OEs"}


def _parse_category(output: str) -> str | None:
    for line in output.splitlines():
        if line.startswith("Category:"):
            raw = line[len("Category:") :].strip().rstrip(".")
            letters = [p.strip().strip("()") for p in raw.split("+")]
            if all(p in MISTAKE_CATEGORIES for p in letters) and letters:
                ordered = sorted(set(letters))
                return "+".join(MISTAKE_CATEGORIES[p] for p in ordered)
    return None


def classify_mistakes(
    duals: Sequence[DualRecord],
    template: PromptTemplate,
    teacher: TeacherConfig,
) -> dict[str, str]:
    """Label each dual's wrong side with a mistake category.

    Output is parsed from the "Category:" line; categories compose with
    '+'. Unparseable teacher output falls back to the other-errors bucket
    with a warning.
    """
    if template.name != "MistakePattern":
        raise ValueError("classify_mistakes requires the MistakePattern template")
    client = TeacherClient(teacher)
    prompts = [
        (
            d.id,
            render_prompt(
                template,
                {
                    "input": json.dumps(d.question, ensure_ascii=False),
                    "right_output": json.dumps(d.cot_pos, ensure_ascii=False),
                    "wrong_output": json.dumps(d.cot_neg, ensure_ascii=False),
                },
            ),
        )
        for d in duals
    ]
    responses = _run_teacher(client, prompts)
    labels: dict[str, str] = {}
    for d in duals:
        parsed = _parse_category(responses[d.id])
        if parsed is None:
            log.warning("classify: unparseable category for %s, using OEs", d.id)
            parsed = MISTAKE_CATEGORIES["d"]
        labels[d.id] = parsed
    return labels
