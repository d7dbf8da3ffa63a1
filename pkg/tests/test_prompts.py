import json
from pathlib import Path

import pytest

from edit_distill.prompts import (
    AHP,
    CCP,
    CEP,
    JUDGE,
    MISTAKE_PATTERN,
    render_prompt,
    shared_fewshot,
)

GOLDEN_DIR = Path(__file__).parent / "goldens"

EXAMPLES = [
    ("Q-ONE", "(A)", "COT-ONE"),
    ("Q-TWO", "(B)", "COT-TWO"),
    ("Q-THREE", "(C)", "COT-THREE"),
]


def golden(name: str) -> str:
    # goldens are stored with a trailing newline; rendered prompts have none
    return (GOLDEN_DIR / name).read_text(encoding="utf-8").rstrip("\n")


def test_cep_golden():
    cep_slots, _ = shared_fewshot(EXAMPLES)
    text = render_prompt(
        CEP.with_examples(cep_slots),
        {"task_description": "TASK-DESC", "question": "Q-FINAL"},
    )
    assert text == golden("cep.txt")


def test_cep_ends_with_cue():
    cep_slots, _ = shared_fewshot(EXAMPLES[:1])
    text = render_prompt(
        CEP.with_examples(cep_slots),
        {"task_description": "TASK-DESC", "question": "Q1"},
    )
    assert text.endswith("Q: Q1\nA: Let's think step by step.")


def test_ahp_golden():
    _, ahp_slots = shared_fewshot(EXAMPLES)
    text = render_prompt(
        AHP.with_examples(ahp_slots),
        {"task_description": "TASK-DESC", "question": "Q-FINAL", "answer": "(D)"},
    )
    assert text == golden("ahp.txt")


def test_ahp_inserts_hint_lines():
    _, ahp_slots = shared_fewshot(EXAMPLES)
    text = render_prompt(
        AHP.with_examples(ahp_slots),
        {"task_description": "T", "question": "Q", "answer": "(D)"},
    )
    assert text.count("H: The correct answer is") == 4


def test_cep_ahp_share_examples():
    cep_slots, ahp_slots = shared_fewshot(EXAMPLES)
    assert [s["question"] for s in cep_slots] == [s["question"] for s in ahp_slots]
    assert [s["cot"] for s in cep_slots] == [s["cot"] for s in ahp_slots]
    assert all("answer" not in s for s in cep_slots)
    assert all("answer" in s for s in ahp_slots)


def test_ccp_golden():
    slots = [
        {"question": "Q-ONE", "right_response": "RIGHT-ONE",
         "wrong_response": "WRONG-ONE"},
        {"question": "Q-TWO", "right_response": "RIGHT-TWO",
         "wrong_response": "WRONG-TWO"},
        {"question": "Q-THREE", "right_response": "RIGHT-THREE",
         "wrong_response": "WRONG-THREE"},
    ]
    text = render_prompt(
        CCP.with_examples(slots),
        {
            "task_description": "TASK-DESC",
            "question": "Q-FINAL",
            "right_response": "RIGHT-FINAL",
        },
    )
    assert text == golden("ccp.txt")
    assert text.endswith("[Wrong Response]:")


def test_mistake_pattern_golden():
    text = render_prompt(
        MISTAKE_PATTERN,
        {
            "input": json.dumps("MP-QUESTION"),
            "right_output": json.dumps("MP-RIGHT"),
            "wrong_output": json.dumps("MP-WRONG"),
        },
    )
    assert text == golden("mistake_pattern.txt")


def test_judge_golden():
    text = render_prompt(
        JUDGE,
        {
            "question": "JUDGE-QUESTION",
            "reference": "JUDGE-REFERENCE",
            "answer_1": "ANSWER-ONE",
            "answer_2": "ANSWER-TWO",
            "answer_3": "ANSWER-THREE",
        },
    )
    assert text == golden("judge.txt")


def test_unbound_placeholder_named():
    with pytest.raises(ValueError, match="unbound placeholder question"):
        render_prompt(CEP.with_examples([]), {"task_description": "T"})


def test_no_residual_markers():
    cep_slots, _ = shared_fewshot(EXAMPLES)
    text = render_prompt(
        CEP.with_examples(cep_slots),
        {"task_description": "TASK-DESC", "question": "Q-FINAL"},
    )
    import re

    assert not re.search(r"\{[a-z][a-z0-9_]*\}", text)


def test_substitution_is_byte_exact():
    slots = [{"question": "q éü", "cot": "c1"}]
    text = render_prompt(
        CEP.with_examples(slots),
        {"task_description": "d", "question": "keep  double  spaces"},
    )
    assert "q éü" in text
    assert "keep  double  spaces" in text
