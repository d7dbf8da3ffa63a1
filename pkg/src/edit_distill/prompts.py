"""Prompt templates for the teacher and for chain-quality judging.

Five templates are built in:

* CEP  - chain extraction: few-shot Q/A examples, then the query question.
* AHP  - answer hint: same examples as CEP but every example (and the
         query) carries an ``H: The correct answer is ...`` line, so the
         teacher rewrites a wrong chain into a correct one.
* CCP  - contrastive corruption: joint (right, wrong) response examples
         that coax the teacher into producing a plausible wrong chain for
         a question it originally got right.
* MistakePattern - classifies a wrong chain against its correct twin into
         error categories a/b/c/d (logic / knowledge / calculation / other).
* Judge - three-way scoring of candidate chains against a reference.

Rendering is byte-exact string substitution: placeholders look like
``{name}``, few-shot examples are joined by blank lines in slot order, and
any unbound or leftover placeholder is an error.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Mapping, Sequence

_PLACEHOLDER_RE = re.compile(r"\{([a-z][a-z0-9_]*)\}")


@dataclass(frozen=True)
class PromptTemplate:
    name: str
    body: str
    example_body: str = ""
    fewshot_slots: tuple[Mapping[str, str], ...] = field(default_factory=tuple)

    def with_examples(self, slots: Sequence[Mapping[str, str]]) -> "PromptTemplate":
        return PromptTemplate(
            name=self.name,
            body=self.body,
            example_body=self.example_body,
            fewshot_slots=tuple(dict(s) for s in slots),
        )


def _substitute(text: str, bindings: Mapping[str, str]) -> str:
    names = set(_PLACEHOLDER_RE.findall(text))
    missing = sorted(n for n in names if n not in bindings)
    if missing:
        raise ValueError(f"unbound placeholder {missing[0]}")

    def repl(m: re.Match) -> str:
        return str(bindings[m.group(1)])

    return _PLACEHOLDER_RE.sub(repl, text)


def render_prompt(template: PromptTemplate, bindings: Mapping[str, str]) -> str:
    """Render a template with all placeholders bound, byte-exactly."""
    merged = dict(bindings)
    if "{examples}" in template.body:
        blocks = [
            _substitute(template.example_body, slot)
            for slot in template.fewshot_slots
        ]
        merged["examples"] = "\n\n".join(blocks)
    return _substitute(template.body, merged)


_ANSWER_CONTRACT = (
    '{task_description}. Your response should conclude with the format '
    '"Therefore, the answer is".'
)

CEP = PromptTemplate(
    name="CEP",
    body=(
        _ANSWER_CONTRACT
        + "\n\n{examples}\n\n"
        + "Q: {question}\nA: Let's think step by step."
    ),
    example_body="Q: {question}\nA: Let's think step by step. {cot}.",
)

AHP = PromptTemplate(
    name="AHP",
    body=(
        _ANSWER_CONTRACT
        + "\n\n{examples}\n\n"
        + "Q: {question}\nH: The correct answer is {answer}\nA: Let's think step by step."
    ),
    example_body=(
        "Q: {question}\nH: The correct answer is {answer}\n"
        "A: Let's think step by step. {cot}."
    ),
)

CCP = PromptTemplate(
    name="CCP",
    body=(
        "{task_description}. You need to complete the [Wrong Response] which "
        "requires you to give the most likely incorrect answer to the [Question] "
        "and the rationale for the incorrect answer. The incorrect answer and "
        "rationale in the [Wrong Response] must be different from the correct "
        "answer and rationale in the [Right Response]."
        "\n\n{examples}\n\n"
        "[Question]: {question}\n[Right Response]: {right_response}\n[Wrong Response]:"
    ),
    example_body=(
        "[Question]: {question}\n[Right Response]: {right_response}\n"
        "[Wrong Response]: {wrong_response}"
    ),
)

MISTAKE_PATTERN = PromptTemplate(
    name="MistakePattern",
    body=(
        "[System] You are a helpful assistant who is good at identifying types "
        "of reasoning mistakes.\n"
        "There are now three types of inference errors, as follows:\n"
        "\n"
        "(a). Logical reasoning errors. This type of error involves the logical "
        "structure of reasoning, including assumptions, reasoning rules, argument "
        "chains, etc. Among logical errors, students may make errors such as "
        "invalid reasoning, insufficient or incorrect assumptions, and jumps in "
        "reasoning. Students may make errors in selecting reasoning strategies "
        "or methods. The chosen method may not be suitable for a specific "
        "problem, or may lead to misleading reasoning.\n"
        "\n"
        "(b). Knowledge errors in reasoning. This type of error involves "
        "misunderstanding or incomplete understanding of facts, concepts or "
        "knowledge, conceptual confusion, and cognitive biases.\n"
        "\n"
        "(c). Numerical calculation errors. This type of error involves "
        "mathematical calculation errors, which may include incorrect "
        "calculations, conversions or errors in the processing of numerical "
        "values.\n"
        "\n"
        "(d). Other errors. All other errors that do not belong to the above "
        "three categories.\n"
        "\n"
        "I will give you a dictionary with the following fields and meanings:\n"
        "{\n"
        '    "input": reasoning question.\n'
        '    "right_output": the correct answer.\n'
        '    "wrong_output": the wrong answer.\n'
        "}\n"
        "\n"
        "You need to first form your own opinion about the problem based on the "
        "reasoning questions and the correct answers, and then analyze the "
        'reasons for the mistakes in the wrong answers in "Rationale:". Then '
        'give your classification results in "Category:", e.g., (a), (b) or '
        "(c), etc. If an answer involves errors in multiple categories, you "
        "should point them out and connect them with '+' sign in the category. "
        "For example, if an answer involves logical errors and mathematical "
        "calculation errors, then the category should be a+c.\n"
        "\n"
        "You must output with the following format:\n"
        "Rationale: <your analysis process and explanation of the final "
        "classification results>\n"
        "Category: <only fill in with a or b or c or a+b or a+c or b+c or "
        "a+b+c or d.>\n"
        "\n"
        "{\n"
        '    "input": {input},\n'
        '    "right_output": {right_output},\n'
        '    "wrong_output": {wrong_output}\n'
        "}"
    ),
)

JUDGE = PromptTemplate(
    name="Judge",
    body=(
        "[System] You are a helpful and precise assistant for assessing the "
        "quality of the response.\n"
        "\n"
        "[Question]: {question}\n"
        "[Reference Answer]: {reference}\n"
        "\n"
        "[AI Assistant 1's Answer Start]\n"
        "{answer_1}\n"
        "[AI Assistant 1's Answer End]\n"
        "\n"
        "[AI Assistant 2's Answer Start]\n"
        "{answer_2}\n"
        "[AI Assistant 2's Answer End]\n"
        "\n"
        "[AI Assistant 3's Answer Start]\n"
        "{answer_3}\n"
        "[AI Assistant 3's Answer End]\n"
        "\n"
        "[System] We would like to request your feedback, in the form of "
        "scoring, on which of the responses from AI Assistant 1, 2 and 3 "
        "effectively demonstrates the key reasoning steps in solving this "
        "question. Key Reasoning Steps refer to certain crucial steps in the "
        "process of logical reasoning or problem-solving. These steps play a "
        "significant role in the thinking process and have a notable impact on "
        "subsequent reasoning. Each student will receive an overall score on a "
        "scale of 1 to 10, where a higher score signifies that the assistant's "
        "response is more effectively demonstrates the key reasoning steps for "
        "the question. Please provide a comprehensive explanation, avoiding any "
        "potential bias and ensuring that the order in which the responses were "
        "presented does not affect your judgment. And then output three lines "
        "indicating the scores for AI Assistant 1, 2 and 3, respectively.\n"
        "\n"
        "Output with the following format:\n"
        "Evaluation evidence: <your evaluation explanation here>\n"
        "Score of AI Assistant 1: <score>\n"
        "Score of AI Assistant 2: <score>\n"
        "Score of AI Assistant 3: <score>"
    ),
)

TEMPLATES = {t.name: t for t in (CEP, AHP, CCP, MISTAKE_PATTERN, JUDGE)}


def shared_fewshot(
    examples: Sequence[tuple[str, str, str]],
) -> tuple[tuple[dict[str, str], ...], tuple[dict[str, str], ...]]:
    """Build CEP and AHP slots from one (question, answer, cot) example list.

    Both prompt styles must draw on the same examples; only AHP consumes
    the answer as a hint line.
    """
    cep_slots = tuple({"question": q, "cot": cot} for q, _, cot in examples)
    ahp_slots = tuple(
        {"question": q, "answer": a, "cot": cot} for q, a, cot in examples
    )
    return cep_slots, ahp_slots
