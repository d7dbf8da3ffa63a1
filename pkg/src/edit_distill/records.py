"""Dataset record types and their canonical JSONL serialization.

Record ids are content hashes of (task, question) so the same question
keeps the same id across the annotated, rectified, and corrupted sets;
pairing into dual records joins on that id.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Iterator

COT_ORIGINS = ("teacher", "rectified", "corrupted", "synthetic")
DUAL_SOURCES = ("pos_dual", "neg_dual")


def record_id(task: str, question: str) -> str:
    digest = hashlib.sha256(f"{task}\n{question}".encode("utf-8")).hexdigest()
    return digest[:16]


@dataclass(frozen=True)
class CoTRecord:
    id: str
    task: str
    question: str
    gold_answer: str
    cot: str
    pred_answer: str | None = None
    correct: bool | None = None
    origin: str = "teacher"

    def __post_init__(self) -> None:
        if self.origin not in COT_ORIGINS:
            raise ValueError(f"unknown origin {self.origin!r}")


@dataclass(frozen=True)
class DualRecord:
    id: str
    question: str
    cot_pos: str
    cot_neg: str
    source: str

    def __post_init__(self) -> None:
        if self.source not in DUAL_SOURCES:
            raise ValueError(f"unknown dual source {self.source!r}")


@dataclass(frozen=True)
class Question:
    """A raw task instance before any teacher annotation."""

    id: str
    task: str
    question: str
    gold_answer: str

    @classmethod
    def make(cls, task: str, question: str, gold_answer: str) -> "Question":
        return cls(
            id=record_id(task, question),
            task=task,
            question=question,
            gold_answer=gold_answer,
        )


def _dump_line(obj: dict) -> str:
    return json.dumps(obj, ensure_ascii=False, sort_keys=True, separators=(",", ":"))


def write_jsonl(path: str | Path, records: Iterable) -> None:
    lines = [_dump_line(asdict(r)) for r in records]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def _iter_jsonl(path: str | Path) -> Iterator[dict]:
    text = Path(path).read_text(encoding="utf-8")
    for line in text.splitlines():
        if line.strip():
            yield json.loads(line)


def read_cot_records(path: str | Path) -> list[CoTRecord]:
    return [CoTRecord(**row) for row in _iter_jsonl(path)]


def read_dual_records(path: str | Path) -> list[DualRecord]:
    return [DualRecord(**row) for row in _iter_jsonl(path)]


def read_questions(path: str | Path) -> list[Question]:
    return [Question(**row) for row in _iter_jsonl(path)]


def content_hash(records: Iterable) -> str:
    """Stable hash of a record list, used to fingerprint training inputs."""
    h = hashlib.sha256()
    for r in records:
        h.update(_dump_line(asdict(r)).encode("utf-8"))
        h.update(b"\n")
    return h.hexdigest()
