"""Minimum-edit-distance alignment between dual chains of thought.

The wrong chain is always the alignment *source* and the correct chain the
*target*: target tokens touched by Insert/Replace get the positive weight,
source tokens consumed by Delete/Replace get the negative weight, and
everything shared stays at zero. Ties in the backtrace are broken with the
fixed priority Match > Replace > Delete > Insert so the produced script
(and hence every downstream mask) is reproducible bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Sequence

from .tok import TokenSeq

# DP memory is O(|src|*|tgt|); longer inputs are rejected explicitly.
MAX_ALIGN_TOKENS = 2048


class OpKind(Enum):
    MATCH = "match"
    REPLACE = "replace"
    INSERT = "insert"
    DELETE = "delete"


@dataclass(frozen=True)
class EditOp:
    kind: OpKind
    src_idx: int | None
    tgt_idx: int | None

    def __post_init__(self) -> None:
        if self.kind in (OpKind.MATCH, OpKind.REPLACE):
            ok = self.src_idx is not None and self.tgt_idx is not None
        elif self.kind is OpKind.INSERT:
            ok = self.src_idx is None and self.tgt_idx is not None
        else:
            ok = self.src_idx is not None and self.tgt_idx is None
        if not ok:
            raise ValueError(f"{self.kind.value} op has inconsistent indices")


@dataclass(frozen=True)
class EditScript:
    ops: tuple[EditOp, ...]
    cost: int

    @property
    def src_len(self) -> int:
        return sum(1 for op in self.ops if op.src_idx is not None)

    @property
    def tgt_len(self) -> int:
        return sum(1 for op in self.ops if op.tgt_idx is not None)

    def replay_with(
        self, src_ids: Sequence[int], tgt_ids: Sequence[int]
    ) -> list[int]:
        """Rebuild the target from the source by following the ops."""
        out: list[int] = []
        for op in self.ops:
            if op.kind is OpKind.MATCH:
                if src_ids[op.src_idx] != tgt_ids[op.tgt_idx]:
                    raise ValueError("match op over unequal tokens")
                out.append(src_ids[op.src_idx])
            elif op.kind is OpKind.REPLACE:
                out.append(tgt_ids[op.tgt_idx])
            elif op.kind is OpKind.INSERT:
                out.append(tgt_ids[op.tgt_idx])
            # DELETE consumes the source token and emits nothing
        return out


@dataclass(frozen=True)
class WeightMask:
    """Per-token weights on both sides of a dual pair.

    omega_pos spans the correct (target) tokens and is alpha exactly where
    the token arises from an Insert or Replace; omega_neg spans the wrong
    (source) tokens and is beta exactly where the token is consumed by a
    Delete or Replace.
    """

    omega_pos: tuple[float, ...]
    omega_neg: tuple[float, ...]
    alpha: float
    beta: float


def _ids(seq: TokenSeq | Sequence[int]) -> list[int]:
    if isinstance(seq, TokenSeq):
        return list(seq.ids)
    return list(seq)


def _check_lengths(src: list[int], tgt: list[int]) -> None:
    if len(src) > MAX_ALIGN_TOKENS or len(tgt) > MAX_ALIGN_TOKENS:
        raise ValueError(
            f"sequence longer than {MAX_ALIGN_TOKENS} tokens; refusing to align"
        )


def _dp_table(src: list[int], tgt: list[int]) -> list[list[int]]:
    m, n = len(src), len(tgt)
    dist = [[0] * (n + 1) for _ in range(m + 1)]
    for i in range(m + 1):
        dist[i][0] = i
    for j in range(n + 1):
        dist[0][j] = j
    for i in range(1, m + 1):
        row = dist[i]
        prev = dist[i - 1]
        s = src[i - 1]
        for j in range(1, n + 1):
            sub = prev[j - 1] + (0 if s == tgt[j - 1] else 1)
            dele = prev[j] + 1
            ins = row[j - 1] + 1
            best = sub
            if dele < best:
                best = dele
            if ins < best:
                best = ins
            row[j] = best
    return dist


def edit_distance(src: TokenSeq | Sequence[int], tgt: TokenSeq | Sequence[int]) -> int:
    """Unit-cost Levenshtein distance over token ids."""
    a, b = _ids(src), _ids(tgt)
    _check_lengths(a, b)
    return _dp_table(a, b)[len(a)][len(b)]


def align(src: TokenSeq | Sequence[int], tgt: TokenSeq | Sequence[int]) -> EditScript:
    """One optimal edit script with deterministic tie-breaking."""
    a, b = _ids(src), _ids(tgt)
    _check_lengths(a, b)
    dist = _dp_table(a, b)
    ops: list[EditOp] = []
    i, j = len(a), len(b)
    while i > 0 or j > 0:
        here = dist[i][j]
        # priority: Match > Replace > Delete > Insert
        if i > 0 and j > 0 and a[i - 1] == b[j - 1] and here == dist[i - 1][j - 1]:
            ops.append(EditOp(OpKind.MATCH, i - 1, j - 1))
            i, j = i - 1, j - 1
        elif i > 0 and j > 0 and a[i - 1] != b[j - 1] and here == dist[i - 1][j - 1] + 1:
            ops.append(EditOp(OpKind.REPLACE, i - 1, j - 1))
            i, j = i - 1, j - 1
        elif i > 0 and here == dist[i - 1][j] + 1:
            ops.append(EditOp(OpKind.DELETE, i - 1, None))
            i -= 1
        else:
            ops.append(EditOp(OpKind.INSERT, None, j - 1))
            j -= 1
    ops.reverse()
    cost = sum(1 for op in ops if op.kind is not OpKind.MATCH)
    assert cost == dist[len(a)][len(b)]
    return EditScript(ops=tuple(ops), cost=cost)


def weight_masks(script: EditScript, alpha: float = 1.0, beta: float = 0.025) -> WeightMask:
    """Token weights from an edit script (source = wrong, target = correct)."""
    if alpha < 0 or beta < 0:
        raise ValueError("negative weight")
    pos = [0.0] * script.tgt_len
    neg = [0.0] * script.src_len
    for op in script.ops:
        if op.kind in (OpKind.INSERT, OpKind.REPLACE):
            pos[op.tgt_idx] = alpha
        if op.kind in (OpKind.DELETE, OpKind.REPLACE):
            neg[op.src_idx] = beta
    return WeightMask(omega_pos=tuple(pos), omega_neg=tuple(neg), alpha=alpha, beta=beta)


def key_step_spans(
    mask: WeightMask, pos_seq: TokenSeq, neg_seq: TokenSeq
) -> tuple[list[tuple[int, int]], list[tuple[int, int]]]:
    """Merge adjacent weighted tokens into maximal byte spans for highlighting.

    Returns (correct-side spans, wrong-side spans); byte offsets index the
    original texts the sequences were encoded from.
    """
    if len(mask.omega_pos) != len(pos_seq) or len(mask.omega_neg) != len(neg_seq):
        raise ValueError("mask length does not match sequence length")

    def merge(weights: tuple[float, ...], seq: TokenSeq) -> list[tuple[int, int]]:
        spans: list[tuple[int, int]] = []
        run_start: int | None = None
        for t, w in enumerate(weights):
            if w > 0 and run_start is None:
                run_start = t
            if w == 0 and run_start is not None:
                spans.append((seq.spans[run_start][0], seq.spans[t - 1][1]))
                run_start = None
        if run_start is not None:
            spans.append((seq.spans[run_start][0], seq.spans[-1][1]))
        return spans

    return merge(mask.omega_pos, pos_seq), merge(mask.omega_neg, neg_seq)


def keystep_proportion(
    pairs: Sequence[tuple[TokenSeq | Sequence[int], TokenSeq | Sequence[int]]],
) -> float:
    """Mean edit-distance share of the correct side over dual pairs.

    Per pair: edit_distance(pos, neg) / len(pos); pairs with an empty
    correct side contribute 0. The denominator is the correct-side length
    (the alternative readings, wrong-side or max length, are not used).
    """
    if not pairs:
        raise ValueError("empty pair list")
    total = 0.0
    for pos, neg in pairs:
        pos_ids, neg_ids = _ids(pos), _ids(neg)
        if not pos_ids:
            continue
        total += edit_distance(neg_ids, pos_ids) / len(pos_ids)
    return total / len(pairs)
