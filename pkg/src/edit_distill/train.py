"""Two-stage student training: supervised fine-tuning, then key-step learning.

Stage one minimizes the mean per-token NLL of each correct chain given its
question. Stage two minimizes L(pos, w+) - L(neg, w-) over dual pairs,
where L is the token-sum weighted NLL and the weights come from the
minimum-edit-distance masks: likelihood goes up on correct key tokens and
down on wrong key tokens. Written as a maximization the objective reads
the opposite way; the implemented direction is the one under which the
correct side is learned and the wrong side unlearned.

Optimization is AdamW-style (decoupled weight decay, here zero by
default) with global-norm gradient clipping and per-epoch exponential
learning-rate decay. Given a seed, data, and config, training is
bit-reproducible: shuffles come from the seed and gradient reduction
order is fixed.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import lm
from .align import align, weight_masks
from .lm import GradBundle, Params
from .records import CoTRecord, DualRecord, content_hash
from .tok import BOS_ID, EOS_ID, PAD_ID, SEP_ID, Vocab, encode


@dataclass(frozen=True)
class SftConfig:
    learning_rate: float = 2e-4
    epochs: int = 3
    batch_size: int = 16
    grad_accum: int = 1
    grad_clip_norm: float = 1.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    lr_decay_gamma: float = 0.95
    seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        positive = (self.learning_rate, self.batch_size, self.grad_accum,
                    self.grad_clip_norm)
        if any(v <= 0 for v in positive):
            raise ValueError("learning rate, batch size, accumulation, and "
                             "clip norm must be positive")


@dataclass(frozen=True)
class KrslConfig:
    alpha: float = 1.0
    beta: float = 0.025
    learning_rate: float = 5e-6
    epochs: int = 1
    batch_size: int = 16
    neg_logprob_floor: float | None = None
    grad_clip_norm: float = 1.0
    lr_decay_gamma: float = 0.95
    seed: int = 0

    def __post_init__(self) -> None:
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("negative weight")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


@dataclass
class TrainReport:
    stage: str
    seed: int
    epoch_losses: list[float]
    wall_clock_sec: float
    dataset_hash: str
    skipped: int = 0

    def to_json(self) -> str:
        payload = {
            "stage": self.stage,
            "seed": self.seed,
            "epoch_losses": self.epoch_losses,
            "wall_clock_sec": self.wall_clock_sec,
            "dataset_hash": self.dataset_hash,
            "skipped": self.skipped,
        }
        return json.dumps(payload, sort_keys=True, indent=2)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")


class AdamW:
    """Decoupled-weight-decay Adam over a named tensor dict."""

    def __init__(self, shapes: dict[str, tuple[int, ...]], beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.m = {k: np.zeros(s) for k, s in shapes.items()}
        self.v = {k: np.zeros(s) for k, s in shapes.items()}
        self.t = 0

    def step(self, tensors: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             lr: float) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name in sorted(tensors):
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * tensors[name]
            tensors[name] -= lr * update


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = 0.0
    for g in grads.values():
        total += float((g * g).sum())
    norm = total**0.5
    if norm > max_norm and norm > 0:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


def prompt_ids(vocab: Vocab, question: str) -> list[int]:
    return [BOS_ID, *encode(question, vocab).ids, SEP_ID]


def sft_target_ids(vocab: Vocab, cot: str) -> list[int]:
    return [*encode(cot, vocab).ids, EOS_ID]


def _pad_batch(rows: list[tuple[list[int], np.ndarray]]) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad (ids, position-weights) rows to a rectangle.

    Padding cannot leak into the loss: every pad position has zero weight
    and causal attention keeps pads out of all earlier positions.
    """
    width = max(len(ids) for ids, _ in rows)
    ids = np.full((len(rows), width), PAD_ID, dtype=np.int64)
    weights = np.zeros((len(rows), width), dtype=np.float64)
    for r, (row_ids, row_w) in enumerate(rows):
        ids[r, : len(row_ids)] = row_ids
        weights[r, : len(row_w)] = row_w
    return ids, weights


def _accumulate(total: dict[str, np.ndarray] | None, grads: GradBundle):
    if total is None:
        return {k: v.copy() for k, v in grads.tensors.items()}
    for k in total:
        total[k] += grads.tensors[k]
    return total


@dataclass
class _SftExample:
    ids: list[int]
    weights: np.ndarray  # aligned with ids positions, already per-token mean


def _prepare_sft_examples(
    records: Sequence[CoTRecord], vocab: Vocab, max_seq: int
) -> tuple[list[_SftExample], int]:
    examples = []
    skipped = 0
    for r in records:
        p = prompt_ids(vocab, r.question)
        t = sft_target_ids(vocab, r.cot)
        if len(p) + len(t) > max_seq:
            skipped += 1
            continue
        w = np.zeros(len(p) + len(t))
        w[len(p) - 1 : len(p) - 1 + len(t)] = 1.0 / len(t)
        examples.append(_SftExample(ids=p + t, weights=w))
    return examples, skipped


def _run_sft(
    params: Params,
    records: Sequence[CoTRecord],
    cfg: SftConfig,
    vocab: Vocab,
) -> tuple[Params, TrainReport]:
    if not records:
        raise ValueError("empty dataset")
    for r in records:
        if not r.correct:
            raise ValueError(f"record {r.id} is not marked correct")
    started = time.perf_counter()
    examples, skipped = _prepare_sft_examples(records, vocab, params.config.max_seq)
    if not examples:
        raise ValueError("empty dataset after length filtering")

    out = params.copy()
    out.stage = "sft"
    optimizer = AdamW(
        lm.param_shapes(out.config),
        beta1=cfg.adam_beta1,
        beta2=cfg.adam_beta2,
        eps=cfg.adam_eps,
        weight_decay=cfg.weight_decay,
    )
    rng = np.random.default_rng(cfg.seed)
    epoch_losses = []
    for epoch in range(cfg.epochs):
        lr = cfg.learning_rate * cfg.lr_decay_gamma**epoch
        order = rng.permutation(len(examples))
        epoch_loss = 0.0
        accum: dict[str, np.ndarray] | None = None
        n_micro = 0

        def flush(lr_now: float) -> None:
            nonlocal accum, n_micro
            if accum is None:
                return
            for k in accum:
                accum[k] /= n_micro
            clip_gradients(accum, cfg.grad_clip_norm)
            optimizer.step(out.tensors, accum, lr_now)
            accum, n_micro = None, 0

        for start in range(0, len(order), cfg.batch_size):
            chunk = [examples[i] for i in order[start : start + cfg.batch_size]]
            ids, weights = _pad_batch([(e.ids, e.weights) for e in chunk])
            loss, grads = lm.batch_weighted_nll(out, ids, weights / len(chunk))
            epoch_loss += loss * len(chunk)
            accum = _accumulate(accum, grads)
            n_micro += 1
            if n_micro >= cfg.grad_accum:
                flush(lr)
        flush(lr)
        epoch_losses.append(epoch_loss / len(examples))
    report = TrainReport(
        stage="sft",
        seed=cfg.seed,
        epoch_losses=epoch_losses,
        wall_clock_sec=time.perf_counter() - started,
        dataset_hash=content_hash(records),
        skipped=skipped,
    )
    return out, report


def sft(
    params: Params,
    d_plus_merge: Sequence[CoTRecord],
    cfg: SftConfig,
    vocab: Vocab,
) -> tuple[Params, TrainReport]:
    """Fine-tune on the merged correct-chain dataset."""
    return _run_sft(params, d_plus_merge, cfg, vocab)


def std_cot_baseline(
    params: Params,
    records: Sequence[CoTRecord],
    cfg: SftConfig,
    vocab: Vocab,
) -> tuple[Params, TrainReport]:
    """Plain chain distillation baseline; same machinery as ``sft``.

    Run on the original correct chains only it is the standard baseline;
    run on the merged set it reproduces the no-second-stage ablation.
    """
    return _run_sft(params, records, cfg, vocab)


def _dual_rows(
    rec: DualRecord,
    vocab: Vocab,
    alpha: float,
    beta: float,
    max_seq: int,
) -> tuple[tuple[list[int], np.ndarray], tuple[list[int], np.ndarray]] | None:
    """Tokenize one dual pair into (pos_row, neg_row) with signed weights."""
    p = prompt_ids(vocab, rec.question)
    pos = encode(rec.cot_pos, vocab)
    neg = encode(rec.cot_neg, vocab)
    if len(p) + len(pos) > max_seq or len(p) + len(neg) > max_seq:
        return None
    script = align(neg, pos)
    mask = weight_masks(script, alpha, beta)
    start = len(p) - 1
    w_pos = np.zeros(len(p) + len(pos))
    w_pos[start : start + len(pos)] = mask.omega_pos
    w_neg = np.zeros(len(p) + len(neg))
    w_neg[start : start + len(neg)] = -np.asarray(mask.omega_neg)
    return (p + list(pos.ids), w_pos), (p + list(neg.ids), w_neg)


def krsl_loss(
    params: Params,
    rec: DualRecord,
    vocab: Vocab,
    alpha: float = 1.0,
    beta: float = 0.025,
    neg_logprob_floor: float | None = None,
) -> tuple[float, GradBundle]:
    """Key-step loss for one dual pair: L(pos, w+) - L(neg, w-).

    Identical chains give exactly zero loss and zero gradients (their
    masks are all zero). With beta=0 only the correct side is learned;
    with alpha=0 only the wrong side is unlearned.
    """
    rows = _dual_rows(rec, vocab, alpha, beta, params.config.max_seq)
    if rows is None:
        raise ValueError("dual pair exceeds max_seq")
    (pos_ids, w_pos), (neg_ids, w_neg) = rows
    ids, weights = _pad_batch([(pos_ids, w_pos), (neg_ids, w_neg)])
    floor_rows = None
    if neg_logprob_floor is not None:
        floor_rows = np.array([False, True])
    return lm.batch_weighted_nll(
        params, ids, weights, logprob_floor=neg_logprob_floor, floor_rows=floor_rows
    )


def krsl(
    params_sft: Params,
    d_dual: Sequence[DualRecord],
    cfg: KrslConfig,
    vocab: Vocab,
    subset: str = "both",
) -> tuple[Params, TrainReport]:
    """Key-reasoning-step learning on dual pairs, after the SFT stage.

    ``subset`` selects which dual source feeds training: "pos" for pairs
    built from originally correct chains, "neg" for pairs built from
    originally wrong chains, "both" for the union.
    """
    if params_sft.stage != "sft":
        raise ValueError(
            f"stage mismatch: key-step learning requires an sft checkpoint, "
            f"got {params_sft.stage!r}"
        )
    if subset not in ("both", "pos", "neg"):
        raise ValueError(f"unknown subset {subset!r}")
    records = [
        d for d in d_dual
        if subset == "both" or d.source == f"{subset}_dual"
    ]
    if not records:
        raise ValueError("empty dataset")
    started = time.perf_counter()

    prepared = []
    skipped = 0
    for rec in records:
        rows = _dual_rows(rec, vocab, cfg.alpha, cfg.beta, params_sft.config.max_seq)
        if rows is None:
            skipped += 1
            continue
        prepared.append(rows)
    if not prepared:
        raise ValueError("empty dataset after length filtering")

    out = params_sft.copy()
    out.stage = "krsl"
    optimizer = AdamW(lm.param_shapes(out.config))
    rng = np.random.default_rng(cfg.seed)
    epoch_losses = []
    for epoch in range(cfg.epochs):
        lr = cfg.learning_rate * cfg.lr_decay_gamma**epoch
        order = rng.permutation(len(prepared))
        epoch_loss = 0.0
        for start in range(0, len(order), cfg.batch_size):
            chunk = [prepared[i] for i in order[start : start + cfg.batch_size]]
            rows: list[tuple[list[int], np.ndarray]] = []
            floor_flags = []
            for pos_row, neg_row in chunk:
                rows.append(pos_row)
                floor_flags.append(False)
                rows.append(neg_row)
                floor_flags.append(True)
            ids, weights = _pad_batch(rows)
            floor_rows = (
                np.asarray(floor_flags)
                if cfg.neg_logprob_floor is not None
                else None
            )
            loss, grads = lm.batch_weighted_nll(
                out,
                ids,
                weights / len(chunk),
                logprob_floor=cfg.neg_logprob_floor,
                floor_rows=floor_rows,
            )
            epoch_loss += loss * len(chunk)
            gt = grads.tensors
            clip_gradients(gt, cfg.grad_clip_norm)
            optimizer.step(out.tensors, gt, lr)
        epoch_losses.append(epoch_loss / len(prepared))
    report = TrainReport(
        stage="krsl",
        seed=cfg.seed,
        epoch_losses=epoch_losses,
        wall_clock_sec=time.perf_counter() - started,
        dataset_hash=content_hash(records),
        skipped=skipped,
    )
    return out, report
