"""Command-line entry point wiring all stages into reproducible runs.

Every subcommand writes a manifest next to its outputs recording the
command line, the config snapshot, input content hashes, the seed, and
timestamps. Exit codes: 0 success, 1 usage error, 2 data or contract
error. Logs go to stderr; data only ever goes to files.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from . import __version__, lm
from .align import align as align_seqs
from .align import key_step_spans, keystep_proportion, weight_masks
from .datasets import (
    annotate,
    classify_mistakes,
    corrupt,
    merge_correct,
    pair_dual,
    partition,
    rectify,
    sample_joint_examples,
)
from .dyck import fixture_teacher_config, synth_dyck
from .eval import EvalReport, compare, evaluate_model
from .prompts import AHP, CCP, CEP, MISTAKE_PATTERN, shared_fewshot
from .records import (
    Question,
    read_cot_records,
    read_dual_records,
    read_questions,
    write_jsonl,
)
from .teacher import TeacherConfig, TeacherError
from .tok import Vocab, build_vocab, encode
from .train import KrslConfig, SftConfig, krsl, sft, std_cot_baseline

log = logging.getLogger("edit")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse would exit(2); usage errors are 1
        raise UsageError(message)


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class PipelineConfig:
    """Flat run configuration; unknown keys in config files are rejected."""

    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    max_seq: int = 512
    sft_learning_rate: float = 2e-4
    sft_epochs: int = 3
    krsl_learning_rate: float = 5e-6
    krsl_epochs: int = 1
    batch_size: int = 16
    grad_accum: int = 1
    grad_clip_norm: float = 1.0
    alpha: float = 1.0
    beta: float = 0.025
    neg_logprob_floor: float | None = None
    temperature: float = 0.2
    top_p: float = 1.0
    max_new_tokens: int = 2048
    retries: int = 3
    eval_max_new: int = 256
    wrong_rate: float = 0.3
    seed: int = 0

    def sft_config(self) -> SftConfig:
        return SftConfig(
            learning_rate=self.sft_learning_rate,
            epochs=self.sft_epochs,
            batch_size=self.batch_size,
            grad_accum=self.grad_accum,
            grad_clip_norm=self.grad_clip_norm,
            seed=self.seed,
        )

    def krsl_config(self) -> KrslConfig:
        return KrslConfig(
            alpha=self.alpha,
            beta=self.beta,
            learning_rate=self.krsl_learning_rate,
            epochs=self.krsl_epochs,
            batch_size=self.batch_size,
            neg_logprob_floor=self.neg_logprob_floor,
            grad_clip_norm=self.grad_clip_norm,
            seed=self.seed,
        )

    def model_config(self, vocab_size: int) -> lm.ModelConfig:
        return lm.ModelConfig(
            vocab_size=vocab_size,
            d_model=self.d_model,
            n_layers=self.n_layers,
            n_heads=self.n_heads,
            d_ff=self.d_ff,
            max_seq=self.max_seq,
            seed=self.seed,
        )


def dump_config(cfg: PipelineConfig) -> dict:
    return dataclasses.asdict(cfg)


def load_config(path: str | Path | None, seed: int | None = None) -> PipelineConfig:
    """Load a flat JSON config; unknown keys are an error, not a warning."""
    raw: dict = {}
    if path is not None:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        if not isinstance(raw, dict):
            raise ValueError("config file must hold a JSON object")
    known = {f.name for f in dataclasses.fields(PipelineConfig)}
    for key in raw:
        if key not in known:
            raise ValueError(f"unknown key {key}")
    if seed is not None:
        raw["seed"] = seed
    return PipelineConfig(**raw)


# ---------------------------------------------------------------------------
# manifests


def _file_hash(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(
    out_dir: Path,
    command: Sequence[str],
    cfg: PipelineConfig | None,
    inputs: Sequence[Path],
    outputs: Sequence[Path],
    seed: int,
    started: float,
) -> Path:
    manifest = {
        "command": list(command),
        "config": dump_config(cfg) if cfg is not None else None,
        "inputs": {str(p): _file_hash(Path(p)) for p in inputs if Path(p).is_file()},
        "outputs": [str(p) for p in outputs],
        "seed": seed,
        "tool_version": __version__,
        "started_unix": started,
        "finished_unix": time.time(),
    }
    path = out_dir / "manifest.json"
    path.write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    return path


# ---------------------------------------------------------------------------
# shared helpers


def _require_file(path: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"missing input file: {p}")
    return p


def _teacher_from_args(args, cfg: PipelineConfig) -> TeacherConfig:
    common = dict(
        temperature=cfg.temperature,
        top_p=cfg.top_p,
        max_new_tokens=cfg.max_new_tokens,
        retries=cfg.retries,
    )
    if getattr(args, "fixtures", None):
        return fixture_teacher_config(args.fixtures, retries=cfg.retries)
    return TeacherConfig.from_env(**common)


def _load_fewshot(path: str) -> tuple[str, list[tuple[str, str, str]]]:
    raw = json.loads(_require_file(path).read_text(encoding="utf-8"))
    return raw["task_description"], [tuple(e) for e in raw["examples"]]


def _save_report_quartet(out: Path, name: str, params, report) -> tuple[Path, Path]:
    ckpt = out / f"{name}.ckpt"
    lm.save_checkpoint(params, ckpt)
    rpt = out / f"{name}_report.json"
    report.save(rpt)
    return ckpt, rpt


def _ansi_highlight(text: str, spans: Sequence[tuple[int, int]], color: str) -> str:
    codes = {"green": "\x1b[32m", "red": "\x1b[31m"}
    reset = "\x1b[0m"
    raw = text.encode("utf-8")
    out = bytearray()
    pos = 0
    for start, end in spans:
        out += raw[pos:start]
        out += codes[color].encode() + raw[start:end] + reset.encode()
        pos = end
    out += raw[pos:]
    return out.decode("utf-8")


# ---------------------------------------------------------------------------
# subcommands


def _cmd_synth(args, argv) -> int:
    started = time.time()
    cfg = load_config(args.config, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    bundle = synth_dyck(
        args.n, args.seed, heldout=args.heldout, out_dir=out,
        wrong_rate=cfg.wrong_rate,
    )
    write_jsonl(out / "questions.jsonl", bundle.train_questions)
    write_jsonl(out / "heldout.jsonl", bundle.heldout_questions)
    bundle.save_fewshot(out / "fewshot.json")
    write_jsonl(out / "dual_reference.jsonl", bundle.duals)
    outputs = [out / n for n in
               ("questions.jsonl", "heldout.jsonl", "fewshot.json",
                "dual_reference.jsonl")]
    write_manifest(out, argv, cfg, [], outputs, args.seed, started)
    log.info("synth: %d train, %d heldout, %d duals",
             len(bundle.train_questions), len(bundle.heldout_questions),
             len(bundle.duals))
    return 0


def _cmd_annotate(args, argv) -> int:
    started = time.time()
    cfg = load_config(args.config, seed=args.seed)
    questions = read_questions(_require_file(args.questions))
    task_description, fewshot = _load_fewshot(args.fewshot)
    cep_slots, _ = shared_fewshot(fewshot)
    teacher = _teacher_from_args(args, cfg)
    records = annotate(
        questions, CEP.with_examples(cep_slots), teacher, task_description
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_jsonl(out, records)
    write_manifest(out.parent, argv, cfg,
                   [Path(args.questions), Path(args.fewshot)], [out],
                   args.seed, started)
    return 0


def _cmd_rectify(args, argv) -> int:
    started = time.time()
    cfg = load_config(args.config, seed=args.seed)
    annotated = read_cot_records(_require_file(args.data))
    _, d_minus = partition(annotated)
    task_description, fewshot = _load_fewshot(args.fewshot)
    _, ahp_slots = shared_fewshot(fewshot)
    teacher = _teacher_from_args(args, cfg)
    records = rectify(d_minus, AHP.with_examples(ahp_slots), teacher, task_description)
    out = Path(args.out)
    write_jsonl(out, records)
    write_manifest(out.parent, argv, cfg,
                   [Path(args.data), Path(args.fewshot)], [out], args.seed, started)
    return 0


def _cmd_corrupt(args, argv) -> int:
    started = time.time()
    cfg = load_config(args.config, seed=args.seed)
    annotated = read_cot_records(_require_file(args.data))
    d_plus, d_minus = partition(annotated)
    rectified = read_cot_records(_require_file(args.rectified))
    task_description, _ = _load_fewshot(args.fewshot)
    joint = sample_joint_examples(d_minus, rectified, count=args.joint_count,
                                  seed=args.seed)
    teacher = _teacher_from_args(args, cfg)
    records = corrupt(d_plus, CCP, joint, teacher, task_description)
    out = Path(args.out)
    write_jsonl(out, records)
    write_manifest(out.parent, argv, cfg,
                   [Path(args.data), Path(args.rectified), Path(args.fewshot)],
                   [out], args.seed, started)
    return 0


def _cmd_pair(args, argv) -> int:
    started = time.time()
    annotated = read_cot_records(_require_file(args.annotated))
    d_plus, d_minus = partition(annotated)
    rectified = read_cot_records(_require_file(args.rectified))
    corrupted = read_cot_records(_require_file(args.corrupted))
    duals = pair_dual(d_plus, corrupted, d_minus, rectified)
    out = Path(args.out)
    write_jsonl(out, duals)
    write_manifest(out.parent, argv, None,
                   [Path(args.annotated), Path(args.rectified), Path(args.corrupted)],
                   [out], 0, started)
    return 0


def _cmd_merge(args, argv) -> int:
    started = time.time()
    annotated = read_cot_records(_require_file(args.annotated))
    d_plus, _ = partition(annotated)
    rectified = read_cot_records(_require_file(args.rectified)) if args.rectified else []
    merged = merge_correct(d_plus, rectified)
    out = Path(args.out)
    write_jsonl(out, merged)
    inputs = [Path(args.annotated)] + ([Path(args.rectified)] if args.rectified else [])
    write_manifest(out.parent, argv, None, inputs, [out], 0, started)
    return 0


def _cmd_classify(args, argv) -> int:
    started = time.time()
    cfg = load_config(args.config, seed=args.seed)
    duals = read_dual_records(_require_file(args.dual))
    teacher = _teacher_from_args(args, cfg)
    labels = classify_mistakes(duals, MISTAKE_PATTERN, teacher)
    out = Path(args.out)
    out.write_text(json.dumps(labels, sort_keys=True, indent=2) + "\n",
                   encoding="utf-8")
    write_manifest(out.parent, argv, cfg, [Path(args.dual)], [out], args.seed, started)
    return 0


def _cmd_align(args, argv) -> int:
    pos_text = _require_file(args.pos).read_text(encoding="utf-8")
    neg_text = _require_file(args.neg).read_text(encoding="utf-8")
    vocab = build_vocab([pos_text, neg_text])
    pos_seq = encode(pos_text, vocab)
    neg_seq = encode(neg_text, vocab)
    script = align_seqs(neg_seq, pos_seq)
    mask = weight_masks(script, args.alpha, args.beta)
    pos_spans, neg_spans = key_step_spans(mask, pos_seq, neg_seq)
    print(f"edit distance: {script.cost}")
    for op in script.ops:
        print(f"  {op.kind.value:<8} src={op.src_idx} tgt={op.tgt_idx}")
    print("omega_pos:", " ".join(f"{w:g}" for w in mask.omega_pos))
    print("omega_neg:", " ".join(f"{w:g}" for w in mask.omega_neg))
    print("correct side:")
    print(_ansi_highlight(pos_text, pos_spans, "green"))
    print("wrong side:")
    print(_ansi_highlight(neg_text, neg_spans, "red"))
    return 0


def _cmd_stats(args, argv) -> int:
    duals = read_dual_records(_require_file(args.dual))
    if not duals:
        raise ValueError("no dual records in input")
    vocab = build_vocab(
        [d.cot_pos for d in duals] + [d.cot_neg for d in duals]
    )
    pairs = [
        (encode(d.cot_pos, vocab), encode(d.cot_neg, vocab)) for d in duals
    ]
    proportion = keystep_proportion(pairs)
    print(f"pairs: {len(pairs)}")
    print(f"mean key-step proportion: {proportion:.4f}")
    return 0


def _cmd_sft(args, argv) -> int:
    started = time.time()
    cfg = load_config(args.config, seed=args.seed)
    records = read_cot_records(_require_file(args.data))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.vocab:
        vocab = Vocab.load(_require_file(args.vocab))
    else:
        vocab = build_vocab([r.question for r in records] + [r.cot for r in records])
    vocab_path = out / "vocab.tsv"
    vocab.save(vocab_path)
    params0 = lm.init(cfg.model_config(len(vocab)))
    trained, report = sft(params0, records, cfg.sft_config(), vocab)
    ckpt, rpt = _save_report_quartet(out, "sft", trained, report)
    write_manifest(out, argv, cfg, [Path(args.data)], [ckpt, rpt, vocab_path],
                   args.seed, started)
    log.info("sft: final epoch loss %.4f", report.epoch_losses[-1])
    return 0


def _cmd_krsl(args, argv) -> int:
    started = time.time()
    cfg = load_config(args.config, seed=args.seed)
    params = lm.load_checkpoint(_require_file(args.ckpt))
    vocab = Vocab.load(_require_file(args.vocab))
    duals = read_dual_records(_require_file(args.dual))
    kcfg = dataclasses.replace(
        cfg.krsl_config(), alpha=args.alpha, beta=args.beta
    )
    trained, report = krsl(params, duals, kcfg, vocab, subset=args.subset)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt, rpt = _save_report_quartet(out, "krsl", trained, report)
    write_manifest(out, argv, cfg, [Path(args.ckpt), Path(args.dual)],
                   [ckpt, rpt], args.seed, started)
    log.info("krsl: final epoch loss %.4f", report.epoch_losses[-1])
    return 0


def _cmd_eval(args, argv) -> int:
    started = time.time()
    cfg = load_config(args.config, seed=args.seed)
    params = lm.load_checkpoint(_require_file(args.ckpt))
    vocab = Vocab.load(_require_file(args.vocab))
    questions = read_questions(_require_file(args.data))
    report = evaluate_model(
        params, vocab, questions, method=args.method, seed=args.seed,
        max_new=cfg.eval_max_new,
    )
    out = Path(args.report)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.save(out)
    write_manifest(out.parent, argv, cfg, [Path(args.ckpt), Path(args.data)],
                   [out], args.seed, started)
    print(f"{args.method}: overall accuracy {report.overall:.4f}")
    return 0


def _cmd_compare(args, argv) -> int:
    reports = [EvalReport.load(_require_file(p)) for p in args.reports]
    print(compare(reports, baseline=args.baseline))
    return 0


def _cmd_pipeline(args, argv) -> int:
    if not args.synthetic:
        raise UsageError("only --synthetic pipelines are supported")
    started = time.time()
    cfg = load_config(args.config, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    log.info("pipeline: generating %d train + %d heldout questions", args.n,
             args.heldout)
    bundle = synth_dyck(args.n, args.seed, heldout=args.heldout, out_dir=out,
                        wrong_rate=cfg.wrong_rate)
    write_jsonl(out / "questions.jsonl", bundle.train_questions)
    write_jsonl(out / "heldout.jsonl", bundle.heldout_questions)
    bundle.save_fewshot(out / "fewshot.json")
    write_jsonl(out / "annotated.jsonl", bundle.annotated)
    write_jsonl(out / "rectified.jsonl", bundle.d_minus_plus)
    write_jsonl(out / "corrupted.jsonl", bundle.d_plus_minus)
    write_jsonl(out / "dual.jsonl", bundle.duals)
    write_jsonl(out / "merged.jsonl", bundle.merged)

    vocab = build_vocab(bundle.corpus_texts())
    vocab.save(out / "vocab.tsv")
    params0 = lm.init(cfg.model_config(len(vocab)))

    log.info("pipeline: sft on %d merged records", len(bundle.merged))
    params_sft, sft_report = sft(params0, bundle.merged, cfg.sft_config(), vocab)
    _save_report_quartet(out, "sft", params_sft, sft_report)

    log.info("pipeline: krsl on %d dual records", len(bundle.duals))
    params_krsl, krsl_report = krsl(params_sft, bundle.duals, cfg.krsl_config(),
                                    vocab)
    _save_report_quartet(out, "krsl", params_krsl, krsl_report)

    log.info("pipeline: std-cot baseline on %d correct records",
             len(bundle.d_plus))
    params_std, std_report = std_cot_baseline(params0, bundle.d_plus,
                                              cfg.sft_config(), vocab)
    _save_report_quartet(out, "std_cot", params_std, std_report)

    heldout = list(bundle.heldout_questions)
    if not heldout:
        raise ValueError("pipeline needs --heldout > 0 for evaluation")
    log.info("pipeline: evaluating 3 checkpoints on %d heldout questions",
             len(heldout))
    report_edit = evaluate_model(params_krsl, vocab, heldout, "EDIT", args.seed,
                                 max_new=cfg.eval_max_new)
    report_wokrsl = evaluate_model(params_sft, vocab, heldout, "EDIT w/o KRSL",
                                   args.seed, max_new=cfg.eval_max_new)
    report_std = evaluate_model(params_std, vocab, heldout, "Std-CoT", args.seed,
                                max_new=cfg.eval_max_new)
    report_edit.save(out / "eval_edit.json")
    report_wokrsl.save(out / "eval_wo_krsl.json")
    report_std.save(out / "eval_std_cot.json")
    table = compare([report_std, report_wokrsl, report_edit], baseline="Std-CoT")
    (out / "comparison.txt").write_text(table + "\n", encoding="utf-8")
    print(table)

    outputs = sorted(p for p in out.iterdir() if p.is_file())
    write_manifest(out, argv, cfg, [], outputs, args.seed, started)
    return 0


# ---------------------------------------------------------------------------
# parser


def _build_parser() -> _Parser:
    parser = _Parser(prog="edit", description=__doc__)
    parser.add_argument("--version", action="store_true", help="print version")
    sub = parser.add_subparsers(dest="cmd")

    def add(name: str, **kwargs):
        p = sub.add_parser(name, **kwargs)
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--seed", type=int, default=0)
        return p

    p = add("synth", help="generate the synthetic bracket task")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--heldout", type=int, default=0)
    p.add_argument("--out", required=True)

    p = add("annotate", help="teacher-annotate questions with chains")
    p.add_argument("--questions", required=True)
    p.add_argument("--fewshot", required=True)
    p.add_argument("--fixtures", default=None)
    p.add_argument("--out", required=True)

    p = add("rectify", help="rewrite wrong chains with an answer hint")
    p.add_argument("--data", required=True, help="annotated records")
    p.add_argument("--fewshot", required=True)
    p.add_argument("--fixtures", default=None)
    p.add_argument("--out", required=True)

    p = add("corrupt", help="corrupt correct chains contrastively")
    p.add_argument("--data", required=True, help="annotated records")
    p.add_argument("--rectified", required=True)
    p.add_argument("--fewshot", required=True)
    p.add_argument("--fixtures", default=None)
    p.add_argument("--joint-count", type=int, default=3)
    p.add_argument("--out", required=True)

    p = add("pair", help="pair the four sets into dual records")
    p.add_argument("--annotated", required=True)
    p.add_argument("--rectified", required=True)
    p.add_argument("--corrupted", required=True)
    p.add_argument("--out", required=True)

    p = add("merge", help="merge correct chains for supervised training")
    p.add_argument("--annotated", required=True)
    p.add_argument("--rectified", default=None)
    p.add_argument("--out", required=True)

    p = add("classify", help="label dual records with mistake categories")
    p.add_argument("--dual", required=True)
    p.add_argument("--fixtures", default=None)
    p.add_argument("--out", required=True)

    p = add("align", help="align two chain files and show key steps")
    p.add_argument("--pos", required=True)
    p.add_argument("--neg", required=True)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--beta", type=float, default=0.025)

    p = add("stats", help="mean key-step proportion over dual records")
    p.add_argument("--dual", required=True)

    p = add("sft", help="supervised fine-tuning on correct chains")
    p.add_argument("--data", required=True)
    p.add_argument("--vocab", default=None)
    p.add_argument("--out", required=True)

    p = add("krsl", help="key-step learning from an sft checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--dual", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--subset", choices=("both", "pos", "neg"), default="both")
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--beta", type=float, default=0.025)
    p.add_argument("--out", required=True)

    p = add("eval", help="grade a checkpoint on held-out questions")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--method", default="model")
    p.add_argument("--report", required=True)

    p = add("compare", help="tabulate evaluation reports")
    p.add_argument("reports", nargs="+")
    p.add_argument("--baseline", default=None)

    p = add("pipeline", help="synth -> sft -> krsl -> eval, offline")
    p.add_argument("--synthetic", action="store_true")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--heldout", type=int, default=400)
    p.add_argument("--out", required=True)

    return parser


_HANDLERS = {
    "synth": _cmd_synth,
    "annotate": _cmd_annotate,
    "rectify": _cmd_rectify,
    "corrupt": _cmd_corrupt,
    "pair": _cmd_pair,
    "merge": _cmd_merge,
    "classify": _cmd_classify,
    "align": _cmd_align,
    "stats": _cmd_stats,
    "sft": _cmd_sft,
    "krsl": _cmd_krsl,
    "eval": _cmd_eval,
    "compare": _cmd_compare,
    "pipeline": _cmd_pipeline,
}


def run(argv: Sequence[str]) -> int:
    logging.basicConfig(
        stream=sys.stderr, level=logging.INFO, format="%(levelname)s %(message)s"
    )
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.version:
            print(__version__)
            return 0
        if not args.cmd:
            parser.print_usage(sys.stderr)
            return 1
        return _HANDLERS[args.cmd](args, ["edit", *argv])
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError, KeyError, TeacherError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
