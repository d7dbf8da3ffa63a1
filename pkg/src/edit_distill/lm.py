"""Small decoder-only autoregressive model with exact reverse-mode gradients.

Pre-normalization transformer blocks (gamma-only layer norm, causal
multi-head attention, tanh-approximated GELU feed-forward), learned
positional embeddings, untied output projection, no biases anywhere. The
training path runs in float64 so gradient checks against central finite
differences are tight; generation may downcast to float32.

The backward pass is written by hand and returns the exact derivative of
the weighted negative log-likelihood for every parameter tensor.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .tok import EOS_ID

LN_EPS = 1e-5
INIT_SCALE = 0.02
_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_K = 0.044715

STAGES = ("init", "sft", "krsl")
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    max_seq: int = 512
    seed: int = 0

    def __post_init__(self) -> None:
        dims = (self.vocab_size, self.d_model, self.n_layers, self.n_heads,
                self.d_ff, self.max_seq)
        if any(d < 1 for d in dims):
            raise ValueError("all model dimensions must be >= 1")
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "d_model": self.d_model,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "d_ff": self.d_ff,
            "max_seq": self.max_seq,
            "seed": self.seed,
        }


def param_order(config: ModelConfig) -> list[str]:
    """Canonical tensor order used by init, optimizers, and checkpoints."""
    names = ["tok_emb", "pos_emb"]
    for i in range(config.n_layers):
        names += [
            f"layers.{i}.ln1_g",
            f"layers.{i}.wq",
            f"layers.{i}.wk",
            f"layers.{i}.wv",
            f"layers.{i}.wo",
            f"layers.{i}.ln2_g",
            f"layers.{i}.w1",
            f"layers.{i}.w2",
        ]
    names += ["lnf_g", "w_out"]
    return names


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    v, d, f, s = config.vocab_size, config.d_model, config.d_ff, config.max_seq
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (v, d),
        "pos_emb": (s, d),
        "lnf_g": (d,),
        "w_out": (d, v),
    }
    for i in range(config.n_layers):
        shapes[f"layers.{i}.ln1_g"] = (d,)
        shapes[f"layers.{i}.wq"] = (d, d)
        shapes[f"layers.{i}.wk"] = (d, d)
        shapes[f"layers.{i}.wv"] = (d, d)
        shapes[f"layers.{i}.wo"] = (d, d)
        shapes[f"layers.{i}.ln2_g"] = (d,)
        shapes[f"layers.{i}.w1"] = (d, f)
        shapes[f"layers.{i}.w2"] = (f, d)
    return shapes


def count_params(config: ModelConfig) -> int:
    return sum(int(np.prod(s)) for s in param_shapes(config).values())


@dataclass
class Params:
    config: ModelConfig
    stage: str
    seed: int
    tensors: dict[str, np.ndarray]

    def __post_init__(self) -> None:
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")

    def copy(self) -> "Params":
        return Params(
            config=self.config,
            stage=self.stage,
            seed=self.seed,
            tensors={k: v.copy() for k, v in self.tensors.items()},
        )

    def with_stage(self, stage: str) -> "Params":
        return Params(config=self.config, stage=stage, seed=self.seed,
                      tensors=self.tensors)


@dataclass
class GradBundle:
    tensors: dict[str, np.ndarray]

    @classmethod
    def zeros(cls, config: ModelConfig) -> "GradBundle":
        return cls({k: np.zeros(s) for k, s in param_shapes(config).items()})


def init(config: ModelConfig) -> Params:
    """Seeded initialization: N(0, 0.02) matrices, unit norm scales."""
    rng = np.random.default_rng(config.seed)
    tensors: dict[str, np.ndarray] = {}
    for name in param_order(config):
        shape = param_shapes(config)[name]
        if name.endswith("_g"):
            tensors[name] = np.ones(shape)
        else:
            tensors[name] = rng.normal(0.0, INIT_SCALE, size=shape)
    return Params(config=config, stage="init", seed=config.seed, tensors=tensors)


# ---------------------------------------------------------------------------
# forward / backward


def _layer_norm(x: np.ndarray, g: np.ndarray):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    return g * xhat, (xhat, inv)

def _layer_norm_backward(dy: np.ndarray, g: np.ndarray, cache):
    xhat, inv = cache
    dg = (dy * xhat).sum(axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * g
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv * (dxhat - m1 - xhat * m2)
    return dx, dg


def _gelu(u: np.ndarray):
    # tanh approximation, written with in-place ops (power ufuncs are slow)
    inner = u * u
    inner *= u
    inner *= _GELU_K
    inner += u
    inner *= _GELU_C
    t = np.tanh(inner)
    out = t + 1.0
    out *= u
    out *= 0.5
    return out, t

def _gelu_backward(du_out: np.ndarray, u: np.ndarray, t: np.ndarray) -> np.ndarray:
    uu = u * u
    uu *= 3.0 * _GELU_K
    uu += 1.0
    uu *= _GELU_C
    uu *= 1.0 - t * t          # now: dt/du
    uu *= 0.5 * u
    uu += 0.5 * (1.0 + t)      # now: dgelu/du
    uu *= du_out
    return uu


def _split_heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    b, t, d = x.shape
    # contiguous copy: batched matmuls on transposed views are much slower
    return np.ascontiguousarray(
        x.reshape(b, t, n_heads, d // n_heads).transpose(0, 2, 1, 3)
    )

def _merge_heads(x: np.ndarray) -> np.ndarray:
    b, h, t, dk = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * dk)


def _forward_batch(
    tensors: dict[str, np.ndarray],
    config: ModelConfig,
    ids: np.ndarray,
    keep_cache: bool,
):
    """Causal forward over an id batch (B, T); returns logits and caches."""
    b, t = ids.shape
    if t > config.max_seq:
        raise ValueError(f"sequence length {t} exceeds max_seq {config.max_seq}")
    dtype = tensors["tok_emb"].dtype
    scale = 1.0 / math.sqrt(config.d_model // config.n_heads)
    mask_add = np.zeros((t, t), dtype=dtype)
    mask_add[np.triu_indices(t, k=1)] = -np.inf

    x = tensors["tok_emb"][ids] + tensors["pos_emb"][:t]
    caches = []
    for i in range(config.n_layers):
        p = f"layers.{i}."
        h, ln1c = _layer_norm(x, tensors[p + "ln1_g"])
        h2d = h.reshape(-1, config.d_model)
        q = _split_heads((h2d @ tensors[p + "wq"]).reshape(b, t, -1), config.n_heads)
        k = _split_heads((h2d @ tensors[p + "wk"]).reshape(b, t, -1), config.n_heads)
        v = _split_heads((h2d @ tensors[p + "wv"]).reshape(b, t, -1), config.n_heads)
        attn = q @ k.transpose(0, 1, 3, 2)
        attn *= scale
        attn += mask_add
        attn -= attn.max(axis=-1, keepdims=True)
        np.exp(attn, out=attn)
        attn /= attn.sum(axis=-1, keepdims=True)
        ctx = _merge_heads(attn @ v)
        attn_out = (ctx.reshape(-1, config.d_model) @ tensors[p + "wo"]).reshape(b, t, -1)
        x1 = x + attn_out
        h2, ln2c = _layer_norm(x1, tensors[p + "ln2_g"])
        u = (h2.reshape(-1, config.d_model) @ tensors[p + "w1"]).reshape(b, t, -1)
        a, gelu_t = _gelu(u)
        f = (a.reshape(-1, config.d_ff) @ tensors[p + "w2"]).reshape(b, t, -1)
        x2 = x1 + f
        if keep_cache:
            caches.append(
                {"x": x, "ln1c": ln1c, "h": h, "q": q, "k": k, "v": v,
                 "attn": attn, "ctx": ctx, "x1": x1, "ln2c": ln2c, "h2": h2,
                 "u": u, "gelu_t": gelu_t, "a": a}
            )
        x = x2
    hf, lnfc = _layer_norm(x, tensors["lnf_g"])
    logits = (hf.reshape(-1, config.d_model) @ tensors["w_out"]).reshape(b, t, -1)
    final_cache = {"ids": ids, "hf": hf, "lnfc": lnfc, "layers": caches}
    return logits, final_cache


def _backward_batch(
    tensors: dict[str, np.ndarray],
    config: ModelConfig,
    dlogits: np.ndarray,
    cache: dict,
) -> dict[str, np.ndarray]:
    b, t, _ = dlogits.shape
    d, f = config.d_model, config.d_ff
    scale = 1.0 / math.sqrt(d // config.n_heads)
    grads: dict[str, np.ndarray] = {}

    dl2d = dlogits.reshape(-1, config.vocab_size)
    hf2d = cache["hf"].reshape(-1, d)
    grads["w_out"] = hf2d.T @ dl2d
    dhf = (dl2d @ tensors["w_out"].T).reshape(b, t, d)
    dx, grads["lnf_g"] = _layer_norm_backward(dhf, tensors["lnf_g"], cache["lnfc"])

    for i in reversed(range(config.n_layers)):
        p = f"layers.{i}."
        c = cache["layers"][i]
        # feed-forward sublayer
        df2d = dx.reshape(-1, d)
        grads[p + "w2"] = c["a"].reshape(-1, f).T @ df2d
        da = (df2d @ tensors[p + "w2"].T).reshape(b, t, f)
        du = _gelu_backward(da, c["u"], c["gelu_t"])
        du2d = du.reshape(-1, f)
        grads[p + "w1"] = c["h2"].reshape(-1, d).T @ du2d
        dh2 = (du2d @ tensors[p + "w1"].T).reshape(b, t, d)
        dx1_ln, grads[p + "ln2_g"] = _layer_norm_backward(
            dh2, tensors[p + "ln2_g"], c["ln2c"]
        )
        dx1 = dx + dx1_ln
        # attention sublayer
        dattn2d = dx1.reshape(-1, d)
        grads[p + "wo"] = c["ctx"].reshape(-1, d).T @ dattn2d
        dctx = _split_heads(
            (dattn2d @ tensors[p + "wo"].T).reshape(b, t, d), config.n_heads
        )
        dA = dctx @ c["v"].transpose(0, 1, 3, 2)
        dv = c["attn"].transpose(0, 1, 3, 2) @ dctx
        # softmax backward in place; masked columns have attn == 0, so dS
        # stays 0 there
        dA -= (dA * c["attn"]).sum(axis=-1, keepdims=True)
        dA *= c["attn"]
        dS = dA
        dq = (dS @ c["k"]) * scale
        dk = (dS.transpose(0, 1, 3, 2) @ c["q"]) * scale
        dq2d = _merge_heads(dq).reshape(-1, d)
        dk2d = _merge_heads(dk).reshape(-1, d)
        dv2d = _merge_heads(dv).reshape(-1, d)
        h2d = c["h"].reshape(-1, d)
        grads[p + "wq"] = h2d.T @ dq2d
        grads[p + "wk"] = h2d.T @ dk2d
        grads[p + "wv"] = h2d.T @ dv2d
        dh = (
            dq2d @ tensors[p + "wq"].T
            + dk2d @ tensors[p + "wk"].T
            + dv2d @ tensors[p + "wv"].T
        ).reshape(b, t, d)
        dx_ln, grads[p + "ln1_g"] = _layer_norm_backward(
            dh, tensors[p + "ln1_g"], c["ln1c"]
        )
        dx = dx1 + dx_ln

    ids = cache["ids"]
    grads["pos_emb"] = np.zeros_like(tensors["pos_emb"])
    grads["pos_emb"][:t] = dx.sum(axis=0)
    grads["tok_emb"] = np.zeros_like(tensors["tok_emb"])
    np.add.at(grads["tok_emb"], ids.reshape(-1), dx.reshape(-1, d))
    return grads


def forward(params: Params, ids: Sequence[int]) -> np.ndarray:
    """Logits for one sequence, shape (len(ids), vocab_size)."""
    arr = np.asarray(list(ids), dtype=np.int64).reshape(1, -1)
    if arr.shape[1] == 0:
        return np.zeros((0, params.config.vocab_size))
    logits, _ = _forward_batch(params.tensors, params.config, arr, keep_cache=False)
    return logits[0]


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def batch_weighted_nll(
    params: Params,
    ids: np.ndarray,
    weights: np.ndarray,
    logprob_floor: float | None = None,
    floor_rows: np.ndarray | None = None,
) -> tuple[float, GradBundle]:
    """Core training loss over an id batch.

    ``weights[b, p]`` multiplies the negative log-probability of token
    ``ids[b, p+1]`` given positions 0..p; the last column must be zero.
    Negative weights flip the sign (likelihood is pushed down), which is
    how the wrong side of a dual pair enters. When ``logprob_floor`` is
    set, tokens on ``floor_rows`` whose log-probability is below the floor
    contribute a constant and no gradient.
    """
    if ids.shape != weights.shape:
        raise ValueError("ids and weights shapes differ")
    if np.any(weights[:, -1] != 0.0):
        raise ValueError("last-position weights must be zero")
    logits, cache = _forward_batch(params.tensors, params.config, ids, keep_cache=True)
    b, t, v = logits.shape
    logp_all = _log_softmax(logits)
    labels = np.zeros((b, t), dtype=np.int64)
    labels[:, :-1] = ids[:, 1:]
    logp = np.take_along_axis(logp_all, labels[:, :, None], axis=2)[:, :, 0]

    w_eff = weights
    if logprob_floor is not None and floor_rows is not None and floor_rows.any():
        clamped = (logp < logprob_floor) & floor_rows[:, None]
        logp = np.where(clamped, logprob_floor, logp)
        w_eff = np.where(clamped, 0.0, weights)

    loss = float(-(weights * logp).sum())

    dlogits = np.exp(logp_all)
    dlogits *= w_eff[:, :, None]
    np.subtract.at(dlogits.reshape(-1, v), (np.arange(b * t), labels.reshape(-1)),
                   w_eff.reshape(-1))
    grads = _backward_batch(params.tensors, params.config, dlogits, cache)
    return loss, GradBundle(grads)


def weighted_nll(
    params: Params,
    prompt_ids: Sequence[int],
    target_ids: Sequence[int],
    omega: Sequence[float],
    logprob_floor: float | None = None,
) -> tuple[float, GradBundle]:
    """Weighted NLL of target tokens given the prompt, teacher forced.

    The loss is -sum_t omega[t] * log p(target[t] | prompt, target[<t]);
    gradients are its exact reverse-mode derivatives for every tensor.
    """
    if len(omega) != len(target_ids):
        raise ValueError("omega length must match target length")
    if len(prompt_ids) < 1:
        raise ValueError("prompt must contain at least one token")
    full = list(prompt_ids) + list(target_ids)
    if len(full) > params.config.max_seq:
        raise ValueError("prompt plus target exceeds max_seq")
    ids = np.asarray(full, dtype=np.int64).reshape(1, -1)
    weights = np.zeros_like(ids, dtype=np.float64)
    start = len(prompt_ids) - 1
    weights[0, start : start + len(target_ids)] = np.asarray(omega, dtype=np.float64)
    floor_rows = np.array([True]) if logprob_floor is not None else None
    return batch_weighted_nll(params, ids, weights, logprob_floor, floor_rows)


def sequence_logprobs(params: Params, ids: Sequence[int]) -> np.ndarray:
    """log p(ids[t+1] | ids[..t]) for every position; length len(ids)-1."""
    logits = forward(params, ids)
    logp = _log_softmax(logits[:-1])
    nxt = np.asarray(list(ids[1:]), dtype=np.int64)
    return np.take_along_axis(logp, nxt[:, None], axis=1)[:, 0]


# ---------------------------------------------------------------------------
# generation


def _forward_last(
    tensors: dict[str, np.ndarray], config: ModelConfig, ids: np.ndarray
) -> np.ndarray:
    """Logits at the final position only, shape (B, vocab).

    Lower layers run in full (the top layer reads keys and values at every
    position) but the top layer computes just the last query, its
    feed-forward, and the output head. Nothing is cached across calls, so
    greedy decoding stays a stateless re-computation per step.
    """
    b, t = ids.shape
    if t > config.max_seq:
        raise ValueError(f"sequence length {t} exceeds max_seq {config.max_seq}")
    dtype = tensors["tok_emb"].dtype
    d = config.d_model
    scale = 1.0 / math.sqrt(d // config.n_heads)
    mask_add = np.zeros((t, t), dtype=dtype)
    mask_add[np.triu_indices(t, k=1)] = -np.inf

    x = tensors["tok_emb"][ids] + tensors["pos_emb"][:t]
    for i in range(config.n_layers - 1):
        p = f"layers.{i}."
        h, _ = _layer_norm(x, tensors[p + "ln1_g"])
        h2d = h.reshape(-1, d)
        q = _split_heads((h2d @ tensors[p + "wq"]).reshape(b, t, -1), config.n_heads)
        k = _split_heads((h2d @ tensors[p + "wk"]).reshape(b, t, -1), config.n_heads)
        v = _split_heads((h2d @ tensors[p + "wv"]).reshape(b, t, -1), config.n_heads)
        attn = q @ k.transpose(0, 1, 3, 2)
        attn *= scale
        attn += mask_add
        attn -= attn.max(axis=-1, keepdims=True)
        np.exp(attn, out=attn)
        attn /= attn.sum(axis=-1, keepdims=True)
        ctx = _merge_heads(attn @ v)
        x = x + (ctx.reshape(-1, d) @ tensors[p + "wo"]).reshape(b, t, -1)
        h2, _ = _layer_norm(x, tensors[p + "ln2_g"])
        u = (h2.reshape(-1, d) @ tensors[p + "w1"]).reshape(b, t, -1)
        a, _ = _gelu(u)
        x = x + (a.reshape(-1, config.d_ff) @ tensors[p + "w2"]).reshape(b, t, -1)

    p = f"layers.{config.n_layers - 1}."
    h, _ = _layer_norm(x, tensors[p + "ln1_g"])
    h2d = h.reshape(-1, d)
    q_last = _split_heads(
        (h[:, -1:, :].reshape(b, d) @ tensors[p + "wq"]).reshape(b, 1, -1),
        config.n_heads,
    )
    k = _split_heads((h2d @ tensors[p + "wk"]).reshape(b, t, -1), config.n_heads)
    v = _split_heads((h2d @ tensors[p + "wv"]).reshape(b, t, -1), config.n_heads)
    attn = q_last @ k.transpose(0, 1, 3, 2)  # (B, H, 1, T); last row is unmasked
    attn *= scale
    attn -= attn.max(axis=-1, keepdims=True)
    np.exp(attn, out=attn)
    attn /= attn.sum(axis=-1, keepdims=True)
    ctx = _merge_heads(attn @ v).reshape(b, d)
    x1 = x[:, -1, :] + ctx @ tensors[p + "wo"]
    h2, _ = _layer_norm(x1, tensors[p + "ln2_g"])
    a, _ = _gelu(h2 @ tensors[p + "w1"])
    x2 = x1 + a @ tensors[p + "w2"]
    hf, _ = _layer_norm(x2, tensors["lnf_g"])
    return hf @ tensors["w_out"]


def generate_greedy(
    params: Params,
    prompt_ids: Sequence[int],
    max_new: int,
    stop: int = EOS_ID,
) -> list[int]:
    """Deterministic argmax decoding; returns the continuation only."""
    out = batch_generate(params, [list(prompt_ids)], max_new, stop=stop,
                         dtype=np.float64)
    return out[0]


def batch_generate(
    params: Params,
    prompts: Sequence[Sequence[int]],
    max_new: int,
    stop: int = EOS_ID,
    dtype=np.float32,
    chunk_rows: int = 128,
) -> list[list[int]]:
    """Greedy decoding over many prompts in lockstep batches.

    Prompts are grouped by length (no padding, no cache); decoding is
    quadratic in output length but fully vectorized across rows. Groups
    are processed in chunks of ``chunk_rows`` to stay cache-friendly.
    """
    if any(len(p) < 1 for p in prompts):
        raise ValueError("prompts must be non-empty")
    if any(len(p) > params.config.max_seq for p in prompts):
        raise ValueError("prompt exceeds max_seq")
    tensors = {k: v.astype(dtype, copy=False) for k, v in params.tensors.items()}
    results: dict[int, list[int]] = {}
    groups: list[tuple[int, list[int]]] = []
    by_len: dict[int, list[int]] = {}
    for idx, p in enumerate(prompts):
        by_len.setdefault(len(p), []).append(idx)
    for plen, indices in sorted(by_len.items()):
        for start in range(0, len(indices), chunk_rows):
            groups.append((plen, indices[start : start + chunk_rows]))

    for plen, indices in groups:
        active = list(indices)
        seqs = np.asarray([list(prompts[i]) for i in active], dtype=np.int64)
        for i in active:
            results[i] = []
        steps = min(max_new, params.config.max_seq - plen)
        for _ in range(steps):
            if not active:
                break
            last_logits = _forward_last(tensors, params.config, seqs)
            nxt = last_logits.argmax(axis=1)
            seqs = np.concatenate([seqs, nxt[:, None]], axis=1)
            keep: list[int] = []
            for row, idx in enumerate(active):
                results[idx].append(int(nxt[row]))
                if int(nxt[row]) != stop:
                    keep.append(row)
            if len(keep) < len(active):
                active = [active[r] for r in keep]
                seqs = seqs[keep]
    return [results[i] for i in range(len(prompts))]


# ---------------------------------------------------------------------------
# checkpoints


def checkpoint_bytes(params: Params) -> bytes:
    order = param_order(params.config)
    blob = b"".join(
        np.ascontiguousarray(params.tensors[k], dtype="<f8").tobytes() for k in order
    )
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": params.config.to_dict(),
        "stage": params.stage,
        "seed": params.seed,
        "content_hash": hashlib.sha256(blob).hexdigest(),
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return head + b"\n" + blob


def save_checkpoint(params: Params, path: str | Path) -> None:
    Path(path).write_bytes(checkpoint_bytes(params))


def load_checkpoint(path: str | Path) -> Params:
    raw = Path(path).read_bytes()
    nl = raw.index(b"\n")
    header = json.loads(raw[:nl].decode("utf-8"))
    if header["format_version"] != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header['format_version']}")
    config = ModelConfig(**header["config"])
    blob = raw[nl + 1 :]
    if hashlib.sha256(blob).hexdigest() != header["content_hash"]:
        raise ValueError("checkpoint content hash mismatch")
    tensors: dict[str, np.ndarray] = {}
    offset = 0
    for name in param_order(config):
        shape = param_shapes(config)[name]
        size = int(np.prod(shape)) * 8
        arr = np.frombuffer(blob[offset : offset + size], dtype="<f8").reshape(shape)
        tensors[name] = arr.astype(np.float64)
        offset += size
    if offset != len(blob):
        raise ValueError("checkpoint has trailing bytes")
    return Params(
        config=config, stage=header["stage"], seed=header["seed"], tensors=tensors
    )
