"""Word + punctuation tokenizer with a fixed special-token alphabet.

Token-level alignment, weight masks, and the model losses are all defined
over the sequences this module produces, so encoding must be a pure
function: same text in, same ids out, on every platform.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
SEP_ID = 3
UNK_ID = 4

SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<sep>", "<unk>")
NUM_SPECIALS = len(SPECIAL_TOKENS)

# Punctuation characters that always become standalone tokens. Bracket
# characters are included on purpose: bracket-completion answers must
# survive tokenization symbol by symbol.
_PUNCT = ".,:;!?(){}<>\"'"

# Operates on UTF-8 bytes so spans are byte offsets into the source text.
_TOKEN_RE = re.compile(
    rb"[.,:;!?(){}<>\"']|[^\s.,:;!?(){}<>\"']+"
)


def tokenize_text(text: str) -> list[tuple[str, int, int]]:
    """Split text into surface tokens with (token, byte_start, byte_end).

    Whitespace separates tokens; each punctuation character in
    ``.,:;!?(){}<>"'`` is its own token.
    """
    raw = text.encode("utf-8")
    out = []
    for m in _TOKEN_RE.finditer(raw):
        out.append((m.group().decode("utf-8"), m.start(), m.end()))
    return out


@dataclass(frozen=True)
class Vocab:
    """Bijective token/id mapping with reserved special ids 0-4."""

    token_to_id: dict[str, int]
    id_to_token: tuple[str, ...]

    def __post_init__(self) -> None:
        if self.id_to_token[:NUM_SPECIALS] != SPECIAL_TOKENS:
            raise ValueError("special tokens must occupy ids 0-4")
        for tok, idx in self.token_to_id.items():
            if self.id_to_token[idx] != tok:
                raise ValueError("token_to_id and id_to_token disagree")

    def __len__(self) -> int:
        return len(self.id_to_token)

    def save(self, path: str | Path) -> None:
        lines = [f"{i}\t{tok}" for i, tok in enumerate(self.id_to_token)]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        tokens = []
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if not line:
                continue
            idx_s, tok = line.split("\t", 1)
            if int(idx_s) != len(tokens):
                raise ValueError(f"non-contiguous id {idx_s} in vocab file")
            tokens.append(tok)
        return cls._from_ordered(tokens)

    @classmethod
    def _from_ordered(cls, tokens: Sequence[str]) -> "Vocab":
        return cls(
            token_to_id={t: i for i, t in enumerate(tokens)},
            id_to_token=tuple(tokens),
        )


@dataclass(frozen=True)
class TokenSeq:
    """Encoded text: vocab ids plus byte spans into the source string."""

    ids: tuple[int, ...]
    spans: tuple[tuple[int, int], ...]

    def __post_init__(self) -> None:
        if len(self.ids) != len(self.spans):
            raise ValueError("ids and spans must have equal length")

    def __len__(self) -> int:
        return len(self.ids)


def build_vocab(corpus: Iterable[str]) -> Vocab:
    """Induce a vocabulary from a corpus of texts.

    Induction is order independent: corpus tokens are sorted
    lexicographically before ids are assigned, starting right after the
    reserved specials.
    """
    seen: set[str] = set()
    empty = True
    for text in corpus:
        empty = False
        for tok, _, _ in tokenize_text(text):
            seen.add(tok)
    if empty:
        raise ValueError("empty corpus")
    ordered = list(SPECIAL_TOKENS) + sorted(seen)
    return Vocab._from_ordered(ordered)


def encode(text: str, vocab: Vocab) -> TokenSeq:
    """Encode text to a TokenSeq; out-of-vocabulary tokens map to UNK."""
    ids = []
    spans = []
    for tok, start, end in tokenize_text(text):
        ids.append(vocab.token_to_id.get(tok, UNK_ID))
        spans.append((start, end))
    return TokenSeq(ids=tuple(ids), spans=tuple(spans))


def decode(ids: Sequence[int], vocab: Vocab) -> str:
    """Join tokens with single spaces, omitting all special ids."""
    words = []
    for i in ids:
        if not 0 <= i < len(vocab):
            raise ValueError(f"invalid id {i}")
        if i < NUM_SPECIALS:
            continue
        words.append(vocab.id_to_token[i])
    return " ".join(words)
