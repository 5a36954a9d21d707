"""Trace corpora: parsing, validation, vocabularies and train/val/test splits.

Corpus file format (UTF-8, LF): one sample per line,

    id<TAB>family<TAB>call1,call2,...,callT

Lines starting with ``#`` are comments. Vocabulary files are
``index<TAB>token`` lines with indices 0-3 reserved for the control
tokens PAD/GO/EOS/UNK in that order.
"""

from __future__ import annotations

import math
import random
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

PAD = 0
GO = 1
EOS = 2
UNK = 3
RESERVED_TOKENS = ("PAD", "GO", "EOS", "UNK")

_API_NAME_RE = re.compile(r"^[A-Za-z0-9_]+$")


class CorpusError(ValueError):
    """Base class for corpus-level data errors."""


class MalformedLine(CorpusError):
    def __init__(self, line_number, reason):
        super().__init__(f"line {line_number}: {reason}")
        self.line_number = line_number


class DuplicateId(CorpusError):
    def __init__(self, trace_id, line_number):
        super().__init__(f"line {line_number}: duplicate trace id {trace_id!r}")
        self.trace_id = trace_id


class CorpusTooSmall(CorpusError):
    pass


def is_valid_api_name(name: str) -> bool:
    return bool(_API_NAME_RE.match(name))


@dataclass(frozen=True)
class Trace:
    """One sample: an ordered API-call sequence with a family label."""

    id: str
    family: str
    calls: tuple[str, ...]


@dataclass(frozen=True)
class Vocabulary:
    """Bijective token<->index map with fixed control indices 0-3.

    Reserved tokens are identified by *index*, never by string: an API
    literally named "PAD" is stored as an ordinary token at index >= 4.
    """

    index_to_token: tuple[str, ...]
    token_to_index: dict = field(hash=False)

    @property
    def size(self) -> int:
        return len(self.index_to_token)

    def encode_token(self, name: str) -> int:
        return self.token_to_index.get(name, UNK)

    def token(self, index: int) -> str:
        return self.index_to_token[index]

    @classmethod
    def from_tokens(cls, tokens: Sequence[str]) -> "Vocabulary":
        """Build a vocabulary with the given API tokens at indices 4, 5, ..."""
        index_to_token = RESERVED_TOKENS + tuple(tokens)
        token_to_index = {t: i for i, t in enumerate(tokens, start=len(RESERVED_TOKENS))}
        return cls(index_to_token, token_to_index)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for i, tok in enumerate(self.index_to_token):
                fh.write(f"{i}\t{tok}\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        tokens = []
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh):
                line = line.rstrip("\n")
                if not line:
                    continue
                parts = line.split("\t")
                if len(parts) != 2 or int(parts[0]) != lineno:
                    raise MalformedLine(lineno + 1, "bad vocabulary line")
                tokens.append(parts[1])
        if len(tokens) < len(RESERVED_TOKENS):
            raise CorpusError("vocabulary file lacks the four reserved entries")
        return cls(tuple(tokens), {t: i for i, t in enumerate(tokens) if i >= len(RESERVED_TOKENS)})


@dataclass(frozen=True)
class CorpusSplit:
    train: tuple[Trace, ...]
    validation: tuple[Trace, ...]
    test: tuple[Trace, ...]
    seed: int

    def all_traces(self) -> tuple[Trace, ...]:
        return self.train + self.validation + self.test


def parse_corpus(lines: Iterable[str]) -> list[Trace]:
    """Parse the canonical TSV corpus format into Trace records.

    `lines` is any iterable of text lines (an open file works). Raises
    MalformedLine / DuplicateId with 1-based line numbers.
    """
    traces = []
    seen = set()
    for lineno, raw in enumerate(lines, start=1):
        line = raw.rstrip("\n").rstrip("\r")
        if not line or line.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) != 3:
            raise MalformedLine(lineno, f"expected 3 tab-separated fields, got {len(fields)}")
        trace_id, family, call_field = fields
        if not trace_id:
            raise MalformedLine(lineno, "empty id")
        if not family:
            raise MalformedLine(lineno, "empty family")
        calls = call_field.split(",") if call_field else []
        if not calls or any(not c for c in calls):
            raise MalformedLine(lineno, "empty call list or empty call name")
        for c in calls:
            if not is_valid_api_name(c):
                raise MalformedLine(lineno, f"invalid API name {c!r}")
        if trace_id in seen:
            raise DuplicateId(trace_id, lineno)
        seen.add(trace_id)
        traces.append(Trace(trace_id, family, tuple(calls)))
    return traces


def load_corpus(path) -> list[Trace]:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_corpus(fh)


def serialize_corpus(traces: Iterable[Trace]) -> str:
    return "".join(f"{t.id}\t{t.family}\t{','.join(t.calls)}\n" for t in traces)


def save_corpus(traces: Iterable[Trace], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(serialize_corpus(traces))


def drop_rare_families(corpus: Sequence[Trace], min_count: int) -> list[Trace]:
    """Keep only traces whose family has at least min_count members."""
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    counts = Counter(t.family for t in corpus)
    return [t for t in corpus if counts[t.family] >= min_count]


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split_corpus(corpus: Sequence[Trace], seed: int) -> CorpusSplit:
    """Random 75/5/20 partition, deterministic under seed.

    Train and validation sizes use half-up rounding of 0.75n and 0.05n;
    the remainder goes to test.
    """
    n = len(corpus)
    if n < 20:
        raise CorpusTooSmall(f"need at least 20 traces to split, got {n}")
    order = list(corpus)
    random.Random(seed).shuffle(order)
    n_train = _round_half_up(0.75 * n)
    n_val = _round_half_up(0.05 * n)
    train = tuple(order[:n_train])
    validation = tuple(order[n_train:n_train + n_val])
    test = tuple(order[n_train + n_val:])
    return CorpusSplit(train, validation, test, seed)


def build_vocabulary(traces: Sequence[Trace], min_token_count: int = 0) -> Vocabulary:
    """Count-descending vocabulary (lexicographic tiebreak) over API names.

    Tokens rarer than min_token_count are left out and encode as UNK.
    """
    if not traces:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    counts = Counter()
    for t in traces:
        counts.update(t.calls)
    kept = [tok for tok, c in counts.items() if c >= min_token_count]
    kept.sort(key=lambda tok: (-counts[tok], tok))
    return Vocabulary.from_tokens(kept)


def encode_trace(vocab: Vocabulary, trace: Trace, max_len: int) -> list[int]:
    """Map calls to indices (UNK for unknown), truncated to the first max_len."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    get = vocab.token_to_index.get
    return [get(c, UNK) for c in trace.calls[:max_len]]


def family_labels(traces: Iterable[Trace]) -> list[str]:
    """Sorted unique family labels of a corpus."""
    return sorted({t.family for t in traces})
