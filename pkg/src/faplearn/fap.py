"""File-access patterns: canonical API set, presence vectors and FAP strings.

A trace's FAP is determined by which of the seven canonical file-access
APIs occur anywhere in it. The presence bits form a 7-bit vector; the FAP
string is the underscore join of the present canonical names in canonical
order. Alias resolution is table-driven: only the exact original spellings
listed in ALIAS_TO_CANONICAL map to a canonical name.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

from .corpus import EOS, Trace, Vocabulary

CANONICAL_FAP_APIS = (
    "CreateFile",
    "ReadFile",
    "GetTempFileName",
    "SetFileAttributes",
    "WriteFile",
    "CopyFile",
    "DeleteFile",
)

ALIAS_TO_CANONICAL = {
    "CreateFileA": "CreateFile",
    "CreateFileW": "CreateFile",
    "ReadFile": "ReadFile",
    "GetTempFileNameA": "GetTempFileName",
    "GetTempFileNameW": "GetTempFileName",
    "SetFileAttributesA": "SetFileAttributes",
    "SetFileAttributesW": "SetFileAttributes",
    "WriteFile": "WriteFile",
    "CopyFileA": "CopyFile",
    "CopyFileExW": "CopyFile",
    "DeleteFileA": "DeleteFile",
    "DeleteFileW": "DeleteFile",
}


class FapError(ValueError):
    pass


class MissingVocabToken(FapError):
    pass


class UnknownFapId(FapError):
    pass


@dataclass(frozen=True)
class FapSet:
    """The canonical file-access API set and its alias table."""

    canonical: tuple[str, ...] = CANONICAL_FAP_APIS
    aliases: Mapping[str, str] = None  # type: ignore[assignment]

    def __post_init__(self):
        if self.aliases is None:
            object.__setattr__(self, "aliases", dict(ALIAS_TO_CANONICAL))
        if len(self.canonical) != 7:
            raise FapError("canonical FAP set must have exactly 7 APIs")
        bad = set(self.aliases.values()) - set(self.canonical)
        if bad:
            raise FapError(f"alias targets outside the canonical set: {sorted(bad)}")

    @property
    def size(self) -> int:
        return len(self.canonical)

    def index_of(self, canonical_name: str) -> int:
        return self.canonical.index(canonical_name)

    def originals_of(self, canonical_name: str) -> tuple[str, ...]:
        return tuple(a for a, c in self.aliases.items() if c == canonical_name)


DEFAULT_FAP_SET = FapSet()


@dataclass(frozen=True)
class FapVector:
    """Presence bits over the canonical set, bits[j] in {0, 1}."""

    bits: tuple[int, ...]

    def __post_init__(self):
        if len(self.bits) != 7 or any(b not in (0, 1) for b in self.bits):
            raise FapError(f"FAP vector must be 7 bits of 0/1, got {self.bits}")


@dataclass(frozen=True)
class Fap:
    """A FAP as text ("CreateFile_WriteFile") and as a token list."""

    text: str
    tokens: tuple[str, ...]


def canonicalize_api(name: str, fset: FapSet = DEFAULT_FAP_SET) -> str | None:
    """Canonical name for a listed original API spelling, else None."""
    return fset.aliases.get(name)


def extract_fap_vector(trace: Trace | Iterable[str], fset: FapSet = DEFAULT_FAP_SET) -> FapVector:
    """Presence bits of the canonical APIs anywhere in the trace.

    Order and multiplicity of calls are irrelevant (set semantics).
    """
    calls = trace.calls if isinstance(trace, Trace) else trace
    present = {fset.aliases[c] for c in calls if c in fset.aliases}
    return FapVector(tuple(1 if name in present else 0 for name in fset.canonical))


def vector_to_fap(v: FapVector, fset: FapSet = DEFAULT_FAP_SET) -> Fap:
    """FAP tokens at the set bits, joined with underscores in canonical order."""
    tokens = tuple(name for name, bit in zip(fset.canonical, v.bits) if bit)
    return Fap("_".join(tokens), tokens)


def fap_from_text(text: str, fset: FapSet = DEFAULT_FAP_SET) -> Fap:
    """Parse an underscore-joined FAP, normalizing tokens to canonical order."""
    tokens = [t for t in text.split("_") if t]
    for t in tokens:
        if t not in fset.canonical:
            raise FapError(f"unknown FAP token {t!r}")
    if len(set(tokens)) != len(tokens):
        raise FapError(f"duplicate FAP token in {text!r}")
    ordered = tuple(sorted(tokens, key=fset.index_of))
    return Fap("_".join(ordered), ordered)


def fap_to_vector(f: Fap, fset: FapSet = DEFAULT_FAP_SET) -> FapVector:
    return FapVector(tuple(1 if name in f.tokens else 0 for name in fset.canonical))


# The published FAP id list. Entries are normalized to canonical order when
# the table is built, so lookups are insensitive to the source ordering.
_DEFAULT_ID_ENTRIES = (
    ("CreateFile_WriteFile", "p1"),
    ("CreateFile_ReadFile", "p2"),
    ("CreateFile_WriteFile_ReadFile", "p3"),
    ("CreateFile", "p4"),
    ("CreateFile_ReadFile_GetTempFileName_SetFileAttributes_DeleteFile_WriteFile", "p5"),
    ("CreateFile_WriteFile_CopyFile", "p6"),
)

OTHER_FAP_ID = "other"


@dataclass(frozen=True)
class FapIdTable:
    """Map from canonical FAP text to a short id (p1, p2, ...)."""

    text_to_id: Mapping[str, str]

    def __post_init__(self):
        ids = list(self.text_to_id.values())
        if len(ids) != len(set(ids)):
            raise FapError("FAP ids must be unique")

    @classmethod
    def from_entries(cls, entries: Iterable[tuple[str, str]], fset: FapSet = DEFAULT_FAP_SET) -> "FapIdTable":
        mapping = {}
        for text, fap_id in entries:
            canonical = fap_from_text(text, fset).text
            if canonical in mapping:
                raise FapError(f"duplicate FAP entry {canonical!r}")
            mapping[canonical] = fap_id
        return cls(mapping)

    @property
    def ids(self) -> tuple[str, ...]:
        return tuple(self.text_to_id.values())


DEFAULT_FAP_ID_TABLE = FapIdTable.from_entries(_DEFAULT_ID_ENTRIES)


def fap_to_id(f: Fap, table: FapIdTable = DEFAULT_FAP_ID_TABLE) -> str:
    """Table id of a FAP, or "other" for unmapped patterns."""
    return table.text_to_id.get(f.text, OTHER_FAP_ID)


def fap_vocabulary(fset: FapSet = DEFAULT_FAP_SET) -> Vocabulary:
    """Decoder output alphabet: control tokens plus the canonical APIs."""
    return Vocabulary.from_tokens(fset.canonical)


def fap_target_sequence(v: FapVector, vocab: Vocabulary, fset: FapSet = DEFAULT_FAP_SET) -> list[int]:
    """Index sequence of the FAP tokens followed by EOS."""
    fap = vector_to_fap(v, fset)
    indices = []
    for tok in fap.tokens:
        idx = vocab.token_to_index.get(tok)
        if idx is None:
            raise MissingVocabToken(f"FAP token {tok!r} not in vocabulary")
        indices.append(idx)
    indices.append(EOS)
    return indices


def trace_fap(trace: Trace, fset: FapSet = DEFAULT_FAP_SET) -> Fap:
    return vector_to_fap(extract_fap_vector(trace, fset), fset)


def write_fap_csv(traces: Sequence[Trace], path, fset: FapSet = DEFAULT_FAP_SET,
                  table: FapIdTable = DEFAULT_FAP_ID_TABLE) -> None:
    """Per-trace FAP assignments: id,family,fap_text,fap_id."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("id,family,fap_text,fap_id\n")
        for t in traces:
            f = trace_fap(t, fset)
            fh.write(f"{t.id},{t.family},{f.text},{fap_to_id(f, table)}\n")


def write_fap_stats_csv(traces: Sequence[Trace], path, fset: FapSet = DEFAULT_FAP_SET,
                        table: FapIdTable = DEFAULT_FAP_ID_TABLE) -> None:
    """Aggregated counts per (family, fap_text): family,fap_text,fap_id,count."""
    counts: dict[tuple[str, str], int] = {}
    for t in traces:
        f = trace_fap(t, fset)
        key = (t.family, f.text)
        counts[key] = counts.get(key, 0) + 1
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("family,fap_text,fap_id,count\n")
        for (family, text), count in sorted(counts.items()):
            fap_id = table.text_to_id.get(text, OTHER_FAP_ID)
            fh.write(f"{family},{text},{fap_id},{count}\n")
