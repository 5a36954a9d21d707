"""Measurement protocol: classification accuracy, FAP generation accuracy
(exact sequence match, with per-token diagnostics), per-family FAP
distributions and significance ratios, and context-vector export."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .corpus import EOS, Trace, encode_trace
from .fap import (DEFAULT_FAP_ID_TABLE, DEFAULT_FAP_SET, OTHER_FAP_ID, Fap,
                  FapIdTable, FapSet, UnknownFapId, extract_fap_vector,
                  fap_to_id, trace_fap, vector_to_fap)
from .gru import KIND_CLASSIFICATION, KIND_FAP, MultiTaskModel
from .training import FAP_DECODE_MAX_LEN, encode_corpus


@dataclass
class EvalReport:
    task: str
    split: str
    total: int
    correct: int
    per_family: dict = field(default_factory=dict)   # family -> (correct, total)
    confusion: dict = field(default_factory=dict)    # true -> {pred: count}
    token_accuracy: float = float("nan")             # FAP diagnostic only

    @property
    def accuracy(self) -> float:
        return self.correct / self.total if self.total else 0.0

    def family_accuracy(self, family: str) -> float:
        c, n = self.per_family.get(family, (0, 0))
        return c / n if n else 0.0

    def to_text(self) -> str:
        lines = [f"task={self.task} split={self.split} "
                 f"accuracy={self.accuracy:.4f} ({self.correct}/{self.total})"]
        if not np.isnan(self.token_accuracy):
            lines.append(f"  per-token accuracy: {self.token_accuracy:.4f}")
        for family in sorted(self.per_family):
            c, n = self.per_family[family]
            lines.append(f"  {family}: {c}/{n} = {c / n if n else 0.0:.4f}")
        if self.confusion:
            lines.append("  confusion (true -> predicted: count):")
            for true in sorted(self.confusion):
                row = ", ".join(f"{p}: {c}" for p, c in sorted(self.confusion[true].items()))
                lines.append(f"    {true} -> {row}")
        return "\n".join(lines)

    def csv_rows(self):
        yield (self.task, self.split, "__all__", self.total, self.correct,
               f"{self.accuracy:.6f}")
        for family in sorted(self.per_family):
            c, n = self.per_family[family]
            yield (self.task, self.split, family, n, c, f"{c / n if n else 0.0:.6f}")


def write_reports(reports, text_path, csv_path) -> None:
    with open(text_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n\n".join(r.to_text() for r in reports) + "\n")
    with open(csv_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("task,split,family,total,correct,accuracy\n")
        for r in reports:
            for row in r.csv_rows():
                fh.write(",".join(str(x) for x in row) + "\n")


def _contexts(model: MultiTaskModel, traces, max_len: int) -> np.ndarray:
    inputs = [encode_trace(model.api_vocab, t, max_len) for t in traces]
    return encode_corpus(model, inputs)


def classification_accuracy(model: MultiTaskModel, traces, max_len: int = 512,
                            split: str = "test") -> EvalReport:
    """Greedy length-1 predictions against the true family labels."""
    decoder = model.decoders[KIND_CLASSIFICATION]
    C = _contexts(model, traces, max_len)
    report = EvalReport(task="cls", split=split, total=len(traces), correct=0)
    from .numeric import Tensor

    outs = decoder.greedy_batch(Tensor(C), 1) if traces else []
    for t, out in zip(traces, outs):
        pred = decoder.alphabet.index_to_token[out[0]] if out else ""
        ok = pred == t.family
        report.correct += int(ok)
        c, n = report.per_family.get(t.family, (0, 0))
        report.per_family[t.family] = (c + int(ok), n + 1)
        row = report.confusion.setdefault(t.family, {})
        row[pred] = row.get(pred, 0) + 1
    return report


def fap_accuracy(model: MultiTaskModel, traces, max_len: int = 512, split: str = "test",
                 fset: FapSet = DEFAULT_FAP_SET) -> EvalReport:
    """Exact-match accuracy of greedy FAP generation against extraction."""
    decoder = model.decoders[KIND_FAP]
    C = _contexts(model, traces, max_len)
    report = EvalReport(task="fap", split=split, total=len(traces), correct=0)
    from .numeric import Tensor

    outs = decoder.greedy_batch(Tensor(C), FAP_DECODE_MAX_LEN) if traces else []
    matched_tokens = 0
    total_tokens = 0
    for t, out in zip(traces, outs):
        target_tokens = vector_to_fap(extract_fap_vector(t, fset), fset).tokens
        pred_tokens = tuple(decoder.alphabet.index_to_token[i] for i in out)
        ok = pred_tokens == target_tokens
        report.correct += int(ok)
        c, n = report.per_family.get(t.family, (0, 0))
        report.per_family[t.family] = (c + int(ok), n + 1)
        span = max(len(pred_tokens), len(target_tokens), 1)
        matched = sum(1 for a, b in zip(pred_tokens, target_tokens) if a == b)
        matched_tokens += matched
        total_tokens += span
    report.token_accuracy = matched_tokens / total_tokens if total_tokens else float("nan")
    return report


def predicted_faps(model: MultiTaskModel, traces, max_len: int = 512) -> list[Fap]:
    """Greedy FAP generation output as Fap records (may be non-canonical)."""
    decoder = model.decoders[KIND_FAP]
    C = _contexts(model, traces, max_len)
    from .numeric import Tensor

    outs = decoder.greedy_batch(Tensor(C), FAP_DECODE_MAX_LEN) if traces else []
    faps = []
    for out in outs:
        tokens = tuple(decoder.alphabet.index_to_token[i] for i in out)
        faps.append(Fap("_".join(tokens), tokens))
    return faps


@dataclass
class FapDistribution:
    """Per family: fap_id -> (count, ratio); ratios per family sum to 1."""

    per_family: dict

    def ratios(self, family: str) -> dict:
        return {fid: ratio for fid, (count, ratio) in self.per_family.get(family, {}).items()}


def fap_distribution(traces, fset: FapSet = DEFAULT_FAP_SET,
                     table: FapIdTable = DEFAULT_FAP_ID_TABLE,
                     faps: list[Fap] | None = None) -> FapDistribution:
    """Distribution of FAP ids per family.

    Counts ground-truth extracted FAPs unless `faps` supplies model
    predictions aligned with `traces`.
    """
    if faps is None:
        faps = [trace_fap(t, fset) for t in traces]
    counts: dict[str, dict[str, int]] = {}
    totals: dict[str, int] = {}
    for t, f in zip(traces, faps):
        fid = fap_to_id(f, table)
        fam = counts.setdefault(t.family, {})
        fam[fid] = fam.get(fid, 0) + 1
        totals[t.family] = totals.get(t.family, 0) + 1
    per_family = {}
    for family, ids in counts.items():
        total = totals[family]
        per_family[family] = {fid: (c, c / total) for fid, c in ids.items()}
    return FapDistribution(per_family)


def top_k(dist: FapDistribution, k: int) -> dict:
    """Top-k fap ids per family, ordered by count descending then id ascending."""
    result = {}
    for family, ids in dist.per_family.items():
        ordered = sorted(ids.items(), key=lambda item: (-item[1][0], item[0]))
        result[family] = [(fid, ratio) for fid, (count, ratio) in ordered[:k]]
    return result


def fap_significance(traces, fap_id: str, fset: FapSet = DEFAULT_FAP_SET,
                     table: FapIdTable = DEFAULT_FAP_ID_TABLE) -> dict:
    """Per family, the fraction of traces whose exact FAP maps to fap_id."""
    if fap_id != OTHER_FAP_ID and fap_id not in table.ids:
        raise UnknownFapId(f"unknown FAP id {fap_id!r}")
    hits: dict[str, int] = {}
    totals: dict[str, int] = {}
    for t in traces:
        totals[t.family] = totals.get(t.family, 0) + 1
        if fap_to_id(trace_fap(t, fset), table) == fap_id:
            hits[t.family] = hits.get(t.family, 0) + 1
    return {family: hits.get(family, 0) / total for family, total in totals.items()}


def export_embeddings(model: MultiTaskModel, traces, path, max_len: int = 512) -> None:
    """One CSV record per trace: id,family,c0..c{H-1}."""
    C = _contexts(model, traces, max_len)
    H = model.encoder.hidden_dim
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("id,family," + ",".join(f"c{i}" for i in range(H)) + "\n")
        for t, row in zip(traces, C):
            fh.write(f"{t.id},{t.family}," + ",".join("%.10g" % v for v in row) + "\n")
