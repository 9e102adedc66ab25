"""Summary metrics and corpus analyses.

ROUGE here is F1-based, lowercase, whitespace-tokenised, with no stemming
and no stopword removal.  F1 is computed as ``2 * overlap / (|hyp| + |ref|)``,
which equals ``2PR / (P + R)`` and avoids an extra rounding step.
"""

from __future__ import annotations

import csv
import io
import itertools
import logging
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

log = logging.getLogger(__name__)

EXHAUSTIVE_LIMIT = 12


def tokenize(text: str | Sequence[str]) -> list[str]:
    if isinstance(text, str):
        return text.lower().split()
    return [w.lower() for w in text]


def _ngrams(words: Sequence[str], n: int) -> Counter:
    return Counter(tuple(words[i:i + n]) for i in range(len(words) - n + 1))


def _f1(overlap: int, hyp_total: int, ref_total: int) -> float:
    if hyp_total == 0 or ref_total == 0 or overlap == 0:
        return 0.0
    return 2 * overlap / (hyp_total + ref_total)


def rouge_n(hyp, ref, n: int = 1) -> float:
    if n not in (1, 2):
        raise ValueError(f"rouge_n: n must be 1 or 2, got {n}")
    h, r = _ngrams(tokenize(hyp), n), _ngrams(tokenize(ref), n)
    overlap = sum((h & r).values())
    return _f1(overlap, sum(h.values()), sum(r.values()))


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(hyp, ref) -> float:
    h, r = tokenize(hyp), tokenize(ref)
    return _f1(lcs_length(h, r), len(h), len(r))


def rouge_scores(hyp, ref) -> tuple[float, float, float]:
    return rouge_n(hyp, ref, 1), rouge_n(hyp, ref, 2), rouge_l(hyp, ref)


@dataclass
class MetricReport:
    """Percentages in [0, 100]; fields not measured stay ``None``."""

    rouge1: float | None = None
    rouge2: float | None = None
    rougeL: float | None = None
    word_overlap: float | None = None
    compression_sentence: float | None = None
    compression_word: float | None = None
    wer: float | None = None

    def rows(self) -> list[tuple[str, float]]:
        return [(k, v) for k, v in asdict(self).items() if v is not None]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "value"])
        for k, v in self.rows():
            w.writerow([k, f"{v:.4f}"])
        return buf.getvalue()

    def to_table(self) -> str:
        rows = self.rows()
        width = max((len(k) for k, _ in rows), default=6)
        return "\n".join(f"{k:<{width}}  {v:8.2f}" for k, v in rows) + "\n"


def evaluate_summaries(hyps: Sequence[str], refs: Sequence[str]) -> MetricReport:
    """Corpus-mean ROUGE F1 as percentages."""
    if len(hyps) != len(refs) or not refs:
        raise ValueError("evaluate_summaries: need equal, non-empty hypothesis and reference lists")
    scores = [rouge_scores(h, r) for h, r in zip(hyps, refs)]
    n = len(scores)
    return MetricReport(
        rouge1=100 * sum(s[0] for s in scores) / n,
        rouge2=100 * sum(s[1] for s in scores) / n,
        rougeL=100 * sum(s[2] for s in scores) / n,
    )


@dataclass
class CorpusStats:
    name: str
    documents: int
    compression_sentence: float
    compression_word: float
    source_sentences: float
    source_words: float
    target_sentences: float
    target_words: float
    word_overlap: float
    wer: float | None = None

    def report(self) -> MetricReport:
        return MetricReport(
            word_overlap=self.word_overlap,
            compression_sentence=self.compression_sentence,
            compression_word=self.compression_word,
            wer=self.wer,
        )


TABLE_HEADER = ("Dataset", "Documents", "Comp.sent", "Comp.word", "Src.sent", "Src.word",
                "Tgt.sent", "Tgt.word", "Overlap", "WER")


def word_overlap(source_words: Iterable[str], target_words: Sequence[str]) -> float:
    """Fraction of target word tokens whose type occurs in the source."""
    if not target_words:
        return 0.0
    types = set(source_words)
    return sum(w in types for w in target_words) / len(target_words)


def corpus_stats(pairs: Iterable[tuple[Sequence[str], Sequence[str]]], name: str = "corpus",
                 wer: float | None = None) -> CorpusStats:
    """``pairs`` yields (source sentences, summary sentences) per document.

    Compression is the per-document target/source length ratio averaged
    over documents, as a percentage.
    """
    comp_s, comp_w, src_s, src_w, tgt_s, tgt_w, overlap = [], [], [], [], [], [], []
    for source, summary in pairs:
        src_words = [w for s in source for w in tokenize(s)]
        tgt_words = [w for s in summary for w in tokenize(s)]
        if not src_words:
            log.warning("skipping document with empty source")
            continue
        comp_s.append(len(summary) / len(source))
        comp_w.append(len(tgt_words) / len(src_words))
        src_s.append(len(source))
        src_w.append(len(src_words))
        tgt_s.append(len(summary))
        tgt_w.append(len(tgt_words))
        overlap.append(word_overlap(src_words, tgt_words))
    if not comp_s:
        raise ValueError("corpus_stats: empty corpus")
    mean = lambda xs: sum(xs) / len(xs)  # noqa: E731
    return CorpusStats(
        name=name,
        documents=len(comp_s),
        compression_sentence=100 * mean(comp_s),
        compression_word=100 * mean(comp_w),
        source_sentences=mean(src_s),
        source_words=mean(src_w),
        target_sentences=mean(tgt_s),
        target_words=mean(tgt_w),
        word_overlap=100 * mean(overlap),
        wer=wer,
    )


def stats_table(rows: Sequence[CorpusStats]) -> str:
    """Aligned plain-text table with one row per corpus."""
    body = []
    for s in rows:
        body.append((
            s.name, str(s.documents), f"{s.compression_sentence:.0f}%", f"{s.compression_word:.0f}%",
            f"{s.source_sentences:.1f}", f"{s.source_words:.1f}", f"{s.target_sentences:.1f}",
            f"{s.target_words:.1f}", f"{s.word_overlap:.0f}%", "n/a" if s.wer is None else f"{s.wer:.1f}%",
        ))
    widths = [max(len(h), *(len(r[i]) for r in body)) for i, h in enumerate(TABLE_HEADER)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(TABLE_HEADER, widths))]
    lines += ["  ".join(c.ljust(w) for c, w in zip(r, widths)) for r in body]
    return "\n".join(lines) + "\n"


def stats_csv(rows: Sequence[CorpusStats]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["name", "documents", "compression_sentence", "compression_word", "source_sentences",
                "source_words", "target_sentences", "target_words", "word_overlap", "wer"])
    for s in rows:
        w.writerow([s.name, s.documents] + [f"{v:.4f}" if v is not None else "" for v in (
            s.compression_sentence, s.compression_word, s.source_sentences, s.source_words,
            s.target_sentences, s.target_words, s.word_overlap, s.wer)])
    return buf.getvalue()


def _mean_rouge(words: list[str], ref: list[str]) -> tuple[float, tuple[float, float, float]]:
    triple = rouge_scores(words, ref)
    return sum(triple) / 3, triple


@dataclass
class OracleResult:
    indices: tuple[int, ...]
    score: float
    rouge: tuple[float, float, float]


def oracle_extractive(doc: Sequence[str], ref, max_k: int = 3, mode: str = "auto") -> OracleResult:
    """Sentence subset (size <= ``max_k``, document order) maximising the
    mean of ROUGE-1/2/L F1 against ``ref``.

    Exhaustive search is used for documents of at most
    ``EXHAUSTIVE_LIMIT`` sentences; ties go to the lexicographically
    smallest index tuple.  Greedy forward selection otherwise.
    """
    if not doc:
        raise ValueError("oracle_extractive: empty document")
    if max_k < 1:
        raise ValueError("oracle_extractive: max_k must be positive")
    if mode == "auto":
        mode = "exhaustive" if len(doc) <= EXHAUSTIVE_LIMIT else "greedy"
    ref_words = tokenize(ref if isinstance(ref, str) else " ".join(ref))
    sents = [tokenize(s) for s in doc]
    if mode == "exhaustive":
        if len(doc) > EXHAUSTIVE_LIMIT:
            raise ValueError(f"exhaustive mode supports at most {EXHAUSTIVE_LIMIT} sentences")
        return _oracle_exhaustive(sents, ref_words, max_k)
    if mode == "greedy":
        return _oracle_greedy(sents, ref_words, max_k)
    raise ValueError(f"unknown oracle mode {mode!r}")


def _oracle_exhaustive(sents, ref_words, max_k) -> OracleResult:
    best: OracleResult | None = None
    for k in range(1, min(max_k, len(sents)) + 1):
        for idx in itertools.combinations(range(len(sents)), k):
            words = [w for i in idx for w in sents[i]]
            score, triple = _mean_rouge(words, ref_words)
            if best is None or score > best.score or (score == best.score and idx < best.indices):
                best = OracleResult(idx, score, triple)
    return best


def _oracle_greedy(sents, ref_words, max_k) -> OracleResult:
    chosen: list[int] = []
    best_score = -1.0
    best_triple = (0.0, 0.0, 0.0)
    while len(chosen) < min(max_k, len(sents)):
        step_best = None
        for i in range(len(sents)):
            if i in chosen:
                continue
            idx = tuple(sorted(chosen + [i]))
            words = [w for j in idx for w in sents[j]]
            score, triple = _mean_rouge(words, ref_words)
            if step_best is None or score > step_best[0]:
                step_best = (score, i, triple)
        if step_best is None or step_best[0] <= best_score:
            break
        best_score, best_triple = step_best[0], step_best[2]
        chosen.append(step_best[1])
    if not chosen:
        chosen = [0]
        best_score, best_triple = _mean_rouge(sents[0], ref_words)
    return OracleResult(tuple(sorted(chosen)), best_score, best_triple)
