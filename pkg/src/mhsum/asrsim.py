"""Simulated ASR front-end.

A substitution channel over reference token sequences produces per-position
posterior rows; aligned N-best lists are read off those rows by ranking the
candidates at each position.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .textproc import END_OF_WORD, TokenSeq, Vocab, decode

TOP_K = 10


@dataclass(frozen=True)
class ChannelSpec:
    """Noisy-channel parameters.

    ``confusion_sharpness`` sets the geometric decay ``exp(-sharpness)`` of
    posterior mass across the nine confusers behind the emitted token.  The
    mass left over for confusers is drawn per position from
    ``clean_residual`` when the token survived and from ``error_residual``
    when it was substituted, so low 1-best confidence flags likely errors.
    """

    sub_rate: float = 0.1
    confusion_sharpness: float = 1.0
    seed: int = 0
    clean_residual: tuple[float, float] = (0.05, 0.35)
    error_residual: tuple[float, float] = (0.30, 0.60)
    indel_rate: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.sub_rate <= 1.0:
            raise ValueError(f"sub_rate {self.sub_rate} outside [0, 1]")
        if self.confusion_sharpness <= 0:
            raise ValueError("confusion_sharpness must be positive")
        if not 0.0 <= self.indel_rate <= 1.0:
            raise ValueError(f"indel_rate {self.indel_rate} outside [0, 1]")


@dataclass
class HypothesisSet:
    token_ids: np.ndarray  # (N, M) int64
    posteriors: np.ndarray  # (N, M) float64
    doc_id: str = ""
    lengths: np.ndarray | None = field(default=None)  # per-hypothesis, for unaligned sets

    def __post_init__(self):
        self.token_ids = np.atleast_2d(np.asarray(self.token_ids, dtype=np.int64))
        self.posteriors = np.atleast_2d(np.asarray(self.posteriors, dtype=np.float64))
        if self.token_ids.shape != self.posteriors.shape:
            raise ValueError(f"token/posterior shapes differ: {self.token_ids.shape} vs {self.posteriors.shape}")
        if self.lengths is None:
            self.lengths = np.full(self.n, self.token_ids.shape[1], dtype=np.int64)

    @property
    def n(self) -> int:
        return self.token_ids.shape[0]

    @property
    def aligned(self) -> bool:
        return bool((self.lengths == self.token_ids.shape[1]).all())

    def first(self, n: int) -> "HypothesisSet":
        return HypothesisSet(self.token_ids[:n], self.posteriors[:n], self.doc_id, self.lengths[:n])

    def hypothesis(self, n: int) -> np.ndarray:
        return self.token_ids[n, : self.lengths[n]]

    def to_record(self) -> dict:
        return {
            "doc_id": self.doc_id,
            "n": self.n,
            "tokens": [self.hypothesis(i).tolist() for i in range(self.n)],
            "posteriors": [self.posteriors[i, : self.lengths[i]].tolist() for i in range(self.n)],
        }

    @classmethod
    def from_record(cls, rec: dict) -> "HypothesisSet":
        lengths = np.array([len(t) for t in rec["tokens"]], dtype=np.int64)
        width = int(lengths.max())
        toks = np.zeros((rec["n"], width), dtype=np.int64)
        post = np.ones((rec["n"], width), dtype=np.float64)
        for i, (t, p) in enumerate(zip(rec["tokens"], rec["posteriors"])):
            toks[i, : len(t)] = t
            post[i, : len(p)] = p
        return cls(toks, post, rec["doc_id"], lengths)


def doc_seed(global_seed: int, doc_id: str) -> int:
    digest = hashlib.sha256(f"{global_seed}:{doc_id}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def _confuser_classes(vocab: Vocab) -> dict[bool, np.ndarray]:
    # the bare end-of-word symbol spells no characters, so it could delete a word
    content = np.array([i for i in vocab.content_ids() if vocab.symbols[i] != END_OF_WORD])
    final = np.array([vocab.is_word_final(i) for i in content])
    return {True: content[final], False: content[~final]}


def _residual_cap(sharpness: float) -> float:
    # largest confuser mass that keeps the emitted token strictly on top
    q = math.exp(-sharpness)
    first = (1 - q) / (1 - q ** (TOP_K - 1))
    return 1.0 / (1.0 + first) * (1 - 1e-6)


def channel_corrupt(ref: TokenSeq, spec: ChannelSpec, vocab: Vocab, rng: np.random.Generator | None = None):
    """Corrupt ``ref`` and return ``(posterior (M, V), emitted TokenSeq)``.

    Each non-structural position is replaced with probability ``sub_rate`` by
    a uniformly drawn different token of the same word-boundary class, so
    word segmentation and therefore word count survive.  The posterior row
    puts its largest mass on the emitted token, keeps the reference among
    the top ten, and sums to one.  Structural positions are one-hot.
    """
    if len(ref) == 0:
        raise ValueError("channel_corrupt: empty reference")
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    classes = _confuser_classes(vocab)
    size = len(vocab)
    q = math.exp(-spec.confusion_sharpness)
    decay = q ** np.arange(TOP_K - 1)
    decay = decay / decay.sum()
    cap = _residual_cap(spec.confusion_sharpness)

    ids = ref.ids
    post = np.zeros((len(ids), size), dtype=np.float64)
    emitted = ids.copy()
    for m, tok in enumerate(ids.tolist()):
        if ref.structural_mask[m]:
            post[m, tok] = 1.0
            continue
        pool = classes[vocab.is_word_final(tok)]
        if len(pool) < TOP_K + 1:
            raise ValueError(
                f"channel_corrupt: only {len(pool)} candidate tokens in class, need {TOP_K + 1}"
            )
        substituted = rng.random() < spec.sub_rate
        lo, hi = spec.error_residual if substituted else spec.clean_residual
        residual = min(rng.uniform(lo, hi), cap)
        # draw distinct confusers, excluding the reference
        picks = _draw_distinct(rng, pool, TOP_K, exclude=tok)
        if substituted:
            out = picks[0]
            rank = 1 + min(int(rng.geometric(1 - q)) - 1, TOP_K - 2)
            cands = list(picks[1:])
            cands.insert(rank - 1, tok)
            cands = cands[: TOP_K - 1]
        else:
            out = tok
            cands = list(picks[: TOP_K - 1])
        emitted[m] = out
        post[m, out] = 1.0 - residual
        post[m, cands] = residual * decay
    return post, ref.with_ids(emitted)


def _draw_distinct(rng: np.random.Generator, pool: np.ndarray, k: int, exclude: int) -> np.ndarray:
    picks: list[int] = []
    seen = {exclude}
    while len(picks) < k:
        c = int(pool[rng.integers(len(pool))])
        if c not in seen:
            seen.add(c)
            picks.append(c)
    return np.array(picks, dtype=np.int64)


def generate_nbest_aligned(posterior: np.ndarray, n: int, doc_id: str = "") -> HypothesisSet:
    """Take the ``n`` highest-posterior tokens at each position.

    One-hot rows (structural positions) repeat their token across all ``n``
    hypotheses with posterior 1.0.  Ties rank by token id.
    """
    if not 1 <= n <= TOP_K:
        raise ValueError(f"generate_nbest_aligned: n={n} outside [1, {TOP_K}]")
    posterior = np.asarray(posterior, dtype=np.float64)
    order = np.argsort(-posterior, axis=1, kind="stable")[:, :n]
    probs = np.take_along_axis(posterior, order, axis=1)
    fixed = probs[:, 0] == 1.0
    order[fixed] = order[fixed, :1]
    probs[fixed] = 1.0
    short = ~fixed & (probs[:, -1] <= 0.0)
    if short.any():
        m = int(np.flatnonzero(short)[0])
        raise ValueError(f"generate_nbest_aligned: position {m} has fewer than {n} candidate tokens")
    return HypothesisSet(order.T.copy(), probs.T.copy(), doc_id)


def simulate_document(ref: TokenSeq, spec: ChannelSpec, vocab: Vocab, n: int, doc_id: str) -> HypothesisSet:
    """Corrupt one document with a per-document derived seed and extract its N-best."""
    rng = np.random.default_rng(doc_seed(spec.seed, doc_id))
    if spec.indel_rate > 0:
        return simulate_unaligned(ref, spec, vocab, n, doc_id, rng)
    post, _ = channel_corrupt(ref, spec, vocab, rng)
    return generate_nbest_aligned(post, n, doc_id)


def simulate_unaligned(ref: TokenSeq, spec: ChannelSpec, vocab: Vocab, n: int, doc_id: str,
                       rng: np.random.Generator) -> HypothesisSet:
    """Independent channel draws per hypothesis with random token insertions
    and deletions, giving hypotheses of differing length.  Only attention
    fusion can consume these."""
    pool = _confuser_classes(vocab)[True]
    rows, probs = [], []
    for _ in range(n):
        post, emitted = channel_corrupt(ref, spec, vocab, rng)
        conf = post[np.arange(len(emitted)), emitted.ids]
        toks, ps = [], []
        for m, tok in enumerate(emitted.ids.tolist()):
            structural = bool(emitted.structural_mask[m])
            if not structural and rng.random() < spec.indel_rate / 2:
                continue
            toks.append(tok)
            ps.append(conf[m])
            if not structural and rng.random() < spec.indel_rate / 2:
                toks.append(int(pool[rng.integers(len(pool))]))
                ps.append(float(spec.error_residual[0]))
        rows.append(toks)
        probs.append(ps)
    lengths = np.array([len(r) for r in rows], dtype=np.int64)
    width = int(lengths.max())
    toks = np.zeros((n, width), dtype=np.int64)
    post = np.ones((n, width), dtype=np.float64)
    for i, (r, p) in enumerate(zip(rows, probs)):
        toks[i, : len(r)] = r
        post[i, : len(p)] = p
    return HypothesisSet(toks, post, doc_id, lengths)


def edit_distance(hyp: Sequence, ref: Sequence) -> int:
    prev = list(range(len(ref) + 1))
    for i, h in enumerate(hyp, 1):
        cur = [i] + [0] * len(ref)
        for j, r in enumerate(ref, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (h != r))
        prev = cur
    return prev[-1]


def word_error_rate(hyp_words: Sequence[str], ref_words: Sequence[str]) -> float:
    if not ref_words:
        raise ValueError("wer: empty reference")
    return edit_distance(hyp_words, ref_words) / len(ref_words)


def wer(hyp: TokenSeq, ref: TokenSeq, vocab: Vocab) -> float:
    """Word-level WER after decoding and dropping structural tokens."""
    return word_error_rate(decode(hyp, vocab).split(), decode(ref, vocab).split())


def corpus_wer(pairs: Iterable[tuple[Sequence[str], Sequence[str]]]) -> float:
    """Total edits over total reference words."""
    edits = words = 0
    for hyp_words, ref_words in pairs:
        edits += edit_distance(hyp_words, ref_words)
        words += len(ref_words)
    if words == 0:
        raise ValueError("corpus_wer: empty reference set")
    return edits / words


def write_hypotheses(path, hyp_sets: Iterable[HypothesisSet]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for hs in hyp_sets:
            fh.write(json.dumps(hs.to_record()) + "\n")


def read_hypotheses(path) -> list[HypothesisSet]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [HypothesisSet.from_record(json.loads(line)) for line in lines if line.strip()]
