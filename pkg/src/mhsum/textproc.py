"""Toy BPE vocabulary plus BERTSum-style document preparation."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD, CLS, SEP, BOS, EOS, UNK = "<pad>", "<cls>", "<sep>", "<bos>", "<eos>", "<unk>"
RESERVED = (PAD, CLS, SEP, BOS, EOS, UNK)
PAD_ID, CLS_ID, SEP_ID, BOS_ID, EOS_ID, UNK_ID = range(len(RESERVED))
END_OF_WORD = "</w>"


@dataclass(frozen=True)
class Vocab:
    chars: tuple[str, ...]
    merges: tuple[tuple[str, str], ...]
    symbols: tuple[str, ...] = field(init=False, repr=False)
    index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        symbols = list(RESERVED) + list(self.chars) + [END_OF_WORD]
        for a, b in self.merges:
            symbols.append(a + b)
        object.__setattr__(self, "symbols", tuple(symbols))
        index: dict[str, int] = {}
        for i, sym in enumerate(symbols):
            index.setdefault(sym, i)
        object.__setattr__(self, "index", index)
        object.__setattr__(self, "_ranks", {pair: r for r, pair in enumerate(self.merges)})
        object.__setattr__(self, "_cache", {})

    def __len__(self) -> int:
        return len(self.symbols)

    @property
    def base_size(self) -> int:
        return len(RESERVED) + len(self.chars) + 1

    def is_word_final(self, token_id: int) -> bool:
        return self.symbols[token_id].endswith(END_OF_WORD)

    def content_ids(self) -> np.ndarray:
        return np.arange(len(RESERVED), len(self.symbols))

    def segment(self, word: str) -> tuple[str, ...]:
        """Apply merges to one whitespace-delimited word in learned order."""
        cached = self._cache.get(word)
        if cached is not None:
            return cached
        parts = [c if c in self.index else UNK for c in word] + [END_OF_WORD]
        ranks = self._ranks
        while len(parts) > 1:
            best, best_rank = None, None
            for i in range(len(parts) - 1):
                r = ranks.get((parts[i], parts[i + 1]))
                if r is not None and (best_rank is None or r < best_rank):
                    best, best_rank = i, r
            if best is None:
                break
            parts[best:best + 2] = [parts[best] + parts[best + 1]]
        out = tuple(parts)
        self._cache[word] = out
        return out

    def to_text(self) -> str:
        lines = ["#reserved " + " ".join(RESERVED), "#chars " + " ".join(self.chars)]
        lines += [f"{a} {b}" for a, b in self.merges]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "Vocab":
        lines = text.splitlines()
        if not lines or lines[0].split()[1:] != list(RESERVED):
            raise ValueError("vocab file: missing or wrong reserved-token header")
        if not lines[1].startswith("#chars"):
            raise ValueError("vocab file: missing #chars line")
        chars = tuple(lines[1].split()[1:])
        merges = tuple(tuple(line.split(" ")) for line in lines[2:] if line)
        return cls(chars=chars, merges=merges)

    def save(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


@dataclass(frozen=True)
class TokenSeq:
    ids: np.ndarray
    sentence_starts: tuple[int, ...] = ()
    structural_mask: np.ndarray | None = None

    def __post_init__(self):
        ids = np.asarray(self.ids, dtype=np.int64)
        object.__setattr__(self, "ids", ids)
        mask = self.structural_mask
        mask = np.isin(ids, (CLS_ID, SEP_ID, BOS_ID, EOS_ID, PAD_ID)) if mask is None else np.asarray(mask, dtype=bool)
        object.__setattr__(self, "structural_mask", mask)

    def __len__(self) -> int:
        return len(self.ids)

    def with_ids(self, ids) -> "TokenSeq":
        return TokenSeq(ids, self.sentence_starts, self.structural_mask)


def train_bpe(corpus: Iterable[str], target_size: int) -> Vocab:
    """Greedy most-frequent-pair merging over whitespace-split words.

    Ties go to the lexicographically smallest pair.  Stops early when no
    pair is left to merge.
    """
    word_counts: Counter[str] = Counter()
    for line in corpus:
        word_counts.update(line.split())
    if not word_counts:
        raise ValueError("train_bpe: empty corpus")
    chars = tuple(sorted({c for w in word_counts for c in w}))
    floor = len(RESERVED) + len(chars) + 1
    if target_size < floor:
        raise ValueError(f"train_bpe: target_size {target_size} below base size {floor}")

    words = {w: list(w) + [END_OF_WORD] for w in sorted(word_counts)}
    merges: list[tuple[str, str]] = []
    while floor + len(merges) < target_size:
        pairs: Counter[tuple[str, str]] = Counter()
        for w, parts in words.items():
            c = word_counts[w]
            for pair in zip(parts, parts[1:]):
                pairs[pair] += c
        if not pairs:
            break
        top = max(pairs.values())
        best = min(p for p, c in pairs.items() if c == top)
        merges.append(best)
        joined = best[0] + best[1]
        for w, parts in words.items():
            i = 0
            while i < len(parts) - 1:
                if parts[i] == best[0] and parts[i + 1] == best[1]:
                    parts[i:i + 2] = [joined]
                i += 1
    return Vocab(chars=chars, merges=tuple(merges))


def encode(text: str, vocab: Vocab) -> TokenSeq:
    ids = [vocab.index[p] for word in text.split() for p in vocab.segment(word)]
    return TokenSeq(np.array(ids, dtype=np.int64))


def decode(tokens: TokenSeq | Sequence[int], vocab: Vocab) -> str:
    ids = tokens.ids if isinstance(tokens, TokenSeq) else np.asarray(tokens, dtype=np.int64)
    size = len(vocab)
    pieces = []
    for i in ids.tolist():
        if i < 0 or i >= size:
            raise ValueError(f"decode: token id {i} outside vocabulary of {size}")
        if i < len(RESERVED) and i != UNK_ID:
            continue
        pieces.append(vocab.symbols[i])
    text = "".join(pieces).replace(END_OF_WORD, " ")
    return " ".join(text.split())


def prepare_document(sentences: Sequence[str], vocab: Vocab) -> TokenSeq:
    """CLS s1 SEP CLS s2 SEP ...; ``sentence_starts`` index each CLS."""
    if not sentences:
        raise ValueError("prepare_document: need at least one sentence")
    ids: list[int] = []
    starts: list[int] = []
    for sent in sentences:
        starts.append(len(ids))
        ids.append(CLS_ID)
        ids.extend(encode(sent, vocab).ids.tolist())
        ids.append(SEP_ID)
    arr = np.array(ids, dtype=np.int64)
    return TokenSeq(arr, tuple(starts), np.isin(arr, (CLS_ID, SEP_ID)))


def prepare_summary(sentences: Sequence[str], vocab: Vocab) -> np.ndarray:
    """BOS summary-tokens EOS, used as the decoder target."""
    ids = [BOS_ID]
    for sent in sentences:
        ids.extend(encode(sent, vocab).ids.tolist())
    ids.append(EOS_ID)
    return np.array(ids, dtype=np.int64)
