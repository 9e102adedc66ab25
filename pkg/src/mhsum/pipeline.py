"""Synthetic corpus, experiment orchestration and the WER sweep."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import evalkit
from . import numcore as nc
from .asrsim import ChannelSpec, HypothesisSet, corpus_wer, simulate_document
from .summodel import (
    AdamState, LMTable, ModelConfig, Summarizer, decode_summary, make_batch, pad_summaries, training_step,
)
from .textproc import Vocab, decode, prepare_document, prepare_summary, train_bpe

log = logging.getLogger(__name__)

MARKER = "xq"
CONSONANTS = "bcdfghjklmnprstvwz"
VOWELS = "aeiou"

SYSTEMS = ("oracle-text", "baseline-1best", "retrain-1best", "confidence", "posterior-fusion", "attention-fusion")
DELTA_REFERENCE = "retrain-1best"

# system -> (fusion mode, trains on clean text, checkpoint it reuses)
SYSTEM_SPECS = {
    "oracle-text": ("none", True, "oracle-text"),
    "baseline-1best": ("none", True, "oracle-text"),
    "retrain-1best": ("none", False, "retrain-1best"),
    "confidence": ("confidence", False, "confidence"),
    "posterior-fusion": ("posterior", False, "posterior-fusion"),
    "attention-fusion": ("attention", False, "attention-fusion"),
}


@dataclass
class DocumentPair:
    doc_id: str
    source: list[str]
    summary: list[str]


@dataclass
class ExperimentConfig:
    # corpus
    n_train: int = 20000
    n_test: int = 200
    sentences: int = 6
    min_words: int = 5
    max_words: int = 10
    markers: int = 2
    n_words: int = 240
    word_classes: int = 6  # toy grammar: word k of a sentence comes from class (start + k) mod C
    corpus_seed: int = 0
    bpe_size: int = 2000
    # channel
    sub_rate: float = 0.2
    channel_grid: tuple[float, ...] = (0.05, 0.10, 0.20)
    sharpness: float = 1.0
    max_hyps: int = 10
    # model
    dim: int = 64
    layers_enc: int = 6
    layers_dec: int = 2
    heads: int = 4
    ffn_dim: int = 256
    fusion_layer: int = 5
    fusion_heads: int = 4
    n_attention: int = 5
    n_posterior: int = 10
    fusion_similarity: str = "cosine"
    fusion_temperature: bool = True
    fusion_temperature_init: float = 20.0
    fusion_combine_temperature_init: float = 5.0
    posterior_renormalize: bool = False
    fusion_residual: bool = False
    lr: float = 3e-3
    warmup: int = 300
    finetune_lr: float = 1e-3
    dtype: str = "float32"
    # training / decoding
    steps: int = 3000
    finetune_steps: int = 1000
    batch_size: int = 64
    finetune_batch_size: int = 32
    beam: int = 4
    lm_weight: float = 0.0
    seeds: tuple[int, ...] = (0, 1, 2)
    systems: tuple[str, ...] = SYSTEMS
    out_dir: str = "runs/default"

    def __post_init__(self):
        if not self.seeds:
            raise ValueError("need at least one seed")
        if not self.channel_grid:
            raise ValueError("channel grid must be non-empty")
        unknown = set(self.systems) - set(SYSTEMS)
        if unknown:
            raise ValueError(f"unknown systems: {sorted(unknown)}")

    def model_config(self, system: str, vocab_size: int, seed: int) -> ModelConfig:
        mode = SYSTEM_SPECS[system][0]
        n = {"attention": self.n_attention, "posterior": self.n_posterior}.get(mode)
        return ModelConfig(
            vocab_size=vocab_size, dim=self.dim, layers_enc=self.layers_enc, layers_dec=self.layers_dec,
            heads=self.heads, ffn_dim=self.ffn_dim, fusion_mode=mode,
            fusion_layer=min(self.fusion_layer, self.layers_enc), n_hyps=n, fusion_heads=self.fusion_heads,
            fusion_similarity=self.fusion_similarity, fusion_temperature=self.fusion_temperature,
            fusion_temperature_init=self.fusion_temperature_init,
            fusion_combine_temperature_init=self.fusion_combine_temperature_init,
            posterior_renormalize=self.posterior_renormalize,
            fusion_residual=self.fusion_residual, lr=self.lr, warmup=self.warmup, seed=seed,
        )

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, **overrides) -> "ExperimentConfig":
        raw: dict[str, str] = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ValueError(f"config line without '=': {line!r}")
            raw[key.strip()] = value.strip()
        raw.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_mapping(raw)

    @classmethod
    def from_mapping(cls, raw: dict) -> "ExperimentConfig":
        kwargs = {}
        types = {f.name: f for f in fields(cls)}
        defaults = cls()
        for key, value in raw.items():
            if key not in types:
                raise ValueError(f"unknown config key {key!r}")
            kwargs[key] = _coerce(getattr(defaults, key), value)
        return cls(**kwargs)


def _coerce(default, value):
    if not isinstance(value, str):
        return tuple(value) if isinstance(default, tuple) else value
    if isinstance(default, bool):
        return value.lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    if isinstance(default, tuple):
        items = [v.strip() for v in value.split(",") if v.strip()]
        if default and isinstance(default[0], int):
            return tuple(int(v) for v in items)
        if default and isinstance(default[0], float):
            return tuple(float(v) for v in items)
        return tuple(items)
    return value


# ---------------------------------------------------------------------------
# corpus
# ---------------------------------------------------------------------------


def content_words(n: int, seed: int) -> list[str]:
    """``n`` distinct two-syllable pseudo-words; the marker word cannot occur."""
    rng = np.random.default_rng(seed)
    words: set[str] = set()
    out: list[str] = []
    while len(out) < n:
        w = "".join(
            CONSONANTS[rng.integers(len(CONSONANTS))] + VOWELS[rng.integers(len(VOWELS))]
            for _ in range(2)
        )
        if rng.random() < 0.3:
            w += CONSONANTS[rng.integers(len(CONSONANTS))]
        if w not in words:
            words.add(w)
            out.append(w)
    return out


def word_class_members(n: int, n_classes: int) -> list[np.ndarray]:
    """Word indices of each class; word ``i`` belongs to class ``i mod n_classes``."""
    return [np.arange(c, n, n_classes) for c in range(n_classes)]


def gen_corpus(cfg: ExperimentConfig, seed: int | None = None) -> tuple[list[DocumentPair], list[DocumentPair]]:
    """Train and test splits.  Each document has ``cfg.sentences`` sentences;
    exactly ``cfg.markers`` of them start with the marker word, and the
    reference summary is those sentences in order with the marker removed.

    Words are split round-robin into ``cfg.word_classes`` classes and a
    sentence steps through the classes in a fixed cycle from a random start,
    a toy grammar that makes each word's class predictable from its
    neighbours.  That context is what lets a model tell the right recognition
    hypothesis from a random substitution.  One class means no grammar.
    """
    seed = cfg.corpus_seed if seed is None else seed
    if cfg.markers > cfg.sentences:
        raise ValueError(f"marker count {cfg.markers} exceeds sentences per document {cfg.sentences}")
    if cfg.n_words < 200:
        raise ValueError("need a vocabulary of at least 200 content words")
    if not 1 <= cfg.word_classes <= cfg.n_words // 20:
        raise ValueError(f"word_classes {cfg.word_classes} outside [1, {cfg.n_words // 20}]")
    words = content_words(cfg.n_words, seed)
    rng = np.random.default_rng([seed, 1])
    classes = word_class_members(cfg.n_words, cfg.word_classes)

    def make(doc_id: str) -> DocumentPair:
        marked = set(rng.choice(cfg.sentences, size=cfg.markers, replace=False).tolist())
        source, summary = [], []
        for k in range(cfg.sentences):
            length = int(rng.integers(cfg.min_words, cfg.max_words + 1))
            start = int(rng.integers(cfg.word_classes))
            members = [classes[(start + j) % cfg.word_classes] for j in range(length)]
            body = " ".join(words[c[rng.integers(len(c))]] for c in members)
            if k in marked:
                source.append(f"{MARKER} {body}")
                summary.append(body)
            else:
                source.append(body)
        return DocumentPair(doc_id, source, summary)

    train = [make(f"train-{i:05d}") for i in range(cfg.n_train)]
    test = [make(f"test-{i:05d}") for i in range(cfg.n_test)]
    return train, test


def write_corpus(out_dir, split: str, docs: Sequence[DocumentPair]) -> list[Path]:
    """``{split}.src.txt`` and ``{split}.tgt.txt``: one sentence per line,
    blank line between documents; ``{split}.ids`` lists doc ids in order."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / f"{split}.src.txt", out / f"{split}.tgt.txt", out / f"{split}.ids"]
    paths[0].write_text("\n\n".join("\n".join(d.source) for d in docs) + "\n", encoding="utf-8")
    paths[1].write_text("\n\n".join("\n".join(d.summary) for d in docs) + "\n", encoding="utf-8")
    paths[2].write_text("".join(d.doc_id + "\n" for d in docs), encoding="utf-8")
    return paths


def _read_blocks(path: Path) -> list[list[str]]:
    blocks = path.read_text(encoding="utf-8").strip("\n").split("\n\n")
    return [[line for line in b.split("\n") if line] for b in blocks]


def read_corpus(corpus_dir, split: str) -> list[DocumentPair]:
    d = Path(corpus_dir)
    src = _read_blocks(d / f"{split}.src.txt")
    tgt = _read_blocks(d / f"{split}.tgt.txt")
    ids = (d / f"{split}.ids").read_text(encoding="utf-8").split()
    if not (len(src) == len(tgt) == len(ids)):
        raise ValueError(f"{corpus_dir}: {split} files disagree on document count")
    return [DocumentPair(i, s, t) for i, s, t in zip(ids, src, tgt)]


def build_vocab(docs: Sequence[DocumentPair], size: int) -> Vocab:
    lines = [s for d in docs for s in d.source + d.summary]
    return train_bpe(lines, size)


def clean_hypotheses(docs: Sequence[DocumentPair], vocab: Vocab) -> list[HypothesisSet]:
    """Ground-truth text wrapped as a one-hypothesis set with posterior 1."""
    out = []
    for d in docs:
        ids = prepare_document(d.source, vocab).ids
        out.append(HypothesisSet(ids[None], np.ones((1, len(ids))), d.doc_id))
    return out


def simulate_corpus(docs: Sequence[DocumentPair], vocab: Vocab, spec: ChannelSpec, n: int) -> list[HypothesisSet]:
    return [simulate_document(prepare_document(d.source, vocab), spec, vocab, n, d.doc_id) for d in docs]


def input_wer(hyp_sets: Sequence[HypothesisSet], docs: Sequence[DocumentPair], vocab: Vocab) -> float:
    pairs = []
    for hs, d in zip(hyp_sets, docs):
        ref = prepare_document(d.source, vocab)
        pairs.append((decode(hs.hypothesis(0), vocab).split(), decode(ref, vocab).split()))
    return corpus_wer(pairs)


# ---------------------------------------------------------------------------
# training and inference
# ---------------------------------------------------------------------------


def train_model(model_cfg: ModelConfig, hyp_sets: Sequence[HypothesisSet], summaries: Sequence[np.ndarray],
                steps: int, batch_size: int, seed: int, log_every: int = 0,
                init_from: Summarizer | None = None) -> tuple[Summarizer, list[float]]:
    """Train from scratch, or fine-tune starting from the shared encoder and
    decoder weights of ``init_from`` (fusion parameters keep their own init)."""
    model = Summarizer(model_cfg)
    if init_from is not None:
        for name, t in model.base.items():
            t.data = init_from.base[name].data.copy()
    opt = AdamState()
    rng = np.random.default_rng([seed, 7])
    n = model_cfg.hyp_count
    order: list[int] = []
    losses = []
    for step in range(steps):
        if len(order) < batch_size:
            order.extend(rng.permutation(len(hyp_sets)).tolist())
        idx, order = order[:batch_size], order[batch_size:]
        batch = make_batch([hyp_sets[i] for i in idx], n)
        loss = training_step(model, batch, pad_summaries([summaries[i] for i in idx]), opt)
        losses.append(loss)
        if log_every and (step + 1) % log_every == 0:
            log.info("%s step %d loss %.4f", model_cfg.fusion_mode, step + 1, float(np.mean(losses[-log_every:])))
    return model, losses


def summarize(model: Summarizer, hyp_sets: Sequence[HypothesisSet], beam: int = 4, lm_weight: float = 0.0,
              lm: LMTable | None = None, batch_size: int = 32) -> list[list[int]]:
    n = model.cfg.hyp_count
    out: list[list[int]] = []
    for start in range(0, len(hyp_sets), batch_size):
        chunk = hyp_sets[start:start + batch_size]
        batch = make_batch(chunk, n)
        z = model.encode(batch).data
        for b, hs in enumerate(chunk):
            length = int(hs.lengths[0])
            out.append(decode_summary(model, z[b, :length], beam=beam, lm_weight=lm_weight, lm=lm))
    return out


def score_outputs(outputs: Sequence[Sequence[int]], docs: Sequence[DocumentPair], vocab: Vocab) -> evalkit.MetricReport:
    hyps = [decode(o, vocab) for o in outputs]
    refs = [" ".join(d.summary) for d in docs]
    return evalkit.evaluate_summaries(hyps, refs)


# ---------------------------------------------------------------------------
# experiment
# ---------------------------------------------------------------------------

REPORT_HEADER = ["system", "seed", "status", "n_hyps", "input_wer", "rouge1", "rouge2", "rougeL"]
SWEEP_HEADER = ["rate", "wer", "system", "rouge1_delta"]


@dataclass
class ExperimentData:
    vocab: Vocab
    train: list[DocumentPair]
    test: list[DocumentPair]
    train_summaries: list[np.ndarray]
    lm: LMTable
    hyps: dict = field(default_factory=dict)

    def hypotheses(self, split: str, sub_rate: float, seed: int, cfg: ExperimentConfig) -> list[HypothesisSet]:
        key = (split, sub_rate, seed)
        if key not in self.hyps:
            docs = self.train if split == "train" else self.test
            spec = ChannelSpec(sub_rate=sub_rate, confusion_sharpness=cfg.sharpness, seed=seed)
            self.hyps[key] = simulate_corpus(docs, self.vocab, spec, cfg.max_hyps)
        return self.hyps[key]


def prepare_data(cfg: ExperimentConfig) -> ExperimentData:
    train, test = gen_corpus(cfg)
    vocab = build_vocab(train, cfg.bpe_size)
    summaries = [prepare_summary(d.summary, vocab) for d in train]
    lm = LMTable.from_sequences(summaries, len(vocab))
    return ExperimentData(vocab, train, test, summaries, lm)


def load_data(corpus_dir) -> ExperimentData:
    """Rebuild the experiment inputs from a ``gen-corpus`` output directory."""
    d = Path(corpus_dir)
    vocab = Vocab.load(d / "vocab.txt")
    train, test = read_corpus(d, "train"), read_corpus(d, "test")
    summaries = [prepare_summary(doc.summary, vocab) for doc in train]
    return ExperimentData(vocab, train, test, summaries, LMTable.from_sequences(summaries, len(vocab)))


def train_system(system: str, data: ExperimentData, cfg: ExperimentConfig, seed: int,
                 text_model: Summarizer | None = None,
                 inputs: Sequence[HypothesisSet] | None = None) -> tuple[Summarizer, list[float]]:
    """Text systems train from scratch on clean input; ASR systems are
    retrained from ``text_model`` on channel hypotheses (simulated here
    unless ``inputs`` supplies them)."""
    mode, clean, _ = SYSTEM_SPECS[system]
    mcfg = cfg.model_config(system, len(data.vocab), seed)
    if clean:
        inputs = clean_hypotheses(data.train, data.vocab)
        steps, batch_size = cfg.steps, cfg.batch_size
    else:
        if text_model is None:
            raise ValueError(f"{system} needs the trained text model to start from")
        if inputs is None:
            inputs = data.hypotheses("train", cfg.sub_rate, seed, cfg)
        mcfg.lr = cfg.finetune_lr
        steps, batch_size = cfg.finetune_steps, cfg.finetune_batch_size
    t0 = time.time()
    with nc.precision(cfg.dtype):
        model, losses = train_model(mcfg, inputs, data.train_summaries, steps, batch_size, seed,
                                    log_every=max(steps // 10, 1), init_from=None if clean else text_model)
    log.info("trained %s seed %d in %.0fs, final loss %.4f", system, seed, time.time() - t0, losses[-1])
    return model, losses


def evaluate_system(system: str, model: Summarizer, data: ExperimentData, cfg: ExperimentConfig, seed: int,
                    sub_rate: float | None = None) -> tuple[evalkit.MetricReport, float]:
    """Test inputs use channel seed ``seed + 1000`` so they never coincide
    with the training draws."""
    sub_rate = cfg.sub_rate if sub_rate is None else sub_rate
    if system == "oracle-text":
        inputs = clean_hypotheses(data.test, data.vocab)
        wer = 0.0
    else:
        inputs = data.hypotheses("test", sub_rate, seed + 1000, cfg)
        wer = input_wer(inputs, data.test, data.vocab)
    with nc.precision(cfg.dtype):
        outputs = summarize(model, inputs, beam=cfg.beam, lm_weight=cfg.lm_weight, lm=data.lm)
    report = score_outputs(outputs, data.test, data.vocab)
    report.wer = 100 * wer
    return report, wer


def run_experiment(cfg: ExperimentConfig, data: ExperimentData | None = None,
                   checkpoint_dir: Path | None = None) -> list[dict]:
    """Train and evaluate every requested system for every seed.

    A system whose training diverges is reported with status ``failed``;
    the rest carry on.  Checkpoints land in ``checkpoint_dir`` when given.
    """
    data = prepare_data(cfg) if data is None else data
    rows = []
    for seed in cfg.seeds:
        trained: dict[str, Summarizer | None] = {}
        for system in cfg.systems:
            ckpt_name = SYSTEM_SPECS[system][2]
            row = {"system": system, "seed": seed, "status": "ok",
                   "n_hyps": cfg.model_config(system, len(data.vocab), seed).hyp_count}
            try:
                if ckpt_name not in trained:
                    if ckpt_name != "oracle-text" and "oracle-text" not in trained:
                        trained["oracle-text"] = train_system("oracle-text", data, cfg, seed)[0]
                    trained[ckpt_name] = train_system(ckpt_name, data, cfg, seed, trained.get("oracle-text"))[0]
                    if checkpoint_dir is not None:
                        checkpoint_dir.mkdir(parents=True, exist_ok=True)
                        trained[ckpt_name].save(checkpoint_dir / f"{ckpt_name}.seed{seed}.ckpt")
                model = trained[ckpt_name]
                if model is None:
                    raise FloatingPointError("shared checkpoint failed to train")
                report, wer = evaluate_system(system, model, data, cfg, seed)
                row.update(input_wer=wer, rouge1=report.rouge1 / 100, rouge2=report.rouge2 / 100,
                           rougeL=report.rougeL / 100)
            except FloatingPointError as exc:
                log.error("%s seed %d failed: %s", system, seed, exc)
                trained.setdefault(ckpt_name, None)
                row.update(status="failed", input_wer=math.nan, rouge1=math.nan, rouge2=math.nan, rougeL=math.nan)
            rows.append(row)
        data.hyps.pop(("train", cfg.sub_rate, seed), None)  # large, and never reused across seeds
    return rows


def rows_to_csv(rows: Sequence[dict], header: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([f"{r[h]:.6f}" if isinstance(r[h], float) else r[h] for h in header])
    return buf.getvalue()


def mean_by_system(rows: Sequence[dict], key: str = "rouge1") -> dict[str, float]:
    out: dict[str, list[float]] = {}
    for r in rows:
        if r.get("status", "ok") == "ok":
            out.setdefault(r["system"], []).append(r[key])
    return {k: float(np.mean(v)) for k, v in out.items()}


def wer_sweep(cfg: ExperimentConfig, models: dict[tuple[str, int], Summarizer], data: ExperimentData) -> list[dict]:
    """ROUGE-1 of each trained system relative to ``retrain-1best`` at each
    channel rate, averaged over seeds.  ``models`` maps (system, seed) to a
    trained model."""
    if len(cfg.channel_grid) < 3:
        raise ValueError("wer_sweep needs at least three channel rates")
    systems = [s for s in cfg.systems if s != "oracle-text"]
    if DELTA_REFERENCE not in systems:
        raise ValueError(f"wer_sweep needs {DELTA_REFERENCE} as the delta reference")
    for system in systems:
        for seed in cfg.seeds:
            if (system, seed) not in models:
                raise KeyError(f"missing trained checkpoint for system {system!r} (seed {seed})")
    rows = []
    for rate in sorted(cfg.channel_grid):
        scores: dict[str, list[float]] = {s: [] for s in systems}
        wers = []
        for seed in cfg.seeds:
            for system in systems:
                report, wer = evaluate_system(system, models[(system, seed)], data, cfg, seed, sub_rate=rate)
                scores[system].append(report.rouge1 / 100)
            wers.append(wer)
        ref = float(np.mean(scores[DELTA_REFERENCE]))
        for system in systems:
            rows.append({"rate": float(rate), "wer": float(np.mean(wers)), "system": system,
                         "rouge1_delta": float(np.mean(scores[system])) - ref})
    return rows


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out_dir, command: str, config: dict, inputs: Sequence, outputs: Sequence, seeds=(),
                   name: str = "manifest.json") -> Path:
    out = Path(out_dir)
    manifest = {
        "command": command,
        "config": config,
        "seeds": list(seeds),
        "inputs": {f"{Path(p).parent.name}/{Path(p).name}": sha256_file(p) for p in inputs},
        "outputs": {Path(p).name: sha256_file(p) for p in outputs},
    }
    path = out / name
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path
