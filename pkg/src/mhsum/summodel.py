"""Toy BERTSum-style encoder-decoder with pluggable hypothesis fusion."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

from . import numcore as nc
from .asrsim import HypothesisSet
from .fusion import ConfidenceEmbed, FusionParams, attention_fuse, confidence_embed, init_fusion_params, posterior_fuse
from .numcore import Tensor
from .textproc import BOS_ID, EOS_ID, PAD_ID

FUSION_MODES = ("none", "confidence", "posterior", "attention")
PAPER_WARMUP = 20_000
PAPER_LR = 2e-4


@dataclass
class ModelConfig:
    vocab_size: int
    dim: int = 64
    layers_enc: int = 6
    layers_dec: int = 2
    heads: int = 4
    ffn_dim: int = 256
    max_len: int = 128
    max_summary_len: int = 64
    fusion_mode: str = "none"
    fusion_layer: int = 5
    n_hyps: int | None = None  # None -> 5 for attention, 10 for posterior
    fusion_heads: int = 4
    fusion_similarity: str = "cosine"
    fusion_init: str = "identity"
    fusion_scale_scores: bool = False
    fusion_temperature: bool = False
    fusion_temperature_init: float = 1.0
    fusion_combine_temperature_init: float = 1.0
    fusion_residual: bool = False
    posterior_renormalize: bool = False
    pos_init: str = "sinusoidal"  # starting values of the learned position table
    lr: float = 1e-3
    warmup: int = 500
    grad_clip: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.fusion_mode not in FUSION_MODES:
            raise ValueError(f"fusion_mode must be one of {FUSION_MODES}, got {self.fusion_mode!r}")
        if not 1 <= self.fusion_layer <= self.layers_enc:
            raise ValueError(f"fusion_layer {self.fusion_layer} outside [1, {self.layers_enc}]")
        if self.dim % self.heads:
            raise ValueError("dim must be divisible by heads")
        if self.pos_init not in ("sinusoidal", "random"):
            raise ValueError(f"unknown pos_init {self.pos_init!r}")

    @property
    def hyp_count(self) -> int:
        if self.fusion_mode in ("none", "confidence"):
            return 1
        if self.n_hyps is not None:
            return self.n_hyps
        return 5 if self.fusion_mode == "attention" else 10

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class LMTable:
    """Bigram log-probabilities; row ``i`` is ``log p(next | i)``."""

    logprobs: np.ndarray

    @classmethod
    def from_sequences(cls, seqs: Sequence[np.ndarray], vocab_size: int, smoothing: float = 0.1) -> "LMTable":
        counts = np.full((vocab_size, vocab_size), smoothing, dtype=np.float64)
        for s in seqs:
            s = np.asarray(s)
            np.add.at(counts, (s[:-1], s[1:]), 1.0)
        return cls(np.log(counts / counts.sum(axis=1, keepdims=True)))


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


def sinusoid_table(length: int, dim: int) -> np.ndarray:
    """Sine/cosine position codes scaled to unit row norm.

    Used only as the starting point of the learned table: a fixed offset is
    a rotation of these codes, so attention heads can pick out neighbouring
    positions from the first step, which copying needs.
    """
    pos = np.arange(length)[:, None]
    freq = 10000.0 ** (-np.arange(0, dim, 2) / dim)
    table = np.zeros((length, dim))
    table[:, 0::2] = np.sin(pos * freq)
    table[:, 1::2] = np.cos(pos * freq[: dim // 2])
    return table * math.sqrt(2.0 / dim)


class Summarizer:
    """Parameter container plus forward passes."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        d, f = cfg.dim, cfg.ffn_dim
        p: dict[str, Tensor] = {}

        def lin(name, fan_in, fan_out):
            lim = 1.0 / math.sqrt(fan_in)
            p[f"{name}.w"] = Tensor(rng.uniform(-lim, lim, size=(fan_in, fan_out)), requires_grad=True)
            p[f"{name}.b"] = Tensor(np.zeros(fan_out), requires_grad=True)

        def norm(name):
            p[f"{name}.g"] = Tensor(np.ones(d), requires_grad=True)
            p[f"{name}.b"] = Tensor(np.zeros(d), requires_grad=True)

        p["emb"] = Tensor(rng.normal(0, 1 / math.sqrt(d), size=(cfg.vocab_size, d)), requires_grad=True)
        for name, length in (("enc_pos", cfg.max_len), ("dec_pos", cfg.max_summary_len + 1)):
            if cfg.pos_init == "sinusoidal":
                table = sinusoid_table(length, d)
            else:
                table = rng.normal(0, 1 / math.sqrt(d), (length, d))
            p[name] = Tensor(table, requires_grad=True)
        for i in range(cfg.layers_enc):
            pre = f"enc{i}"
            norm(f"{pre}.ln1")
            for k in "qkvo":
                lin(f"{pre}.att.{k}", d, d)
            norm(f"{pre}.ln2")
            lin(f"{pre}.ff1", d, f)
            lin(f"{pre}.ff2", f, d)
        norm("enc.lnf")
        for i in range(cfg.layers_dec):
            pre = f"dec{i}"
            norm(f"{pre}.ln1")
            for k in "qkvo":
                lin(f"{pre}.self.{k}", d, d)
            norm(f"{pre}.ln2")
            for k in "qkvo":
                lin(f"{pre}.cross.{k}", d, d)
            norm(f"{pre}.ln3")
            lin(f"{pre}.ff1", d, f)
            lin(f"{pre}.ff2", f, d)
        norm("dec.lnf")
        self.base = p

        self.conf: ConfidenceEmbed | None = None
        self.fuse: FusionParams | None = None
        if cfg.fusion_mode == "confidence":
            self.conf = ConfidenceEmbed.zeros(d)
        elif cfg.fusion_mode == "attention":
            self.fuse = init_fusion_params(
                cfg.fusion_heads, d, mode=cfg.fusion_init, seed=cfg.seed + 1,
                similarity=cfg.fusion_similarity, learn_temperature=cfg.fusion_temperature,
                temperature_init=cfg.fusion_temperature_init,
                combine_temperature_init=cfg.fusion_combine_temperature_init,
            )
            self.fuse.scale_scores = cfg.fusion_scale_scores

    def named_params(self) -> dict[str, Tensor]:
        out = dict(self.base)
        if self.conf is not None:
            out.update(self.conf.named())
        if self.fuse is not None:
            out.update(self.fuse.named())
        return out

    def state(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.named_params().items()}

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.named_params()
        missing = set(params) - set(arrays)
        if missing:
            raise KeyError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
        for name, t in params.items():
            if arrays[name].shape != t.shape:
                raise nc.ShapeError(f"{name}: checkpoint shape {arrays[name].shape} vs model {t.shape}")
            t.data = np.array(arrays[name], dtype=t.data.dtype)

    def save(self, path) -> None:
        nc.save_checkpoint(path, self.named_params())

    def load(self, path) -> None:
        self.load_state(nc.load_checkpoint(path))

    # -- building blocks ----------------------------------------------------

    def _lin(self, x: Tensor, name: str) -> Tensor:
        return nc.add(nc.matmul(x, self.base[f"{name}.w"]), self.base[f"{name}.b"])

    def _ln(self, x: Tensor, name: str) -> Tensor:
        return nc.layernorm(x, self.base[f"{name}.g"], self.base[f"{name}.b"])

    def _mha(self, xq: Tensor, xkv: Tensor, name: str, bias: np.ndarray) -> Tensor:
        """Scaled dot-product multi-head attention; ``bias`` broadcasts to
        (batch, heads, Tq, Tk) and carries the masks."""
        h = self.cfg.heads
        bsz, tq, d = xq.shape
        tk = xkv.shape[1]
        hd = d // h

        def split(t, length):
            return nc.swapaxes(t.reshape(bsz, length, h, hd), 1, 2)

        q = split(self._lin(xq, f"{name}.q"), tq)
        k = split(self._lin(xkv, f"{name}.k"), tk)
        v = split(self._lin(xkv, f"{name}.v"), tk)
        scores = nc.scale(nc.matmul(q, nc.swapaxes(k, -1, -2)), 1.0 / math.sqrt(hd))
        att = nc.softmax(nc.add(scores, Tensor(bias)), axis=-1)
        ctx = nc.swapaxes(nc.matmul(att, v), 1, 2).reshape(bsz, tq, d)
        return self._lin(ctx, f"{name}.o")

    def _ffn(self, x: Tensor, name: str) -> Tensor:
        return self._lin(nc.relu(self._lin(x, f"{name}.ff1")), f"{name}.ff2")

    def _enc_layer(self, x: Tensor, i: int, key_bias: np.ndarray) -> Tensor:
        pre = f"enc{i}"
        h = self._ln(x, f"{pre}.ln1")
        x = nc.add(x, self._mha(h, h, f"{pre}.att", key_bias))
        return nc.add(x, self._ffn(self._ln(x, f"{pre}.ln2"), pre))

    # -- encoder --------------------------------------------------------------

    def embed(self, ids: np.ndarray) -> Tensor:
        """Token plus learned absolute position embeddings for (..., M) ids."""
        m = ids.shape[-1]
        if m > self.cfg.max_len:
            raise ValueError(f"sequence length {m} exceeds max_len {self.cfg.max_len}")
        tok = nc.embed_lookup(self.base["emb"], ids)
        return nc.add(tok, self.base["enc_pos"][:m])

    def encode(self, batch: "EncoderBatch", return_fusion: bool = False):
        """Encode a padded batch; returns Z (batch, M, B) and, on request,
        the fusion-layer diagnostics."""
        cfg = self.cfg
        mode = cfg.fusion_mode
        pad1 = batch.pad_mask[:, 0]
        info: dict = {}
        if mode == "none":
            x = self.embed(batch.tokens[:, 0])
            start = 0
        elif mode == "confidence":
            e = nc.embed_lookup(self.base["emb"], batch.tokens[:, 0])
            e = confidence_embed(e, batch.posteriors[:, 0], self.conf)
            x = nc.add(e, self.base["enc_pos"][: batch.width])
            start = 0
        elif mode == "posterior":
            e = nc.embed_lookup(self.base["emb"], batch.tokens)  # (b, N, M, B)
            post = np.where(batch.pad_mask, 1.0, batch.posteriors)
            e = posterior_fuse(e, post, renormalize=cfg.posterior_renormalize)
            x = nc.add(e, self.base["enc_pos"][: batch.width])
            start = 0
        else:
            bsz, n, m = batch.tokens.shape
            flat_pad = batch.pad_mask.reshape(bsz * n, m)
            xs = self.embed(batch.tokens.reshape(bsz * n, m))
            bias = _key_bias(flat_pad)
            for i in range(cfg.fusion_layer - 1):
                xs = self._enc_layer(xs, i, bias)
            xs = xs.reshape(bsz, n, m, cfg.dim)
            hyps = [xs[:, j] for j in range(n)]
            masks = [batch.pad_mask[:, j] for j in range(n)]
            fused, alpha = attention_fuse(hyps[0], hyps, self.fuse, key_masks=masks)
            x = nc.add(hyps[0], fused) if cfg.fusion_residual else fused
            info["alpha"] = alpha
            info["pre_fusion"] = hyps[0]
            start = cfg.fusion_layer - 1
        bias = _key_bias(pad1)
        for i in range(start, cfg.layers_enc):
            x = self._enc_layer(x, i, bias)
        z = self._ln(x, "enc.lnf")
        return (z, info) if return_fusion else z

    # -- decoder --------------------------------------------------------------

    def decode_logits(self, z: Tensor, src_pad: np.ndarray, prefix: np.ndarray) -> Tensor:
        """Teacher-forced logits (batch, T, V) for decoder input ``prefix``."""
        cfg = self.cfg
        bsz, t = prefix.shape
        if t > cfg.max_summary_len + 1:
            raise ValueError(f"summary prefix length {t} exceeds cap")
        y = nc.add(nc.embed_lookup(self.base["emb"], prefix), self.base["dec_pos"][:t])
        tgt_pad = prefix == PAD_ID
        causal = np.triu(np.full((t, t), nc.MASK_VALUE), k=1)
        self_bias = causal[None, None] + _key_bias(tgt_pad)
        cross_bias = _key_bias(src_pad)
        for i in range(cfg.layers_dec):
            pre = f"dec{i}"
            h = self._ln(y, f"{pre}.ln1")
            y = nc.add(y, self._mha(h, h, f"{pre}.self", self_bias))
            h = self._ln(y, f"{pre}.ln2")
            y = nc.add(y, self._mha(h, z, f"{pre}.cross", cross_bias))
            y = nc.add(y, self._ffn(self._ln(y, f"{pre}.ln3"), pre))
        y = self._ln(y, "dec.lnf")
        return nc.matmul(y, nc.swapaxes(self.base["emb"], 0, 1))

    def loss(self, batch: "EncoderBatch", summaries: np.ndarray) -> Tensor:
        z = self.encode(batch)
        logits = self.decode_logits(z, batch.pad_mask[:, 0], summaries[:, :-1])
        targets = summaries[:, 1:]
        return nc.cross_entropy(logits, targets, pad_mask=targets == PAD_ID)


def _key_bias(pad: np.ndarray) -> np.ndarray:
    """(batch, Tk) padding flags -> additive bias (batch, 1, 1, Tk)."""
    return np.where(pad, nc.MASK_VALUE, 0.0)[:, None, None, :]


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


@dataclass
class EncoderBatch:
    tokens: np.ndarray  # (batch, N, M)
    posteriors: np.ndarray  # (batch, N, M)
    pad_mask: np.ndarray  # (batch, N, M), True on padding

    @property
    def width(self) -> int:
        return self.tokens.shape[-1]


def make_batch(hyp_sets: Sequence[HypothesisSet], n: int) -> EncoderBatch:
    """Pad the first ``n`` hypotheses of each set into dense arrays."""
    if n < 1:
        raise ValueError("need at least one hypothesis")
    for hs in hyp_sets:
        if hs.n < n:
            raise ValueError(f"{hs.doc_id}: has {hs.n} hypotheses, need {n}")
    width = max(int(hs.lengths[:n].max()) for hs in hyp_sets)
    bsz = len(hyp_sets)
    toks = np.full((bsz, n, width), PAD_ID, dtype=np.int64)
    post = np.ones((bsz, n, width), dtype=np.float64)
    pad = np.ones((bsz, n, width), dtype=bool)
    for b, hs in enumerate(hyp_sets):
        for j in range(n):
            length = int(hs.lengths[j])
            toks[b, j, :length] = hs.token_ids[j, :length]
            post[b, j, :length] = hs.posteriors[j, :length]
            pad[b, j, :length] = False
    return EncoderBatch(toks, post, pad)


def pad_summaries(seqs: Sequence[np.ndarray]) -> np.ndarray:
    width = max(len(s) for s in seqs)
    out = np.full((len(seqs), width), PAD_ID, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out


def encode_document(hyps: HypothesisSet, cfg: ModelConfig, model: Summarizer) -> np.ndarray:
    """Z (M1, B) for one document under ``cfg.fusion_mode``."""
    n = cfg.hyp_count
    if cfg.fusion_mode != "none" and hyps.n == 0:
        raise ValueError("fusion requires at least one hypothesis")
    batch = make_batch([hyps], n)
    return model.encode(batch).data[0]


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9


def learning_rate(step: int, peak: float, warmup: int) -> float:
    """Linear warm-up then inverse-square-root decay."""
    step = max(step, 1)
    return peak * min(step / warmup, math.sqrt(warmup / step))


def training_step(model: Summarizer, batch: EncoderBatch, summaries: np.ndarray, opt: AdamState,
                  lr_override: float | None = None) -> float:
    """One teacher-forced Adam step; returns the pre-update loss."""
    params = model.named_params()
    for t in params.values():
        t.grad = None
    with nc.Graph():
        loss = model.loss(batch, summaries)
        value = float(loss.data)
        if not math.isfinite(value):
            raise FloatingPointError(f"non-finite loss {value} at step {opt.step + 1}")
        nc.backward(loss)

    cfg = model.cfg
    opt.step += 1
    lr = learning_rate(opt.step, cfg.lr, cfg.warmup) if lr_override is None else lr_override
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in params.items()}
    if cfg.grad_clip:
        norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        if norm > cfg.grad_clip:
            grads = {k: g * (cfg.grad_clip / norm) for k, g in grads.items()}
    b1, b2 = opt.beta1, opt.beta2
    c1 = 1 - b1**opt.step
    c2 = 1 - b2**opt.step
    for name, t in params.items():
        g = grads[name]
        m = opt.m.get(name)
        v = opt.v.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        opt.m[name], opt.v[name] = m, v
        if lr:
            t.data = t.data - lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)
    return value


# ---------------------------------------------------------------------------
# decoding
# ---------------------------------------------------------------------------


def decode_summary(model: Summarizer, z: np.ndarray, src_pad: np.ndarray | None = None, beam: int = 4,
                   lm_weight: float = 0.0, lm: LMTable | None = None, max_len: int | None = None,
                   return_score: bool = False):
    """Beam search over ``log p_model + lm_weight * log p_lm`` per token.

    ``z`` is one document's encoding (M, B).  Returns the best finished
    sequence of token ids without BOS/EOS.
    """
    if beam < 1:
        raise ValueError("beam width must be at least 1")
    if lm_weight and lm is None:
        raise ValueError("lm_weight given without an LM table")
    max_len = model.cfg.max_summary_len if max_len is None else min(max_len, model.cfg.max_summary_len)
    src_pad = np.zeros(z.shape[0], dtype=bool) if src_pad is None else src_pad
    zt = Tensor(z)

    alive: list[tuple[float, list[int]]] = [(0.0, [BOS_ID])]
    finished: list[tuple[float, list[int]]] = []
    for _ in range(max_len + 1):
        prefix = np.array([seq for _, seq in alive], dtype=np.int64)
        k = len(alive)
        zb = Tensor(np.broadcast_to(zt.data, (k,) + z.shape))
        logits = model.decode_logits(zb, np.broadcast_to(src_pad, (k, len(src_pad))), prefix).data[:, -1]
        logp = nc.log_softmax(Tensor(logits)).data
        if lm_weight:
            logp = logp + lm_weight * lm.logprobs[prefix[:, -1]]
        if len(prefix[0]) > max_len:  # length cap: only EOS allowed
            forced = np.full_like(logp, -np.inf)
            forced[:, EOS_ID] = logp[:, EOS_ID]
            logp = forced
        total = np.array([s for s, _ in alive])[:, None] + logp
        order = np.argsort(-total, axis=None, kind="stable")
        vocab = logp.shape[1]
        new_alive = []
        for flat in order:
            row, tok = divmod(int(flat), vocab)
            score = float(total[row, tok])
            if not math.isfinite(score):
                break
            seq = alive[row][1] + [tok]
            if tok == EOS_ID:
                finished.append((score, seq))
            else:
                new_alive.append((score, seq))
            if len(new_alive) == beam or len(finished) >= beam:
                break
        alive = new_alive
        best_done = max((s for s, _ in finished), default=-math.inf)
        if not alive or len(finished) >= beam or best_done >= max(s for s, _ in alive):
            break
    pool = finished or alive
    score, seq = max(pool, key=lambda item: item[0])
    out = [t for t in seq[1:] if t != EOS_ID]
    return (out, score) if return_score else out
