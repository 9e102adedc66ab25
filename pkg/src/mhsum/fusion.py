"""Multi-hypothesis fusion layers.

All functions accept optional leading batch dimensions: a single document is
``(M, B)`` and a batch is ``(batch, M, B)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .numcore import Tensor


@dataclass
class ConfidenceEmbed:
    weight: Tensor
    bias: Tensor

    @classmethod
    def zeros(cls, dim: int) -> "ConfidenceEmbed":
        return cls(Tensor(np.zeros(dim), requires_grad=True), Tensor(np.zeros(dim), requires_grad=True))

    def named(self, prefix: str = "conf") -> dict[str, Tensor]:
        return {f"{prefix}.weight": self.weight, f"{prefix}.bias": self.bias}


@dataclass
class FusionParams:
    wq: list[Tensor]
    wk: list[Tensor]
    wv: list[Tensor]
    wo: Tensor
    similarity: str = "cosine"
    scale_scores: bool = False  # 1/sqrt(d) scaling, ablation only
    # learned log-temperatures for the alignment and combination softmaxes
    align_scale: Tensor | None = None
    combine_scale: Tensor | None = None
    init_mode: str = "identity"
    meta: dict = field(default_factory=dict)

    @property
    def heads(self) -> int:
        return len(self.wq)

    @property
    def dim(self) -> int:
        return self.wq[0].shape[0]

    def named(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for h in range(self.heads):
            out[f"fuse.h{h}.Wq"] = self.wq[h]
            out[f"fuse.h{h}.Wk"] = self.wk[h]
            out[f"fuse.h{h}.Wv"] = self.wv[h]
        out["fuse.Wo"] = self.wo
        if self.align_scale is not None:
            out["fuse.align_scale"] = self.align_scale
            out["fuse.combine_scale"] = self.combine_scale
        return out

    def load(self, arrays: dict[str, np.ndarray]) -> None:
        for name, t in self.named().items():
            t.data = np.array(arrays[name], dtype=t.data.dtype)


def init_fusion_params(
    heads: int,
    dim: int,
    mode: str = "identity",
    seed: int = 0,
    out_dim: int | None = None,
    similarity: str = "cosine",
    learn_temperature: bool = False,
    temperature_init: float = 1.0,
    combine_temperature_init: float = 1.0,
) -> FusionParams:
    """Projection matrices are ``dim x out_dim`` per head; ``W^o`` is
    ``(heads*out_dim) x dim``.

    Identity mode sets every per-head projection to I and stacks ``I/heads``
    into ``W^o`` so the initial output is the mean over (identical) heads.

    Cosine scores lie in [-1, 1], so on their own they cannot single out one
    position among many.  ``learn_temperature`` multiplies them by learned
    factors, one for aligning positions (starting at ``temperature_init``)
    and one for weighing hypotheses (starting at ``combine_temperature_init``).
    """
    out_dim = dim if out_dim is None else out_dim
    if heads < 1:
        raise ValueError("init_fusion_params: need at least one head")
    if similarity not in ("cosine", "dot"):
        raise ValueError(f"unknown similarity {similarity!r}")
    if mode == "identity":
        if out_dim != dim:
            raise ValueError(f"identity init needs B' == B, got {out_dim} != {dim}")
        eye = np.eye(dim)
        mk = lambda: Tensor(eye.copy(), requires_grad=True)  # noqa: E731
        wq = [mk() for _ in range(heads)]
        wk = [mk() for _ in range(heads)]
        wv = [mk() for _ in range(heads)]
        wo = Tensor(np.vstack([eye / heads] * heads), requires_grad=True)
    elif mode == "random":
        rng = np.random.default_rng(seed)
        lim = 1.0 / math.sqrt(dim)
        mk = lambda r, c: Tensor(rng.uniform(-lim, lim, size=(r, c)), requires_grad=True)  # noqa: E731
        wq = [mk(dim, out_dim) for _ in range(heads)]
        wk = [mk(dim, out_dim) for _ in range(heads)]
        wv = [mk(dim, out_dim) for _ in range(heads)]
        wo = Tensor(rng.uniform(-lim, lim, size=(heads * out_dim, dim)), requires_grad=True)
    else:
        raise ValueError(f"unknown init mode {mode!r}")
    if min(temperature_init, combine_temperature_init) <= 0:
        raise ValueError("temperatures must be positive")
    scales = [None, None]
    if learn_temperature:
        scales = [Tensor(np.array(math.log(t)), requires_grad=True)
                  for t in (temperature_init, combine_temperature_init)]
    return FusionParams(wq, wk, wv, wo, similarity=similarity, align_scale=scales[0], combine_scale=scales[1],
                        init_mode=mode)


def confidence_embed(e1: Tensor, posteriors, ce: ConfidenceEmbed) -> Tensor:
    """Row m becomes ``e_m + p_m * weight + bias``."""
    p = posteriors if isinstance(posteriors, Tensor) else Tensor(posteriors)
    if p.shape != e1.shape[:-1]:
        raise nc.ShapeError(f"confidence_embed: shapes {e1.shape} and {p.shape} do not conform")
    conf = nc.add(nc.mul(p.reshape(p.shape + (1,)), ce.weight), ce.bias)
    return nc.add(conf, e1)


def posterior_fuse(embeds: Tensor, posteriors, renormalize: bool = False) -> Tensor:
    """Posterior-weighted sum over hypotheses.

    ``embeds`` is (..., N, M, B) and ``posteriors`` (..., N, M).  Weights are
    used as given unless ``renormalize`` asks for them to sum to one.
    """
    p = np.asarray(posteriors.data if isinstance(posteriors, Tensor) else posteriors, dtype=embeds.data.dtype)
    if embeds.ndim < 3 or p.shape != embeds.shape[:-1]:
        raise nc.ShapeError(f"posterior_fuse: shapes {embeds.shape} and {p.shape} do not conform "
                            "(hypotheses must be aligned)")
    if (p <= 0).any():
        raise ValueError("posterior_fuse: posteriors must be positive")
    if renormalize:
        p = p / p.sum(axis=-2, keepdims=True)
    weights = posteriors if isinstance(posteriors, Tensor) and not renormalize else Tensor(p)
    weighted = nc.mul(embeds, weights.reshape(weights.shape + (1,)))
    return nc.tensor_sum(weighted, axis=-3)


def _similarity(q: Tensor, k: Tensor, params: FusionParams, log_scale: Tensor | None) -> Tensor:
    if params.similarity == "cosine":
        s = nc.cosine_rows(q, k)
    else:
        s = nc.matmul(q, nc.swapaxes(k, -1, -2))
    if params.scale_scores:
        s = nc.scale(s, 1.0 / math.sqrt(q.shape[-1]))
    if log_scale is not None:
        s = nc.mul(s, nc.exp(log_scale))
    return s


def align_hypothesis(e1: Tensor, en: Tensor, params: FusionParams, head: int = 0, key_mask=None):
    """Time-align hypothesis ``en`` (..., Mn, B) to the 1-best ``e1`` (..., M1, B).

    Returns the aligned values (..., M1, B') and the alignment weights
    (..., M1, Mn).  ``key_mask`` (..., Mn) marks padded key positions.
    """
    if e1.shape[-1] != en.shape[-1]:
        raise nc.ShapeError(f"align_hypothesis: shapes {e1.shape} and {en.shape} do not conform")
    q = nc.matmul(e1, params.wq[head])
    k = nc.matmul(en, params.wk[head])
    v = nc.matmul(en, params.wv[head])
    scores = _similarity(q, k, params, params.align_scale)
    if key_mask is not None:
        bias = np.where(np.asarray(key_mask, dtype=bool), nc.MASK_VALUE, 0.0)
        scores = nc.add(scores, Tensor(bias[..., None, :]))
    weights = nc.softmax(scores, axis=-1)
    return nc.matmul(weights, v), weights


def fuse_head(e1: Tensor, hyps: list[Tensor], params: FusionParams, head: int = 0, key_masks=None):
    """Single-head fusion: align every hypothesis, then attend across them
    at each 1-best position with the projected 1-best token as the query.

    Returns the fused rows (..., M1, B') and weights (..., M1, N).
    """
    if not hyps:
        raise ValueError("attention_fuse: empty hypothesis list")
    masks = key_masks if key_masks is not None else [None] * len(hyps)
    aligned = [align_hypothesis(e1, en, params, head, mk)[0] for en, mk in zip(hyps, masks)]
    c = nc.stack(aligned, axis=-2)  # (..., M1, N, B')
    q = nc.matmul(e1, params.wq[head])
    q = q.reshape(q.shape[:-1] + (1, q.shape[-1]))  # (..., M1, 1, B')
    alpha = nc.softmax(_similarity(q, c, params, params.combine_scale), axis=-1)  # (..., M1, 1, N)
    fused = nc.matmul(alpha, c)  # (..., M1, 1, B')
    fused = fused.reshape(fused.shape[:-2] + (fused.shape[-1],))
    return fused, alpha.reshape(alpha.shape[:-2] + (alpha.shape[-1],))


def attention_fuse(e1: Tensor, hyps: list[Tensor], params: FusionParams, key_masks=None):
    """Multi-head attention fusion.

    ``hyps[0]`` must be the 1-best itself.  Returns the fused embeddings
    (..., M1, B) and the weights (..., M1, H, N).
    """
    if not hyps:
        raise ValueError("attention_fuse: empty hypothesis list")
    outs, alphas = [], []
    for h in range(params.heads):
        fused, alpha = fuse_head(e1, hyps, params, h, key_masks)
        outs.append(fused)
        alphas.append(alpha)
    joined = nc.concat(outs, axis=-1)
    weights = np.stack([a.data for a in alphas], axis=-2)
    return nc.matmul(joined, params.wo), weights
