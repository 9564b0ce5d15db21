"""Mixture-of-Stereotypes soft prompts.

Every recommendation prompt is paired with one stereotype template per group.
A router scores each pairing over the experts, top-K masking keeps the K
strongest, a reweighting layer turns the averaged masked rows into expert
weights, and the experts' soft prompts are mixed with those weights. The
template tokens only ever reach the router; the backbone sees the bare prompt.
"""

from __future__ import annotations

import hashlib
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .backbone import FrozenScorer, TokenVocabulary, _tokens

MOS_MAGIC = b"SFMO1"
_MOS_HEADER = struct.Struct("<IIII")

DEFAULT_N = 4
DEFAULT_L = 5
DEFAULT_K = 1


class MoSError(ValueError):
    pass


@dataclass(frozen=True)
class StereotypeTemplateSet:
    """One token list per group, in the dataset's group order."""

    group_set: tuple[str, ...]
    templates: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        if len(self.templates) != len(self.group_set):
            raise MoSError("need exactly one template per group")

    @classmethod
    def default(cls, vocab: TokenVocabulary) -> "StereotypeTemplateSet":
        """``[attribute token, template tokens...]`` for each group."""
        return cls(vocab.group_set,
                   tuple((vocab.group_token(g), *vocab.template_tokens) for g in vocab.group_set))

    def __len__(self):
        return len(self.templates)


@dataclass
class MoSParams:
    router_w: np.ndarray    # (d, N)
    router_b: np.ndarray    # (N,)
    reweight_w: np.ndarray  # (N, N)
    reweight_b: np.ndarray  # (N,)
    expert_w: np.ndarray    # (N, d, L*d)
    expert_b: np.ndarray    # (N, L*d)
    K: int = DEFAULT_K

    BLOCKS = ("router_w", "router_b", "reweight_w", "reweight_b", "expert_w", "expert_b")

    def __post_init__(self):
        for name in self.BLOCKS:
            setattr(self, name, np.array(getattr(self, name), dtype=float))
        d, N = self.router_w.shape
        if self.router_b.shape != (N,) or self.reweight_w.shape != (N, N) or self.reweight_b.shape != (N,):
            raise MoSError("router / reweight shapes disagree")
        if self.expert_w.ndim != 3 or self.expert_w.shape[:2] != (N, d) or self.expert_w.shape[2] % d:
            raise MoSError("expert_w must have shape (N, d, L*d)")
        if self.expert_b.shape != (N, self.expert_w.shape[2]):
            raise MoSError("expert_b must have shape (N, L*d)")
        if not 1 <= self.K <= N:
            raise MoSError(f"K must lie in [1, {N}], got {self.K}")

    @property
    def d(self) -> int:
        return self.router_w.shape[0]

    @property
    def N(self) -> int:
        return self.router_w.shape[1]

    @property
    def L(self) -> int:
        return self.expert_w.shape[2] // self.d

    def blocks(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.BLOCKS}

    def copy(self) -> "MoSParams":
        return MoSParams(**{k: v.copy() for k, v in self.blocks().items()}, K=self.K)

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.blocks().items()}

    def digest(self) -> str:
        h = hashlib.sha256()
        for a in self.blocks().values():
            h.update(np.ascontiguousarray(a, dtype="<f4").tobytes())
        return h.hexdigest()

    def equal(self, other: "MoSParams") -> bool:
        return self.K == other.K and all(
            np.array_equal(a, b) for a, b in zip(self.blocks().values(), other.blocks().values()))


def zero_mos_params(d: int, N: int = DEFAULT_N, L: int = DEFAULT_L, K: int = DEFAULT_K) -> MoSParams:
    return MoSParams(np.zeros((d, N)), np.zeros(N), np.zeros((N, N)), np.zeros(N),
                     np.zeros((N, d, L * d)), np.zeros((N, L * d)), K)


def init_mos_params(d: int, N: int = DEFAULT_N, L: int = DEFAULT_L, K: int = DEFAULT_K,
                    seed: int = 0, scale: float = 0.1) -> MoSParams:
    """Small seeded random parameters; experts need distinct starts to diverge."""
    if N < 1 or L < 0 or d < 1:
        raise MoSError("N, d must be positive and L non-negative")
    rng = np.random.default_rng(seed)
    return MoSParams(
        rng.normal(scale=scale, size=(d, N)),
        np.zeros(N),
        rng.normal(scale=scale, size=(N, N)),
        np.zeros(N),
        rng.normal(scale=scale / np.sqrt(d), size=(N, d, L * d)),
        rng.normal(scale=scale * 0.1, size=(N, L * d)),
        K,
    )


def _softmax(z, axis=-1):
    z = np.asarray(z, dtype=float)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def multi_stereotype_prompting(rec_prompt, template_set: StereotypeTemplateSet) -> list[tuple[tuple[int, ...], tuple[int, ...]]]:
    """``(c_rec, template_i + c_rec)`` for each group, in group order."""
    c_rec = tuple(_tokens(rec_prompt))
    pairs = []
    for g, tpl in zip(template_set.group_set, template_set.templates):
        if not tpl:
            warnings.warn(f"empty stereotype template for group {g!r}", stacklevel=2)
        pairs.append((c_rec, tuple(tpl) + c_rec))
    return pairs


def meanpool(embed, tokens) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=int)
    if tokens.size == 0:
        raise MoSError("cannot pool an empty token list")
    if tokens.min() < 0 or tokens.max() >= embed.shape[0]:
        raise MoSError("token id outside the embedding table")
    return embed[tokens].mean(axis=0)


def route(params: MoSParams, scorer_embed, variant_tokens) -> np.ndarray:
    """Raw routing probabilities of one prompt variant."""
    feat = meanpool(scorer_embed, variant_tokens)
    if feat.shape != (params.d,):
        raise MoSError("embedding width does not match the router")
    return _softmax(feat @ params.router_w + params.router_b)


def topk_indices(p, K: int) -> np.ndarray:
    """Indices of the K largest entries, ties going to the lower index."""
    p = np.asarray(p, dtype=float)
    if not 1 <= K <= p.shape[-1]:
        raise MoSError(f"K must lie in [1, {p.shape[-1]}], got {K}")
    # stable sort on -p keeps lower indices first among equal values
    return np.argsort(-p, axis=-1, kind="stable")[..., :K]


def topk_mask(p, K: int) -> np.ndarray:
    """Keep the K largest routing entries and renormalise them by a softmax
    over their raw values; everything else becomes 0."""
    p = np.asarray(p, dtype=float)
    keep = topk_indices(p, K)
    out = np.zeros_like(p)
    vals = np.take_along_axis(p, keep, axis=-1)
    np.put_along_axis(out, keep, _softmax(vals), axis=-1)
    return out


def reweight(params: MoSParams, masked) -> np.ndarray:
    masked = np.atleast_2d(np.asarray(masked, dtype=float))
    avg = masked.mean(axis=0)
    return _softmax(avg @ params.reweight_w + params.reweight_b)


def expert_outputs(params: MoSParams, scorer_embed, c_rec) -> np.ndarray:
    """Every expert's soft prompt for ``c_rec``; shape (N, L, d)."""
    g = meanpool(scorer_embed, _tokens(c_rec))
    if g.shape != (params.d,):
        raise MoSError("embedding width does not match the experts")
    flat = np.einsum("i,nij->nj", g, params.expert_w) + params.expert_b
    return flat.reshape(params.N, params.L, params.d)


def expert_prompts(params: MoSParams, scorer_embed, c_rec, w) -> np.ndarray:
    """``e = sum_n w_n E_n(c_rec)``, an (L, d) matrix."""
    w = np.asarray(w, dtype=float)
    if w.shape != (params.N,):
        raise MoSError(f"w must have {params.N} entries")
    E = expert_outputs(params, scorer_embed, c_rec)
    return np.tensordot(w, E, axes=1)


@dataclass(frozen=True)
class RoutingTrace:
    raw: np.ndarray       # (G, N)
    masked: np.ndarray    # (G, N)
    averaged: np.ndarray  # (N,)
    w: np.ndarray         # (N,)
    e: np.ndarray         # (L, d)
    like_prob: float
    backbone_tokens: tuple[int, ...] = field(default=())


def mos_forward(params: MoSParams, scorer: FrozenScorer, rec_prompt,
                template_set: StereotypeTemplateSet) -> RoutingTrace:
    if params.d != scorer.d:
        raise MoSError("MoS and backbone embedding widths differ")
    pairs = multi_stereotype_prompting(rec_prompt, template_set)
    c_rec = pairs[0][0]
    raw = np.stack([route(params, scorer.embed, variant) for _, variant in pairs])
    masked = topk_mask(raw, params.K)
    w = reweight(params, masked)
    e = expert_prompts(params, scorer.embed, c_rec, w)
    x, _ = scorer.pooled(e, c_rec)
    y, _ = scorer.head(x)
    return RoutingTrace(raw, masked, masked.mean(axis=0), w, e, float(y), c_rec)


# ---------------------------------------------------------------------------
# batched path used by training and evaluation


@dataclass(frozen=True)
class PromptBatch:
    """Token statistics of a batch of prompts, enough for any MoS pass.

    ``tok_sum[b]`` and ``n_tok[b]`` are the summed embedding and length of
    prompt ``b``; ``tpl_sum[i]`` and ``tpl_len[i]`` describe template ``i``.
    """

    tok_sum: np.ndarray
    n_tok: np.ndarray
    tpl_sum: np.ndarray
    tpl_len: np.ndarray

    def __len__(self):
        return self.tok_sum.shape[0]

    def take(self, idx) -> "PromptBatch":
        return PromptBatch(self.tok_sum[idx], self.n_tok[idx], self.tpl_sum, self.tpl_len)

    @classmethod
    def build(cls, scorer: FrozenScorer, prompts, template_set: StereotypeTemplateSet) -> "PromptBatch":
        sums, lens = [], []
        for p in prompts:
            s, n = scorer.token_stats(_tokens(p))
            if n == 0:
                raise MoSError("empty recommendation prompt")
            sums.append(s)
            lens.append(n)
        tsum, tlen = [], []
        for tpl in template_set.templates:
            s, n = scorer.token_stats(tpl)
            tsum.append(s)
            tlen.append(n)
        d = scorer.d
        return cls(np.reshape(np.array(sums, dtype=float), (-1, d)), np.array(lens, dtype=float),
                   np.reshape(np.array(tsum, dtype=float), (-1, d)), np.array(tlen, dtype=float))


@dataclass
class BatchTrace:
    feats: np.ndarray    # (B, G, d) router inputs
    raw: np.ndarray      # (B, G, N)
    keep: np.ndarray     # (B, G, K) kept expert indices
    masked: np.ndarray   # (B, G, N)
    avg: np.ndarray      # (B, N)
    w: np.ndarray        # (B, N)
    g: np.ndarray        # (B, d) expert inputs
    E: np.ndarray        # (B, N, L, d)
    e: np.ndarray        # (B, L, d)
    x: np.ndarray        # (B, d) pooled backbone input
    hid: np.ndarray      # (B, hidden)
    y: np.ndarray        # (B,)
    denom: np.ndarray    # (B,) L + prompt length


def batch_forward(params: MoSParams, scorer: FrozenScorer, batch: PromptBatch) -> BatchTrace:
    if params.d != scorer.d:
        raise MoSError("MoS and backbone embedding widths differ")
    feats = (batch.tpl_sum[None, :, :] + batch.tok_sum[:, None, :]) / (
        batch.tpl_len[None, :, None] + batch.n_tok[:, None, None])
    raw = _softmax(feats @ params.router_w + params.router_b)
    keep = topk_indices(raw, params.K)
    masked = np.zeros_like(raw)
    np.put_along_axis(masked, keep, _softmax(np.take_along_axis(raw, keep, axis=-1)), axis=-1)
    avg = masked.mean(axis=1)
    w = _softmax(avg @ params.reweight_w + params.reweight_b)
    g = batch.tok_sum / batch.n_tok[:, None]
    B, N, L, d = len(batch), params.N, params.L, params.d
    E = (np.einsum("bi,nij->bnj", g, params.expert_w) + params.expert_b[None]).reshape(B, N, L, d)
    e = np.einsum("bn,bnld->bld", w, E)
    denom = L + batch.n_tok
    x = (e.sum(axis=1) + batch.tok_sum) / denom[:, None]
    y, hid = scorer.head(x)
    return BatchTrace(feats, raw, keep, masked, avg, w, g, E, e, x, hid, y, denom)


def baseline_scores(scorer: FrozenScorer, batch: PromptBatch) -> np.ndarray:
    """Scores with no soft prompt at all (L = 0)."""
    y, _ = scorer.head(batch.tok_sum / batch.n_tok[:, None])
    return y


def save_mos(params: MoSParams, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MOS_MAGIC)
        fh.write(_MOS_HEADER.pack(params.N, params.L, params.K, params.d))
        for a in params.blocks().values():
            fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())
        fh.write(bytes.fromhex(params.digest()))
    return path


def load_mos(path) -> MoSParams:
    raw = Path(path).read_bytes()
    if raw[:5] != MOS_MAGIC:
        raise MoSError(f"{path}: not a MoS parameter file")
    N, L, K, d = _MOS_HEADER.unpack_from(raw, 5)
    off = 5 + _MOS_HEADER.size
    shapes = [(d, N), (N,), (N, N), (N,), (N, d, L * d), (N, L * d)]
    arrays = []
    for shape in shapes:
        n = int(np.prod(shape))
        arrays.append(np.frombuffer(raw, dtype="<f4", count=n, offset=off).astype(float).reshape(shape))
        off += 4 * n
    if off + 32 != len(raw):
        raise MoSError(f"{path}: unexpected file length")
    params = MoSParams(*arrays, K=K)
    if params.digest() != raw[off:].hex():
        raise MoSError(f"{path}: digest mismatch")
    return params


__all__ = [
    "BatchTrace", "MoSError", "MoSParams", "PromptBatch",
    "RoutingTrace", "StereotypeTemplateSet", "baseline_scores", "batch_forward", "expert_outputs",
    "expert_prompts", "init_mos_params", "load_mos", "meanpool", "mos_forward",
    "multi_stereotype_prompting", "reweight", "route", "save_mos", "topk_indices", "topk_mask",
    "zero_mos_params",
]
