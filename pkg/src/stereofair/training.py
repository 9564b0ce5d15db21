"""Losses, manual gradients and the training loop for MoS parameters.

The backbone never changes: gradients stop at its input. Everything here works
on :class:`~stereofair.mos.PromptBatch` statistics so a whole mini-batch runs
as a handful of array operations.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .config import ConfigError, coerce, parse_bool
from .fairness import DEFAULT_EPSILON, soft_sf_arrays
from .mos import BatchTrace, MoSParams, PromptBatch, batch_forward, init_mos_params

PROB_CLAMP = 1e-12


class TrainingError(RuntimeError):
    """Numerical failure during training; ``batch_index`` names the culprit."""

    def __init__(self, message, epoch=None, batch_index=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch_index = batch_index


# -- losses -----------------------------------------------------------------

def rec_loss(like_prob, label) -> float:
    """Binary cross-entropy of one prediction."""
    p = min(max(float(like_prob), PROB_CLAMP), 1.0 - PROB_CLAMP)
    return -math.log(p) if int(label) == 1 else -math.log(1.0 - p)


def _bce(y, labels):
    """Mean BCE over a batch and its derivative with respect to ``y``."""
    y = np.asarray(y, dtype=float)
    labels = np.asarray(labels)
    n = y.size
    pos = labels == 1
    p = np.clip(y, PROB_CLAMP, 1.0 - PROB_CLAMP)
    losses = np.where(pos, -np.log(p), -np.log1p(-p))
    inside = (y > PROB_CLAMP) & (y < 1.0 - PROB_CLAMP)
    grad = np.where(pos, -1.0 / p, 1.0 / (1.0 - p)) * inside / n
    return float(losses.mean()), grad


def fair_loss(like_prob, h, flags, epsilon: float = DEFAULT_EPSILON):
    """``|soft SF|`` of a batch and its derivative with respect to ``like_prob``.

    At ``SF = 0`` the subgradient 0 is used.
    """
    sf, grad = soft_sf_arrays(like_prob, h, flags, epsilon)
    return abs(sf), np.sign(sf) * grad


def _min_pair(values):
    """Lowest-index pair (i, j), i < j, with the smallest squared distance."""
    n = len(values)
    best, arg = math.inf, None
    for i in range(n):
        for j in range(i + 1, n):
            dist = float(np.sum((values[i] - values[j]) ** 2))
            if dist < best:
                best, arg = dist, (i, j)
    return best, arg


def expert_diversity_loss(w) -> float:
    """``-min_{i<j} (w_i - w_j)^2``."""
    w = np.asarray(w, dtype=float)
    if w.size < 2:
        raise ValueError("expert diversity needs at least two experts")
    return -_min_pair(w)[0]


def _diversity_and_grad(vectors):
    """Per-example diversity loss over ``vectors`` (B, N, ...) and gradient."""
    B, N = vectors.shape[:2]
    if N < 2:
        return 0.0, np.zeros_like(vectors)
    flat = vectors.reshape(B, N, -1)
    diff = flat[:, :, None, :] - flat[:, None, :, :]
    dist = np.einsum("bijk,bijk->bij", diff, diff)
    iu, ju = np.triu_indices(N, k=1)
    pair = dist[:, iu, ju]
    # argmin returns the first minimum; triu order is lexicographic in (i, j)
    pick = pair.argmin(axis=1)
    i, j = iu[pick], ju[pick]
    rows = np.arange(B)
    loss = -pair[rows, pick]
    grad = np.zeros_like(flat)
    g = -2.0 * (flat[rows, i] - flat[rows, j])
    grad[rows, i] += g
    grad[rows, j] -= g
    return float(loss.mean()), grad.reshape(vectors.shape) / B


@dataclass(frozen=True)
class LossBreakdown:
    l_rec: float
    l_fair: float
    l_expert: float
    l_total: float
    lambda_fair: float = 1.0
    lambda_expert: float = 1.0

    def to_json(self) -> dict:
        return asdict(self)


def total_loss(l_rec: float, l_fair: float, l_expert: float,
               lambda_fair: float = 1.0, lambda_expert: float = 1.0) -> LossBreakdown:
    total = l_rec + lambda_fair * l_fair + lambda_expert * l_expert
    return LossBreakdown(l_rec, l_fair, l_expert, total, lambda_fair, lambda_expert)


# -- configuration ----------------------------------------------------------

TRAIN_SCHEMA = {
    "epochs": int,
    "batch_size": int,
    "learning_rate": float,
    "seed": int,
    "K": int,
    "N": int,
    "L": int,
    "lambda_fair": float,
    "lambda_expert": float,
    "optimizer": str,
    "setting": str,
    "static_experts": parse_bool,
    "diversity_on": str,
    "patience": int,
    "epsilon": float,
    "init_scale": float,
    "decision_threshold": float,
}


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    learning_rate: float = 0.01
    seed: int = 0
    K: int = 1
    N: int = 4
    L: int = 5
    lambda_fair: float = 1.0
    lambda_expert: float = 1.0
    optimizer: str = "adam"
    setting: str = "explicit"
    static_experts: bool = False
    diversity_on: str = "weights"
    patience: int = 0
    epsilon: float = DEFAULT_EPSILON
    init_scale: float = 0.1
    decision_threshold: float = 0.5

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ConfigError("epochs >= 0, batch_size >= 1 and learning_rate > 0 required")
        if self.N < 1 or self.L < 0 or not 1 <= self.K <= self.N:
            raise ConfigError("need N >= 1, L >= 0 and 1 <= K <= N")
        if self.lambda_fair < 0 or self.lambda_expert < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.diversity_on not in ("weights", "expert_outputs"):
            raise ConfigError(f"unknown diversity_on {self.diversity_on!r}")
        if self.setting not in ("implicit", "explicit", "counterfactual"):
            raise ConfigError(f"unknown setting {self.setting!r}")
        if self.patience < 0 or self.epsilon <= 0:
            raise ConfigError("patience must be >= 0 and epsilon > 0")

    @classmethod
    def from_mapping(cls, values: dict) -> "TrainConfig":
        return cls(**coerce(values, TRAIN_SCHEMA, (), where="train config"))

    def to_mapping(self) -> dict:
        return asdict(self)

    def rec_only(self) -> "TrainConfig":
        """The L_rec-only ablation of this configuration."""
        return TrainConfig(**{**asdict(self), "lambda_fair": 0.0, "lambda_expert": 0.0})


# -- forward / backward -----------------------------------------------------

@dataclass(frozen=True)
class TrainBatch:
    """Prompt statistics plus everything the losses need."""

    prompts: PromptBatch
    labels: np.ndarray   # (B,) 0/1
    h: np.ndarray        # (B, G) history proportions
    flags: np.ndarray    # (B, G) target flags

    def __len__(self):
        return len(self.labels)

    def take(self, idx) -> "TrainBatch":
        return TrainBatch(self.prompts.take(idx), self.labels[idx], self.h[idx], self.flags[idx])


def _losses(trace: BatchTrace, batch: TrainBatch, cfg: TrainConfig):
    l_rec, dy = _bce(trace.y, batch.labels)
    l_fair, dfair = fair_loss(trace.y, batch.h, batch.flags, cfg.epsilon)
    target = trace.w if cfg.diversity_on == "weights" else trace.E
    l_expert, dtarget = _diversity_and_grad(target)
    breakdown = total_loss(l_rec, l_fair, l_expert, cfg.lambda_fair, cfg.lambda_expert)
    dy = dy + cfg.lambda_fair * dfair
    return breakdown, dy, cfg.lambda_expert * dtarget


def evaluate_loss(params: MoSParams, scorer, batch: TrainBatch, cfg: TrainConfig) -> LossBreakdown:
    return _losses(batch_forward(params, scorer, batch.prompts), batch, cfg)[0]


def backward(params: MoSParams, scorer, batch: TrainBatch, cfg: TrainConfig,
             trace: BatchTrace | None = None):
    """Loss breakdown and gradients of ``l_total`` for every parameter block.

    The top-K selection is treated as fixed (it is piecewise constant).
    """
    if trace is None:
        trace = batch_forward(params, scorer, batch.prompts)
    breakdown, dy, dtarget = _losses(trace, batch, cfg)
    B, N, L, d = trace.E.shape
    G = trace.raw.shape[1]

    dx = dy[:, None] * scorer.head_grad(trace.y, trace.hid)
    de = np.broadcast_to((dx / trace.denom[:, None])[:, None, :], (B, L, d))
    dE = trace.w[:, :, None, None] * de[:, None]
    dw = np.einsum("bnld,bld->bn", trace.E, de)
    if cfg.diversity_on == "weights":
        dw = dw + dtarget
    else:
        dE = dE + dtarget
    dE = dE.reshape(B, N, L * d)
    grads = {
        "expert_w": np.einsum("bi,bnj->nij", trace.g, dE),
        "expert_b": dE.sum(axis=0),
    }
    if cfg.static_experts:
        grads["expert_w"] = np.zeros_like(params.expert_w)

    dz = trace.w * (dw - np.sum(dw * trace.w, axis=1, keepdims=True))
    grads["reweight_w"] = trace.avg.T @ dz
    grads["reweight_b"] = dz.sum(axis=0)
    dmasked = np.broadcast_to((dz @ params.reweight_w.T)[:, None, :] / G, trace.raw.shape)

    kept = np.take_along_axis(trace.masked, trace.keep, axis=-1)
    dkept = np.take_along_axis(dmasked, trace.keep, axis=-1)
    draw = np.zeros_like(trace.raw)
    np.put_along_axis(draw, trace.keep, kept * (dkept - np.sum(kept * dkept, axis=-1, keepdims=True)), axis=-1)
    dr = trace.raw * (draw - np.sum(draw * trace.raw, axis=-1, keepdims=True))
    grads["router_w"] = np.einsum("bgi,bgn->in", trace.feats, dr)
    grads["router_b"] = dr.sum(axis=(0, 1))
    return breakdown, {k: grads[k] for k in MoSParams.BLOCKS}


# -- optimisers -------------------------------------------------------------

@dataclass
class OptimizerState:
    kind: str
    lr: float
    step: int = 0
    m: dict | None = None
    v: dict | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def create(cls, kind: str, lr: float, params: MoSParams) -> "OptimizerState":
        if kind == "sgd":
            return cls(kind, lr)
        if kind == "adam":
            return cls(kind, lr, m=params.zeros_like(), v=params.zeros_like())
        raise ConfigError(f"unknown optimizer {kind!r}")

    def apply(self, params: MoSParams, grads: dict) -> None:
        self.step += 1
        for name in MoSParams.BLOCKS:
            g = grads[name]
            p = getattr(params, name)
            if self.kind == "sgd":
                p -= self.lr * g
                continue
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            mhat = self.m[name] / (1 - self.beta1 ** self.step)
            vhat = self.v[name] / (1 - self.beta2 ** self.step)
            p -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


# -- fit --------------------------------------------------------------------

def rank_auc(scores, labels) -> float | None:
    from .evaluation import auc, EvaluationError
    try:
        return auc(scores, labels)
    except EvaluationError:
        return None


def _val_sf(y, batch: TrainBatch, threshold) -> float | None:
    from .fairness import hard_sf_arrays
    sf = hard_sf_arrays(y >= threshold, batch.h, batch.flags)
    return None if math.isnan(sf) else sf


def new_params(cfg: TrainConfig, d: int) -> MoSParams:
    params = init_mos_params(d, cfg.N, cfg.L, cfg.K, seed=cfg.seed, scale=cfg.init_scale)
    if cfg.static_experts:
        params.expert_w[...] = 0.0
    return params


def fit(cfg: TrainConfig, train: TrainBatch, scorer, params: MoSParams,
        validation: TrainBatch | None = None, log_path=None):
    """Train ``params`` in place on a copy; return ``(params, log)``.

    One log record per epoch holds the mean training losses over batches and,
    when ``validation`` is given, its losses, AUC and hard SF. With
    ``patience > 0`` training stops once validation ``l_total`` has not improved
    for that many epochs.
    """
    digest = scorer.weights_digest
    params = params.copy()
    if cfg.epochs == 0:
        _write_log([], log_path)
        return params, []
    if cfg.static_experts and np.any(params.expert_w):
        raise ConfigError("static_experts requires zero expert_w")
    opt = OptimizerState.create(cfg.optimizer, cfg.learning_rate, params)
    rng = np.random.default_rng(cfg.seed)
    log = []
    best, stale = math.inf, 0
    n = len(train)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        sums = np.zeros(4)
        n_batches = 0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            batch = train.take(order[start:start + cfg.batch_size])
            losses, grads = backward(params, scorer, batch, cfg)
            if not np.isfinite(losses.l_total) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise TrainingError(f"non-finite loss or gradient in epoch {epoch}, batch {b}",
                                    epoch=epoch, batch_index=b)
            opt.apply(params, grads)
            sums += (losses.l_rec, losses.l_fair, losses.l_expert, losses.l_total)
            n_batches += 1
        mean = sums / n_batches
        record = {"epoch": epoch, "l_rec": float(mean[0]), "l_fair": float(mean[1]),
                  "l_expert": float(mean[2]), "l_total": float(mean[3])}
        if validation is not None and len(validation):
            trace = batch_forward(params, scorer, validation.prompts)
            vl = _losses(trace, validation, cfg)[0]
            record["val_l_total"] = vl.l_total
            record["val_auc"] = rank_auc(trace.y, validation.labels)
            record["val_sf"] = _val_sf(trace.y, validation, cfg.decision_threshold)
        log.append(record)
        if cfg.patience and validation is not None:
            if record["val_l_total"] < best - 1e-12:
                best, stale = record["val_l_total"], 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    break
    if scorer.weights_digest != digest or scorer.compute_digest() != digest:
        raise TrainingError("backbone weights changed during training")
    _write_log(log, log_path)
    return params, log


def _write_log(log, path):
    if path is None:
        return
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for rec in log:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


__all__ = [
    "LossBreakdown", "OptimizerState", "TrainBatch", "TrainConfig", "TrainingError", "backward",
    "evaluate_loss", "expert_diversity_loss", "fair_loss", "fit", "new_params", "rec_loss",
    "total_loss",
]
