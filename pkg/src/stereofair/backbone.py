"""Frozen sequence scorer standing in for a pre-trained LLM recommender.

The scorer mean-pools the embeddings of ``[soft prompt rows; prompt tokens]``
and maps the pooled vector through ``tanh`` hidden units to a logistic
like-probability. Its weights are fixed at construction; only gradients with
respect to the soft-prompt rows are exposed.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import InteractionDataset, Sequence, label_from_rating

SETTINGS = ("implicit", "explicit", "counterfactual")
MAX_PROMPT_LEN = 128
N_TEMPLATE_TOKENS = 3

SCORER_MAGIC = b"SFSC1"
_SCORER_HEADER = struct.Struct("<IIIQd")


class BackboneError(ValueError):
    pass


@dataclass(frozen=True)
class TokenVocabulary:
    """Token id layout.

    Content tokens (item titles) occupy ``[0, n_content)``. Reserved ids follow:
    PAD, LIKE, DISLIKE, TARGET, one attribute token per group, then the
    stereotype-template tokens. A second copy of the content range closes the
    table: title tokens in the target slot use these ids, so a pooled bag of
    embeddings still knows which item is the one being scored.
    """

    n_content: int
    group_set: tuple[str, ...]
    n_template: int = N_TEMPLATE_TOKENS
    token_groups: dict = field(default_factory=dict, compare=False)

    @classmethod
    def from_dataset(cls, dataset: InteractionDataset, n_template=N_TEMPLATE_TOKENS) -> "TokenVocabulary":
        n_content = 1 + max(t for v in dataset.items for t in v.title_tokens)
        if min(t for v in dataset.items for t in v.title_tokens) < 0:
            raise BackboneError("title tokens must be non-negative")
        token_groups = {}
        for v in dataset.items:
            if v.pool is not None:
                for t in v.title_tokens:
                    token_groups[t] = (v.pool, v.strength)
        return cls(n_content, tuple(dataset.group_set), n_template, token_groups)

    @property
    def pad(self) -> int:
        return self.n_content

    @property
    def like(self) -> int:
        return self.n_content + 1

    @property
    def dislike(self) -> int:
        return self.n_content + 2

    @property
    def target(self) -> int:
        return self.n_content + 3

    def group_token(self, group) -> int:
        return self.n_content + 4 + self.group_set.index(group)

    @property
    def group_tokens(self) -> list[int]:
        return [self.group_token(g) for g in self.group_set]

    @property
    def template_tokens(self) -> list[int]:
        start = self.n_content + 4 + len(self.group_set)
        return list(range(start, start + self.n_template))

    @property
    def n_reserved_end(self) -> int:
        return self.n_content + 4 + len(self.group_set) + self.n_template

    def target_slot(self, token: int) -> int:
        """Id of content ``token`` when it appears in the target slot."""
        if not 0 <= token < self.n_content:
            raise BackboneError(f"content token {token} out of range")
        return self.n_reserved_end + token

    @property
    def size(self) -> int:
        return self.n_reserved_end + self.n_content


@dataclass(frozen=True)
class RecPrompt:
    tokens: tuple[int, ...]
    setting: str = "implicit"

    def __len__(self):
        return len(self.tokens)


def counterfactual_group(group, group_set) -> str:
    """Next group in declared order, wrapping around."""
    i = tuple(group_set).index(group)
    return group_set[(i + 1) % len(group_set)]


def tokenize_rec_prompt(sequence: Sequence, dataset: InteractionDataset, setting: str,
                        vocab: TokenVocabulary, max_len: int = MAX_PROMPT_LEN) -> RecPrompt:
    """``[attr?] LIKE liked.. DISLIKE disliked.. TARGET target``.

    Target title tokens are mapped to their target-slot ids.
    ``implicit`` adds no attribute token, ``explicit`` the user's own group
    token, ``counterfactual`` another group's. Oldest history items are dropped
    first when the prompt exceeds ``max_len``.
    """
    if setting not in SETTINGS:
        raise BackboneError(f"unknown setting {setting!r}")
    for x in (*sequence.history, sequence.target):
        if not dataset.has_item(x.item_id):
            raise BackboneError(f"sequence references unknown item {x.item_id!r}")
    prefix = []
    if setting != "implicit":
        group = dataset.user(sequence.user_id).group
        if setting == "counterfactual":
            group = counterfactual_group(group, dataset.group_set)
        prefix = [vocab.group_token(group)]
    target = [vocab.target, *(vocab.target_slot(t) for t in dataset.item(sequence.target.item_id).title_tokens)]
    history = list(sequence.history)

    def build(hist):
        liked, disliked = [], []
        for x in hist:
            toks = dataset.item(x.item_id).title_tokens
            if label_from_rating(x.rating, dataset.rating_median):
                liked.extend(toks)
            else:
                disliked.extend(toks)
        return [*prefix, vocab.like, *liked, vocab.dislike, *disliked, *target]

    tokens = build(history)
    while len(tokens) > max_len and history:
        history = history[1:]
        tokens = build(history)
    if len(tokens) > max_len:
        raise BackboneError("target item alone exceeds the prompt length limit")
    return RecPrompt(tuple(tokens), setting)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _frozen(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float32).astype(np.float64)
    a.setflags(write=False)
    return a


class FrozenScorer:
    """Immutable pooled scorer. Weights are float32-representable float64 arrays."""

    def __init__(self, embed, w1, b1, w2, b2, seed=0, beta=0.0):
        self.embed = _frozen(embed)
        self.w1 = _frozen(w1)
        self.b1 = _frozen(b1)
        self.w2 = _frozen(w2)
        self.b2 = _frozen(np.reshape(b2, (1,)))
        self.seed = int(seed)
        self.beta = float(beta)
        if self.w1.shape != (self.hidden, self.d) or self.b1.shape != (self.hidden,) or self.w2.shape != (self.hidden,):
            raise BackboneError("inconsistent scorer weight shapes")
        self.weights_digest = self.compute_digest()

    @property
    def vocab_size(self) -> int:
        return self.embed.shape[0]

    @property
    def d(self) -> int:
        return self.embed.shape[1]

    @property
    def hidden(self) -> int:
        return self.w1.shape[0]

    def arrays(self):
        return (self.embed, self.w1, self.b1, self.w2, self.b2)

    def compute_digest(self) -> str:
        h = hashlib.sha256()
        for a in self.arrays():
            h.update(np.ascontiguousarray(a, dtype="<f4").tobytes())
        return h.hexdigest()

    def token_stats(self, tokens) -> tuple[np.ndarray, int]:
        """Sum of token embeddings and token count."""
        tokens = np.asarray(tokens, dtype=int)
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.vocab_size):
            raise BackboneError("token id outside the vocabulary")
        return self.embed[tokens].sum(axis=0), int(tokens.size)

    def mean_embedding(self, tokens) -> np.ndarray:
        s, n = self.token_stats(tokens)
        if n == 0:
            return np.zeros(self.d)
        return s / n

    def head(self, x):
        """Logistic score of pooled vectors ``x`` (shape (..., d)); returns (y, hidden)."""
        hid = np.tanh(x @ self.w1.T + self.b1)
        z = hid @ self.w2 + self.b2[0]
        return _sigmoid(z), hid

    def head_grad(self, y, hid):
        """d y / d x for the outputs of :meth:`head`; shape (..., d)."""
        back = (1.0 - hid**2) * self.w2
        return (y * (1.0 - y))[..., None] * (back @ self.w1)

    def pooled(self, e, tokens):
        e = _check_prompt(e, self.d)
        tok_sum, n_tok = self.token_stats(tokens)
        n = e.shape[0] + n_tok
        if n == 0:
            raise BackboneError("nothing to pool")
        return (e.sum(axis=0) + tok_sum) / n, n


def _check_prompt(e, d) -> np.ndarray:
    if e is None:
        return np.zeros((0, d))
    e = np.asarray(e, dtype=float)
    if e.ndim != 2 or e.shape[1] != d:
        raise BackboneError(f"soft prompt must have shape (L, {d}), got {e.shape}")
    return e


def _tokens(rec_prompt):
    return rec_prompt.tokens if isinstance(rec_prompt, RecPrompt) else tuple(rec_prompt)


def score(scorer: FrozenScorer, e, rec_prompt) -> float:
    """Like-probability of ``rec_prompt`` with soft prompt ``e`` (L x d; L may be 0)."""
    x, _ = scorer.pooled(e, _tokens(rec_prompt))
    y, _ = scorer.head(x)
    return float(y)


def score_with_input_grad(scorer: FrozenScorer, e, rec_prompt):
    """Score and ``d score / d e``. Every row of the gradient is identical."""
    e = _check_prompt(e, scorer.d)
    x, n = scorer.pooled(e, _tokens(rec_prompt))
    y, hid = scorer.head(x)
    g = scorer.head_grad(y, hid) / n
    return float(y), np.tile(g, (e.shape[0], 1))


def _unit_directions(rng, n, d):
    a = rng.normal(size=(d, max(n, 1)))
    if n <= d:
        q, _ = np.linalg.qr(a)
        return q[:, :n].T
    return (a / np.linalg.norm(a, axis=0)).T[:n]


def make_frozen_scorer(vocab: TokenVocabulary, d: int = 16, hidden: int = 16, seed: int = 0,
                       planted_bias_strength: float = 1.0, calibration=None, *,
                       emb_scale: float = 0.5, item_shift: float = 0.75, target_shift: float = 3.0,
                       attr_shift: float = 2.0, history_mix: float = 0.5, readout_gain: float = 3.0,
                       readout_quantile: float = 0.99, readout_out: float = 2.0,
                       history_out: float = 1.0, weight_scale: float = 1.0) -> FrozenScorer:
    """Seeded random scorer with a planted group association.

    Each group gets two random unit directions, one for history evidence and
    one for target evidence. With strength ``beta``:

    * history tokens of a group's pool move ``item_shift * beta`` along the
      group's history direction;
    * target-slot tokens move ``target_shift * beta * strength`` along its
      target direction, so popular pool items look most typical of their
      group (``vocab.token_groups`` maps token -> (group, strength));
    * the group's attribute token moves along the target direction too.

    Per group two hidden units are planted. A steep one reads the target
    direction plus ``history_mix`` times the history direction and fires when
    attribute, target and history agree. A gentle one follows how much of the
    history belongs to the group. Attribute tokens share one base embedding;
    at ``beta = 0`` they are interchangeable and no unit is planted.

    ``calibration`` is an optional list of implicit-setting token sequences
    standing in for the data the backbone was fitted on. When given, each
    steep unit is centred at the ``readout_quantile`` of its projection over
    the prompts its group dominates, with gain ``readout_gain`` per spread; the
    gentle unit is centred at the median; the attribute token lifts a typical
    prompt's steep projection by ``attr_shift`` spreads; and the output bias
    puts the median calibration score at 0.5. Without calibration
    ``attr_shift`` is a plain embedding offset.
    """
    if d < 1 or hidden < 1:
        raise BackboneError("d and hidden must be at least 1")
    beta = float(planted_bias_strength)
    rng = np.random.default_rng(seed)
    n_groups = len(vocab.group_set)
    n = vocab.n_content
    embed = rng.normal(scale=emb_scale / np.sqrt(d), size=(vocab.size, d))
    slot = rng.normal(scale=emb_scale / np.sqrt(d), size=d)
    embed[vocab.n_reserved_end:] = embed[:n] + slot
    dirs = _unit_directions(rng, 2 * n_groups, d)
    hdir, tdir = dirs[:n_groups], dirs[n_groups:]
    base_attr = rng.normal(scale=emb_scale / np.sqrt(d), size=d)
    for k, g in enumerate(vocab.group_set):
        embed[vocab.group_token(g)] = base_attr + attr_shift * beta * tdir[k]
    gidx = {g: k for k, g in enumerate(vocab.group_set)}
    for tok, (g, strength) in sorted(vocab.token_groups.items()):
        if 0 <= tok < n:
            embed[tok] += item_shift * beta * hdir[gidx[g]]
            embed[vocab.target_slot(tok)] += target_shift * beta * strength * tdir[gidx[g]]
    w1 = rng.normal(scale=weight_scale, size=(hidden, d))
    b1 = rng.normal(scale=0.1, size=hidden)
    w2 = rng.normal(scale=1.0 / np.sqrt(hidden), size=hidden)
    b2 = 0.0

    pooled = None
    if calibration is not None:
        calibration = [_tokens(t) for t in calibration]
        if not calibration:
            raise BackboneError("empty calibration set")
        pooled = np.stack([embed[np.asarray(t, dtype=int)].mean(axis=0) for t in calibration])

    planted = beta > 0 and hidden >= 2 * n_groups
    if planted:
        # generic units must not see the planted directions
        if 2 * n_groups <= d:
            w1 -= (w1 @ dirs.T) @ dirs
        steep = tdir + history_mix * hdir
        steep /= np.linalg.norm(steep, axis=1, keepdims=True)
        centre = np.full(n_groups, 0.5 * beta)
        middle = np.zeros(n_groups)
        gain = np.full(n_groups, 4.0 * readout_gain)
        spread = np.ones(n_groups)
        if pooled is not None:
            proj = pooled @ steep.T
            hproj = pooled @ hdir.T
            owner = hproj.argmax(axis=1)
            mean_len = float(np.mean([len(t) for t in calibration]))
            for k in range(n_groups):
                mine = owner == k
                if mine.sum() < 2:
                    continue
                s_k = float(proj[mine, k].std()) or 1.0
                centre[k] = np.quantile(proj[mine, k], readout_quantile)
                gain[k] = readout_gain / s_k
                spread[k] = float(hproj[mine, k].std()) or 1.0
                middle[k] = np.median(hproj[mine, k])
                # prepending the attribute token lifts a typical prompt's
                # steep projection by attr_shift spreads
                lifted = float(np.median(proj[mine, k])) + attr_shift * s_k * (mean_len + 1)
                tok = vocab.group_token(vocab.group_set[k])
                along = (lifted - base_attr @ steep[k]) / (tdir[k] @ steep[k])
                embed[tok] = base_attr + beta * along * tdir[k]
        for k in range(n_groups):
            w1[k] = gain[k] * steep[k]
            b1[k] = -gain[k] * centre[k]
            w2[k] = readout_out
            j = n_groups + k
            w1[j] = hdir[k] / spread[k]
            b1[j] = -middle[k] / spread[k]
            w2[j] = history_out

    if pooled is not None:
        z = np.tanh(pooled @ w1.T + b1) @ w2
        b2 = -float(np.median(z))
    elif planted:
        # cancel the saturated steep readouts of the groups a prompt does not belong to
        b2 = readout_out * float(np.tanh(gain * centre).sum() - np.tanh(gain[0] * centre[0]))
    return FrozenScorer(embed, w1, b1, w2, b2, seed=seed, beta=beta)


def zero_scorer(vocab_size: int, d: int, hidden: int) -> FrozenScorer:
    return FrozenScorer(np.zeros((vocab_size, d)), np.zeros((hidden, d)), np.zeros(hidden),
                        np.zeros(hidden), 0.0)


def save_scorer(scorer: FrozenScorer, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(SCORER_MAGIC)
        fh.write(_SCORER_HEADER.pack(scorer.vocab_size, scorer.d, scorer.hidden, scorer.seed, scorer.beta))
        for a in scorer.arrays():
            fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())
        fh.write(bytes.fromhex(scorer.weights_digest))
    return path


def load_scorer(path) -> FrozenScorer:
    raw = Path(path).read_bytes()
    if raw[:5] != SCORER_MAGIC:
        raise BackboneError(f"{path}: not a scorer file")
    v, d, hidden, seed, beta = _SCORER_HEADER.unpack_from(raw, 5)
    off = 5 + _SCORER_HEADER.size
    shapes = [(v, d), (hidden, d), (hidden,), (hidden,), (1,)]
    arrays = []
    for shape in shapes:
        n = int(np.prod(shape))
        arrays.append(np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(shape))
        off += 4 * n
    digest = raw[off:off + 32].hex()
    if off + 32 != len(raw):
        raise BackboneError(f"{path}: unexpected file length")
    scorer = FrozenScorer(*arrays, seed=seed, beta=beta)
    if scorer.weights_digest != digest:
        raise BackboneError(f"{path}: digest mismatch")
    return scorer
