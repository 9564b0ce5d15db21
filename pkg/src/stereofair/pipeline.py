"""Dataset -> sequences -> split -> training-only stereotype artifacts."""

from __future__ import annotations

from dataclasses import dataclass

from .backbone import TokenVocabulary
from .dataset import DataSplit, InteractionDataset, build_sequences, leave_one_out_split
from .stereotype import (DEFAULT_MIN_INTERACTIONS, DEFAULT_Z, FlagIndex, StereotypeAudit,
                         UserStereotypeProfile, audit_items, user_history_proportion)

DEFAULT_MAX_SEQUENCES = 10_000


@dataclass(frozen=True)
class Prepared:
    dataset: InteractionDataset
    split: DataSplit
    audit: StereotypeAudit
    flags: FlagIndex
    vocab: TokenVocabulary
    n_skipped: int = 0

    def profile(self, sequence) -> UserStereotypeProfile:
        return user_history_proportion(sequence.history_items, self.flags, sequence.user_id)

    def item_groups(self) -> dict:
        return {s.item_id: s.dominant_group for s in self.audit.items}


def training_view(dataset: InteractionDataset, sequences) -> InteractionDataset:
    """Users and interactions that occur in ``sequences`` only."""
    seen = {}
    for s in sequences:
        for x in (*s.history, s.target):
            seen[(x.user_id, x.item_id, x.timestamp)] = x
    users = {k[0] for k in seen}
    return InteractionDataset(
        users=tuple(u for u in dataset.users if u.user_id in users),
        items=dataset.items,
        interactions=tuple(sorted(seen.values(), key=lambda x: (x.user_id, x.timestamp, x.item_id))),
        group_set=dataset.group_set,
        rating_median=dataset.rating_median,
        rating_scale=dataset.rating_scale,
    )


def prepare(dataset: InteractionDataset, max_sequences: int = DEFAULT_MAX_SEQUENCES, seed: int = 0,
            z: float = DEFAULT_Z, min_interactions: int = DEFAULT_MIN_INTERACTIONS) -> Prepared:
    """Sample sequences, split 8:1:1 and audit stereotypes on the training part.

    Items never seen in training count as neutral downstream.
    """
    seqs = build_sequences(dataset, max_sequences, seed)
    split = leave_one_out_split(seqs, seed)
    audit = audit_items(training_view(dataset, split.train), z, min_interactions)
    flags = audit.flag_index.lenient()
    return Prepared(dataset, split, audit, flags, TokenVocabulary.from_dataset(dataset), seqs.n_skipped)


def build_scorer(prep: Prepared, d: int = 16, hidden: int = 16, seed: int = 0, beta: float = 1.0):
    """Frozen scorer calibrated on the implicit prompts of the training part."""
    from .backbone import make_frozen_scorer, tokenize_rec_prompt

    calib = [tokenize_rec_prompt(s, prep.dataset, "implicit", prep.vocab) for s in prep.split.train]
    return make_frozen_scorer(prep.vocab, d, hidden, seed, beta, calib)


@dataclass(frozen=True)
class Encoded:
    """One split part in one prompt setting, ready for batched passes."""

    batch: "TrainBatch"
    user_ids: tuple[str, ...]
    item_ids: tuple[str, ...]
    profile_keys: tuple[str, ...]
    profiles: dict

    def __len__(self):
        return len(self.user_ids)


def encode(prep: Prepared, scorer, sequences, setting: str, template_set=None, tag: str = "") -> Encoded:
    """Prompt statistics, labels, history proportions and target flags."""
    import numpy as np

    from .backbone import tokenize_rec_prompt
    from .dataset import label_from_rating
    from .mos import PromptBatch, StereotypeTemplateSet
    from .training import TrainBatch

    ds = prep.dataset
    groups = ds.group_set
    if template_set is None:
        template_set = StereotypeTemplateSet.default(prep.vocab)
    prompts = [tokenize_rec_prompt(s, ds, setting, prep.vocab) for s in sequences]
    keys = tuple(f"{tag}{i}" for i in range(len(sequences)))
    profiles = {k: prep.profile(s) for k, s in zip(keys, sequences)}
    h = np.array([[profiles[k].h[g] for g in groups] for k in keys], dtype=float).reshape(-1, len(groups))
    flags = np.array([prep.flags.vector(s.target.item_id) for s in sequences], dtype=float).reshape(-1, len(groups))
    labels = np.array([label_from_rating(s.target.rating, ds.rating_median) for s in sequences], dtype=int)
    batch = TrainBatch(PromptBatch.build(scorer, prompts, template_set), labels, h, flags)
    return Encoded(batch, tuple(s.user_id for s in sequences), tuple(s.target.item_id for s in sequences),
                   keys, profiles)
