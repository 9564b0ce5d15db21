"""Stereotype-aware fairness (SF) over recommendation sets.

For every group G the ratio ``sum of h_u[G] over recommended pairs`` /
``number of recommended items flagged G`` is 1 under calibration. SF is one
minus the mean ratio: positive values mean a group's items are recommended
more often than its share of the users' histories, negative values mean less.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .stereotype import FlagIndex, UserStereotypeProfile

DEFAULT_DECISION_THRESHOLD = 0.5
DEFAULT_EPSILON = 1e-8


class FairnessError(ValueError):
    pass


@dataclass(frozen=True)
class RecommendationEntry:
    user_id: str
    item_id: str
    score: float
    decision: int
    # Key into the profile mapping; defaults to user_id. Evaluation keys
    # profiles per sequence because one user may own several histories.
    profile_key: str | None = None

    @property
    def key(self) -> str:
        return self.user_id if self.profile_key is None else self.profile_key


@dataclass(frozen=True)
class RecommendationSet:
    entries: tuple[RecommendationEntry, ...]
    decision_threshold: float = DEFAULT_DECISION_THRESHOLD

    def __post_init__(self):
        for e in self.entries:
            if not 0.0 <= e.score <= 1.0:
                raise FairnessError(f"score {e.score} outside [0, 1]")
            if e.decision != int(e.score >= self.decision_threshold):
                raise FairnessError("decision disagrees with score and decision_threshold")

    @classmethod
    def from_scores(cls, user_ids, item_ids, scores, threshold=DEFAULT_DECISION_THRESHOLD,
                    profile_keys=None) -> "RecommendationSet":
        keys = profile_keys if profile_keys is not None else [None] * len(user_ids)
        entries = tuple(
            RecommendationEntry(u, v, float(s), int(s >= threshold), k)
            for u, v, s, k in zip(user_ids, item_ids, scores, keys)
        )
        return cls(entries, threshold)

    def positives(self) -> list[RecommendationEntry]:
        return [e for e in self.entries if e.decision == 1]

    def __len__(self):
        return len(self.entries)

    def to_json(self) -> dict:
        return {
            "decision_threshold": self.decision_threshold,
            "entries": [
                {"user_id": e.user_id, "item_id": e.item_id, "score": e.score,
                 "decision": e.decision, "profile_key": e.key}
                for e in self.entries
            ],
        }


@dataclass(frozen=True)
class GroupTerm:
    h_sum: float
    flag_count: int
    ratio: float | None
    coverage_ok: bool

    def to_json(self) -> dict:
        return {"h_sum": self.h_sum, "flag_count": self.flag_count,
                "ratio": self.ratio, "coverage_ok": self.coverage_ok}


@dataclass(frozen=True)
class FairnessReport:
    sf: float
    per_group: dict[str, GroupTerm]
    n_entries: int
    excluded_groups: list[str] = field(default_factory=list)
    decision_threshold: float = DEFAULT_DECISION_THRESHOLD
    degenerate: bool = False
    reason: str = ""

    @property
    def reading(self) -> str:
        if self.degenerate:
            return "degenerate"
        if self.sf > 0:
            return "amplification"
        if self.sf < 0:
            return "under-recommendation"
        return "calibrated"

    def to_json(self) -> dict:
        out = {
            "sf": None if math.isnan(self.sf) else self.sf,
            "per_group": {g: t.to_json() for g, t in self.per_group.items()},
            "excluded_groups": list(self.excluded_groups),
            "n_entries": self.n_entries,
            "decision_threshold": self.decision_threshold,
        }
        if self.degenerate:
            out["degenerate"] = True
            out["reason"] = self.reason
        return out


def _as_flag_index(item_flags, group_set) -> FlagIndex:
    if isinstance(item_flags, FlagIndex):
        return item_flags
    return FlagIndex(group_set, item_flags)


def _entries(recommendations) -> list[RecommendationEntry]:
    if isinstance(recommendations, RecommendationSet):
        return recommendations.positives()
    return [e for e in recommendations if e.decision == 1]


def stereotype_fairness(recommendations, user_profiles: Mapping[str, UserStereotypeProfile],
                        item_flags, group_set, strict: bool = True) -> FairnessReport:
    """Hard SF over the positively decided pairs.

    Groups without any flagged recommended item are left out of the average
    and listed in ``excluded_groups``. With ``strict=False`` an empty set or a
    set where every group is excluded returns a report marked degenerate
    (``sf`` is NaN) instead of raising.
    """
    group_set = tuple(group_set)
    flags = _as_flag_index(item_flags, group_set)
    threshold = getattr(recommendations, "decision_threshold", DEFAULT_DECISION_THRESHOLD)
    entries = _entries(recommendations)

    def degenerate(reason, per_group=None):
        if strict:
            raise FairnessError(reason)
        return FairnessReport(float("nan"), per_group or {}, len(entries), list(group_set),
                              threshold, degenerate=True, reason=reason)

    if not entries:
        return degenerate("empty recommendation set")

    h_sum = np.zeros(len(group_set))
    counts = np.zeros(len(group_set), dtype=int)
    for e in entries:
        prof = user_profiles[e.key]
        h_sum += [prof.h[g] for g in group_set]
        counts += flags.vector(e.item_id).astype(int)

    per_group = {}
    excluded = []
    ratios = []
    for k, g in enumerate(group_set):
        if counts[k] == 0:
            excluded.append(g)
            per_group[g] = GroupTerm(float(h_sum[k]), 0, None, False)
        else:
            r = float(h_sum[k]) / int(counts[k])
            ratios.append(r)
            per_group[g] = GroupTerm(float(h_sum[k]), int(counts[k]), r, True)
    if not ratios:
        return degenerate("no group has a flagged recommended item", per_group)
    sf = 1.0 - sum(ratios) / len(ratios)
    return FairnessReport(sf, per_group, len(entries), excluded, threshold)


def soft_sf_arrays(p, h, flags, epsilon: float = DEFAULT_EPSILON):
    """Probability-weighted SF and its gradient with respect to ``p``.

    ``p`` has shape (n,), ``h`` and ``flags`` shape (n, groups). Each pair
    enters with weight ``p_i`` instead of a 0/1 decision. Groups with no
    flagged item in the batch are skipped, as in the hard metric. Returns
    ``(sf, dsf_dp)``; when every group is skipped the result is ``(0, 0)``.
    """
    p = np.asarray(p, dtype=float)
    h = np.asarray(h, dtype=float)
    flags = np.asarray(flags, dtype=float)
    active = flags.sum(axis=0) > 0
    if not active.any():
        return 0.0, np.zeros_like(p)
    h = h[:, active]
    f = flags[:, active]
    num = p @ h
    den = p @ f + epsilon
    ratio = num / den
    n_groups = ratio.size
    sf = 1.0 - ratio.sum() / n_groups
    grad = -(h / den - f * (num / den**2)).sum(axis=1) / n_groups
    return float(sf), grad


def hard_sf_arrays(decisions, h, flags) -> float:
    """Hard SF from arrays; NaN when no group has a flagged positive."""
    d = np.asarray(decisions, dtype=bool)
    h = np.asarray(h, dtype=float)[d]
    f = np.asarray(flags, dtype=float)[d]
    counts = f.sum(axis=0)
    active = counts > 0
    if not active.any():
        return float("nan")
    return float(1.0 - np.mean(h.sum(axis=0)[active] / counts[active]))


def soft_stereotype_fairness(batch: Iterable[Mapping], group_set, epsilon: float = DEFAULT_EPSILON) -> float:
    """Differentiable SF. ``batch`` items carry ``h_u``, ``item_flags_v`` and ``like_prob``."""
    group_set = tuple(group_set)
    rows = list(batch)
    if not rows:
        return 0.0
    p = np.array([r["like_prob"] for r in rows], dtype=float)
    h = np.array([[r["h_u"][g] for g in group_set] for r in rows], dtype=float)
    f = np.array([[r["item_flags_v"].get(g, 0) for g in group_set] for r in rows], dtype=float)
    return soft_sf_arrays(p, h, f, epsilon)[0]


def pairing(user_group: str, item_group: str | None) -> str | None:
    """``consistent`` / ``inconsistent`` / None for an unflagged item."""
    if item_group is None:
        return None
    return "consistent" if item_group == user_group else "inconsistent"


def fairness_by_pairing(recommendations, user_profiles, item_flags, group_set,
                        user_groups: Mapping[str, str]) -> dict[str, FairnessReport]:
    """SF separately for consistent pairs (the item is flagged into the user's
    own group) and inconsistent pairs (flagged into another group).

    Pairs with an unflagged target belong to neither partition. Empty or
    flag-free partitions come back marked degenerate.
    """
    group_set = tuple(group_set)
    flags = _as_flag_index(item_flags, group_set)
    entries = recommendations.entries if isinstance(recommendations, RecommendationSet) else tuple(recommendations)
    threshold = getattr(recommendations, "decision_threshold", DEFAULT_DECISION_THRESHOLD)
    parts = {"consistent": [], "inconsistent": []}
    for e in entries:
        kind = pairing(user_groups[e.user_id], flags.flagged_group(e.item_id))
        if kind is not None:
            parts[kind].append(e)
    return {
        name: stereotype_fairness(RecommendationSet(tuple(es), threshold), user_profiles,
                                  item_flags, group_set, strict=False)
        for name, es in parts.items()
    }


def write_report(report: FairnessReport, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report.to_json(), indent=1) + "\n", encoding="utf-8")
    return path
