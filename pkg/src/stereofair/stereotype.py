"""Item-side stereotype degrees, z-score thresholds and user history proportions."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .dataset import InteractionDataset

DEFAULT_Z = 2.0
DEFAULT_MIN_INTERACTIONS = 5


class StereotypeError(ValueError):
    pass


@dataclass(frozen=True)
class ItemStereotype:
    item_id: str
    bias: dict[str, float]
    degree: float
    dominant_group: str | None
    flagged: dict[str, int] = field(default_factory=dict)

    @property
    def flagged_group(self) -> str | None:
        for g, f in self.flagged.items():
            if f:
                return g
        return None

    def to_json(self) -> dict:
        return {
            "item_id": self.item_id,
            "bias": self.bias,
            "degree": self.degree,
            "dominant_group": self.dominant_group,
            "flagged": self.flagged,
        }


@dataclass(frozen=True)
class ThresholdSpec:
    z: float
    mean: float
    std: float
    threshold: float
    min_interactions: int = 0
    population_size: int = 0

    def to_json(self) -> dict:
        return {
            "z": self.z,
            "mean": self.mean,
            "std": self.std,
            "threshold": self.threshold,
            "min_interactions": self.min_interactions,
            "population_size": self.population_size,
        }


@dataclass(frozen=True)
class UserStereotypeProfile:
    user_id: str
    h: dict[str, float]
    history_len: int
    degenerate: bool = False


def _incidence(dataset: InteractionDataset):
    """Boolean user x item matrix of "item is in the user's history"."""
    uidx = {u.user_id: i for i, u in enumerate(dataset.users)}
    iidx = {v.item_id: j for j, v in enumerate(dataset.items)}
    inc = np.zeros((len(uidx), len(iidx)), dtype=bool)
    counts = np.zeros(len(iidx), dtype=int)
    for x in dataset.interactions:
        inc[uidx[x.user_id], iidx[x.item_id]] = True
        counts[iidx[x.item_id]] += 1
    return inc, counts


def _group_hits(dataset: InteractionDataset, item_id, group) -> tuple[int, int]:
    if group not in dataset.group_set:
        raise StereotypeError(f"unknown group {group!r}")
    members = dataset.users_in(group)
    if not members:
        raise StereotypeError(f"group {group!r} has no users")
    hits = sum(1 for u in members if any(x.item_id == item_id for x in dataset.history(u.user_id)))
    return hits, len(members)


def group_interaction_fraction(dataset: InteractionDataset, item_id, group) -> float:
    """Share of ``group``'s users whose history contains ``item_id``."""
    hits, n = _group_hits(dataset, item_id, group)
    return hits / n


def _bias_from_fractions(fracs: Mapping[str, float], group_set) -> dict[str, float]:
    bias = {}
    for g in group_set:
        rest = 0.0
        for other in group_set:
            if other != g:
                rest += fracs[other]
        bias[g] = fracs[g] - rest
    return bias


def _dominant(bias: Mapping[str, float], group_set) -> tuple[float, str | None]:
    degree = max(bias[g] for g in group_set)
    winners = [g for g in group_set if bias[g] == degree]
    if len(winners) != 1 or degree <= 0:
        return degree, None
    return degree, winners[0]


def stereotype_from_fractions(item_id, fracs: Mapping[str, float], group_set) -> ItemStereotype:
    bias = _bias_from_fractions(fracs, group_set)
    degree, dom = _dominant(bias, group_set)
    return ItemStereotype(item_id, bias, degree, dom, {g: 0 for g in group_set})


def stereotype_from_counts(item_id, hits: Mapping[str, int], sizes: Mapping[str, int],
                           group_set) -> ItemStereotype:
    """Like :func:`stereotype_from_fractions`, but from integer counts.

    The biases are summed as exact rationals and rounded once, so 30/100 - 10/100
    comes out as the double nearest 0.2 rather than 0.3 - 0.1.
    """
    exact = {g: Fraction(int(hits[g]), int(sizes[g])) for g in group_set}
    total = sum(exact.values(), Fraction(0))
    bias = {g: float(2 * exact[g] - total) for g in group_set}
    degree, dom = _dominant(bias, group_set)
    return ItemStereotype(item_id, bias, degree, dom, {g: 0 for g in group_set})


def item_bias_degree(dataset: InteractionDataset, item_id) -> ItemStereotype:
    """Bias of one item toward each group; flags are left at 0.

    ``bias[G]`` is G's interaction fraction minus the summed fractions of every
    other group, and the degree is the largest bias. No group dominates when
    the maximum is shared or not positive.
    """
    counts = {g: _group_hits(dataset, item_id, g) for g in dataset.group_set}
    return stereotype_from_counts(item_id, {g: c[0] for g, c in counts.items()},
                                  {g: c[1] for g, c in counts.items()}, dataset.group_set)


def all_item_bias_degrees(dataset: InteractionDataset) -> tuple[list[ItemStereotype], np.ndarray]:
    """Vectorised :func:`item_bias_degree` over every item, plus per-item interaction counts."""
    inc, counts = _incidence(dataset)
    groups = np.array([u.group for u in dataset.users])
    hits, sizes = {}, {}
    for g in dataset.group_set:
        rows = groups == g
        sizes[g] = int(rows.sum())
        if sizes[g] == 0:
            raise StereotypeError(f"group {g!r} has no users")
        hits[g] = inc[rows].sum(axis=0)
    out = []
    for j, v in enumerate(dataset.items):
        out.append(stereotype_from_counts(
            v.item_id, {g: hits[g][j] for g in dataset.group_set}, sizes, dataset.group_set))
    return out, counts


def compute_threshold(degrees: Iterable[float], z: float = DEFAULT_Z, min_interactions: int = 0) -> ThresholdSpec:
    """``mean + z * std`` of the degree population (population std, ddof=0).

    ``min_interactions`` only records which support filter produced ``degrees``.
    """
    d = np.asarray(list(degrees), dtype=float)
    if d.size == 0:
        raise StereotypeError("empty degree population")
    mean = float(d.mean())
    std = float(d.std())
    return ThresholdSpec(float(z), mean, std, mean + z * std, int(min_interactions), int(d.size))


def apply_threshold(item: ItemStereotype, spec: ThresholdSpec) -> ItemStereotype:
    flagged = {g: 0 for g in item.bias}
    if item.dominant_group is not None and item.degree >= spec.threshold:
        flagged[item.dominant_group] = 1
    return replace(item, flagged=flagged)


class FlagIndex:
    """Item id -> 0/1 flag vector in ``group_set`` order.

    With ``strict=False`` unknown items count as neutral (all zeros).
    """

    def __init__(self, group_set, flags: Mapping[str, Mapping[str, int]], strict: bool = True):
        self.group_set = tuple(group_set)
        self.strict = strict
        self._flags = {
            item: np.array([int(f.get(g, 0)) for g in self.group_set], dtype=float)
            for item, f in flags.items()
        }
        self._zero = np.zeros(len(self.group_set))

    @classmethod
    def from_stereotypes(cls, items: Iterable[ItemStereotype], group_set, strict=True) -> "FlagIndex":
        return cls(group_set, {s.item_id: s.flagged for s in items}, strict=strict)

    def __contains__(self, item_id) -> bool:
        return item_id in self._flags

    def __len__(self):
        return len(self._flags)

    def vector(self, item_id) -> np.ndarray:
        try:
            return self._flags[item_id]
        except KeyError:
            if self.strict:
                raise StereotypeError(f"item {item_id!r} missing from flag index") from None
            return self._zero

    def flags(self, item_id) -> dict[str, int]:
        return {g: int(f) for g, f in zip(self.group_set, self.vector(item_id))}

    def flagged_group(self, item_id) -> str | None:
        vec = self.vector(item_id)
        hit = np.flatnonzero(vec)
        return self.group_set[hit[0]] if hit.size else None

    def lenient(self) -> "FlagIndex":
        out = FlagIndex(self.group_set, {}, strict=False)
        out._flags = self._flags
        return out


def user_history_proportion(history: Iterable[str], flags: FlagIndex, user_id: str = "") -> UserStereotypeProfile:
    """Fraction of history items flagged into each group."""
    items = list(history)
    if not items:
        return UserStereotypeProfile(user_id, {g: 0.0 for g in flags.group_set}, 0, degenerate=True)
    total = np.zeros(len(flags.group_set))
    for v in items:
        total += flags.vector(v)
    h = total / len(items)
    return UserStereotypeProfile(user_id, {g: float(x) for g, x in zip(flags.group_set, h)}, len(items))


@dataclass(frozen=True)
class StereotypeAudit:
    """Everything derived from one pass over a dataset's interactions."""

    items: list[ItemStereotype]
    threshold: ThresholdSpec
    group_set: tuple[str, ...]

    @property
    def flag_index(self) -> FlagIndex:
        return FlagIndex.from_stereotypes(self.items, self.group_set)

    def n_flagged(self) -> int:
        return sum(1 for s in self.items if s.flagged_group is not None)

    def by_item(self) -> dict[str, ItemStereotype]:
        return {s.item_id: s for s in self.items}


def audit_items(dataset: InteractionDataset, z: float = DEFAULT_Z,
                min_interactions: int = DEFAULT_MIN_INTERACTIONS) -> StereotypeAudit:
    """Degrees for every item, z-score threshold over supported items, flags."""
    raw, counts = all_item_bias_degrees(dataset)
    population = [s.degree for s, c in zip(raw, counts) if c >= min_interactions]
    if not population:
        raise StereotypeError(f"no item has at least {min_interactions} interactions")
    spec = compute_threshold(population, z, min_interactions)
    items = [apply_threshold(s, spec) for s in raw]
    items.sort(key=lambda s: s.item_id)
    return StereotypeAudit(items, spec, tuple(dataset.group_set))


def write_audit(audit: StereotypeAudit, out_dir) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {"stereotypes": out_dir / "stereotypes.json", "threshold": out_dir / "threshold.json"}
    paths["stereotypes"].write_text(
        json.dumps([s.to_json() for s in audit.items], indent=1) + "\n", encoding="utf-8")
    paths["threshold"].write_text(json.dumps(audit.threshold.to_json(), indent=1) + "\n", encoding="utf-8")
    return paths
