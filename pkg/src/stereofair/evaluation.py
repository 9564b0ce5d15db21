"""AUC, precision/recall and SF of a (possibly MoS-prompted) frozen scorer."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .fairness import (DEFAULT_DECISION_THRESHOLD, FairnessReport, RecommendationSet, pairing,
                       stereotype_fairness)
from .mos import baseline_scores, batch_forward

SETTINGS = ("implicit", "explicit", "counterfactual")


class EvaluationError(ValueError):
    pass


def auc(scores, labels) -> float:
    """Mann-Whitney AUC; ties between a positive and a negative count one half."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels).astype(bool)
    if s.shape != y.shape:
        raise EvaluationError("scores and labels differ in length")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise EvaluationError("AUC needs both classes")
    ranks = rankdata(s)
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


@dataclass(frozen=True)
class PrecisionRecall:
    precision: float | None
    recall: float | None
    tp: int
    fp: int
    fn: int

    @property
    def degenerate(self) -> bool:
        return self.precision is None or self.recall is None

    def __iter__(self):
        return iter((self.precision, self.recall))


def precision_recall(decisions, labels) -> PrecisionRecall:
    """Precision and recall; a zero denominator gives None for that value."""
    d = np.asarray(decisions).astype(bool)
    y = np.asarray(labels).astype(bool)
    tp = int(np.sum(d & y))
    fp = int(np.sum(d & ~y))
    fn = int(np.sum(~d & y))
    precision = tp / (tp + fp) if tp + fp else None
    recall = tp / (tp + fn) if tp + fn else None
    return PrecisionRecall(precision, recall, tp, fp, fn)


@dataclass(frozen=True)
class SettingMetrics:
    auc: float | None
    precision: float | None
    recall: float | None
    sf: float | None
    fairness: FairnessReport
    n_positive: int
    flags: tuple[str, ...] = ()

    def to_json(self) -> dict:
        return {"auc": self.auc, "precision": self.precision, "recall": self.recall,
                "sf": self.sf, "n_positive_decisions": self.n_positive,
                "flags": list(self.flags), "fairness": self.fairness.to_json()}


@dataclass(frozen=True)
class MetricsReport:
    """Headline ``auc``/``precision``/``recall`` come from the first setting."""

    settings: dict[str, SettingMetrics]
    n_test: int
    decision_threshold: float = DEFAULT_DECISION_THRESHOLD
    label: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def headline(self) -> SettingMetrics:
        return next(iter(self.settings.values()))

    @property
    def auc(self):
        return self.headline.auc

    @property
    def precision(self):
        return self.headline.precision

    @property
    def recall(self):
        return self.headline.recall

    @property
    def sf(self) -> dict[str, float | None]:
        return {k: v.sf for k, v in self.settings.items()}

    def to_json(self) -> dict:
        out = {"label": self.label, "n_test": self.n_test,
               "decision_threshold": self.decision_threshold,
               "headline_setting": next(iter(self.settings), None),
               "auc": self.auc, "precision": self.precision, "recall": self.recall,
               "sf": self.sf,
               "settings": {k: v.to_json() for k, v in self.settings.items()}}
        out.update(self.extra)
        return out

    def dumps(self) -> str:
        return json.dumps(_clean(self.to_json()), indent=1, sort_keys=True) + "\n"

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dumps(), encoding="utf-8")
        return path


def _clean(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    return obj


def predict(params, scorer, encoded) -> np.ndarray:
    """Like-probabilities of an encoded split; ``params=None`` means no soft prompt."""
    if params is None:
        return baseline_scores(scorer, encoded.batch.prompts)
    return batch_forward(params, scorer, encoded.batch.prompts).y


def setting_metrics(scores, encoded, flags, group_set, threshold=DEFAULT_DECISION_THRESHOLD) -> SettingMetrics:
    labels = encoded.batch.labels
    notes = []
    try:
        a = auc(scores, labels)
    except EvaluationError:
        a = None
        notes.append("auc_single_class")
    rs = RecommendationSet.from_scores(encoded.user_ids, encoded.item_ids, np.clip(scores, 0.0, 1.0),
                                       threshold, profile_keys=encoded.profile_keys)
    pr = precision_recall([e.decision for e in rs.entries], labels)
    if pr.precision is None:
        notes.append("no_positive_decisions")
    if pr.recall is None:
        notes.append("no_positive_labels")
    rep = stereotype_fairness(rs, encoded.profiles, flags, group_set, strict=False)
    if rep.degenerate:
        notes.append("sf_degenerate")
    sf = None if rep.degenerate else rep.sf
    return SettingMetrics(a, pr.precision, pr.recall, sf, rep, pr.tp + pr.fp, tuple(notes))


def evaluate(params, scorer, prep, sequences=None, settings=SETTINGS,
             threshold=DEFAULT_DECISION_THRESHOLD, label="") -> MetricsReport:
    """Metrics of ``params`` (or the bare scorer) on the test part per setting.

    Flags and history profiles come from the training-only audit in ``prep``.
    """
    from .pipeline import encode

    sequences = prep.split.test if sequences is None else sequences
    if not sequences:
        raise EvaluationError("empty test split")
    settings = tuple(settings)
    if not settings:
        raise EvaluationError("no evaluation setting requested")
    if "counterfactual" in settings and len(prep.dataset.group_set) < 2:
        raise EvaluationError("the counterfactual setting needs at least two groups")
    out = {}
    for setting in settings:
        if setting not in SETTINGS:
            raise EvaluationError(f"unknown setting {setting!r}")
        enc = encode(prep, scorer, sequences, setting)
        out[setting] = setting_metrics(predict(params, scorer, enc), enc, prep.flags,
                                       prep.dataset.group_set, threshold)
    return MetricsReport(out, len(sequences), threshold, label)


def paired_group_eval(params, scorer, prep, sequences=None, settings=("explicit",),
                      threshold=DEFAULT_DECISION_THRESHOLD) -> dict[str, MetricsReport | None]:
    """Metrics on consistent and inconsistent pairs separately.

    A pair is consistent when the target item is flagged into the user's own
    group and inconsistent when it is flagged into another group; unflagged
    targets sit in neither. An empty partition maps to None.
    """
    sequences = prep.split.test if sequences is None else sequences
    user_group = {u.user_id: u.group for u in prep.dataset.users}
    parts = {"consistent": [], "inconsistent": []}
    for s in sequences:
        kind = pairing(user_group[s.user_id], prep.flags.flagged_group(s.target.item_id))
        if kind is not None:
            parts[kind].append(s)
    return {kind: (evaluate(params, scorer, prep, seqs, settings, threshold, label=kind) if seqs else None)
            for kind, seqs in parts.items()}


def comparison(reports: dict[str, dict]) -> dict:
    """Runs keyed by label plus per-metric deltas against the first run."""
    labels = list(reports)
    if not labels:
        raise EvaluationError("nothing to compare")
    base = reports[labels[0]]

    def delta(a, b):
        return None if a is None or b is None else a - b

    deltas = {}
    for lab in labels:
        r = reports[lab]
        deltas[lab] = {
            "auc": delta(r.get("auc"), base.get("auc")),
            "sf": {k: delta(v, base.get("sf", {}).get(k)) for k, v in r.get("sf", {}).items()},
        }
    return {"baseline": labels[0], "runs": reports, "deltas": deltas}


__all__ = [
    "EvaluationError", "MetricsReport", "PrecisionRecall", "SETTINGS", "SettingMetrics", "auc",
    "comparison", "evaluate", "paired_group_eval", "precision_recall", "predict", "setting_metrics",
]
