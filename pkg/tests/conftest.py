import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from stereofair.dataset import (Interaction, InteractionDataset, ItemRecord, SyntheticConfig,
                                UserRecord, generate_synthetic)
from stereofair.pipeline import build_scorer, encode, prepare

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def make_dataset(histories, groups, group_set=("A", "B"), n_items=None, median=3):
    """Dataset from ``{user: [(item, rating), ...]}`` with timestamps in list order."""
    items = sorted({v for h in histories.values() for v, _ in h} | set(n_items or ()))
    users = tuple(UserRecord(u, groups[u], (0,)) for u in histories)
    inter = []
    for u, h in histories.items():
        for t, (v, r) in enumerate(h):
            inter.append(Interaction(u, v, r, t))
    return InteractionDataset(users, tuple(ItemRecord(v, (i,)) for i, v in enumerate(items)),
                              tuple(inter), tuple(group_set), median)


@pytest.fixture(scope="session")
def small_world():
    """A small planted-bias pipeline shared by the model-level tests."""
    cfg = SyntheticConfig(n_users=120, n_items=40, interactions_per_user=16)
    ds = generate_synthetic(cfg, 3)
    prep = prepare(ds, max_sequences=800, seed=3, z=1.0)
    scorer = build_scorer(prep, seed=3)
    train = encode(prep, scorer, prep.split.train, "explicit")
    return prep, scorer, train


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
