import dataclasses

import numpy as np
import pytest
from hypothesis import given, strategies as st

from stereofair.backbone import (BackboneError, FrozenScorer, RecPrompt, TokenVocabulary, load_scorer,
                                 make_frozen_scorer, save_scorer, score, score_with_input_grad,
                                 tokenize_rec_prompt, zero_scorer)
from stereofair.dataset import SyntheticConfig, UserRecord, build_sequences, generate_synthetic
from stereofair.mos import PromptBatch, StereotypeTemplateSet, baseline_scores


@pytest.fixture(scope="module")
def world():
    ds = generate_synthetic(SyntheticConfig(n_users=40, n_items=30, interactions_per_user=14), 1)
    vocab = TokenVocabulary.from_dataset(ds)
    seqs = build_sequences(ds, 60, seed=1)
    return ds, vocab, list(seqs)


def test_vocabulary_layout(world):
    ds, vocab, _ = world
    reserved = [vocab.pad, vocab.like, vocab.dislike, vocab.target, *vocab.group_tokens, *vocab.template_tokens]
    assert reserved == list(range(vocab.n_content, vocab.n_reserved_end))
    assert vocab.target_slot(0) == vocab.n_reserved_end
    assert vocab.size == vocab.n_reserved_end + vocab.n_content
    with pytest.raises(BackboneError):
        vocab.target_slot(vocab.n_content)


def test_settings_shape_the_prefix(world):
    ds, vocab, seqs = world
    for s in seqs:
        group = ds.user(s.user_id).group
        other = [g for g in ds.group_set if g != group][0]
        imp = tokenize_rec_prompt(s, ds, "implicit", vocab)
        exp = tokenize_rec_prompt(s, ds, "explicit", vocab)
        cf = tokenize_rec_prompt(s, ds, "counterfactual", vocab)
        assert not set(imp.tokens) & set(vocab.group_tokens)
        assert exp.tokens[0] == vocab.group_token(group)
        assert cf.tokens[0] == vocab.group_token(other)
        assert len(cf) == len(exp) == len(imp) + 1
        assert cf.tokens[1:] == exp.tokens[1:] == imp.tokens
        assert imp.tokens.count(vocab.target) == 1


def test_prompt_blocks_follow_labels(world):
    ds, vocab, seqs = world
    s = seqs[0]
    toks = tokenize_rec_prompt(s, ds, "implicit", vocab).tokens
    like_at, dislike_at, target_at = toks.index(vocab.like), toks.index(vocab.dislike), toks.index(vocab.target)
    liked = [t for x in s.history if x.rating >= ds.rating_median for t in ds.item(x.item_id).title_tokens]
    disliked = [t for x in s.history if x.rating < ds.rating_median for t in ds.item(x.item_id).title_tokens]
    assert list(toks[like_at + 1:dislike_at]) == liked
    assert list(toks[dislike_at + 1:target_at]) == disliked
    assert list(toks[target_at + 1:]) == [vocab.target_slot(t) for t in ds.item(s.target.item_id).title_tokens]


def test_implicit_ignores_the_group_field(world):
    ds, vocab, seqs = world
    flipped_users = tuple(dataclasses.replace(u, group=ds.group_set[1] if u.group == ds.group_set[0]
                                              else ds.group_set[0]) for u in ds.users)
    flipped = dataclasses.replace(ds, users=flipped_users)
    for s in seqs:
        assert tokenize_rec_prompt(s, ds, "implicit", vocab) == tokenize_rec_prompt(s, flipped, "implicit", vocab)


def test_truncation_drops_oldest_history(world):
    ds, vocab, seqs = world
    s = seqs[0]
    full = tokenize_rec_prompt(s, ds, "implicit", vocab)
    short = tokenize_rec_prompt(s, ds, "implicit", vocab, max_len=len(full) - 1)
    assert len(short) < len(full)
    # the oldest item's tokens lead its block, so dropping it removes them from the front
    oldest = s.history[0]
    n_drop = len(ds.item(oldest.item_id).title_tokens)
    marker = vocab.like if oldest.rating >= ds.rating_median else vocab.dislike
    at = full.tokens.index(marker) + 1
    assert short.tokens == full.tokens[:at] + full.tokens[at + n_drop:]
    with pytest.raises(BackboneError):
        tokenize_rec_prompt(s, ds, "implicit", vocab, max_len=2)
    with pytest.raises(BackboneError):
        tokenize_rec_prompt(s, ds, "sideways", vocab)


def test_unknown_item_rejected(world):
    ds, vocab, seqs = world
    bad = dataclasses.replace(seqs[0], target=dataclasses.replace(seqs[0].target, item_id="ghost"))
    with pytest.raises(BackboneError):
        tokenize_rec_prompt(bad, ds, "implicit", vocab)


# -- scorer ---------------------------------------------------------------------

def test_zero_scorer_is_flat():
    sc = zero_scorer(30, 4, 3)
    e = np.random.default_rng(0).normal(size=(5, 4))
    assert score(sc, e, [1, 2, 3]) == 0.5
    y, g = score_with_input_grad(sc, e, [1, 2, 3])
    assert y == 0.5 and g.shape == (5, 4) and not g.any()


def test_same_seed_same_digest(world):
    _, vocab, _ = world
    a = make_frozen_scorer(vocab, d=8, hidden=8, seed=4)
    b = make_frozen_scorer(vocab, d=8, hidden=8, seed=4)
    c = make_frozen_scorer(vocab, d=8, hidden=8, seed=5)
    assert a.weights_digest == b.weights_digest != c.weights_digest


def test_weights_are_read_only(world):
    sc = make_frozen_scorer(world[1], d=8, hidden=8, seed=0)
    with pytest.raises(ValueError):
        sc.embed[0, 0] = 1.0
    assert sc.compute_digest() == sc.weights_digest


def test_beta_zero_makes_attribute_tokens_interchangeable(world):
    ds, vocab, seqs = world
    calib = [tokenize_rec_prompt(s, ds, "implicit", vocab) for s in seqs]
    sc = make_frozen_scorer(vocab, d=8, hidden=8, seed=2, planted_bias_strength=0.0, calibration=calib)
    rng = np.random.default_rng(0)
    for k in range(100):
        s = seqs[k % len(seqs)]
        exp = tokenize_rec_prompt(s, ds, "explicit", vocab)
        cf = tokenize_rec_prompt(s, ds, "counterfactual", vocab)
        e = rng.normal(size=(3, 8))
        assert score(sc, e, exp) == score(sc, e, cf)


def test_planted_bias_favours_consistent_pairs(small_world):
    prep, scorer, _ = small_world
    ds = prep.dataset
    seqs = [*prep.split.train, *prep.split.test]
    prompts = [tokenize_rec_prompt(s, ds, "explicit", prep.vocab) for s in seqs]
    y = baseline_scores(scorer, PromptBatch.build(scorer, prompts, StereotypeTemplateSet.default(prep.vocab)))
    pool = np.array([ds.item(s.target.item_id).pool for s in seqs], dtype=object)
    group = np.array([ds.user(s.user_id).group for s in seqs], dtype=object)
    consistent = pool == group
    inconsistent = (pool != group) & (pool != None)  # noqa: E711
    assert consistent.sum() > 20 and inconsistent.sum() > 20
    assert y[consistent].mean() - y[inconsistent].mean() > 0


def test_soft_prompt_only_changes_the_denominator():
    rng = np.random.default_rng(3)
    embed = rng.normal(size=(20, 4))
    sc = FrozenScorer(embed, rng.normal(size=(5, 4)), rng.normal(size=5), rng.normal(size=5), 0.3)
    toks = [2, 7, 7, 11]
    # direct evaluation with float32-rounded weights
    def direct(x):
        return 1 / (1 + np.exp(-(np.tanh(sc.w1 @ x + sc.b1) @ sc.w2 + sc.b2[0])))
    mean_tok = sc.embed[toks].mean(axis=0)
    assert score(sc, None, toks) == pytest.approx(direct(mean_tok), abs=1e-13)
    assert score(sc, np.zeros((3, 4)), toks) == pytest.approx(direct(mean_tok * 4 / 7), abs=1e-13)


@given(st.integers(0, 2**32 - 1))
def test_scores_are_permutation_invariant_and_bounded(seed):
    rng = np.random.default_rng(seed)
    sc = FrozenScorer(rng.normal(size=(15, 3)), rng.normal(size=(4, 3)), rng.normal(size=4),
                      rng.normal(size=4), rng.normal())
    toks = list(rng.integers(0, 15, size=int(rng.integers(1, 12))))
    e = rng.normal(size=(int(rng.integers(0, 4)), 3))
    y = score(sc, e, toks)
    assert 0 < y < 1
    assert score(sc, e, list(rng.permutation(toks))) == pytest.approx(y, abs=1e-14)


@pytest.mark.parametrize("seed", range(6))
def test_input_gradient_matches_central_differences(world, seed):
    rng = np.random.default_rng(seed)
    sc = make_frozen_scorer(world[1], d=6, hidden=7, seed=seed)
    toks = list(rng.integers(0, sc.vocab_size, size=9))
    e = rng.normal(size=(4, 6))
    _, g = score_with_input_grad(sc, e, toks)
    assert np.allclose(g, g[0])  # every row shares one sensitivity
    step = 1e-5
    fd = np.zeros_like(e)
    for idx in np.ndindex(*e.shape):
        up, dn = e.copy(), e.copy()
        up[idx] += step
        dn[idx] -= step
        fd[idx] = (score(sc, up, toks) - score(sc, dn, toks)) / (2 * step)
    rel = np.abs(fd - g).max() / max(np.abs(fd).max(), 1e-12)
    assert rel < 1e-5


def test_bad_prompt_shape(world):
    sc = make_frozen_scorer(world[1], d=6, hidden=4, seed=0)
    with pytest.raises(BackboneError):
        score(sc, np.zeros((2, 5)), [1])
    with pytest.raises(BackboneError):
        score(sc, None, [sc.vocab_size])
    assert isinstance(RecPrompt((1, 2)).tokens, tuple)


def test_scorer_file_round_trip(world, tmp_path):
    sc = make_frozen_scorer(world[1], d=6, hidden=5, seed=9, planted_bias_strength=0.5)
    path = save_scorer(sc, tmp_path / "scorer.bin")
    back = load_scorer(path)
    assert back.weights_digest == sc.weights_digest
    assert (back.seed, back.beta) == (9, 0.5)
    assert all(np.array_equal(a, b) for a, b in zip(back.arrays(), sc.arrays()))
    raw = bytearray(path.read_bytes())
    raw[40] ^= 0xFF
    (tmp_path / "bad.bin").write_bytes(bytes(raw))
    with pytest.raises(BackboneError):
        load_scorer(tmp_path / "bad.bin")
    (tmp_path / "junk.bin").write_bytes(b"nope")
    with pytest.raises(BackboneError):
        load_scorer(tmp_path / "junk.bin")


def test_user_records_keep_group(world):
    ds = world[0]
    assert all(isinstance(u, UserRecord) and u.group in ds.group_set for u in ds.users)
