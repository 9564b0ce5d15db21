"""One prompt through the mixture of stereotypes, stage by stage.

    python3 demos/routing_walkthrough.py
"""

import numpy as np

from stereofair.backbone import score, tokenize_rec_prompt
from stereofair.dataset import SyntheticConfig, generate_synthetic
from stereofair.mos import StereotypeTemplateSet, init_mos_params, mos_forward
from stereofair.pipeline import build_scorer, prepare

np.set_printoptions(precision=3, suppress=True)

world = generate_synthetic(SyntheticConfig(n_users=200, n_items=60, interactions_per_user=20), seed=1)
prep = prepare(world, max_sequences=1500, seed=1, z=1.0)
scorer = build_scorer(prep, seed=1)
templates = StereotypeTemplateSet.default(prep.vocab)
params = init_mos_params(scorer.d, N=4, L=5, K=2, seed=1, scale=0.8)

seq = prep.split.test[0]
prompt = tokenize_rec_prompt(seq, world, "explicit", prep.vocab)
trace = mos_forward(params, scorer, prompt.tokens, templates)

print("router probabilities, one row per stereotype variant:")
print(trace.raw)
print("after keeping the top", params.K, "experts per row:")
print(trace.masked)
print("expert weights w:", trace.w)
print("soft prompt shape:", trace.e.shape)
print(f"like probability with the soft prompt {trace.like_prob:.3f}, "
      f"bare backbone {score(scorer, np.zeros((0, scorer.d)), prompt.tokens):.3f}")
