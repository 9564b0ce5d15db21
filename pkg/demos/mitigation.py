"""Train the mixture with and without the fairness term and compare.

Mirrors the mitigation acceptance check on a single seed. Takes about ten
seconds.

    python3 demos/mitigation.py [seed]
"""

import sys

from stereofair.dataset import SyntheticConfig, generate_synthetic
from stereofair.evaluation import evaluate
from stereofair.pipeline import build_scorer, encode, prepare
from stereofair.training import TrainConfig, fit, new_params

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
world = generate_synthetic(SyntheticConfig(n_users=1000, n_items=200, affinity=0.85,
                                           interactions_per_user=30), seed)
prep = prepare(world, max_sequences=20000, seed=seed, z=1.0)
scorer = build_scorer(prep, seed=seed)
train = encode(prep, scorer, prep.split.train, "explicit")

base = evaluate(None, scorer, prep, settings=("explicit",))
print(f"backbone only   AUC {base.auc:.3f}  SF {base.sf['explicit']:+.3f}")

cfg = TrainConfig(epochs=4, batch_size=256, learning_rate=0.01, lambda_fair=5.0, seed=seed)
for name, c in (("L_rec only", cfg.rec_only()), ("L_total", cfg)):
    params, log = fit(c, train.batch, scorer, new_params(c, scorer.d))
    rep = evaluate(params, scorer, prep, settings=("explicit",))
    last = log[-1]
    print(f"{name:<15} AUC {rep.auc:.3f}  SF {rep.sf['explicit']:+.3f}  "
          f"(final train l_rec {last['l_rec']:.3f}, l_fair {last['l_fair']:.3f})")
