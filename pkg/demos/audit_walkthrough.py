"""Audit a planted-bias dataset for item stereotypes and measure SF.

Generates a small world, flags the items one group dominates, builds each
user's history proportions and scores the baseline backbone in every prompt
setting. Nothing is trained here.

    python3 demos/audit_walkthrough.py
"""

from stereofair.dataset import SyntheticConfig, generate_synthetic
from stereofair.evaluation import evaluate, paired_group_eval
from stereofair.pipeline import build_scorer, prepare


def main():
    world = generate_synthetic(SyntheticConfig(n_users=400, n_items=80, interactions_per_user=24), seed=0)
    prep = prepare(world, max_sequences=4000, seed=0, z=1.0)

    spec = prep.audit.threshold
    print(f"degree threshold {spec.threshold:.3f} (mean {spec.mean:.3f}, std {spec.std:.3f}, z={spec.z})")
    flagged = [s for s in prep.audit.items if s.flagged_group]
    for group in world.group_set:
        mine = sorted((s for s in flagged if s.flagged_group == group), key=lambda s: -s.degree)
        top = ", ".join(f"{s.item_id}({s.degree:.2f})" for s in mine[:5])
        print(f"  {group}: {len(mine)} flagged items, strongest {top}")

    # history proportions of a few training sequences
    for seq in prep.split.train[:3]:
        prof = prep.profile(seq)
        shares = " ".join(f"{g}={v:.1f}" for g, v in prof.h.items())
        print(f"  sequence of {seq.user_id}: {shares}")

    scorer = build_scorer(prep, seed=0)
    report = evaluate(None, scorer, prep)
    for name, m in report.settings.items():
        print(f"{name:>15}: AUC {m.auc:.3f}  SF {m.sf:+.3f}  positives {m.n_positive}")

    parts = paired_group_eval(None, scorer, prep)
    for kind, rep in parts.items():
        if rep is not None:
            print(f"{kind:>15}: AUC {rep.auc:.3f}  SF {rep.sf['explicit']:+.3f}  n={rep.n_test}")


if __name__ == "__main__":
    main()
