"""A small leave-one-domain-out run: train on A, B, C and score unseen D.

This uses a shrunken network and a few hundred steps so it finishes in about a
minute; the numbers are not meant to be good. `sadg run` drives the full grid.

    python demos/quick_lodo.py
"""

import dataclasses

from sadg import losses as L
from sadg.synth import generate_corpus
from sadg.trainer import TrainConfig, evaluate_target, run_training

corpus = generate_corpus(count_per_class=40, seed=0)
small = TrainConfig(channels=(8, 16), embed_dim=32, disc_hidden=16, steps=200, val_every=50, lr=1e-3)

for name, cfg in (("SADG", small),
                  ("CE only", dataclasses.replace(small, weights=L.LossWeights(0.0, 0.0, 0.0)))):
    result = run_training(corpus, "ABC", cfg)
    rep = evaluate_target(result, corpus["D"], run_id=name)
    print(f"{name:8} best val AUC {result.best_val_auc:6.2f} at step {result.best_step:3d} | "
          f"target D: AUC {rep.auc:6.2f}  HTER {rep.hter:6.2f}  scale KL {rep.extra['scale_kl']:.4f}")
