"""
Classifying held-out images by where they land in the tree
==========================================================

Two classes live under different children of the root. After training, new
images are placed in the frozen tree, and each is described by the fraction
of its units at every node. A chi-square nearest-neighbour vote labels them.

    python demos/03_heldout_knn.py --sweeps 30
"""
import argparse

import numpy as np

from nestdl import core, engine, evaluation, synthetic
from nestdl.samplers import make_rng
from nestdl.tree import node_distribution

ap = argparse.ArgumentParser()
ap.add_argument("--sweeps", type=int, default=30)
ap.add_argument("--seed", type=int, default=0)
args = ap.parse_args()

rng = make_rng(args.seed)
parent = {1: 0, 2: 0, 3: 1, 4: 1, 5: 2, 6: 2}
probs = {}
for n in parent:
    p = np.where(rng.random(25) < 0.3, 0.1, 0.0)
    p[rng.choice(25, 5, replace=False)] = 0.5
    probs[n] = p
class_paths = {"a": [[1, 3], [1, 4]], "b": [[2, 5], [2, 6]]}


def draw(label, n, seed):
    truth = synthetic.GroundTruthTree(parent, probs, class_paths[label])
    return synthetic.generate_alphabet_corpus(truth, n, 200, seed=seed)[0]


def stack(parts):
    return core.Corpus([u for c in parts for u in c.patches], trials=[t for c in parts for t in c.trials])


train = stack([draw("a", 100, 1), draw("b", 100, 2)])
test = stack([draw("a", 100, 3), draw("b", 100, 4)])
labels = ["a"] * 100 + ["b"] * 100

cfg = engine.RunConfig(total_sweeps=args.sweeps, burn_in=args.sweeps // 2, seed=args.seed,
                       hyper=core.Hyperparams(K=25))
_, best = engine.run(train, cfg)
train_feats = [node_distribution(best, m) for m in range(train.M)]
test_feats = engine.infer_heldout(best, test, sweeps=20, seed=args.seed)

pred = evaluation.knn_classify(train_feats, labels, test_feats, K=50)
print(evaluation.confusion(labels, pred).to_text(), end="")
