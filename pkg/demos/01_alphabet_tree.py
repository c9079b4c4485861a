"""
Recovering a known tree from symbol draws
=========================================

A four-path tree over a 25-symbol alphabet generates the corpus. Each image
picks one path and draws its symbols level by level. The sampler starts from
3 paths of 3 layers and has to find the right number of paths and depths.

    python demos/01_alphabet_tree.py --sweeps 200
"""
import argparse

import numpy as np

from nestdl import core, engine, synthetic

ap = argparse.ArgumentParser()
ap.add_argument("--sweeps", type=int, default=200)
ap.add_argument("--images", type=int, default=100)
ap.add_argument("--seed", type=int, default=0)
args = ap.parse_args()

truth = synthetic.default_truth()
print("true paths:", truth.paths)

corpus, info = synthetic.generate_alphabet_corpus(truth, n_images=args.images, seed=args.seed)
print(f"{corpus.M} images, {int(corpus.N.sum())} binary units")

# 3 x 3 start; K equals the alphabet size for count units
cfg = engine.RunConfig(total_sweeps=args.sweeps, burn_in=args.sweeps // 2, seed=args.seed,
                       branching=(3, 1, 1), hyper=core.Hyperparams(K=25))


def progress(sweep, lj, state):
    if sweep % 25 == 0:
        print(f"  sweep {sweep:4d}  log_joint {lj:12.1f}  nodes {len(state.tree) - 1}")


trace, best = engine.run(corpus, cfg, progress=progress)

# the busiest paths first; low-traffic tails are usually transient
load = {}
for a in best.assign:
    load[tuple(a.path)] = load.get(tuple(a.path), 0) + 1
print(f"\nML sample at sweep {trace.ml_sweep}: {len(best.tree) - 1} nodes")
for path, n in sorted(load.items(), key=lambda kv: -kv[1])[:8]:
    print(f"  {n:3d} images on path of depth {len(path)}")

match, err = synthetic.score_tree_recovery(best, truth)
print(f"\ntopology match: {match}, largest usage error on matched nodes: {err:.3f}")

pi_hat = synthetic.posterior_mean_usage(best)
np.set_printoptions(precision=2, suppress=True)
for path in truth.paths[:1]:
    print("\nfirst true path, node by node (truth, then nearest recovered):")
    for n in path:
        near = min(pi_hat, key=lambda h: np.abs(pi_hat[h] - truth.probs[n]).max())
        print(" ", truth.probs[n][:10], "\n ", pi_hat[near][:10])
