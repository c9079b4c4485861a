"""Tree-structured sparse dictionary learning for image patches.

Each image follows a path through a tree of topics; each patch sits at one
level of that path and picks its active dictionary atoms with that node's
usage probabilities.  The tree, paths, levels, codes and dictionary are all
drawn by Gibbs sampling.
"""
from .core import Assignment, Corpus, Hyperparams, ModelState, TopicTree, validate
from .engine import RunConfig, gibbs_sweep, infer_heldout, initialize_state, log_joint, run

__all__ = [
    "Assignment", "Corpus", "Hyperparams", "ModelState", "RunConfig", "TopicTree",
    "gibbs_sweep", "infer_heldout", "initialize_state", "log_joint", "run", "validate",
]
