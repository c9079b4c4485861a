"""Shared domain types: hyperparameters, corpus, tree, assignments, sampler state."""
from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from .samplers import StickWeights, extend_stick


class InvariantError(RuntimeError):
    """Raised when a sampler step meets a state that breaks a model invariant."""


class StructuralError(ValueError):
    """A node chain that is not a path through the tree."""


@dataclass
class Hyperparams:
    a0: float = 1.0
    b0: float = 1.0
    c0: float = 1e-6
    d0: float = 1e-6
    e0: float = 1e-6
    f0: float = 1e-6
    alpha: float = 1.0
    gamma: float = 1.0
    eta: float = 1.0
    K: int = 400
    resample_concentrations: bool = False

    def __post_init__(self):
        problems = self.violations()
        if problems:
            raise ValueError("; ".join(problems))

    def violations(self) -> list[str]:
        out = []
        for f in fields(self):
            if f.name in ("K", "resample_concentrations"):
                continue
            v = getattr(self, f.name)
            if not (np.isfinite(v) and v > 0):
                out.append(f"hyperparameter {f.name}={v!r} must be a positive real")
        if int(self.K) != self.K or self.K < 1:
            out.append(f"K={self.K!r} must be a positive integer")
        return out

    def beta_prior(self) -> tuple[float, float]:
        """Shape pair of the per-atom usage prior Beta(a0/K, b0(K-1)/K)."""
        K = self.K
        a = self.a0 / K
        # K = 1 would zero the second shape; keep the prior proper
        b = self.b0 * (K - 1) / K if K > 1 else self.b0
        return a, b


def default_hyperparams() -> Hyperparams:
    return Hyperparams()


@dataclass
class Corpus:
    """M images of patch vectors, optionally with per-image word counts.

    A corpus with ``trials`` holds count units instead of real-valued patches:
    row ``i`` of ``patches[m]`` counts how often each of the P symbols fired in
    ``trials[m][i]`` Bernoulli draws.  These units are used directly as the
    atom-usage statistics, with no dictionary.
    """

    patches: list
    word_counts: np.ndarray | None = None
    vocabulary: list | None = None
    trials: list | None = None

    def __post_init__(self):
        self.patches = [np.atleast_2d(np.asarray(p, dtype=float)) for p in self.patches]
        dims = {p.shape[1] for p in self.patches}
        if len(dims) > 1:
            raise ValueError(f"patch vectors disagree in dimension: {sorted(dims)}")
        if self.trials is not None:
            self.trials = [np.asarray(t, dtype=np.int64).reshape(-1) for t in self.trials]
            if len(self.trials) != len(self.patches):
                raise ValueError("trials must list one array per image")
            for m, (p, t) in enumerate(zip(self.patches, self.trials)):
                if t.size != p.shape[0]:
                    raise ValueError(f"image {m}: {t.size} trial counts for {p.shape[0]} units")
                if np.any(p < 0) or np.any(p != np.round(p)) or np.any(p > t[:, None]):
                    raise ValueError(f"image {m}: counts must be integers in [0, trials]")
        if self.word_counts is not None:
            wc = np.asarray(self.word_counts)
            if wc.ndim != 2 or wc.shape[0] != len(self.patches):
                raise ValueError("word_counts must be an M x N_v matrix")
            if np.any(wc < 0) or np.any(wc != np.round(wc)):
                raise ValueError("word counts must be nonnegative integers")
            self.word_counts = wc.astype(np.int64)
            if self.vocabulary is not None and len(self.vocabulary) != wc.shape[1]:
                raise ValueError("vocabulary length differs from word_counts width")
        self._stacked = None
        self._trials = None
        self._N = np.array([p.shape[0] for p in self.patches], dtype=np.int64)
        self._offsets = np.concatenate(([0], np.cumsum(self._N))).astype(np.int64)
        # derived per-unit quantities that depend only on the data
        self.cache = {}

    @property
    def M(self) -> int:
        return len(self.patches)

    @property
    def P(self) -> int:
        return self.patches[0].shape[1] if self.patches else 0

    @property
    def N(self) -> np.ndarray:
        return self._N

    @property
    def N_v(self) -> int:
        return 0 if self.word_counts is None else self.word_counts.shape[1]

    @property
    def is_counts(self) -> bool:
        return self.trials is not None

    @property
    def offsets(self) -> np.ndarray:
        return self._offsets

    @property
    def X(self) -> np.ndarray:
        if self._stacked is None:
            if self.patches:
                self._stacked = np.ascontiguousarray(np.vstack(self.patches))
            else:
                self._stacked = np.zeros((0, 0))
        return self._stacked

    def stacked_trials(self) -> np.ndarray:
        if self._trials is None:
            if self.trials is None:
                self._trials = np.ones(int(self.N.sum()), dtype=np.int64)
            else:
                self._trials = np.concatenate(self.trials) if self.trials else np.zeros(0, dtype=np.int64)
        return self._trials

    def image_of_rows(self) -> np.ndarray:
        return np.repeat(np.arange(self.M), self.N)


@dataclass
class PatchCode:
    z: np.ndarray
    s: np.ndarray


@dataclass
class TreeNode:
    id: int
    parent: int | None
    depth: int
    children: list = field(default_factory=list)
    # child stick proportions; nu[-1] == 1 reserves mass for unseen children
    nu: np.ndarray = field(default_factory=lambda: np.ones(1))
    pi: np.ndarray | None = None
    occupancy: int = 0
    _logs: tuple | None = field(default=None, repr=False, compare=False)

    @property
    def child_sticks(self) -> StickWeights:
        return StickWeights(self.nu)

    @property
    def log_pi(self):
        """(log pi, log(1 - pi)); cached while ``pi`` is the same array (replace it, never mutate it)."""
        if self._logs is None or self._logs[0] is not self.pi:
            with np.errstate(divide="ignore"):
                self._logs = (self.pi, np.log(self.pi), np.log1p(-self.pi))
        return self._logs[1], self._logs[2]


class TopicTree:
    """Tree of topics; node 0 is the root and carries no usage vector."""

    root = 0

    def __init__(self):
        self.nodes: dict[int, TreeNode] = {0: TreeNode(0, None, 0)}
        self.next_id = 1

    def __len__(self):
        return len(self.nodes)

    def __getitem__(self, node_id) -> TreeNode:
        return self.nodes[node_id]

    def add_child(self, parent_id: int, pi, concentration: float, rng: np.random.Generator) -> int:
        parent = self.nodes[parent_id]
        parent.nu = extend_stick(parent.child_sticks, concentration, rng).V
        nid = self.next_id
        self.next_id += 1
        self.nodes[nid] = TreeNode(nid, parent_id, parent.depth + 1, pi=None if pi is None else np.asarray(pi, dtype=float))
        parent.children.append(nid)
        return nid

    def remove(self, node_id: int):
        node = self.nodes[node_id]
        if node.children:
            raise InvariantError(f"node {node_id} still has children")
        parent = self.nodes[node.parent]
        idx = parent.children.index(node_id)
        del parent.children[idx]
        parent.nu = np.delete(parent.nu, idx)
        del self.nodes[node_id]

    def reparent(self, node_id: int, new_parent: int, concentration: float, rng: np.random.Generator) -> None:
        """Hang ``node_id`` (and its subtree) under ``new_parent`` at the same depth."""
        node = self.nodes[node_id]
        target = self.nodes[new_parent]
        if target.depth != node.depth - 1:
            raise InvariantError(f"node {new_parent} at depth {target.depth} cannot parent depth {node.depth}")
        old = self.nodes[node.parent]
        idx = old.children.index(node_id)
        del old.children[idx]
        old.nu = np.delete(old.nu, idx)
        target.nu = extend_stick(target.child_sticks, concentration, rng).V
        target.children.append(node_id)
        node.parent = new_parent

    def chain(self, node_id: int) -> list:
        """Node ids from the depth-1 ancestor down to ``node_id``."""
        out = []
        while node_id != self.root:
            out.append(node_id)
            node_id = self.nodes[node_id].parent
        return out[::-1]

    def child_log_weight(self, parent_id: int, child_id: int) -> float:
        parent = self.nodes[parent_id]
        return float(parent.child_sticks.log_w[parent.children.index(child_id)])

    def reserved_log_weight(self, parent_id: int) -> float:
        return float(self.nodes[parent_id].child_sticks.log_w[-1])

    def at_depth(self, depth: int) -> list:
        return [n.id for n in self.nodes.values() if n.depth == depth]

    @property
    def max_depth(self) -> int:
        return max(n.depth for n in self.nodes.values())

    def leaves(self) -> list:
        return [n.id for n in self.nodes.values() if not n.children and n.id != self.root]


@dataclass
class Assignment:
    """Path, level sticks and patch levels of one image.

    ``levels`` are 1-based; ``len(path) == L`` is the deepest occupied level.
    ``mu`` holds the first L level-stick proportions; the mass beyond L is
    implied (``mu[-1] == 1`` when the depth cap has been reached).
    """

    path: list
    levels: np.ndarray
    mu: np.ndarray

    @property
    def L(self) -> int:
        return len(self.path)

    @property
    def level_sticks(self) -> StickWeights:
        mu = np.asarray(self.mu, dtype=float)
        return StickWeights(mu if mu[-1] == 1.0 else np.append(mu, 1.0))

    @property
    def theta(self) -> np.ndarray:
        return self.level_sticks.w[: self.L]


@dataclass
class ModelState:
    corpus: Corpus
    hyper: Hyperparams
    D: np.ndarray | None
    Z: np.ndarray
    S: np.ndarray | None
    tree: TopicTree
    assign: list
    psi: dict
    gamma_e: float
    gamma_s: float
    rng: np.random.Generator
    max_depth: int = 8
    flat: bool = False
    # frozen: tree and usage parameters fixed, children weighted by their sticks;
    # otherwise child sticks are integrated out in path moves
    frozen: bool = False

    @property
    def counts_mode(self) -> bool:
        return self.corpus.is_counts

    @property
    def K(self) -> int:
        return self.Z.shape[1]

    @property
    def X(self) -> np.ndarray:
        return self.corpus.X

    @property
    def trials(self) -> np.ndarray:
        return self.corpus.stacked_trials()

    def rows(self, m: int) -> slice:
        off = self.corpus.offsets
        return slice(int(off[m]), int(off[m + 1]))

    def code(self, m: int, i: int) -> PatchCode:
        r = self.rows(m).start + i
        s = np.zeros(self.K) if self.S is None else self.S[r].copy()
        return PatchCode(self.Z[r].copy(), s)

    def patch_nodes(self) -> np.ndarray:
        """Node id of every unit, in stacked row order."""
        if not self.assign:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate(
            [np.asarray(a.path, dtype=np.int64)[a.levels - 1] for a in self.assign]
        )

    def residual(self) -> np.ndarray:
        return self.X - (self.Z * self.S) @ self.D.T

    def path_key(self, m: int) -> tuple:
        return tuple(self.assign[m].path)


def validate(state: ModelState) -> list:
    """Describe every broken invariant of ``state``; empty when consistent."""
    out = list(state.hyper.violations())
    corpus, tree = state.corpus, state.tree
    N, K = state.Z.shape
    if N != int(corpus.N.sum()):
        out.append(f"codes cover {N} patches, corpus has {int(corpus.N.sum())}")
    if state.counts_mode:
        if np.any(state.Z != corpus.X):
            out.append("count units differ from the corpus")
    else:
        if state.hyper.K != K:
            out.append(f"code width {K} differs from K={state.hyper.K}")
        if not np.all((state.Z == 0) | (state.Z == 1)):
            out.append("indicators z must be binary")
        if state.S is None or state.S.shape != (N, K):
            out.append("weights s missing or misshapen")
        elif np.any(state.S < 0) or not np.all(np.isfinite(state.S)):
            out.append("weights s must be finite and nonnegative")
        if state.D is None or state.D.shape != (corpus.P, K):
            out.append("dictionary missing or misshapen")
        elif not np.all(np.isfinite(state.D)):
            out.append("dictionary has non-finite entries")
        if not (np.isfinite(state.gamma_e) and state.gamma_e > 0):
            out.append(f"gamma_e={state.gamma_e!r} must be positive")
        if not (np.isfinite(state.gamma_s) and state.gamma_s > 0):
            out.append(f"gamma_s={state.gamma_s!r} must be positive")

    if tree.root not in tree.nodes:
        out.append("tree has no root")
    for nid, node in tree.nodes.items():
        if nid != node.id:
            out.append(f"node key {nid} holds id {node.id}")
        if len(node.nu) != len(node.children) + 1 or node.nu[-1] != 1.0:
            out.append(f"node {nid}: child sticks do not match its {len(node.children)} children")
        elif np.any((node.nu < 0) | (node.nu > 1)):
            out.append(f"node {nid}: child sticks outside [0, 1]")
        for c in node.children:
            child = tree.nodes.get(c)
            if child is None:
                out.append(f"node {nid}: missing child {c}")
            elif child.parent != nid or child.depth != node.depth + 1:
                out.append(f"node {c}: inconsistent parent link or depth")
        if nid == tree.root:
            continue
        if node.parent not in tree.nodes or nid not in tree.nodes[node.parent].children:
            out.append(f"node {nid}: parent {node.parent} does not list it")
        if node.pi is None or node.pi.shape != (K,):
            out.append(f"node {nid}: usage vector missing or misshapen")
        elif np.any((node.pi <= 0) | (node.pi >= 1)):
            out.append(f"node {nid}: usage probabilities outside (0, 1)")

    if len(state.assign) != corpus.M:
        out.append(f"{len(state.assign)} assignments for {corpus.M} images")
        return out
    occupancy = {nid: 0 for nid in tree.nodes}
    for m, a in enumerate(state.assign):
        if a.L < 1:
            out.append(f"image {m}: empty path")
            continue
        if any(n not in tree.nodes for n in a.path):
            out.append(f"image {m}: path references missing nodes")
            continue
        if tree.chain(a.path[-1]) != list(a.path):
            out.append(f"image {m}: path is not a chain from the root")
        if a.L > state.max_depth:
            out.append(f"image {m}: path deeper than max_depth={state.max_depth}")
        if len(a.mu) != a.L or np.any((a.mu <= 0) | (a.mu > 1)):
            out.append(f"image {m}: level sticks do not match L={a.L}")
        if a.levels.shape != (int(corpus.N[m]),):
            out.append(f"image {m}: {a.levels.size} levels for {int(corpus.N[m])} patches")
            continue
        for i in np.flatnonzero((a.levels < 1) | (a.levels > a.L)):
            out.append(f"image {m}, patch {int(i)}: level {int(a.levels[i])} outside 1..{a.L}")
        ok = (a.levels >= 1) & (a.levels <= a.L)
        if a.levels.size and ok.all() and a.levels.max() != a.L:
            out.append(f"image {m}: deepest occupied level {int(a.levels.max())} != L={a.L}")
        for lv in a.levels[ok]:
            occupancy[a.path[lv - 1]] += 1
    for nid, node in tree.nodes.items():
        if node.occupancy != occupancy[nid]:
            out.append(f"node {nid}: occupancy {node.occupancy} != {occupancy[nid]} assigned patches")
    for key, psi in state.psi.items():
        if abs(psi.sum() - 1.0) > 1e-9 or np.any(psi < 0):
            out.append(f"path {key}: word distribution off the simplex")
    return out
