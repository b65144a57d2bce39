"""Divisive driver: nested binary splits of an overfitted mixture.

Each leaf's split is initialized by 2-means (or 2-medoids) on per-subject
summary features, rebalanced to respect the minimum cluster size, and refined
by alternating cluster-parameter fits with hard reassignment. Splits are
accepted greedily, one per round, while they increase the full objective at
the current Dirichlet concentration; the concentration walks up a grid.
"""
import hashlib
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln
from sklearn.cluster import KMeans

from .exceptions import DegenerateCovarianceError, DegenerateSplitWarning, NumericalFailure
from .posterior import assignment_scores, fit_cluster, log_dm_from_sizes

ACCEPT_MARGIN = 1e-9
# "all": slopes, intercepts and survival summaries; "longitudinal": first two only
FEATURE_BLOCKS = ("all", "longitudinal")


def default_alpha_grid():
    return tuple(float(a) for a in np.geomspace(1e-3, 1e2, 16))


def default_min_cluster_size(p, q, H):
    """Literal parameter count of one LMM component: B, G, Omega and sigma2."""
    return p * H + q * (q + 1) // 2 + H * (H + 1) // 2 + 1


@dataclass(frozen=True)
class RunConfig:
    max_clusters: int = 10
    min_cluster_size: int = None
    alpha_grid: tuple = None
    split_init: str = "two_means"
    seed: int = 0
    tol: float = 1e-6
    max_iter: int = 200
    max_sweeps: int = 50
    split_alpha: float = 1.0
    split_features: tuple = ("all", "longitudinal")
    n_jobs: int = 1

    def __post_init__(self):
        if self.max_clusters < 1:
            raise ValueError("max_clusters must be at least 1")
        grid = self.alpha_grid
        if grid is not None:
            grid = tuple(float(a) for a in grid)
            if not grid or any(a <= 0 for a in grid) or any(
                    b <= a for a, b in zip(grid, grid[1:])):
                raise ValueError("alpha_grid must be positive and strictly increasing")
            object.__setattr__(self, "alpha_grid", grid)
        if self.split_init not in ("two_means", "two_medoids"):
            raise ValueError(f"unknown split_init {self.split_init!r}")
        blocks = tuple(self.split_features)
        if not blocks or any(b not in FEATURE_BLOCKS for b in blocks):
            raise ValueError(f"split_features must be drawn from {FEATURE_BLOCKS}")
        object.__setattr__(self, "split_features", blocks)
        if self.min_cluster_size is not None and self.min_cluster_size < 1:
            raise ValueError("min_cluster_size must be positive")

    @property
    def alphas(self):
        return default_alpha_grid() if self.alpha_grid is None else self.alpha_grid

    def resolved_min_size(self, data):
        if self.min_cluster_size is not None:
            return int(self.min_cluster_size)
        return default_min_cluster_size(data.design.p, data.design.q, data.cohort.H)


@dataclass
class Node:
    """Dendrogram node: a subject set with its fitted component."""

    node_id: str
    subjects: np.ndarray
    params: object
    log_posterior: float
    alpha: float = None
    objective: float = None
    children: list = field(default_factory=list)
    split_note: str = None

    @property
    def size(self):
        return int(self.subjects.size)

    def leaves(self):
        if not self.children:
            return [self]
        return [leaf for c in self.children for leaf in c.leaves()]

    def walk(self):
        yield self
        for c in self.children:
            yield from c.walk()


@dataclass
class SplitResult:
    accepted: bool
    reason: str = ""
    subsets: tuple = ()
    params: tuple = ()
    log_posteriors: tuple = ()
    delta: float = -np.inf
    trace: list = field(default_factory=list)
    sweeps: int = 0
    degenerate_init: bool = False


# ---------------------------------------------------------------------------
# initialization

def _ols_line(t, y):
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    if t.size >= 2 and np.ptp(t) > 0:
        tc = t - t.mean()
        slope = (tc @ (y - y.mean(0))) / (tc @ tc)
        return slope, y.mean(0) - slope * t.mean()
    return np.zeros(y.shape[1]), y.mean(0) if y.size else np.zeros(y.shape[1])


def subject_feature_vector(times, y, survival=()):
    """Unscaled features: per-variable (slope, intercept), then (log t, d) per event."""
    y = np.atleast_2d(np.asarray(y, dtype=float))
    slope, intercept = _ols_line(times, y)
    feats = np.column_stack([slope, intercept]).ravel().tolist()
    for t, d in survival:
        feats.extend([float(np.log(t)), float(d)])
    return np.array(feats)


def zscore(features, floor=1e-12):
    f = np.asarray(features, dtype=float)
    sd = f.std(axis=0)
    return (f - f.mean(axis=0)) / np.maximum(sd, floor)


def cluster_features(data, idx, block="all"):
    """z-scored split features of the subjects ``idx``."""
    coh = data.cohort
    rows = []
    for i in idx:
        surv = [(data.t[e][i], data.d[e][i]) for e in range(data.n_events)]
        rows.append(subject_feature_vector(coh.times[i], coh.Y[i], surv))
    f = np.array(rows)
    if block == "longitudinal":
        f = f[:, :2 * coh.H]
    return zscore(f)


def _two_medoids(features):
    D = np.sqrt(((features[:, None, :] - features[None, :, :]) ** 2).sum(-1))
    m = len(features)
    if m <= 400:
        best, pair = np.inf, (0, 1)
        for a in range(m - 1):
            cost = np.minimum(D[a][None, :], D[a + 1:]).sum(1)
            j = int(np.argmin(cost))
            if cost[j] < best:
                best, pair = cost[j], (a, a + 1 + j)
        medoids = np.array(pair)
    else:
        medoids = np.array([0, int(np.argmax(D[0]))])
        for _ in range(100):
            lab = np.argmin(D[:, medoids], axis=1)
            new = np.array([np.flatnonzero(lab == k)[np.argmin(
                D[np.ix_(lab == k, lab == k)].sum(1))] for k in (0, 1)])
            if np.array_equal(new, medoids):
                break
            medoids = new
    dist = D[:, medoids]
    return np.argmin(dist, axis=1), dist


def _two_means(features, seed):
    km = KMeans(n_clusters=2, n_init=10, random_state=seed).fit(features)
    centers = km.cluster_centers_
    dist = np.sqrt(((features[:, None, :] - centers[None, :, :]) ** 2).sum(-1))
    return km.labels_.astype(int), dist


def init_split(features, min_cluster_size, method="two_means", seed=0):
    """Heuristic 2-way split of a cluster, rebalanced to the minimum size.

    Returns ``(labels, degenerate)`` where ``labels`` is a 0/1 vector. If
    the smaller side is under ``min_cluster_size``, the subjects with the
    weakest preference for the larger side move across.
    """
    f = np.asarray(features, dtype=float)
    m = len(f)
    if m < 2:
        raise ValueError("need at least two subjects to split")
    if np.allclose(f, f[0]):
        labels = np.zeros(m, dtype=int)
        labels[m // 2:] = 1
        return labels, True
    if method == "two_medoids":
        labels, dist = _two_medoids(f)
    else:
        labels, dist = _two_means(f, seed)
    sizes = np.bincount(labels, minlength=2)
    small = int(np.argmin(sizes)) if sizes[0] != sizes[1] else 1
    large = 1 - small
    need = min_cluster_size - sizes[small]
    if need > 0:
        members = np.flatnonzero(labels == large)
        # members sit closer to the larger center, so this margin is >= 0;
        # the smallest margin is the weakest preference for the larger side
        margin = dist[members, small] - dist[members, large]
        order = members[np.lexsort((members, margin))]
        labels = labels.copy()
        labels[order[:need]] = small
    return labels, False


# ---------------------------------------------------------------------------
# splitting

def _restricted_objective(lps, sizes, alpha):
    return float(sum(lps) + np.sum(gammaln(np.asarray(sizes, dtype=float) + alpha)))


def _fingerprint(labels):
    return hashlib.sha1(np.asarray(labels, dtype=np.int8).tobytes()).hexdigest()


def _node_seed(seed, node_id):
    digest = hashlib.sha256(f"{seed}:{node_id}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


def attempt_split(data, node, mixture, run, alpha=None, min_size=None):
    """Try to split ``node`` into two clusters.

    One heuristic initialization is refined per feature block in
    ``run.split_features``; the refined split with the highest objective at
    the reference concentration wins. Returns a :class:`SplitResult` whose
    ``delta`` is the change in the objective excluding the
    Dirichlet-multinomial term (the driver adds it at each concentration).
    """
    alpha = run.split_alpha if alpha is None else alpha
    min_size = run.resolved_min_size(data) if min_size is None else min_size
    idx = node.subjects
    m = idx.size
    if m < 2 * min_size:
        return SplitResult(False, f"not attempted: {m} subjects < 2 x {min_size}")
    blocks = run.split_features if data.n_events else ("all",)
    seed = _node_seed(run.seed, node.node_id)
    starts = []
    for block in blocks:
        labels, degenerate = init_split(cluster_features(data, idx, block), min_size,
                                        run.split_init, seed)
        if any(np.array_equal(labels, s) or np.array_equal(labels, 1 - s)
               for s, _ in starts):
            continue
        starts.append((labels, degenerate))
    best = None
    for labels, degenerate in starts:
        if degenerate:
            warnings.warn(f"node {node.node_id}: identical split features, using a "
                          f"balanced arbitrary split", DegenerateSplitWarning, stacklevel=2)
        res = _refine(data, node, labels, mixture, run, alpha, min_size)
        res.degenerate_init = degenerate
        if best is None or (res.accepted and (not best.accepted
                                              or res.trace[-1] > best.trace[-1])):
            best = res
    return best


def _refine(data, node, labels, mixture, run, alpha, min_size):
    """Alternate cluster fits and synchronous reassignment from ``labels``."""
    idx = node.subjects
    params = [node.params, node.params]
    trace = []
    seen = set()
    lps = [None, None]
    sweeps = 0
    fitted_for = None
    while True:
        sizes = np.bincount(labels, minlength=2)
        if sizes.min() < min_size:
            return SplitResult(False, f"candidate fell to {sizes.min()} < {min_size} subjects",
                               trace=trace, sweeps=sweeps)
        try:
            for k in (0, 1):
                params[k], lps[k], _ = fit_cluster(data, idx[labels == k], mixture,
                                                   init=params[k], tol=run.tol,
                                                   max_iter=run.max_iter)
        except DegenerateCovarianceError as exc:
            return SplitResult(False, f"degenerate fit: {exc}", trace=trace, sweeps=sweeps)
        fitted_for = labels
        current = _restricted_objective(lps, sizes, alpha)
        trace.append(current)
        sweeps += 1
        seen.add(_fingerprint(labels))
        if sweeps >= run.max_sweeps:
            break
        new = _reassign(data, idx, labels, params, lps, mixture, alpha)
        if np.array_equal(new, labels) or _fingerprint(new) in seen:
            break
        labels = new
    if fitted_for is not labels:
        raise AssertionError("split parameters out of sync with assignment")
    subsets = (idx[labels == 0], idx[labels == 1])
    delta = lps[0] + lps[1] - node.log_posterior - mixture.pi0_log_density
    return SplitResult(True, "ok", subsets, tuple(params), tuple(lps), float(delta), trace,
                       sweeps)


def _reassign(data, idx, labels, params, lps, mixture, alpha):
    """Synchronous reassignment with a monotone fallback.

    All subjects are scored against frozen counts. If the simultaneous
    proposal would lower the objective, moves are instead applied one at a
    time in order of their individual gain, each only while it still
    increases the objective.
    """
    ll = data.loglik_matrix(params, idx)
    sizes = np.bincount(labels, minlength=2).astype(float)
    excl = np.tile(sizes, (labels.size, 1))
    excl[np.arange(labels.size), labels] -= 1
    scores = assignment_scores(ll, excl, alpha)
    proposal = np.argmax(scores, axis=1)
    if np.array_equal(proposal, labels):
        return labels
    priors = lps[0] + lps[1] - ll[labels == 0, 0].sum() - ll[labels == 1, 1].sum()

    def objective(lab):
        sz = np.bincount(lab, minlength=2)
        return float(ll[np.arange(lab.size), lab].sum() + priors
                     + np.sum(gammaln(sz + alpha)))

    before = objective(labels)
    if objective(proposal) >= before:
        return proposal
    gain = scores[np.arange(labels.size), proposal] - scores[np.arange(labels.size), labels]
    movers = np.flatnonzero(proposal != labels)
    movers = movers[np.lexsort((movers, -gain[movers]))]
    out = labels.copy()
    sz = np.bincount(out, minlength=2).astype(float)
    for i in movers:
        src, dst = out[i], 1 - out[i]
        g = (ll[i, dst] - ll[i, src] + np.log(sz[dst] + alpha) - np.log(sz[src] - 1 + alpha))
        if g > 0:
            out[i] = dst
            sz[src] -= 1
            sz[dst] += 1
    return out


# ---------------------------------------------------------------------------
# driver

@dataclass
class DHBCResult:
    root: Node
    history: list  # one dict per recorded partition
    per_alpha: list  # (alpha, labels, objective, n_clusters) at the end of each alpha
    min_cluster_size: int
    K: int

    def leaves(self):
        return self.root.leaves()

    @property
    def labels(self):
        return self.history[-1]["labels"]

    def labels_for(self, n_clusters):
        """Recorded partition with exactly ``n_clusters`` clusters, if any."""
        for rec in self.history:
            if rec["n_clusters"] == n_clusters:
                return rec["labels"]
        raise KeyError(f"no recorded partition with {n_clusters} clusters")


def canonical_labels(leaves, n):
    """Labels 1..L ordered by each leaf's smallest subject index."""
    order = sorted(leaves, key=lambda nd: int(nd.subjects.min()))
    labels = np.zeros(n, dtype=int)
    for k, nd in enumerate(order, start=1):
        labels[nd.subjects] = k
    return labels


def _objective(leaves, K, alpha, pi0):
    return (sum(nd.log_posterior for nd in leaves) + (K - len(leaves)) * pi0
            + log_dm_from_sizes([nd.size for nd in leaves], K, alpha))


def run_dhbc(data, mixture, run=None):
    """Grow the dendrogram over the concentration grid.

    Parameters
    ----------
    data : CohortData
    mixture : MixtureConfig
        ``alpha`` is ignored; the run walks ``run.alphas``.
    run : RunConfig

    Returns
    -------
    DHBCResult
    """
    run = RunConfig() if run is None else run
    n = len(data)
    K = n if mixture.K is None else mixture.K
    min_size = run.resolved_min_size(data)
    everyone = np.arange(n)
    try:
        params, lp, _ = fit_cluster(data, everyone, mixture, tol=run.tol,
                                    max_iter=run.max_iter)
    except DegenerateCovarianceError as exc:
        raise NumericalFailure(f"root cluster fit failed: {exc}") from exc
    root = Node("r", everyone, params, lp)
    leaves = [root]
    alphas = run.alphas
    root.objective = _objective(leaves, K, alphas[0], mixture.pi0_log_density)
    history = [{"alpha": alphas[0], "labels": canonical_labels(leaves, n),
                "objective": root.objective, "n_clusters": 1, "split": None}]
    per_alpha = []
    attempts = {}
    pool = ThreadPoolExecutor(max_workers=run.n_jobs) if run.n_jobs > 1 else None
    try:
        for alpha in alphas:
            while len(leaves) < run.max_clusters:
                todo = [nd for nd in leaves if nd.node_id not in attempts]
                fn = lambda nd: attempt_split(data, nd, mixture, run, min_size=min_size)
                results = list(pool.map(fn, todo)) if pool else [fn(nd) for nd in todo]
                for nd, res in zip(todo, results):
                    attempts[nd.node_id] = res
                    nd.split_note = res.reason
                sizes = [nd.size for nd in leaves]
                base_dm = log_dm_from_sizes(sizes, K, alpha)
                best, best_gain = None, ACCEPT_MARGIN
                for pos, nd in enumerate(leaves):
                    res = attempts[nd.node_id]
                    if not res.accepted:
                        continue
                    new_sizes = sizes[:pos] + [s.size for s in res.subsets] + sizes[pos + 1:]
                    gain = res.delta + log_dm_from_sizes(new_sizes, K, alpha) - base_dm
                    if gain > best_gain:
                        best, best_gain = pos, gain
                if best is None:
                    break
                parent = leaves[best]
                res = attempts[parent.node_id]
                kids = [Node(f"{parent.node_id}{tag}", sub, p, l, alpha=alpha)
                        for tag, sub, p, l in zip("ab", res.subsets, res.params,
                                                   res.log_posteriors)]
                parent.children = kids
                leaves = leaves[:best] + kids + leaves[best + 1:]
                obj = _objective(leaves, K, alpha, mixture.pi0_log_density)
                for kid in kids:
                    kid.objective = obj
                history.append({"alpha": alpha, "labels": canonical_labels(leaves, n),
                                "objective": obj, "n_clusters": len(leaves),
                                "split": parent.node_id, "gain": best_gain})
            per_alpha.append({"alpha": alpha, "labels": canonical_labels(leaves, n),
                              "objective": _objective(leaves, K, alpha,
                                                      mixture.pi0_log_density),
                              "n_clusters": len(leaves)})
            if len(leaves) >= run.max_clusters:
                break
    except DegenerateCovarianceError as exc:
        partial = DHBCResult(root, history, per_alpha, min_size, K)
        raise NumericalFailure(f"numerical failure during splitting: {exc}",
                               partial=partial) from exc
    finally:
        if pool:
            pool.shutdown()
    return DHBCResult(root, history, per_alpha, min_size, K)
