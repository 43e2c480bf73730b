"""Octree structure optimization between training epochs.

Every active leaf gets three options, merge into its parent, keep, or split
into octants, with cost ``(1 - alpha_k) + lam * beta_k``, where ``alpha`` is
a mean opacity and ``beta`` an apportioned rendering error. Resources are
counted in integer eighths of a leaf (merge 1, keep 8, split 64) and the
budget constraint is solved exactly by dynamic programming. Siblings merge
together or not at all.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .octree import N_CHILDREN, NodeId, NodeStatus, OctreeModel, child_ids, parent_id

EIGHTHS = {"merge": 1, "keep": 8, "split": 64}
MERGED_GROUP_EIGHTHS = 8  # a completed merge yields exactly one leaf
TIE_TOL = 1e-12


class Option(enum.Enum):
    MERGE = "merge"
    KEEP = "keep"
    SPLIT = "split"
    DEACTIVATE = "deactivate"


class InfeasibleBudgetError(ValueError):
    pass


class StaleDecisionError(RuntimeError):
    pass


@dataclass
class NodeStats:
    alpha: np.ndarray  # (up, same, down)
    beta: np.ndarray
    mean_opacity: float
    sample_count: int = 0

    def __post_init__(self):
        self.alpha = np.clip(np.asarray(self.alpha, dtype=np.float64), 0.0, 1.0)
        self.beta = np.asarray(self.beta, dtype=np.float64)
        if not (np.isfinite(self.alpha).all() and np.isfinite(self.beta).all()):
            raise ValueError("node statistics must be finite")


# -- statistics --------------------------------------------------------------------


def opacity(sigma, spacing: float) -> np.ndarray:
    return -np.expm1(-np.asarray(sigma, dtype=np.float64) * spacing)


def octant_means(values, octants) -> np.ndarray:
    """Mean of ``values`` in each of the 8 octants; empty octants give 0."""
    values = np.asarray(values, dtype=np.float64)
    sums = np.bincount(octants, weights=values, minlength=N_CHILDREN)
    counts = np.bincount(octants, minlength=N_CHILDREN)
    return np.where(counts > 0, sums / np.maximum(counts, 1), 0.0)


def compute_alpha(sigma, octants, spacing: float, parent_alpha: float = 0.0) -> np.ndarray:
    """``(alpha_up, alpha_same, alpha_down)`` from a node's stage-1 densities.

    ``parent_alpha`` is the mean opacity over the parent's whole extent.
    """
    sigma = np.asarray(sigma)
    if sigma.size == 0:
        raise ValueError("alpha needs at least one density sample")
    op = opacity(sigma, spacing)
    same = float(op.mean())
    down = float(octant_means(op, octants).mean())
    return np.array([parent_alpha / N_CHILDREN, same, down])


def compute_beta(shares, octants, parent_beta: float = 0.0) -> np.ndarray:
    """``(beta_up, beta_same, beta_down)`` from per-sample ``(w / W) * E(r)``."""
    shares = np.asarray(shares, dtype=np.float64)
    if shares.size == 0:
        return np.array([parent_beta / N_CHILDREN, 0.0, 0.0])
    same = float(shares.mean())
    down = float(octant_means(shares, octants).mean())
    return np.array([parent_beta / N_CHILDREN, same, down])


def error_shares(weights, ray_errors) -> np.ndarray:
    """Per-sample ``(w / W) * E(r)`` for padded ``(n_rays, n_samples)`` weights."""
    weights = np.asarray(weights, dtype=np.float64)
    total = weights.sum(axis=1, keepdims=True)
    frac = np.where(total > 0, weights / np.where(total > 0, total, 1.0), 0.0)
    return frac * np.asarray(ray_errors, dtype=np.float64)[:, None]


def _octants_in(points, box) -> np.ndarray:
    bits = (np.asarray(points) >= box.center).astype(np.int64)
    return bits[:, 0] | (bits[:, 1] << 1) | (bits[:, 2] << 2)


def node_statistics(model: OctreeModel, cache, shares=None, share_slots=None, share_points=None):
    """Statistics for every active leaf of ``model``.

    ``cache`` is a stage-1 :class:`~octfield.sampling.DensityCache` taken on
    the current tree; ``shares`` with ``share_slots`` / ``share_points``
    are per-sample error shares of a rendered epoch (slots index
    ``cache.leaves``).
    """
    leaves = cache.leaves
    n = cache.n_per_axis
    vol = {}
    mean_op = {}
    for k, node in enumerate(leaves):
        box = model.bounds(node)
        vol[node] = float(np.prod(box.extent))
        mean_op[node] = float(opacity(cache.sigma[k], float(box.extent.max()) / n).mean())
    if shares is None:
        shares = np.zeros(0)
        share_slots = np.zeros(0, np.int64)
        share_points = np.zeros((0, 3))
    shares = np.asarray(shares, dtype=np.float64)
    share_slots = np.asarray(share_slots)
    share_sum = np.bincount(share_slots, weights=shares, minlength=len(leaves))
    share_cnt = np.bincount(share_slots, minlength=len(leaves))
    order = np.argsort(share_slots, kind="stable")
    bounds = np.r_[0, np.cumsum(share_cnt)]

    def region(parent: NodeId):
        # volume-weighted opacity and pooled error over the parent's extent
        pbox = model.bounds(parent)
        pvol = float(np.prod(pbox.extent))
        a, s, c = 0.0, 0.0, 0
        for k, node in enumerate(leaves):
            if node.level > parent.level and (node.index >> (3 * (node.level - parent.level))) == parent.index:
                a += vol[node] * mean_op[node]
                s += share_sum[k]
                c += share_cnt[k]
        return a / pvol, (s / c if c else 0.0)

    parent_cache: dict = {}
    stats = {}
    for k, node in enumerate(leaves):
        box = model.bounds(node)
        spacing = float(box.extent.max()) / n
        if node.level > 0:
            par = parent_id(node)
            if par not in parent_cache:
                parent_cache[par] = region(par)
            pa, pb = parent_cache[par]
        else:
            pa, pb = 0.0, 0.0
        cache_oct = _octants_in(cache.points[k], box)
        alpha = compute_alpha(cache.sigma[k], cache_oct, spacing, pa)
        sel = order[bounds[k] : bounds[k + 1]]
        beta = compute_beta(shares[sel], _octants_in(share_points[sel], box) if sel.size else sel, pb)
        stats[node] = NodeStats(alpha, beta, mean_op[node], int(sel.size))
    return stats


# -- problem -----------------------------------------------------------------------


@dataclass
class TreeDecisionProblem:
    nodes: list  # [(NodeId, NodeStats)]
    budget: int
    lam: float = 1.0
    deactivation_threshold: float = 0.01
    max_level: int = 3
    mergeable: set = field(default_factory=set)  # parents whose children are all leaves
    branching: int = N_CHILDREN

    def costs(self) -> dict:
        """Per-node option costs ``{node: {"merge", "keep", "split"}}``."""
        out = {}
        for node, st in self.nodes:
            c = (1.0 - st.alpha) + self.lam * st.beta
            out[node] = {"merge": float(c[0]), "keep": float(c[1]), "split": float(c[2])}
        return out

    def can_split(self, node: NodeId) -> bool:
        return node.level < self.max_level

    def can_merge(self, node: NodeId) -> bool:
        return node.level > 0 and parent_id(node) in self.mergeable


def assemble(model: OctreeModel, stats: dict, budget: int, lam: float = 1.0, threshold: float = 0.01):
    leaves = model.active_leaves()
    missing = [n for n in leaves if n not in stats]
    if missing:
        raise ValueError(f"no statistics for active leaf {tuple(missing[0])}")
    mergeable = set()
    for node in leaves:
        if node.level == 0:
            continue
        par = parent_id(node)
        if par not in mergeable and all(model.is_leaf(c) for c in child_ids(par)):
            mergeable.add(par)
    return TreeDecisionProblem(
        [(n, stats[n]) for n in leaves], int(budget), lam, threshold, model.max_level, mergeable
    )


@dataclass
class TreeDecision:
    choices: dict  # NodeId -> Option
    leaves: tuple = ()  # active leaves the decision was computed on
    objective: float = 0.0
    resources: int = 0  # eighths

    def count(self, option: Option) -> int:
        return sum(1 for o in self.choices.values() if o is option)


def _better(c, s, m, bc, bs, bm):
    with np.errstate(invalid="ignore"):  # inf - inf for two infeasible entries
        tie = np.abs(c - bc) <= TIE_TOL
    return (c < bc - TIE_TOL) | (tie & ((s < bs) | ((s == bs) & (m < bm))))


def _groups(problem: TreeDecisionProblem, live):
    by_parent: dict = {}
    singles = []
    for node in live:
        if problem.can_merge(node):
            by_parent.setdefault(parent_id(node), []).append(node)
        else:
            singles.append([node])
    return [by_parent[p] for p in sorted(by_parent)] + singles, set(by_parent)


def _group_options(members, costs, problem):
    """``(cost, eighths, splits, merges, assignment)`` alternatives of a group."""
    keep = sum(costs[n]["keep"] for n in members)
    split_able = [n for n in members if problem.can_split(n)]
    deltas = sorted(split_able, key=lambda n: (costs[n]["split"] - costs[n]["keep"], n))
    opts = []
    cost = keep
    chosen = []
    for k in range(len(deltas) + 1):
        if k:
            cost += costs[deltas[k - 1]]["split"] - costs[deltas[k - 1]]["keep"]
            chosen.append(deltas[k - 1])
        res = EIGHTHS["keep"] * len(members) + (EIGHTHS["split"] - EIGHTHS["keep"]) * k
        opts.append((cost, res, k, 0, {n: Option.SPLIT for n in chosen}))
    return opts


def solve(problem: TreeDecisionProblem) -> TreeDecision:
    """Exact minimizer of the total option cost under the budget."""
    costs = problem.costs()
    choices = {}
    live = []
    for node, st in problem.nodes:
        if st.mean_opacity < problem.deactivation_threshold:
            choices[node] = Option.DEACTIVATE
        else:
            live.append(node)
    groups, merge_parents = _groups(problem, live)
    cap = 8 * int(problem.budget)
    if cap < 0:
        raise InfeasibleBudgetError("budget must be >= 0")
    inf = np.inf
    dc = np.zeros(cap + 1)
    ds = np.zeros(cap + 1, dtype=np.int64)
    dm = np.zeros(cap + 1, dtype=np.int64)
    trace = []
    for members in groups:
        opts = _group_options(members, costs, problem)
        if len(members) and problem.can_merge(members[0]):
            mc = sum(costs[n]["merge"] for n in members)
            opts.append((mc, MERGED_GROUP_EIGHTHS, 0, 1, {n: Option.MERGE for n in members}))
        bc = np.full(cap + 1, inf)
        bs = np.zeros(cap + 1, dtype=np.int64)
        bm = np.zeros(cap + 1, dtype=np.int64)
        pick = np.full(cap + 1, -1, dtype=np.int64)
        for i, (c, r, s, m, _) in enumerate(opts):
            if r > cap:
                continue
            cc = np.full(cap + 1, inf)
            cs = np.zeros(cap + 1, dtype=np.int64)
            cm = np.zeros(cap + 1, dtype=np.int64)
            cc[r:] = dc[: cap + 1 - r] + c
            cs[r:] = ds[: cap + 1 - r] + s
            cm[r:] = dm[: cap + 1 - r] + m
            ok = np.isfinite(cc) & (~np.isfinite(bc) | _better(cc, cs, cm, bc, bs, bm))
            bc[ok], bs[ok], bm[ok], pick[ok] = cc[ok], cs[ok], cm[ok], i
        trace.append((opts, pick))
        dc, ds, dm = bc, bs, bm
    if not np.isfinite(dc[cap]):
        raise InfeasibleBudgetError(f"no structure fits within budget {problem.budget}")
    b = cap
    used = 0
    total = 0.0
    for members, (opts, pick) in zip(reversed(groups), reversed(trace)):
        c, r, _, _, assign = opts[pick[b]]
        for n in members:
            choices[n] = assign.get(n, Option.KEEP)
        b -= r
        used += r
        total += c
    leaves = tuple(n for n, _ in problem.nodes)
    return TreeDecision(choices, leaves, total, used)


def objective(problem: TreeDecisionProblem, choices: dict):
    """``(cost, eighths)`` of an assignment; ``None`` if it breaks sibling rules."""
    costs = problem.costs()
    total, used = 0.0, 0
    merged: dict = {}
    for node, _ in problem.nodes:
        opt = choices[node]
        if opt is Option.DEACTIVATE:
            continue
        if opt is Option.KEEP:
            total += costs[node]["keep"]
            used += EIGHTHS["keep"]
        elif opt is Option.SPLIT:
            if not problem.can_split(node):
                return None
            total += costs[node]["split"]
            used += EIGHTHS["split"]
        else:
            if not problem.can_merge(node):
                return None
            total += costs[node]["merge"]
            merged.setdefault(parent_id(node), []).append(node)
    for par, members in merged.items():
        live = [n for n, _ in problem.nodes if n.level > 0 and parent_id(n) == par and choices[n] is not Option.DEACTIVATE]
        if len(members) != len(live):
            return None
        used += MERGED_GROUP_EIGHTHS
    return total, used


# -- edits -------------------------------------------------------------------------


@dataclass
class Edit:
    kind: str  # "deactivate" | "merge" | "split"
    node: NodeId
    networks: list = field(default_factory=list)  # released networks
    children: list = field(default_factory=list)


def apply_decisions(model: OctreeModel, decision: TreeDecision) -> list[Edit]:
    """Execute a decision on ``model``; returns the edit log.

    Deactivations run first, then sibling merges, then splits.
    """
    if decision.leaves and tuple(model.active_leaves()) != tuple(decision.leaves):
        raise StaleDecisionError("tree changed since the decision was computed")
    log = []
    for node, opt in sorted(decision.choices.items()):
        if opt is Option.DEACTIVATE:
            log.append(Edit("deactivate", node, [model.deactivate(node)]))
    parents = sorted({parent_id(n) for n, o in decision.choices.items() if o is Option.MERGE})
    for par in parents:
        kids = child_ids(par)
        if any(decision.choices.get(c, Option.MERGE) not in (Option.MERGE, Option.DEACTIVATE) for c in kids if model.status(c) is NodeStatus.ACTIVE):
            raise StaleDecisionError(f"partial merge of {tuple(par)}")
        nets = model.merge(par)
        log.append(Edit("merge", par, nets, kids))
    for node, opt in sorted(decision.choices.items()):
        if opt is Option.SPLIT:
            kids, net = model.split(node)
            log.append(Edit("split", node, [net], kids))
    return log


def coerce_partial_merges(problem: TreeDecisionProblem, choices: dict) -> dict:
    """Turn minority merge votes into keeps (an incomplete sibling set)."""
    out = dict(choices)
    votes: dict = {}
    for node, opt in choices.items():
        if opt is Option.MERGE:
            votes.setdefault(parent_id(node), []).append(node)
    for par, members in votes.items():
        live = [n for n, _ in problem.nodes if n.level > 0 and parent_id(n) == par and out[n] is not Option.DEACTIVATE]
        if len(members) != len(live) or not problem.can_merge(members[0]):
            for n in members:
                out[n] = Option.KEEP
    return out


def decision_to_json(problem: TreeDecisionProblem, decision: TreeDecision) -> dict:
    costs = problem.costs()
    return {
        "budget": problem.budget,
        "lambda": problem.lam,
        "deactivation_threshold": problem.deactivation_threshold,
        "objective": decision.objective,
        "eighths_used": decision.resources,
        "nodes": [
            {
                "level": n.level,
                "index": n.index,
                "alpha": st.alpha.tolist(),
                "beta": st.beta.tolist(),
                "mean_opacity": st.mean_opacity,
                "sample_count": st.sample_count,
                "costs": costs[n],
                "decision": decision.choices[n].value,
            }
            for n, st in problem.nodes
        ],
    }
