"""Shared fixtures-as-functions for the test modules."""

import numpy as np

from octfield.network import ArchConfig, LeafNetwork, PosEncConfig


def tiny_arch(width=6, depth=3, view_width=5, fp=2, fd=1):
    return ArchConfig(width=width, depth=depth, view_width=view_width, encoding=PosEncConfig(fp, fd))


def random_net(seed, arch=None, scale=1.0):
    """Double-precision network with every parameter (heads included) random."""
    arch = tiny_arch() if arch is None else arch
    net = LeafNetwork(arch, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 1000)
    net.params[:] += scale * rng.normal(scale=0.3, size=net.params.shape)
    return net


def unit_dirs(n, rng):
    d = rng.normal(size=(n, 3))
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def central_difference(f, x, h=1e-6):
    """Gradient of scalar ``f`` at flat array ``x`` (modified in place, restored)."""
    g = np.zeros_like(x)
    for i in range(x.size):
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_error(analytic, numeric):
    return np.abs(analytic - numeric) / (np.abs(analytic) + 1e-8)


def rel_error_scaled(analytic, numeric):
    """Relative error against the gradient's overall scale (robust to near-zero entries)."""
    scale = max(np.abs(numeric).max(), 1e-8)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def central_difference4(f, x, h=1e-3):
    """Fourth-order central difference; error ``O(h^4)`` plus ``O(eps / h)``."""
    g = np.zeros_like(x)
    for i in range(x.size):
        old = x[i]
        vals = []
        for step in (2, 1, -1, -2):
            x[i] = old + step * h
            vals.append(f())
        x[i] = old
        g[i] = (-vals[0] + 8 * vals[1] - 8 * vals[2] + vals[3]) / (12 * h)
    return g


def kink_margin(net, x, d=None):
    """Smallest |pre-activation| of any RReLU unit; FD is only valid away from 0."""
    _, feat, tape = net.forward_density(x, record=True)
    margins = []
    for k, h in enumerate(tape.inputs):
        z = h @ net.W[f"trunk{k}"] + net.b[f"trunk{k}"]
        margins.append(np.abs(z).min())
    if d is not None:
        from octfield.network import pos_encode

        ed = pos_encode(d, net.arch.encoding.freq_direction)
        z = np.concatenate([feat, ed], axis=1) @ net.W["view"] + net.b["view"]
        margins.append(np.abs(z).min())
    return float(min(margins))


def clean_instance(net, rng, n=4, margin=0.02):
    """Random inputs whose RReLU pre-activations all stay ``margin`` away from 0."""
    for _ in range(1000):
        x = rng.uniform(-1, 1, size=(n, 3))
        d = unit_dirs(n, rng)
        if kink_margin(net, x, d) > margin:
            return x, d
    raise RuntimeError("could not draw a kink-free instance")


# -- tree decision oracle ---------------------------------------------------------


def random_tree_problem(rng, max_nodes=8):
    """A random small tree (at most ``max_nodes`` active leaves) with random statistics."""
    from octfield.geometry import Aabb
    from octfield.octree import OctreeModel
    from octfield.tree_opt import NodeStats, assemble

    while True:
        model = OctreeModel(Aabb(-np.ones(3), np.ones(3)), int(rng.integers(1, 4)))
        model.split(model.active_leaves()[0])
        for node in list(model.active_leaves()):
            r = rng.random()
            if r < 0.15 and node.level < model.max_level:
                model.split(node)
        for node in list(model.active_leaves()):
            if rng.random() < 0.6:
                model.deactivate(node)
        leaves = model.active_leaves()
        if 1 <= len(leaves) <= max_nodes:
            break
    stats = {}
    for node in leaves:
        opaque = rng.random() < 0.85
        stats[node] = NodeStats(rng.random(3), rng.random(3) * rng.choice([0.1, 1.0, 3.0]),
                                float(rng.uniform(0.02, 1.0) if opaque else rng.uniform(0, 0.01)))
    budget = int(rng.integers(0, 8 * len(leaves) + 2))
    return model, assemble(model, stats, budget, lam=float(rng.choice([0.5, 1.0, 2.0])), threshold=0.01)


def brute_force(problem):
    """Exhaustive minimum over merge/keep/split assignments of the live nodes.

    Returns ``(cost, eighths)`` or ``None`` when nothing fits the budget.
    """
    from itertools import product

    from octfield.octree import parent_id

    costs = problem.costs()
    live = [n for n, st in problem.nodes if st.mean_opacity >= problem.deactivation_threshold]
    if not live:
        return 0.0, 0
    n = len(live)
    table = np.array([[costs[v]["merge"], costs[v]["keep"], costs[v]["split"]] for v in live])
    combos = np.array(list(product(range(3), repeat=n)), dtype=np.int64)
    total = table[np.arange(n), combos].sum(axis=1)
    eighths = np.where(combos == 1, 8, np.where(combos == 2, 64, 0)).sum(axis=1)
    ok = np.ones(len(combos), bool)
    for k, v in enumerate(live):
        if not problem.can_split(v):
            ok &= combos[:, k] != 2
        if not problem.can_merge(v):
            ok &= combos[:, k] != 0
    parents = {}
    for k, v in enumerate(live):
        if problem.can_merge(v):
            parents.setdefault(parent_id(v), []).append(k)
    for members in parents.values():
        merged = combos[:, members] == 0
        whole = merged.all(axis=1)
        ok &= whole | ~merged.any(axis=1)  # all siblings or none
        eighths = eighths + 8 * whole
    ok &= eighths <= 8 * problem.budget
    if not ok.any():
        return None
    best = np.argmin(np.where(ok, total, np.inf))
    return float(total[best]), int(eighths[best])


def smooth_teacher(seed=42, arch=None):
    """Random network whose trunk sees only the raw position, not its encoding."""
    arch = ArchConfig() if arch is None else arch
    net = LeafNetwork(arch, seed=seed)
    rng = np.random.default_rng(seed + 1)
    net.W["trunk0"][3:] = 0
    net.W["density"][:] = rng.normal(0, 0.3, net.W["density"].shape)
    net.b["density"][:] = 1.0
    return net


def constant_net(arch, sigma_raw=0.7, rgb_raw=(0.2, -0.4, 1.0), seed=0):
    """Zero trunk and view weights: constant density and color everywhere."""
    net = LeafNetwork(arch, seed=seed)
    net.params[:] = 0
    net.b["density"][:] = sigma_raw
    net.b["rgb"][:] = rgb_raw
    return net
