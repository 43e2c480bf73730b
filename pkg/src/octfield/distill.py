"""Pre-training networks across structural edits.

After a split, each child network is fitted to the frozen parent on
stratified samples inside its octant; after a merge, the new parent is
fitted to the frozen children. No rays are traced. Both density (after the
softplus) and color are matched with equal weight.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .geometry import Aabb
from .bank import NetworkBank
from .network import ArchConfig, LeafNetwork, OptimizerState
from .octree import N_CHILDREN


class DistillationDivergedError(RuntimeError):
    def __init__(self, step: int, loss: float, initial: float, which: str):
        super().__init__(
            f"distillation of {which} diverged at step {step}: loss {loss:.4g} vs initial {initial:.4g}"
        )
        self.step, self.loss, self.initial = step, loss, initial


@dataclass(frozen=True)
class DistillSchedule:
    steps: int = 200
    batch: int = 1024
    lr: float = 2e-2  # peak
    divergence_factor: float = 5.0
    warmup: int = 20

    def rate(self, step: int) -> float:
        """Linear warmup to ``lr``, then cosine decay towards zero."""
        ramp = min(1.0, (step + 1) / max(self.warmup, 1))
        return self.lr * ramp * 0.5 * (1.0 + np.cos(np.pi * step / self.steps))


def octant_box(box: Aabb, j: int) -> Aabb:
    half = 0.5 * box.extent
    bits = np.array([j & 1, (j >> 1) & 1, (j >> 2) & 1])
    lo = box.min + bits * half
    return Aabb(lo, lo + half)


def to_local(box: Aabb, points) -> np.ndarray:
    return (np.asarray(points) - box.center) / (0.5 * box.extent)


def random_directions(n: int, rng) -> np.ndarray:
    d = rng.normal(size=(n, 3))
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def octant_batch(box: Aabb, per_octant: int, rng) -> list[np.ndarray]:
    """Jittered stratified points per octant (a ``(2a, a, a)``-style lattice)."""
    a = max(1, int(round((per_octant / 2) ** (1 / 3))))
    dims = np.array([2 * a, a, a]) if 2 * a**3 == per_octant else None
    out = []
    for j in range(N_CHILDREN):
        ob = octant_box(box, j)
        if dims is None:
            pts = ob.min + rng.random((per_octant, 3)) * ob.extent
        else:
            grid = np.stack(np.meshgrid(*[np.arange(k) for k in dims], indexing="ij"), -1).reshape(-1, 3)
            pts = ob.min + (grid + rng.random(grid.shape)) * (ob.extent / dims)
        out.append(pts)
    return out


def _teacher(net: Optional[LeafNetwork], x, d):
    if net is None:
        return np.zeros(len(x)), np.zeros((len(x), 3))
    sigma, feat, _ = net.forward_density(x)
    return sigma, net.forward_color(feat, d)


def _fit_step(bank: NetworkBank, x, seg, d, sig_t, rgb_t, rgb_rows, lr, rng):
    """One Adam step of every bank network on its own segment of samples.

    The loss is the mean over networks of ``mse(sigma) + mse(rgb)``.
    """
    sigma, tape = bank.forward_density(x, seg, rng)
    rows = np.arange(len(x)) if rgb_rows is None else rgb_rows
    rgb = bank.forward_color(tape, d[rows], rows, rng) if rows.size else None
    counts = np.diff(seg)
    slot = np.repeat(np.arange(len(counts)), counts)
    n_s = counts[slot].astype(np.float64)
    c_counts = np.bincount(slot[rows], minlength=len(counts))
    ds = sigma - sig_t
    loss_s = np.bincount(slot, weights=ds * ds, minlength=len(counts)) / np.maximum(counts, 1)
    gs = 2.0 * ds / n_s
    loss_c = np.zeros(len(counts))
    gc = None
    if rgb is not None:
        dc = rgb - rgb_t[rows]
        m = 3.0 * c_counts[slot[rows]].astype(np.float64)
        loss_c = np.bincount(slot[rows], weights=(dc * dc).sum(axis=1), minlength=len(counts)) / np.maximum(3 * c_counts, 1)
        gc = 2.0 * dc / m[:, None]
    k = len(counts)
    grads = bank.backward(tape, gs / k, None if gc is None else gc / k)
    bank.step(grads, lr)
    return float(np.mean(loss_s + loss_c))


def pretrain_split(parent_net: LeafNetwork, parent_box: Aabb, arch: Optional[ArchConfig] = None,
                   seeds: Sequence[int] = tuple(range(8)), schedule: DistillSchedule = DistillSchedule(),
                   rng=None, history: Optional[list] = None) -> list[LeafNetwork]:
    """Eight children fitted to the frozen ``parent_net`` in their octants."""
    arch = parent_net.arch if arch is None else arch
    rng = np.random.default_rng(0) if rng is None else rng
    kids = [LeafNetwork(arch, seed=int(s)) for s in seeds]
    if schedule.steps == 0:
        return kids
    bank = NetworkBank(kids, [OptimizerState.zeros_like(k.params) for k in kids])
    per = schedule.batch // N_CHILDREN
    seg = np.arange(N_CHILDREN + 1, dtype=np.int64) * per
    first = None
    for step in range(schedule.steps):
        pts = np.concatenate(octant_batch(parent_box, per, rng))
        d = random_directions(len(pts), rng)
        sig_t, rgb_t = _teacher(parent_net, to_local(parent_box, pts), d)
        local = np.concatenate([to_local(octant_box(parent_box, j), pts[j * per : (j + 1) * per])
                                for j in range(N_CHILDREN)])
        loss = _fit_step(bank, local, seg, d, sig_t, rgb_t, None, schedule.rate(step), rng)
        first = loss if first is None else first
        if history is not None:
            history.append(loss)
        if not (loss <= schedule.divergence_factor * first or loss <= 1e-8):  # NaN diverges too
            raise DistillationDivergedError(step, loss, first, "split children")
    return kids


def pretrain_merge(child_nets: Sequence[Optional[LeafNetwork]], parent_box: Aabb, arch: ArchConfig,
                   seed: int = 0, schedule: DistillSchedule = DistillSchedule(), rng=None,
                   history: Optional[list] = None) -> LeafNetwork:
    """A parent fitted to its eight frozen children; ``None`` children are empty."""
    if len(child_nets) != N_CHILDREN:
        raise ValueError("merge needs all eight children")
    rng = np.random.default_rng(0) if rng is None else rng
    parent = LeafNetwork(arch, seed=seed)
    if schedule.steps == 0:
        return parent
    bank = NetworkBank([parent], [OptimizerState.zeros_like(parent.params)])
    per = schedule.batch // N_CHILDREN
    seg = np.array([0, per * N_CHILDREN], dtype=np.int64)
    live = np.repeat([net is not None for net in child_nets], per)
    rows = None if live.all() else np.flatnonzero(live)
    first = None
    for step in range(schedule.steps):
        pts = octant_batch(parent_box, per, rng)
        d = random_directions(per * N_CHILDREN, rng)
        sig_t, rgb_t = [], []
        for j, net in enumerate(child_nets):
            s, c = _teacher(net, to_local(octant_box(parent_box, j), pts[j]), d[j * per : (j + 1) * per])
            sig_t.append(s)
            rgb_t.append(c)
        x = to_local(parent_box, np.concatenate(pts))
        loss = _fit_step(bank, x, seg, d, np.concatenate(sig_t), np.concatenate(rgb_t), rows,
                         schedule.rate(step), rng)
        first = loss if first is None else first
        if history is not None:
            history.append(loss)
        if not (loss <= schedule.divergence_factor * first or loss <= 1e-8):  # NaN diverges too
            raise DistillationDivergedError(step, loss, first, "merged parent")
    return parent


def match_error(student_fn, teacher_fn, points, dirs):
    """``(mse_sigma, mse_rgb, rms_rel_sigma)`` between two field callables."""
    s1, c1 = student_fn(points, dirs)
    s0, c0 = teacher_fn(points, dirs)
    s1, s0 = np.asarray(s1, np.float64), np.asarray(s0, np.float64)
    mse_s = float(np.mean((s1 - s0) ** 2))
    mse_c = float(np.mean((np.asarray(c1, np.float64) - c0) ** 2))
    rel = float(np.sqrt(mse_s) / max(np.sqrt(np.mean(s0**2)), 1e-12))
    return mse_s, mse_c, rel


def octree_field(nets: Sequence[Optional[LeafNetwork]], box: Aabb):
    """Callable evaluating eight octant networks as one field over ``box``."""

    def field(points, dirs):
        points = np.asarray(points)
        bits = (points >= box.center).astype(np.int64)
        octs = bits[:, 0] | (bits[:, 1] << 1) | (bits[:, 2] << 2)
        sigma = np.zeros(len(points))
        rgb = np.zeros((len(points), 3))
        for j in range(N_CHILDREN):
            m = octs == j
            if m.any() and nets[j] is not None:
                s, c = _teacher(nets[j], to_local(octant_box(box, j), points[m]), dirs[m])
                sigma[m], rgb[m] = s, c
        return sigma, rgb

    return field


def single_field(net: LeafNetwork, box: Aabb):
    def field(points, dirs):
        return _teacher(net, to_local(box, points), dirs)

    return field
