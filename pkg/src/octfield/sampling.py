"""Two-step sampling: stratified node grids, then per-ray importance samples.

Stage 1 evaluates every active leaf's density on a jittered ``n^3`` grid once
per epoch. Each training view projects those points onto its pixels; the
points landing on one pixel inside one leaf form a depth-ordered group whose
accumulated ``sigma * s`` defines a piecewise-linear CDF. Stage 2 draws a
few depths per (ray, leaf) interval from that CDF by inverse transform.

All samples of a batch are ordered with one sort on the key
``ray_id * z_max + z``, which is equivalent to sorting every ray separately.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .geometry import Aabb, Camera, intersect_boxes, project_points
from .octree import NodeId


@dataclass
class SampleRecord:
    position: np.ndarray
    node: NodeId
    ray_id: int
    z_s: float
    seg: float = 0.0
    sigma: float = 0.0
    color: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if self.z_s < 0 or self.seg < 0:
            raise ValueError("sample depth and segment weight must be >= 0")


@dataclass
class RayGroup:
    """Samples of one ray in ascending depth; trailing padding is neutral."""

    ray_id: int
    depths: np.ndarray
    sigma: np.ndarray
    seg: np.ndarray
    color: np.ndarray
    nodes: list = field(default_factory=list)
    pad_count: int = 0

    def __len__(self) -> int:
        return len(self.depths)

    def subset(self, keep) -> "RayGroup":
        keep = np.asarray(keep, dtype=bool)
        nodes = [n for n, k in zip(self.nodes, keep) if k] if self.nodes else []
        return RayGroup(
            self.ray_id,
            self.depths[keep],
            self.sigma[keep],
            self.seg[keep],
            self.color[keep],
            nodes,
            0,
        )

    def padded(self, length: int) -> "RayGroup":
        extra = length - len(self)
        if extra < 0:
            raise ValueError("group longer than the padded length")
        last = self.depths[-1] if len(self) else 0.0
        return RayGroup(
            self.ray_id,
            np.concatenate([self.depths, np.full(extra, last)]),
            np.concatenate([self.sigma, np.zeros(extra, self.sigma.dtype)]),
            np.concatenate([self.seg, np.zeros(extra, self.seg.dtype)]),
            np.concatenate([self.color, np.zeros((extra, 3), self.color.dtype)]),
            list(self.nodes) + [None] * extra,
            self.pad_count + extra,
        )


@dataclass
class DensityCdf:
    """Knots ``(z, cdf)`` of a piecewise-linear CDF over one ray interval.

    The CDF is 0 at ``z_enter`` and linear between consecutive knots.
    """

    z: np.ndarray
    cdf: np.ndarray
    z_enter: float
    z_exit: float
    zero_mass: bool = False


# -- stage 1 -------------------------------------------------------------------


def stratified_node_samples(box: Aabb, n_per_axis: int, jitter: bool = False, rng=None):
    """One point per cell of an ``n^3`` lattice over ``box`` (x fastest)."""
    if n_per_axis < 1:
        raise ValueError("n_per_axis must be >= 1")
    n = n_per_axis
    grid = np.stack(np.meshgrid(*(np.arange(n),) * 3, indexing="ij"), axis=-1)
    cells = grid.reshape(-1, 3)[:, ::-1].astype(np.float64)  # x varies fastest
    if jitter:
        rng = np.random.default_rng() if rng is None else rng
        offs = rng.random(cells.shape)
    else:
        offs = 0.5
    return box.min + (cells + offs) * (box.extent / n)


@dataclass
class DensityCache:
    """Stage-1 densities of every active leaf for one epoch."""

    leaves: list
    boxes_min: np.ndarray
    boxes_max: np.ndarray
    points: np.ndarray  # (L, n^3, 3) world positions
    sigma: np.ndarray  # (L, n^3)
    n_per_axis: int
    evaluations: int = 0

    @property
    def n_leaves(self) -> int:
        return len(self.leaves)


def build_density_cache(model, n_per_axis: int, rng=None, jitter: bool = True) -> DensityCache:
    """Evaluate each active leaf's density on its stratified grid, once."""
    leaves = model.active_leaves()
    lo, hi = model.leaf_boxes(leaves)
    m = n_per_axis**3
    points = np.zeros((len(leaves), m, 3))
    sigma = np.zeros((len(leaves), m))
    evaluations = 0
    for k, node in enumerate(leaves):
        box = model.bounds(node)
        pts = stratified_node_samples(box, n_per_axis, jitter and rng is not None, rng)
        points[k] = pts
        net = model.networks.get(node)
        if net is not None:
            s, _, _ = net.forward_density(model.to_local(node, pts))
            sigma[k] = s
            evaluations += m
    return DensityCache(leaves, lo, hi, points, sigma, n_per_axis, evaluations)


# -- ordering --------------------------------------------------------------------


def global_sort_key(ray_id, z_s, z_max):
    ray_id = np.asarray(ray_id, dtype=np.float64)
    z_s = np.asarray(z_s, dtype=np.float64)
    if np.any(z_s >= z_max) or np.any(z_s < 0):
        raise ValueError("sort key requires 0 <= z_s < z_max")
    key = ray_id * z_max + z_s
    return key if key.ndim else float(key)


def sort_order(ray_ids, z_s, z_max=None) -> np.ndarray:
    """Stable permutation ordering samples by ray, then depth.

    Gives the order of the global key ``ray_id * z_max + z_s`` (validated
    against ``z_max``), but sorts the (ray, depth) pair lexicographically so
    that large ray ids cannot round nearby depths onto one key. Equal keys
    keep their input order.
    """
    z_s = np.asarray(z_s, dtype=np.float64)
    if z_max is not None and z_s.size and (z_s.max() >= z_max or z_s.min() < 0):
        raise ValueError("sort key requires 0 <= z_s < z_max")
    if z_s.size and z_s.min() < 0:
        raise ValueError("sample depths must be >= 0")
    return np.lexsort((z_s, np.asarray(ray_ids)))


def sort_and_group(samples: Sequence[SampleRecord], z_max=None) -> list[RayGroup]:
    """Group records by ray with ascending depth, padded to a common length."""
    if not samples:
        return []
    ray = np.array([s.ray_id for s in samples])
    z = np.array([s.z_s for s in samples], dtype=np.float64)
    order = sort_order(ray, z, z_max)
    ray_sorted = ray[order]
    starts = np.flatnonzero(np.r_[True, ray_sorted[1:] != ray_sorted[:-1]])
    ends = np.r_[starts[1:], len(order)]
    longest = int((ends - starts).max())
    groups = []
    for a, b in zip(starts, ends):
        recs = [samples[i] for i in order[a:b]]
        g = RayGroup(
            int(ray_sorted[a]),
            np.array([r.z_s for r in recs]),
            np.array([r.sigma for r in recs], dtype=np.float64),
            np.array([r.seg for r in recs], dtype=np.float64),
            np.array([r.color for r in recs], dtype=np.float64).reshape(-1, 3),
            [r.node for r in recs],
        )
        groups.append(g.padded(longest))
    return groups


def segment_weights(t, nodes, t_exit) -> np.ndarray:
    """Per-node segment lengths along one sorted ray.

    ``s_i`` is the distance to the next sample of the same node; the last
    sample of each node run extends to that node's exit ``t_exit``.
    """
    t = np.asarray(t, dtype=np.float64)
    nodes = np.asarray(nodes)
    t_exit = np.asarray(t_exit, dtype=np.float64)
    s = t_exit - t
    if t.size > 1:
        same = nodes[1:] == nodes[:-1]
        s[:-1] = np.where(same, t[1:] - t[:-1], s[:-1])
    return np.maximum(s, 0.0)


def segment_weights_batch(ray, slot, t, t_exit) -> np.ndarray:
    """:func:`segment_weights` over many rays sorted by ``(ray, t)``."""
    s = t_exit - t
    if t.size > 1:
        same = (ray[1:] == ray[:-1]) & (slot[1:] == slot[:-1])
        s[:-1] = np.where(same, t[1:] - t[:-1], s[:-1])
    return np.maximum(s, 0.0)


# -- per-group CDF ---------------------------------------------------------------


def build_cdf(sigma, depths, s, z_enter: Optional[float] = None, z_exit=None) -> DensityCdf:
    """CDF with knot masses ``sigma_i * s_i`` over a sorted group."""
    depths = np.asarray(depths, dtype=np.float64)
    mass = np.maximum(np.asarray(sigma, dtype=np.float64) * np.asarray(s, dtype=np.float64), 0)
    z_enter = float(depths[0]) if z_enter is None else float(z_enter)
    z_exit = float(depths[-1] + np.asarray(s)[-1]) if z_exit is None else float(z_exit)
    cum = np.cumsum(mass)
    total = cum[-1] if cum.size else 0.0
    if total <= 0:
        return DensityCdf(depths, np.zeros_like(depths), z_enter, z_exit, True)
    return DensityCdf(depths, cum / total, z_enter, z_exit, False)


def stratified_uniforms(n: int, rng=None, count: int = 1) -> np.ndarray:
    """``(count, n)`` values ``(k + xi) / n``; ``xi = 0.5`` without ``rng``."""
    k = np.arange(n, dtype=np.float64)
    xi = 0.5 if rng is None else rng.random((count, n))
    return np.broadcast_to((k + xi) / n, (count, n))


def invert_cdf(z, cdf, z_enter, z_exit, u) -> np.ndarray:
    """Inverse transform of one CDF at uniforms ``u``."""
    z = np.clip(np.asarray(z, dtype=np.float64), z_enter, z_exit)
    cdf = np.asarray(cdf, dtype=np.float64)
    kz = np.r_[z_enter, z]
    kc = np.r_[0.0, cdf]
    j = np.clip(np.searchsorted(kc, u, side="left"), 1, len(kc) - 1)
    c_lo, c_hi = kc[j - 1], kc[j]
    z_lo, z_hi = kz[j - 1], kz[j]
    span = c_hi - c_lo
    frac = np.where(span > 0, (u - c_lo) / np.where(span > 0, span, 1.0), 1.0)
    return z_lo + (z_hi - z_lo) * frac


def importance_sample(cdf: DensityCdf, n: int, rng=None) -> np.ndarray:
    if n < 1:
        raise ValueError("need n >= 1")
    u = stratified_uniforms(n, rng)[0]
    if cdf.zero_mass:
        return cdf.z_enter + (cdf.z_exit - cdf.z_enter) * u
    return invert_cdf(cdf.z, cdf.cdf, cdf.z_enter, cdf.z_exit, u)


# -- batched pipeline ------------------------------------------------------------


@dataclass
class CdfTable:
    """Per-(view, pixel, leaf) CDF groups in compressed rows.

    ``keys`` are sorted ``(view * n_pixels + pixel) * n_leaves + slot``;
    group ``g`` owns knots ``offsets[g]:offsets[g + 1]``.
    """

    keys: np.ndarray
    offsets: np.ndarray
    z: np.ndarray
    cdf: np.ndarray
    zero: np.ndarray
    n_leaves: int
    stride: int  # pixels per view
    lifted: np.ndarray = None  # cdf + 2 * group, globally sorted

    def __post_init__(self):
        group = np.repeat(np.arange(len(self.keys)), np.diff(self.offsets))
        self.lifted = self.cdf + 2.0 * group

    def lookup(self, keys) -> np.ndarray:
        """Group index per key, ``-1`` when absent or massless."""
        if len(self.keys) == 0:
            return np.full(np.shape(keys), -1, dtype=np.int64)
        idx = np.minimum(np.searchsorted(self.keys, keys), len(self.keys) - 1)
        ok = (self.keys[idx] == keys) & ~self.zero[idx]
        return np.where(ok, idx, -1)


def _view_groups(camera: Camera, cache: DensityCache, view: int):
    pts = cache.points.reshape(-1, 3)
    sig = cache.sigma.reshape(-1)
    per_leaf = cache.points.shape[1]
    slot = np.repeat(np.arange(cache.n_leaves), per_leaf)
    row, col, depth, valid = project_points(camera, pts)
    pixel = row[valid] * camera.width + col[valid]
    slot, depth, sig = slot[valid], depth[valid], sig[valid]
    key = (view * camera.n_pixels + pixel) * cache.n_leaves + slot
    order = np.lexsort((depth, key))
    return key[order], depth[order], sig[order], pixel[order], slot[order]


def build_cdf_table(cameras: Sequence[Camera], cache: DensityCache) -> CdfTable:
    """Project stage-1 points into every view and build the per-pixel CDFs."""
    n_leaves = cache.n_leaves
    stride = cameras[0].n_pixels if cameras else 0
    parts = []
    for v, cam in enumerate(cameras):
        if cam.n_pixels != stride:
            raise ValueError("all views must share one resolution")
        key, depth, sig, pixel, slot = _view_groups(cam, cache, v)
        if key.size == 0:
            continue
        starts = np.flatnonzero(np.r_[True, key[1:] != key[:-1]])
        gkey = key[starts]
        gpix, gslot = pixel[starts], slot[starts]
        # exit depth of each group's leaf along its pixel ray
        dirs = cam.pixel_directions(gpix)
        cos = dirs @ cam.forward
        o = cam.origin[None]
        t1 = np.empty(len(gkey))
        for s in np.unique(gslot):
            m = gslot == s
            _, te, _ = intersect_boxes(o, dirs[m], cache.boxes_min[s : s + 1], cache.boxes_max[s : s + 1])
            t1[m] = te[:, 0]
        z_exit = np.maximum(t1 * cos, 0.0)
        group = np.repeat(np.arange(len(starts)), np.diff(np.r_[starts, key.size]))
        nxt = np.r_[depth[1:], 0.0]
        last = np.r_[key[1:] != key[:-1], True]
        seg = np.where(last, z_exit[group] - depth, nxt - depth)
        mass = sig * np.maximum(seg, 0.0)
        cum = np.cumsum(mass)
        base = np.r_[0.0, cum][starts]
        cum = cum - base[group]
        total = cum[np.r_[starts[1:], key.size] - 1]
        zero = ~(total > 0)
        cdf = cum / np.where(zero, 1.0, total)[group]
        cdf[last] = 1.0  # exact normalization at the final knot
        parts.append((gkey, starts, depth, cdf, zero))
    if not parts:
        empty = np.zeros(0)
        return CdfTable(np.zeros(0, np.int64), np.zeros(1, np.int64), empty, empty, np.zeros(0, bool), n_leaves, stride)
    keys = np.concatenate([p[0] for p in parts])
    sizes = np.concatenate([np.diff(np.r_[p[1], len(p[2])]) for p in parts])
    offsets = np.r_[0, np.cumsum(sizes)]
    z = np.concatenate([p[2] for p in parts])
    cdf = np.concatenate([p[3] for p in parts])
    zero = np.concatenate([p[4] for p in parts])
    return CdfTable(keys, offsets, z, cdf, zero, n_leaves, stride)


@dataclass
class SampleBatch:
    """Sorted stage-2 samples of a ray batch.

    Samples are ordered by ``(ray, depth)``; ``column`` is the position of
    each sample within its ray, used to scatter into padded arrays.
    """

    n_rays: int
    ray: np.ndarray
    slot: np.ndarray
    t: np.ndarray
    z: np.ndarray
    seg: np.ndarray
    positions: np.ndarray
    directions: np.ndarray
    column: np.ndarray
    width: int

    def __len__(self) -> int:
        return len(self.ray)

    def pad(self, values, fill=0.0) -> np.ndarray:
        values = np.asarray(values)
        out = np.full((self.n_rays, self.width) + values.shape[1:], fill, dtype=values.dtype)
        out[self.ray, self.column] = values
        return out

    def unpad(self, padded) -> np.ndarray:
        return padded[self.ray, self.column]


def sample_rays(
    origins,
    directions,
    forward,
    group_keys,
    table: Optional[CdfTable],
    boxes_min,
    boxes_max,
    n_importance: int,
    rng=None,
    n_uniform: int = 0,
) -> SampleBatch:
    """Stage-2 samples for a batch of rays.

    ``forward`` holds the viewing axis of each ray's camera (for depth) and
    ``group_keys`` the per-ray ``(view * n_pixels + pixel) * n_leaves`` base.
    ``rng=None`` selects deterministic mid-stratum uniforms.
    """
    origins = np.asarray(origins, dtype=np.float64)
    directions = np.asarray(directions, dtype=np.float64)
    n_rays = len(origins)
    t0, t1, hit = intersect_boxes(origins, directions, boxes_min, boxes_max)
    hit &= t1 > t0
    ray, slot = np.nonzero(hit)
    if ray.size == 0:
        empty = np.zeros(0)
        ei = np.zeros(0, np.int64)
        return SampleBatch(n_rays, ei, ei, empty, empty, empty, np.zeros((0, 3)), np.zeros((0, 3)), ei, 0)
    te, tx = t0[ray, slot], t1[ray, slot]
    cos = np.einsum("ij,ij->i", directions, forward)[ray]
    ze, zx = te * cos, tx * cos
    n_pairs = ray.size

    ts = []
    if n_importance > 0:
        u = stratified_uniforms(n_importance, rng, n_pairs)
        z = ze[:, None] + (zx - ze)[:, None] * u  # uniform fallback
        g = (
            table.lookup(np.asarray(group_keys)[ray] + slot)
            if table is not None
            else np.full(n_pairs, -1)
        )
        found = g >= 0
        if found.any():
            gf = g[found]
            uf = u[found]
            start = table.offsets[gf][:, None]
            end = table.offsets[gf + 1][:, None]
            j = np.searchsorted(table.lifted, uf + 2.0 * gf[:, None], side="left")
            j = np.clip(j, start, end - 1)
            first = j == start
            c_hi = table.cdf[j]
            c_lo = np.where(first, 0.0, table.cdf[np.maximum(j - 1, 0)])
            lo, hi = ze[found][:, None], zx[found][:, None]
            z_hi = np.clip(table.z[j], lo, hi)
            z_lo = np.where(first, lo, np.clip(table.z[np.maximum(j - 1, 0)], lo, hi))
            span = c_hi - c_lo
            frac = np.where(span > 0, (uf - c_lo) / np.where(span > 0, span, 1.0), 1.0)
            z[found] = z_lo + (z_hi - z_lo) * frac
        ts.append(z / cos[:, None])
    if n_uniform > 0:
        u = stratified_uniforms(n_uniform, rng, n_pairs)
        ts.append(te[:, None] + (tx - te)[:, None] * u)
    t = np.clip(np.concatenate(ts, axis=1), te[:, None], tx[:, None])
    per = t.shape[1]
    s_ray = np.repeat(ray, per)
    s_slot = np.repeat(slot, per)
    s_exit = np.repeat(tx, per)
    s_cos = np.repeat(cos, per)
    t = t.reshape(-1)
    z = t * s_cos
    z_max = 1.001 * float(z.max()) + 1e-9
    order = sort_order(s_ray, z, z_max)
    s_ray, s_slot, t, z, s_exit = s_ray[order], s_slot[order], t[order], z[order], s_exit[order]
    seg = segment_weights_batch(s_ray, s_slot, t, s_exit)
    counts = np.bincount(s_ray, minlength=n_rays)
    starts = np.r_[0, np.cumsum(counts)[:-1]]
    column = np.arange(len(s_ray)) - starts[s_ray]
    dirs = directions[s_ray]
    pos = origins[s_ray] + t[:, None] * dirs
    return SampleBatch(n_rays, s_ray, s_slot, t, z, seg, pos, dirs, column, int(counts.max()))
