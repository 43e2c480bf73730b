"""Training loop with periodic tree updates, hierarchical rendering,
image metrics and checkpoints."""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import compositing as comp
from . import distill
from . import tree_opt
from .geometry import Aabb, Camera
from .network import ArchConfig, LeafNetwork, OptimizerState, learning_rate
from .octree import NodeId, OctreeModel
from .bank import NetworkBank
from .sampling import CdfTable, DensityCache, build_cdf_table, build_density_cache, sample_rays

CHECKPOINT_VERSION = 1
METRICS_HEADER = ["epoch", "step", "loss", "psnr_db", "active_leaves", "wall_ms"]
PSNR_CAP = 99.0


class CheckpointError(ValueError):
    pass


class TrainingDivergedError(FloatingPointError):
    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass
class TrainConfig:
    epochs: int = 30
    tree_update_period: int = 5
    rays_per_batch: int = 512
    importance_samples: int = 8
    uniform_samples: int = 0
    n_per_axis: int = 16
    budget: int = 96
    lam: float = 1.0
    seed: int = 0
    weight_model: str = "surface"
    initial_level: int = 2
    max_level: int = 3
    warmup_epochs: int = 3
    deactivation_threshold: float = 0.01
    cull_threshold: float = 1e-4
    random_background: bool = True  # needs training-view alpha maps
    lr: float = 5e-4
    lr_decay: float = 0.1
    lr_every: int = 10
    distill_steps: int = 200
    distill_batch: int = 1024
    distill_lr: Optional[float] = 2e-2  # peak; None: same as lr
    render_chunk: int = 4096
    arch: ArchConfig = field(default_factory=ArchConfig)

    def __post_init__(self):
        if self.tree_update_period < 1:
            raise ValueError("tree_update_period must be >= 1")
        if self.epochs < 0 or self.rays_per_batch < 1:
            raise ValueError("epochs must be >= 0 and rays_per_batch >= 1")
        comp.WeightModel(self.weight_model)

    def to_json(self) -> dict:
        d = asdict(self)
        d["arch"] = self.arch.to_json()
        return d

    @classmethod
    def from_json(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        arch = ArchConfig.from_json(d.pop("arch")) if "arch" in d else ArchConfig()
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(arch=arch, **d)


# -- state -------------------------------------------------------------------------


@dataclass
class TrainState:
    config: TrainConfig
    model: OctreeModel
    optimizers: dict
    rng: np.random.Generator
    epoch: int = 0
    step: int = 0
    tree_log: list = field(default_factory=list)


def _new_network(config: TrainConfig, rng) -> LeafNetwork:
    return LeafNetwork(config.arch, seed=int(rng.integers(2**31)))


def init_state(bounds: Aabb, config: TrainConfig) -> TrainState:
    rng = np.random.default_rng(config.seed)
    model = OctreeModel(bounds, config.max_level)
    model.subdivide_uniform(config.initial_level)
    opts = {}
    for node in model.active_leaves():
        net = _new_network(config, rng)
        model.attach(node, net)
        opts[node] = OptimizerState.zeros_like(net.params)
    return TrainState(config, model, opts, rng)


# -- rendering core ----------------------------------------------------------------


@dataclass
class RenderPass:
    """Everything one batch forward pass keeps for its backward pass."""

    batch: object
    order: np.ndarray  # samples sorted by leaf slot
    tape: object
    sigma: np.ndarray
    rgb: np.ndarray
    visible: np.ndarray
    cache: tuple
    pixels: np.ndarray
    counts: np.ndarray


def _camera_arrays(cameras):
    dirs = np.stack([c.pixel_directions() for c in cameras])
    origins = np.stack([c.origin for c in cameras])
    forward = np.stack([c.forward for c in cameras])
    return dirs, origins, forward


def render_rays(model: OctreeModel, bank: NetworkBank, leaves, table: Optional[CdfTable], origins,
                directions, forward, group_keys, config: TrainConfig, rng=None, background=None,
                cull: Optional[float] = None) -> RenderPass:
    """Stage-2 sampling, network evaluation and compositing for a ray batch.

    ``bank`` holds the networks of ``leaves`` in slot order. ``rng`` drives
    both sample jitter and activation noise; ``None`` gives the deterministic
    evaluation path.
    """
    lo, hi = model.leaf_boxes(leaves)
    batch = sample_rays(origins, directions, forward, group_keys, table, lo, hi,
                        config.importance_samples, rng, config.uniform_samples)
    n = len(batch)
    order = np.argsort(batch.slot, kind="stable")
    slot = batch.slot[order]
    counts = np.bincount(slot, minlength=len(leaves))
    center, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
    local = (batch.positions[order] - center[slot]) / half[slot]
    seg = np.r_[0, np.cumsum(counts)].astype(np.int64)
    sig_sorted, tape = bank.forward_density(local, seg, rng)
    sigma = np.empty(n)
    sigma[order] = sig_sorted
    kind = comp.WeightModel(config.weight_model)
    threshold = config.cull_threshold if cull is None else cull
    if kind is comp.WeightModel.TOMOGRAPHY:
        threshold = 0.0  # every sample adds to the projection; nothing is occluded
    seg_pad = batch.pad(batch.seg)
    visible = batch.unpad(comp.cull_mask(batch.pad(sigma), seg_pad, threshold)) if n else np.zeros(0, bool)
    rows = np.flatnonzero(visible[order])
    rgb = np.zeros((n, 3))
    if rows.size:
        rgb[order[rows]] = bank.forward_color(tape, batch.directions[order[rows]], rows, rng)
    sigma_eff = np.where(visible, sigma, 0.0)
    cache = comp.composite_batch(batch.pad(sigma_eff), seg_pad, batch.pad(rgb), kind, background)
    return RenderPass(batch, order, tape, sigma_eff, rgb, visible, cache, cache[0], counts)


def backward_pass(rp: RenderPass, bank: NetworkBank, dpixel, config: TrainConfig, background=None):
    """Per-leaf flat parameter gradients ``(n_leaves, n_params)`` for ``dL/dpixel``."""
    b = rp.batch
    dsig_pad, dcol_pad = comp.composite_backward_batch(
        b.pad(rp.sigma), b.pad(b.seg), b.pad(rp.rgb), dpixel,
        config.weight_model, background, cache=rp.cache,
    )
    dsig = np.where(rp.visible, b.unpad(dsig_pad), 0.0)[rp.order]
    dcol = b.unpad(dcol_pad)[rp.order]
    drgb = dcol[rp.visible[rp.order]] if rp.tape.rgb is not None else None
    return bank.backward(rp.tape, dsig, drgb)


def prepare_views(model: OctreeModel, cameras, config: TrainConfig, rng=None, jitter=True):
    cache = build_density_cache(model, config.n_per_axis, rng, jitter=jitter)
    return cache, build_cdf_table(cameras, cache)


def render_view(model: OctreeModel, camera: Camera, config: TrainConfig, background=None):
    """Deterministic image and expected-depth map of one view."""
    h, w = camera.height, camera.width
    image = np.zeros((h * w, 3))
    if background is not None:
        image[:] = background
    depth = np.zeros(h * w)
    leaves = model.active_leaves()
    if not leaves:
        return image.reshape(h, w, 3), depth.reshape(h, w)
    cache, table = prepare_views(model, [camera], config, jitter=False)
    bank = NetworkBank([model.networks[n] for n in leaves])
    dirs = camera.pixel_directions()
    for a in range(0, h * w, config.render_chunk):
        ids = np.arange(a, min(a + config.render_chunk, h * w))
        o = np.broadcast_to(camera.origin, (len(ids), 3))
        fwd = np.broadcast_to(camera.forward, (len(ids), 3))
        rp = render_rays(model, bank, leaves, table, o, dirs[ids], fwd, ids * len(leaves), config,
                         background=background)
        image[ids] = rp.pixels
        wts = rp.cache[1]
        total = wts.sum(axis=1)
        zd = rp.batch.pad(rp.batch.z)
        depth[ids] = np.where(total > 0, (wts * zd).sum(axis=1) / np.where(total > 0, total, 1), 0.0)
    return image.reshape(h, w, 3), depth.reshape(h, w)


# -- metrics -----------------------------------------------------------------------


def psnr(mse: float) -> float:
    return PSNR_CAP if mse <= 0 else min(PSNR_CAP, -10.0 * float(np.log10(mse)))


def evaluate(rendered, reference):
    """``(psnr_db, ssim)`` of images in ``[0, 1]``."""
    from skimage.metrics import structural_similarity

    rendered = np.asarray(rendered, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if rendered.shape != reference.shape:
        raise ValueError(f"image shapes differ: {rendered.shape} vs {reference.shape}")
    mse = float(np.mean((rendered - reference) ** 2))
    # 11x11 Gaussian window (radius 5); shrunk to fit images smaller than that
    radius = min(5, (min(rendered.shape[:2]) - 1) // 2)
    ssim = structural_similarity(
        rendered, reference, gaussian_weights=True, sigma=1.5, truncate=(radius + 0.25) / 1.5, win_size=2 * radius + 1,
        use_sample_covariance=False, data_range=1.0, channel_axis=-1 if rendered.ndim == 3 else None,
    )
    return psnr(mse), float(ssim)


# -- training ----------------------------------------------------------------------


def _distill_schedule(config: TrainConfig) -> distill.DistillSchedule:
    return distill.DistillSchedule(config.distill_steps, config.distill_batch,
                                   config.distill_lr if config.distill_lr is not None else config.lr)


def _with_retries(fit, schedule: distill.DistillSchedule, log: list, attempts: int = 3):
    """Run ``fit(schedule)``, halving the peak rate after each divergence."""
    for k in range(attempts + 1):
        try:
            return fit(schedule)
        except distill.DistillationDivergedError as err:
            if k == attempts:
                raise
            log.append({"lr": schedule.lr, "step": err.step})
            schedule = replace(schedule, lr=0.5 * schedule.lr)


def update_tree(state: TrainState, cache: DensityCache, shares, share_slots, share_points) -> dict:
    """Statistics, exact solve, structural edits and distillation."""
    cfg, model = state.config, state.model
    stats = tree_opt.node_statistics(model, cache, shares, share_slots, share_points)
    problem = tree_opt.assemble(model, stats, cfg.budget, cfg.lam, cfg.deactivation_threshold)
    decision = tree_opt.solve(problem)
    edits = tree_opt.apply_decisions(model, decision)
    sched = _distill_schedule(cfg)
    retries = []
    for e in edits:
        if e.kind == "deactivate":
            state.optimizers.pop(e.node, None)
        elif e.kind == "merge":
            for c in e.children:
                state.optimizers.pop(c, None)
            seed = int(state.rng.integers(2**31))
            net = _with_retries(lambda sc: distill.pretrain_merge(e.networks, model.bounds(e.node), cfg.arch,
                                                                   seed=seed, schedule=sc, rng=state.rng),
                                sched, retries)
            model.attach(e.node, net)
            state.optimizers[e.node] = OptimizerState.zeros_like(net.params)
        else:
            state.optimizers.pop(e.node, None)
            seeds = state.rng.integers(2**31, size=8)
            kids = _with_retries(lambda sc: distill.pretrain_split(e.networks[0], model.bounds(e.node), cfg.arch,
                                                                    seeds, sc, state.rng),
                                 sched, retries)
            for c, net in zip(e.children, kids):
                model.attach(c, net)
                state.optimizers[c] = OptimizerState.zeros_like(net.params)
    model.check_invariants()
    return {
        "epoch": state.epoch,
        "kind": "tree_update",
        "objective": decision.objective,
        "eighths_used": decision.resources,
        "deactivated": decision.count(tree_opt.Option.DEACTIVATE),
        "merged": sum(1 for e in edits if e.kind == "merge"),
        "split": sum(1 for e in edits if e.kind == "split"),
        "active_leaves": len(model.active_leaves()),
        "distill_retries": retries,
    }


def initial_cull(state: TrainState, cache: DensityCache) -> dict:
    """Deactivate empty leaves: no stage-1 sample reaches the opacity threshold.

    The later tree updates use the mean opacity; taking the maximum here keeps
    leaves that hold only a sliver of the object.
    """
    cfg, model = state.config, state.model
    culled = []
    for k, node in enumerate(cache.leaves):
        spacing = float(model.bounds(node).extent.max()) / cache.n_per_axis
        if tree_opt.opacity(cache.sigma[k], spacing).max() < cfg.deactivation_threshold:
            model.deactivate(node)
            state.optimizers.pop(node, None)
            culled.append([node.level, node.index])
    return {"epoch": state.epoch, "kind": "initial_cull", "deactivated": len(culled),
            "nodes": culled, "active_leaves": len(model.active_leaves())}


def train_epoch(state: TrainState, dataset, collect_stats: bool = False):
    cfg, model, rng = state.config, state.model, state.rng
    cams = dataset.cameras
    targets = dataset.images.reshape(len(cams), -1, 3)
    dirs, origins, forward = _camera_arrays(cams)
    n_pix = cams[0].n_pixels
    total = len(cams) * n_pix
    background = _background(dataset, cfg)
    alphas = getattr(dataset, "alphas", None) if cfg.random_background else None
    if alphas is not None:
        alphas = alphas.reshape(len(cams), -1)
        base_bg = np.asarray(getattr(dataset, "background", (0, 0, 0)), dtype=np.float64)
    leaves = model.active_leaves()
    cache, table = prepare_views(model, cams, cfg, rng)
    bank = NetworkBank([model.networks[n] for n in leaves], [state.optimizers[n] for n in leaves])
    lr = learning_rate(state.epoch, cfg.lr, cfg.lr_decay, cfg.lr_every)
    perm = rng.permutation(total)
    steps = max(1, total // cfg.rays_per_batch)
    losses = []
    stats = ([], [], []) if collect_stats else None
    for k in range(steps):
        sel = perm[k * cfg.rays_per_batch : (k + 1) * cfg.rays_per_batch]
        view, pix = np.divmod(sel, n_pix)
        ref = targets[view, pix]
        if alphas is not None:
            # recomposite the reference over a fresh random background so that
            # density in empty space is visible whatever its color
            background = rng.random((len(sel), 3))
            ref = ref + (1.0 - alphas[view, pix])[:, None] * (background - base_bg)
        rp = render_rays(model, bank, leaves, table, origins[view], dirs[view, pix], forward[view],
                         (view * n_pix + pix) * len(leaves), cfg, rng, background)
        loss, dpix = comp.mse_loss(rp.pixels, ref)
        if not np.isfinite(loss):
            raise TrainingDivergedError(f"non-finite loss at epoch {state.epoch} step {k}")
        grads = backward_pass(rp, bank, dpix, cfg, background)
        bank.step(grads, lr, rp.counts > 0)
        losses.append(loss)
        state.step += 1
        if collect_stats and len(rp.batch):
            err = np.mean((rp.pixels - ref) ** 2, axis=1)
            shares = tree_opt.error_shares(rp.cache[1], err)
            stats[0].append(rp.batch.unpad(shares))
            stats[1].append(rp.batch.slot)
            stats[2].append(rp.batch.positions)
    state.epoch += 1
    if collect_stats:
        stats = tuple(np.concatenate(s) if s else np.zeros(0) for s in stats)
    return float(np.mean(losses)), stats


def _background(dataset, cfg):
    bg = np.asarray(getattr(dataset, "background", (0, 0, 0)), dtype=np.float64)
    return bg if np.any(bg != 0) else None


def _wants_update(epoch_done: int, cfg: TrainConfig) -> bool:
    return epoch_done % cfg.tree_update_period == 0 and epoch_done < cfg.epochs


def train(dataset, config: TrainConfig, state: Optional[TrainState] = None, metrics_path=None,
          record_wall_time: bool = True, on_epoch=None) -> TrainState:
    """Run epochs until ``config.epochs`` have completed.

    Writes one metrics row per epoch to ``metrics_path`` when given.
    """
    state = init_state(dataset.bounds, config) if state is None else state
    state.config = config
    writer = None
    if metrics_path is not None:
        fresh = state.epoch == 0 or not Path(metrics_path).exists()
        fh = open(metrics_path, "w" if fresh else "a", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        if fresh:
            writer.writerow(METRICS_HEADER)
    last_good = None
    try:
        while state.epoch < config.epochs:
            if not state.model.active_leaves():
                break
            t0 = time.perf_counter()
            upcoming = state.epoch + 1
            try:
                loss, stats = train_epoch(state, dataset, collect_stats=_wants_update(upcoming, config))
            except (TrainingDivergedError, FloatingPointError) as err:
                raise TrainingDivergedError(str(err), last_good) from err
            if upcoming == config.warmup_epochs and upcoming < config.epochs:
                cache = build_density_cache(state.model, config.n_per_axis, state.rng)
                state.tree_log.append(initial_cull(state, cache))
            if _wants_update(upcoming, config):
                cache = build_density_cache(state.model, config.n_per_axis, state.rng)
                state.tree_log.append(update_tree(state, cache, *stats))
            wall = (time.perf_counter() - t0) * 1000.0 if record_wall_time else 0.0
            row = [state.epoch, state.step, repr(loss), repr(psnr(loss)), len(state.model.active_leaves()),
                   f"{wall:.0f}"]
            if writer is not None:
                writer.writerow(row)
                fh.flush()
            if on_epoch is not None:
                on_epoch(state, row)
            last_good = checkpoint_dict(state)
    finally:
        if writer is not None:
            fh.close()
    return state


# -- checkpoints -------------------------------------------------------------------


def _floats(a) -> list:
    return np.asarray(a, dtype=np.float64).reshape(-1).tolist()


def checkpoint_dict(state: TrainState) -> dict:
    m = state.model
    nets, opts = [], []
    for node in m.active_leaves():
        net = m.networks[node]
        nets.append({"node": [node.level, node.index], "arch": net.arch.to_json(),
                     "dtype": net.dtype.name, "params": _floats(net.params)})
        o = state.optimizers.get(node)
        if o is not None:
            opts.append({"node": [node.level, node.index], "step": o.step, "m": _floats(o.m), "v": _floats(o.v)})
    rng_state = state.rng.bit_generator.state
    return {
        "version": CHECKPOINT_VERSION,
        "config": state.config.to_json(),
        "tree": {"root_bounds": m.root_bounds.to_json(), "max_level": m.max_level, "nodes": m.dump()},
        "networks": nets,
        "optimizer": opts,
        "epoch": state.epoch,
        "step": state.step,
        "rng": {"bit_generator": rng_state["bit_generator"], "state": rng_state["state"],
                "has_uint32": rng_state["has_uint32"], "uinteger": rng_state["uinteger"]},
        "tree_log": state.tree_log,
    }


def state_from_dict(d: dict) -> TrainState:
    if not isinstance(d, dict) or d.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {d.get('version') if isinstance(d, dict) else None}")
    try:
        config = TrainConfig.from_json(d["config"])
        tree = d["tree"]
        model = OctreeModel.from_dump(tree["nodes"], Aabb.from_json(tree["root_bounds"]), tree["max_level"])
        for e in d["networks"]:
            node = NodeId(*e["node"])
            net = LeafNetwork(ArchConfig.from_json(e["arch"]), dtype=np.dtype(e["dtype"]),
                              params=np.array(e["params"], dtype=np.float64))
            model.attach(node, net)
        model.check_invariants()
        opts = {}
        for e in d["optimizer"]:
            node = NodeId(*e["node"])
            dtype = model.networks[node].dtype
            opts[node] = OptimizerState(np.array(e["m"], dtype=np.float64).astype(dtype),
                                        np.array(e["v"], dtype=np.float64).astype(dtype), int(e["step"]))
        rng = np.random.Generator(np.random.PCG64())
        rng.bit_generator.state = dict(d["rng"])
        return TrainState(config, model, opts, rng, int(d["epoch"]), int(d["step"]), list(d.get("tree_log", [])))
    except CheckpointError:
        raise
    except (KeyError, TypeError, ValueError) as err:
        raise CheckpointError(f"corrupt checkpoint: {err}") from err


def save_checkpoint(path, state: TrainState, meta: Optional[dict] = None) -> None:
    """Atomic JSON write; ``meta`` is stored alongside and ignored on load."""
    d = checkpoint_dict(state)
    if meta:
        d["meta"] = meta
    text = json.dumps(d, separators=(",", ":"))
    tmp = Path(str(path) + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def load_checkpoint(path, with_meta: bool = False):
    try:
        d = json.loads(Path(path).read_text())
    except (json.JSONDecodeError, UnicodeDecodeError) as err:
        raise CheckpointError(f"corrupt checkpoint {path}: {err}") from err
    state = state_from_dict(d)
    return (state, dict(d.get("meta") or {})) if with_meta else state
