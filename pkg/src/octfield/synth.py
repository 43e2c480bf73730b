"""Analytic scenes, a dense ray-marching reference renderer and dataset files.

The reference renderer depends on :mod:`geometry` only, so agreement with
the learned pipeline is independent evidence rather than a shared bug.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .geometry import Aabb, Camera, generate_rays, intersect_boxes, load_cameras, look_at, save_cameras
from .images import read_ppm, write_pgm16, write_ppm

SHAPES = ("sphere", "box", "blob")
LAYOUTS = ("orbit", "grid", "sparse-uav")


@dataclass
class Primitive:
    """One density primitive.

    ``params``: sphere ``center, radius``; box ``min, max``; blob ``center,
    scale`` (isotropic Gaussian, ``sigma * exp(-|x - c|^2 / (2 scale^2))``).
    Optional ``stripes`` ``[amplitude, frequency]`` modulates the color
    along ``x + y + z``; ``view_tint`` adds a direction-dependent term.
    """

    shape: str
    params: dict
    sigma: float
    color: tuple
    stripes: Optional[tuple] = None
    view_tint: float = 0.0

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}")
        if self.sigma < 0:
            raise ValueError("primitive density must be >= 0")

    def density(self, x) -> np.ndarray:
        p = self.params
        if self.shape == "sphere":
            r2 = np.sum((x - np.asarray(p["center"])) ** 2, axis=-1)
            return np.where(r2 <= p["radius"] ** 2, self.sigma, 0.0)
        if self.shape == "box":
            inside = np.all((x >= np.asarray(p["min"])) & (x <= np.asarray(p["max"])), axis=-1)
            return np.where(inside, self.sigma, 0.0)
        r2 = np.sum((x - np.asarray(p["center"])) ** 2, axis=-1)
        return self.sigma * np.exp(-0.5 * r2 / p["scale"] ** 2)

    def colour_at(self, x, d=None) -> np.ndarray:
        c = np.broadcast_to(np.asarray(self.color, dtype=np.float64), x.shape).copy()
        if self.stripes is not None:
            amp, freq = self.stripes
            c *= (1.0 - amp) + amp * 0.5 * (1.0 + np.sin(freq * x.sum(axis=-1)))[..., None]
        if self.view_tint and d is not None:
            c += self.view_tint * d[..., 2:3]
        return np.clip(c, 0.0, 1.0)

    def to_json(self) -> dict:
        d = {"shape": self.shape, "params": self.params, "sigma": self.sigma, "color": list(self.color)}
        if self.stripes is not None:
            d["stripes"] = list(self.stripes)
        if self.view_tint:
            d["view_tint"] = self.view_tint
        return d

    @classmethod
    def from_json(cls, d: dict) -> "Primitive":
        stripes = d.get("stripes")
        return cls(
            d["shape"],
            d["params"],
            float(d["sigma"]),
            tuple(d["color"]),
            None if stripes is None else tuple(stripes),
            float(d.get("view_tint", 0.0)),
        )


@dataclass
class AnalyticScene:
    primitives: list
    bounds: Aabb = field(default_factory=lambda: Aabb(-np.ones(3), np.ones(3)))
    background: tuple = (0.0, 0.0, 0.0)

    def to_json(self) -> dict:
        return {
            "bounds": self.bounds.to_json(),
            "primitives": [p.to_json() for p in self.primitives],
            "background": list(self.background),
        }

    @classmethod
    def from_json(cls, d: dict) -> "AnalyticScene":
        return cls(
            [Primitive.from_json(p) for p in d["primitives"]],
            Aabb.from_json(d["bounds"]),
            tuple(d.get("background", (0.0, 0.0, 0.0))),
        )


def eval_field(scene: AnalyticScene, x, d=None):
    """Max-blend of primitive densities; color of the dominating primitive."""
    x = np.asarray(x, dtype=np.float64)
    sigma = np.zeros(x.shape[:-1])
    color = np.zeros(x.shape)
    for prim in scene.primitives:
        s = prim.density(x)
        win = s > sigma
        if win.any():
            sigma = np.where(win, s, sigma)
            color = np.where(win[..., None], prim.colour_at(x, d), color)
    return sigma, color


def oracle_render(scene: AnalyticScene, camera: Camera, steps: int = 512, chunk: int = 1 << 20,
                  with_alpha: bool = False):
    """Uniform midpoint marching through the scene bounds.

    With ``with_alpha`` also returns the per-pixel opacity ``1 - T``.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    rays = generate_rays(camera)
    n = len(rays)
    image = np.zeros((n, 3))
    alpha = np.zeros(n)
    bg = np.asarray(scene.background, dtype=np.float64)
    t0, t1, hit = intersect_boxes(rays.origins, rays.directions, scene.bounds.min[None], scene.bounds.max[None])
    t0, t1, hit = t0[:, 0], t1[:, 0], hit[:, 0] & (t1[:, 0] > t0[:, 0])
    image[:] = bg
    idx = np.flatnonzero(hit)
    per = max(1, chunk // steps)
    mid = (np.arange(steps) + 0.5) / steps
    for a in range(0, len(idx), per):
        sel = idx[a : a + per]
        h = (t1[sel] - t0[sel]) / steps
        t = t0[sel, None] + (t1[sel] - t0[sel])[:, None] * mid
        d = rays.directions[sel]
        pts = rays.origins[sel, None, :] + t[..., None] * d[:, None, :]
        sigma, color = eval_field(scene, pts, np.broadcast_to(d[:, None, :], pts.shape))
        tau = sigma * h[:, None]
        acc = np.cumsum(tau, axis=1)
        trans = np.exp(-(acc - tau))
        w = trans * -np.expm1(-tau)
        image[sel] = np.einsum("rs,rsc->rc", w, color) + np.exp(-acc[:, -1])[:, None] * bg
        alpha[sel] = -np.expm1(-acc[:, -1])
    image = image.reshape(camera.height, camera.width, 3)
    if with_alpha:
        return image, alpha.reshape(camera.height, camera.width)
    return image


# -- built-in scenes -------------------------------------------------------------


def make_scene(name: str) -> AnalyticScene:
    if name == "sphere":
        prims = [Primitive("sphere", {"center": [0.0, 0.0, 0.0], "radius": 0.6}, 3.0, (0.9, 0.55, 0.25))]
    elif name == "fruitbowl":
        spec = [
            ([0.0, 0.0, -0.1], 0.28, (0.85, 0.3, 0.2), 9.0),
            ([0.42, 0.15, 0.05], 0.18, (0.95, 0.8, 0.2), 13.0),
            ([-0.35, 0.3, 0.0], 0.2, (0.3, 0.75, 0.3), 11.0),
            ([0.1, -0.45, 0.1], 0.17, (0.55, 0.3, 0.8), 15.0),
            ([-0.2, -0.2, 0.35], 0.15, (0.25, 0.6, 0.9), 17.0),
        ]
        prims = [
            Primitive("blob", {"center": c, "scale": s}, 40.0, col, stripes=(0.5, f))
            for c, s, col, f in spec
        ]
    elif name == "terrain":
        prims = [
            Primitive(
                "box",
                {"min": [-1.0, -1.0, -0.85], "max": [1.0, 1.0, -0.7]},
                20.0,
                (0.45, 0.7, 0.35),
                stripes=(0.4, 6.0),
            )
        ]
    else:
        raise ValueError(f"unknown scene {name!r}; choose sphere, fruitbowl or terrain")
    return AnalyticScene(prims)


def _orbit(n, radius, rng, phase=0.0, elevations=(0.3, 0.55)):
    poses = []
    jitter = rng.uniform(-0.1, 0.1, n) * (2 * np.pi / max(n, 1))
    for k in range(n):
        az = 2 * np.pi * k / n + phase + jitter[k]
        el = elevations[k % len(elevations)]
        eye = radius * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        poses.append(look_at(eye, np.zeros(3)))
    return poses


def camera_layout(layout: str, n_views: int, rng, held_out: bool = False):
    if n_views < 1:
        raise ValueError("n_views must be >= 1")
    if layout == "orbit":
        if held_out:
            return _orbit(n_views, 4.0, rng, phase=np.pi / n_views, elevations=(0.42,))
        return _orbit(n_views, 4.0, rng)
    if layout == "grid":
        side = int(np.ceil(np.sqrt(n_views)))
        xs = np.linspace(-0.8, 0.8, side) + (0.8 / side if held_out else 0.0)
        poses = []
        for k in range(n_views):
            x, y = xs[k % side], xs[k // side]
            poses.append(look_at([x, y, 4.0], [0.3 * x, 0.3 * y, 0.0], up=(0.0, 1.0, 0.0)))
        return poses
    if layout == "sparse-uav":
        phase = np.pi / n_views if held_out else 0.0
        poses = []
        for k in range(n_views):
            az = 2 * np.pi * k / n_views + phase + rng.uniform(-0.05, 0.05)
            eye = np.array([2.5 * np.cos(az), 2.5 * np.sin(az), 6.0])
            poses.append(look_at(eye, [0.0, 0.0, -0.8]))
        return poses
    raise ValueError(f"unknown layout {layout!r}")


def make_dataset(
    scene: AnalyticScene,
    n_views: int,
    layout: str,
    resolution=(64, 64),
    seed: int = 0,
    out=None,
    n_test: int = 4,
    steps: int = 512,
):
    """Render training and held-out views and write them under ``out``."""
    out = Path(out)
    rng = np.random.default_rng(seed)
    width, height = resolution
    focal = 1.375 * width if layout != "sparse-uav" else 2.0 * width
    splits = {"": camera_layout(layout, n_views, rng), "test_": camera_layout(layout, n_test, rng, True)}
    for prefix, poses in splits.items():
        cams = [Camera(p, focal, width, height) for p in poses]
        img_dir = out / f"{prefix}images"
        alpha_dir = out / f"{prefix}alpha"
        img_dir.mkdir(parents=True, exist_ok=True)
        alpha_dir.mkdir(exist_ok=True)
        save_cameras(out / f"{prefix}cameras.json", cams)
        for k, cam in enumerate(cams):
            img, alpha = oracle_render(scene, cam, steps, with_alpha=True)
            write_ppm(img_dir / f"{k:03d}.ppm", img)
            write_pgm16(alpha_dir / f"{k:03d}.pgm", alpha)
    (out / "scene.json").write_text(json.dumps(scene.to_json(), indent=1))
    return load_dataset(out)


@dataclass
class SceneDataset:
    cameras: list
    images: np.ndarray
    test_cameras: list
    test_images: np.ndarray
    bounds: Aabb
    background: tuple = (0.0, 0.0, 0.0)
    scene: Optional[AnalyticScene] = None
    alphas: Optional[np.ndarray] = None  # training-view opacity, when present


def _load_split(root: Path, prefix: str):
    path = root / f"{prefix}cameras.json"
    if not path.exists():
        return [], np.zeros((0, 1, 1, 3))
    cams = load_cameras(path)
    imgs = [read_ppm(root / f"{prefix}images" / f"{k:03d}.ppm") for k in range(len(cams))]
    return cams, np.stack(imgs) if imgs else np.zeros((0, 1, 1, 3))


def _load_alphas(root: Path, n: int):
    paths = [root / "alpha" / f"{k:03d}.pgm" for k in range(n)]
    if not n or not all(p.exists() for p in paths):
        return None
    return np.stack([read_ppm(p) for p in paths])


def load_dataset(root) -> SceneDataset:
    root = Path(root)
    cams, imgs = _load_split(root, "")
    if not cams:
        raise FileNotFoundError(f"no cameras.json under {root}")
    alphas = _load_alphas(root, len(cams))
    test_cams, test_imgs = _load_split(root, "test_")
    scene = None
    bounds = Aabb(-np.ones(3), np.ones(3))
    background = (0.0, 0.0, 0.0)
    if (root / "scene.json").exists():
        scene = AnalyticScene.from_json(json.loads((root / "scene.json").read_text()))
        bounds, background = scene.bounds, scene.background
    return SceneDataset(cams, imgs, test_cams, test_imgs, bounds, background, scene, alphas)
