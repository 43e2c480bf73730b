"""Image formation as a weighted sum of sample colors.

Two weight models are supported: front-to-back surface compositing,
``w_i = T_i (1 - exp(-sigma_i s_i))`` with ``T_i = exp(-sum_{j<i} sigma_j s_j)``,
and tomographic integration, ``w_i = 1 - exp(-sigma_i s_i)``.

The batched functions operate on padded ``(n_rays, n_samples)`` arrays;
padding entries have ``sigma = 0`` and ``s = 0`` and never change a result.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional

import numpy as np


class WeightModel(enum.Enum):
    SURFACE = "surface"
    TOMOGRAPHY = "tomography"


class UnsortedRayError(ValueError):
    pass


@dataclass
class CompositeResult:
    pixel: np.ndarray
    weights: np.ndarray
    transmittance: Optional[np.ndarray]
    depth: float
    final_transmittance: float = 1.0


def _optical_depth(sigma, seg):
    tau = sigma * seg
    acc = np.cumsum(tau, axis=-1)
    before = np.zeros_like(acc)  # exclusive prefix sums, accumulated in the exponent
    before[..., 1:] = acc[..., :-1]
    return tau, before, acc


def _sample_sum(x, axis=-1):
    """Sequential sum over the sample axis.

    A running sum is unaffected by trailing zeros, so padded and unpadded
    rays give bit-identical results (pairwise summation does not).
    """
    x = np.asarray(x)
    if x.shape[axis] == 0:
        return np.sum(x, axis=axis)
    return np.take(np.cumsum(x, axis=axis), -1, axis=axis)


def composite_batch(sigma, seg, color, model=WeightModel.SURFACE, background=None):
    """Composite padded sample arrays.

    Returns ``(pixels, weights, transmittance, final_transmittance)``;
    ``transmittance`` is ``None`` for the tomography model.
    """
    model = WeightModel(model)
    sigma = np.asarray(sigma)
    seg = np.asarray(seg)
    tau, before, acc = _optical_depth(sigma, seg)
    alpha = -np.expm1(-tau)
    if model is WeightModel.SURFACE:
        trans = np.exp(-before)
        weights = trans * alpha
        final = np.exp(-acc[..., -1]) if acc.shape[-1] else np.ones(acc.shape[:-1])
    else:
        trans = None
        weights = alpha
        final = np.ones(sigma.shape[:-1], dtype=sigma.dtype)
    pixels = _sample_sum(weights[..., None] * color, axis=-2)
    if background is not None and model is WeightModel.SURFACE:
        pixels = pixels + final[..., None] * np.asarray(background, dtype=pixels.dtype)
    return pixels, weights, trans, final


def composite_backward_batch(
    sigma, seg, color, dpixel, model=WeightModel.SURFACE, background=None, cache=None
):
    """Gradients ``(dL/dsigma, dL/dcolor)`` for a batched composite.

    For the surface model ``dL/dtau_k = g . (T_{k+1} c_k - sum_{i>k} w_i c_i
    - T_{N+1} bg)`` and ``dL/dsigma_k = s_k dL/dtau_k``.
    """
    model = WeightModel(model)
    if cache is None:
        cache = composite_batch(sigma, seg, color, model, background)
    _, weights, trans, final = cache
    dpixel = np.asarray(dpixel)
    dcolor = weights[..., None] * dpixel[..., None, :]
    tau = sigma * seg
    if model is WeightModel.SURFACE:
        wc = np.einsum("...s,...sc->...sc", weights, color)
        g_wc = np.einsum("...sc,...c->...s", wc, dpixel)  # g . w_i c_i
        suffix = np.cumsum(g_wc[..., ::-1], axis=-1)[..., ::-1] - g_wc  # sum over i > k
        t_next = trans * np.exp(-tau)
        g_c = np.einsum("...sc,...c->...s", color, dpixel)
        dtau = t_next * g_c - suffix
        if background is not None:
            g_bg = np.sum(dpixel * np.asarray(background, dtype=dpixel.dtype), axis=-1)  # shared or per-ray
            dtau = dtau - (final * g_bg)[..., None]
    else:
        g_c = np.einsum("...sc,...c->...s", color, dpixel)
        dtau = np.exp(-tau) * g_c
    return dtau * seg, dcolor


def _check_sorted(group) -> None:
    depths = np.asarray(group.depths)
    if depths.size > 1 and np.any(np.diff(depths) < 0):
        raise UnsortedRayError(f"samples of ray {group.ray_id} are not sorted front-to-back")


def composite(group, model=WeightModel.SURFACE, background=None) -> CompositeResult:
    """Composite one :class:`~octfield.sampling.RayGroup`."""
    model = WeightModel(model)
    if model is WeightModel.SURFACE:
        _check_sorted(group)
    pixels, w, trans, final = composite_batch(
        group.sigma[None], group.seg[None], group.color[None], model, background
    )
    w = w[0]
    total = _sample_sum(w)
    depth = float(_sample_sum(w * group.depths) / total) if total > 0 else 0.0
    return CompositeResult(
        pixel=pixels[0],
        weights=w,
        transmittance=None if trans is None else trans[0],
        depth=depth,
        final_transmittance=float(final[0]),
    )


def composite_backward(group, dpixel, model=WeightModel.SURFACE, background=None):
    dsigma, dcolor = composite_backward_batch(
        group.sigma[None],
        group.seg[None],
        group.color[None],
        np.asarray(dpixel)[None],
        model,
        background,
    )
    return dsigma[0], dcolor[0]


def cull_mask(sigma, seg, threshold: float) -> np.ndarray:
    """Samples whose transmittance is still at least ``threshold``."""
    if threshold <= 0:
        return np.ones(np.shape(sigma), dtype=bool)
    _, before, _ = _optical_depth(np.asarray(sigma), np.asarray(seg))
    return before <= -np.log(threshold)


def cull_occluded(group, threshold: float):
    """Drop the samples of ``group`` hidden behind transmittance ``threshold``."""
    keep = cull_mask(group.sigma, group.seg, threshold)
    return group.subset(keep)


def mse_loss(rendered, reference, valid=None):
    """Mean squared error and its gradient with respect to ``rendered``."""
    rendered = np.asarray(rendered)
    reference = np.asarray(reference)
    if rendered.shape != reference.shape:
        raise ValueError(f"image shapes differ: {rendered.shape} vs {reference.shape}")
    diff = rendered - reference
    if valid is not None:
        diff = np.where(np.asarray(valid)[..., None] if diff.ndim > np.ndim(valid) else valid, diff, 0)
        n = max(int(np.count_nonzero(valid)) * (diff.size // np.size(valid)), 1)
    else:
        n = max(diff.size, 1)
    loss = float(np.sum(diff * diff) / n)
    return loss, 2.0 * diff / n
