"""Batched evaluation of many leaf networks at once.

A :class:`NetworkBank` stacks the flat parameter vectors of several
:class:`~octfield.network.LeafNetwork` objects into one ``(n_nets, n_params)``
array and rebinds each network to its row, so updates made through the bank
are visible through the individual networks. Samples are passed sorted by
network with CSR-style segment offsets; the compiled kernels loop over
segments and fuse the elementwise work that dominates the plain numpy path.

The math is identical to :class:`LeafNetwork` (which remains the reference
implementation); the test suite checks both agree.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numba
import numpy as np

from .network import ArchConfig, LeafNetwork, OptimizerState, pos_encode

_jit = numba.njit(cache=True, fastmath=False, nogil=True)


@_jit
def _trunk_forward(params, enc, seg, w_off, b_off, n_in, width, slopes, acts, masks, raw, d_w, d_b):
    depth = acts.shape[0]
    for s in range(seg.shape[0] - 1):
        a, b = seg[s], seg[s + 1]
        if a == b:
            continue
        h = enc[a:b]
        for l in range(depth):
            W = params[s, w_off[l] : w_off[l] + n_in[l] * width].reshape(n_in[l], width)
            z = np.dot(h, W)
            bias = params[s, b_off[l] : b_off[l] + width]
            for i in range(b - a):
                sl = slopes[l, a + i]
                for j in range(width):
                    v = z[i, j] + bias[j]
                    if v > 0:
                        acts[l, a + i, j] = v
                        masks[l, a + i, j] = 1
                    else:
                        acts[l, a + i, j] = v * sl
                        masks[l, a + i, j] = 0
            h = acts[l, a:b]
        wd = params[s, d_w : d_w + width]
        bd = params[s, d_b]
        for i in range(b - a):
            acc = bd
            for j in range(width):
                acc += h[i, j] * wd[j]
            raw[a + i] = acc


@_jit
def _color_forward(params, inp, seg, v_w, v_b, r_w, r_b, n_view_in, view_width, slopes, hid, vmask, rgb):
    for s in range(seg.shape[0] - 1):
        a, b = seg[s], seg[s + 1]
        if a == b:
            continue
        Wv = params[s, v_w : v_w + n_view_in * view_width].reshape(n_view_in, view_width)
        z = np.dot(inp[a:b], Wv)
        bias = params[s, v_b : v_b + view_width]
        for i in range(b - a):
            sl = slopes[a + i]
            for j in range(view_width):
                v = z[i, j] + bias[j]
                if v > 0:
                    hid[a + i, j] = v
                    vmask[a + i, j] = 1
                else:
                    hid[a + i, j] = v * sl
                    vmask[a + i, j] = 0
        Wr = params[s, r_w : r_w + view_width * 3].reshape(view_width, 3)
        o = np.dot(hid[a:b], Wr)
        for i in range(b - a):
            for c in range(3):
                rgb[a + i, c] = 1.0 / (1.0 + np.exp(-(o[i, c] + params[s, r_b + c])))


@_jit
def _backward(params, grads, enc, seg, w_off, b_off, n_in, width, slopes, acts, masks, raw, dsigma,
              d_w, d_b, with_color, inp, cseg, vis_local, v_w, v_b, r_w, r_b, n_view_in, view_width,
              vslopes, hid, vmask, rgb, drgb):
    depth = acts.shape[0]
    for s in range(seg.shape[0] - 1):
        a, b = seg[s], seg[s + 1]
        n = b - a
        if n == 0:
            continue
        feat = acts[depth - 1, a:b]
        wd = params[s, d_w : d_w + width]
        draw = np.empty((n, 1), dtype=params.dtype)
        for i in range(n):
            x = raw[a + i]
            draw[i, 0] = dsigma[a + i] / (1.0 + np.exp(-x))
        gwd = np.dot(feat.T, draw)
        gbd = 0.0
        for i in range(n):
            gbd += draw[i, 0]
        for j in range(width):
            grads[s, d_w + j] += gwd[j, 0]
        grads[s, d_b] += gbd
        dh = np.empty((n, width), dtype=params.dtype)
        for i in range(n):
            for j in range(width):
                dh[i, j] = draw[i, 0] * wd[j]
        if with_color:
            c0, c1 = cseg[s], cseg[s + 1]
            m = c1 - c0
            if m > 0:
                do = np.empty((m, 3), dtype=params.dtype)
                for i in range(m):
                    for c in range(3):
                        r = rgb[c0 + i, c]
                        do[i, c] = drgb[c0 + i, c] * r * (1.0 - r)
                hs = hid[c0:c1]
                g = np.dot(hs.T, do)
                gr = grads[s, r_w : r_w + view_width * 3].reshape(view_width, 3)
                gr += g
                for i in range(m):
                    for c in range(3):
                        grads[s, r_b + c] += do[i, c]
                Wr = params[s, r_w : r_w + view_width * 3].reshape(view_width, 3)
                dz = np.dot(do, Wr.T)
                vsum = np.zeros(view_width, dtype=params.dtype)
                for i in range(m):
                    sl = vslopes[c0 + i]
                    for j in range(view_width):
                        v = dz[i, j]
                        if vmask[c0 + i, j] == 0:
                            v *= sl
                        dz[i, j] = v
                        vsum[j] += v
                for j in range(view_width):
                    grads[s, v_b + j] += vsum[j]
                g = np.dot(inp[c0:c1].T, dz)
                gv = grads[s, v_w : v_w + n_view_in * view_width].reshape(n_view_in, view_width)
                gv += g
                Wv = params[s, v_w : v_w + n_view_in * view_width].reshape(n_view_in, view_width)
                dfeat = np.dot(dz, Wv[:width].T)
                for i in range(m):
                    row = vis_local[c0 + i]
                    for j in range(width):
                        dh[row, j] += dfeat[i, j]
        bsum = np.zeros(width, dtype=params.dtype)
        for l in range(depth - 1, -1, -1):
            bsum[:] = 0.0
            for i in range(n):
                sl = slopes[l, a + i]
                for j in range(width):
                    v = dh[i, j]
                    if masks[l, a + i, j] == 0:
                        v *= sl
                    dh[i, j] = v
                    bsum[j] += v
            for j in range(width):
                grads[s, b_off[l] + j] += bsum[j]
            h_in = enc[a:b] if l == 0 else acts[l - 1, a:b]
            g = np.dot(h_in.T, dh)
            gw = grads[s, w_off[l] : w_off[l] + n_in[l] * width].reshape(n_in[l], width)
            gw += g
            if l > 0:
                W = params[s, w_off[l] : w_off[l] + n_in[l] * width].reshape(n_in[l], width)
                dh = np.dot(dh, W.T)


@_jit
def _adam(params, grads, m, v, steps, active, lr, b1, b2, eps):
    for s in range(params.shape[0]):
        if not active[s]:
            continue
        steps[s] += 1
        t = steps[s]
        scale = lr * np.sqrt(1.0 - b2**t) / (1.0 - b1**t)
        for k in range(params.shape[1]):
            g = grads[s, k]
            mk = b1 * m[s, k] + (1.0 - b1) * g
            vk = b2 * v[s, k] + (1.0 - b2) * g * g
            m[s, k] = mk
            v[s, k] = vk
            params[s, k] -= scale * mk / (np.sqrt(vk) + eps)


@dataclass
class BankTape:
    seg: np.ndarray
    enc: np.ndarray
    acts: np.ndarray
    masks: np.ndarray
    slopes: np.ndarray
    raw: np.ndarray
    cseg: Optional[np.ndarray] = None
    vis_local: Optional[np.ndarray] = None
    inp: Optional[np.ndarray] = None
    hid: Optional[np.ndarray] = None
    vmask: Optional[np.ndarray] = None
    vslopes: Optional[np.ndarray] = None
    rgb: Optional[np.ndarray] = None

    @property
    def feature(self) -> np.ndarray:
        return self.acts[-1]


def segments(slots, n_nets: int) -> np.ndarray:
    """CSR offsets of sorted ``slots``."""
    return np.r_[0, np.cumsum(np.bincount(slots, minlength=n_nets))].astype(np.int64)


class NetworkBank:
    """Several same-architecture float32 networks evaluated together."""

    def __init__(self, nets: Sequence[LeafNetwork], optimizers: Optional[Sequence[OptimizerState]] = None):
        if not nets:
            raise ValueError("a bank needs at least one network")
        arch = nets[0].arch
        if any(n.arch != arch for n in nets) or any(n.dtype != np.float32 for n in nets):
            raise ValueError("bank networks must share one float32 architecture")
        self.arch: ArchConfig = arch
        self.nets = list(nets)
        self.params = np.ascontiguousarray(np.stack([n.params for n in nets]))
        for k, n in enumerate(nets):
            n.params = self.params[k]
            n._bind()
        self.optimizers = None
        if optimizers is not None:
            self.optimizers = list(optimizers)
            self.m = np.ascontiguousarray(np.stack([o.m for o in optimizers]))
            self.v = np.ascontiguousarray(np.stack([o.v for o in optimizers]))
            self.steps = np.array([o.step for o in optimizers], dtype=np.int64)
            for k, o in enumerate(optimizers):
                o.m, o.v = self.m[k], self.v[k]
        layout = {name: (off, i, o) for name, off, i, o in nets[0]._layout}
        d = arch.depth
        self._w_off = np.array([layout[f"trunk{k}"][0] for k in range(d)], dtype=np.int64)
        self._n_in = np.array([layout[f"trunk{k}"][1] for k in range(d)], dtype=np.int64)
        self._b_off = self._w_off + self._n_in * arch.width
        off, i, o = layout["density"]
        self._d = (off, off + i * o)
        off, i, o = layout["view"]
        self._v = (off, off + i * o, i)
        off, i, o = layout["rgb"]
        self._r = (off, off + i * o)

    def __len__(self) -> int:
        return len(self.nets)

    def _slopes(self, shape, rng):
        act = self.arch.activation
        if rng is not None and act.train_mode_randomized:
            r = rng.random(shape, dtype=np.float32)
            return (act.lower + (act.upper - act.lower) * r).astype(np.float32)
        return np.full(shape, act.eval_slope, dtype=np.float32)

    def forward_density(self, x, seg, rng=None):
        """Densities for node-local ``x`` sorted by network (offsets ``seg``)."""
        x = np.asarray(x, dtype=np.float32)
        n = len(x)
        a = self.arch
        enc = np.ascontiguousarray(pos_encode(x, a.encoding.freq_position))
        acts = np.empty((a.depth, n, a.width), dtype=np.float32)
        masks = np.empty((a.depth, n, a.width), dtype=np.uint8)
        raw = np.empty(n, dtype=np.float32)
        slopes = self._slopes((a.depth, n), rng)
        _trunk_forward(self.params, enc, seg, self._w_off, self._b_off, self._n_in, a.width,
                       slopes, acts, masks, raw, self._d[0], self._d[1])
        sigma = np.logaddexp(np.float32(0), raw)
        return sigma, BankTape(seg, enc, acts, masks, slopes, raw)

    def forward_color(self, tape: BankTape, dirs, rows=None, rng=None):
        """RGB for the sorted samples ``rows`` (all when ``None``)."""
        a = self.arch
        seg = tape.seg
        if rows is None:
            rows = np.arange(seg[-1])
        rows = np.asarray(rows, dtype=np.int64)
        slot = np.searchsorted(seg, rows, side="right") - 1
        cseg = segments(slot, len(seg) - 1)
        ed = pos_encode(np.asarray(dirs, dtype=np.float32), a.encoding.freq_direction)
        inp = np.ascontiguousarray(np.concatenate([tape.feature[rows], ed], axis=1))
        m = len(rows)
        hid = np.empty((m, a.view_width), dtype=np.float32)
        vmask = np.empty((m, a.view_width), dtype=np.uint8)
        rgb = np.empty((m, 3), dtype=np.float32)
        vslopes = self._slopes(m, rng)
        v_w, v_b, v_in = self._v
        _color_forward(self.params, inp, cseg, v_w, v_b, self._r[0], self._r[1], v_in, a.view_width,
                       vslopes, hid, vmask, rgb)
        tape.cseg, tape.inp, tape.hid, tape.vmask, tape.vslopes, tape.rgb = cseg, inp, hid, vmask, vslopes, rgb
        tape.vis_local = rows - seg[slot]
        return rgb

    def backward(self, tape: BankTape, dsigma, drgb=None) -> np.ndarray:
        """Per-network flat gradients, shape ``(n_nets, n_params)``."""
        a = self.arch
        grads = np.zeros_like(self.params)
        dsigma = np.ascontiguousarray(dsigma, dtype=np.float32)
        with_color = drgb is not None and tape.rgb is not None
        if with_color:
            drgb = np.ascontiguousarray(drgb, dtype=np.float32)
            cseg, vis, inp, hid, vmask, vsl, rgb = (tape.cseg, tape.vis_local, tape.inp, tape.hid,
                                                    tape.vmask, tape.vslopes, tape.rgb)
        else:
            cseg = np.zeros(len(tape.seg), np.int64)
            vis = np.zeros(0, np.int64)
            inp = hid = np.zeros((0, 1), np.float32)
            vmask = np.zeros((0, 1), np.uint8)
            vsl = np.zeros(0, np.float32)
            rgb = drgb = np.zeros((0, 3), np.float32)
        v_w, v_b, v_in = self._v
        _backward(self.params, grads, tape.enc, tape.seg, self._w_off, self._b_off, self._n_in, a.width,
                  tape.slopes, tape.acts, tape.masks, tape.raw, dsigma, self._d[0], self._d[1],
                  with_color, inp, cseg, vis, v_w, v_b, self._r[0], self._r[1], v_in, a.view_width,
                  vsl, hid, vmask, rgb, drgb)
        return grads

    def step(self, grads, lr: float, active=None) -> None:
        """Adam update of the networks flagged in ``active`` (all by default)."""
        if self.optimizers is None:
            raise ValueError("bank was built without optimizer states")
        active = np.ones(len(self), bool) if active is None else np.asarray(active, bool)
        o = self.optimizers[0]
        _adam(self.params, grads, self.m, self.v, self.steps, active, np.float32(lr),
              np.float32(o.beta1), np.float32(o.beta2), np.float32(o.eps))
        for k in np.flatnonzero(active):
            self.optimizers[k].step = int(self.steps[k])
