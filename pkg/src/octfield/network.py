"""Per-leaf coordinate network with hand-derived gradients.

Architecture: ``depth`` RReLU trunk layers of ``width`` units over the
positional encoding of a node-local position; a linear density head with a
softplus; a view layer of ``view_width`` RReLU units over the trunk feature
concatenated with the encoded direction, followed by a sigmoid RGB output.

All parameters of one network live in a single flat vector; the layer
matrices are views into it, which keeps optimizer updates and checkpoints
trivial.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy.special import expit


class NonFiniteParameterError(FloatingPointError):
    pass


@dataclass(frozen=True)
class PosEncConfig:
    freq_position: int = 10
    freq_direction: int = 4

    def __post_init__(self):
        if self.freq_position < 0 or self.freq_direction < 0:
            raise ValueError("frequency counts must be >= 0")


@dataclass(frozen=True)
class ActivationConfig:
    """Randomized leaky ReLU with negative slope bounds.

    For ``x <= 0`` the output is ``a * x`` with ``a`` in ``[lower, upper]``;
    both bounds are negative, so the negative branch is mirrored upward.
    """

    lower: float = -0.3
    upper: float = -0.1
    train_mode_randomized: bool = True

    def __post_init__(self):
        if not self.lower <= self.upper < 0:
            raise ValueError("need lower <= upper < 0")

    @property
    def eval_slope(self) -> float:
        return 0.5 * (self.lower + self.upper)


@dataclass(frozen=True)
class ArchConfig:
    width: int = 64
    depth: int = 8
    view_width: int = 256
    encoding: PosEncConfig = field(default_factory=PosEncConfig)
    activation: ActivationConfig = field(default_factory=ActivationConfig)

    @property
    def position_features(self) -> int:
        return 3 + 6 * self.encoding.freq_position

    @property
    def direction_features(self) -> int:
        return 3 + 6 * self.encoding.freq_direction

    def layer_shapes(self) -> list[tuple[str, int, int]]:
        shapes = [("trunk0", self.position_features, self.width)]
        shapes += [(f"trunk{k}", self.width, self.width) for k in range(1, self.depth)]
        shapes.append(("density", self.width, 1))
        shapes.append(("view", self.width + self.direction_features, self.view_width))
        shapes.append(("rgb", self.view_width, 3))
        return shapes

    def n_params(self) -> int:
        return sum(i * o + o for _, i, o in self.layer_shapes())

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "ArchConfig":
        d = dict(d)
        enc = PosEncConfig(**d.pop("encoding", {}))
        act = ActivationConfig(**d.pop("activation", {}))
        return cls(encoding=enc, activation=act, **d)


def pos_encode(v, freqs: int) -> np.ndarray:
    """``[v, sin(2^k pi v) for k.., cos(2^k pi v) for k..]`` along the last axis.

    Sines for all frequencies come first (k-major, xyz-minor), then cosines.
    """
    v = np.asarray(v)
    if freqs == 0:
        return v.copy()
    scales = (np.pi * 2.0 ** np.arange(freqs)).astype(v.dtype)
    arg = (v[..., None, :] * scales[:, None]).reshape(*v.shape[:-1], 3 * freqs)
    return np.concatenate([v, np.sin(arg), np.cos(arg)], axis=-1)


def pos_encode_jacobian_apply(v, freqs: int, grad_feat) -> np.ndarray:
    """Pull a gradient on the encoding back to the raw coordinates."""
    v = np.asarray(v)
    g = grad_feat[..., :3].copy()
    if freqs == 0:
        return g
    scales = np.pi * 2.0 ** np.arange(freqs)
    arg = v[..., None, :] * scales[:, None]
    n = 3 * freqs
    g_sin = grad_feat[..., 3 : 3 + n].reshape(arg.shape)
    g_cos = grad_feat[..., 3 + n : 3 + 2 * n].reshape(arg.shape)
    g += ((g_sin * np.cos(arg) - g_cos * np.sin(arg)) * scales[:, None]).sum(axis=-2)
    return g


def rrelu(x, cfg: ActivationConfig, rng: Optional[np.random.Generator] = None):
    """Returns ``(f(x), f'(x))``; slopes are random only when ``rng`` is given.

    Random slopes are drawn per element for 1-d input and per row (sample)
    for 2-d input.
    """
    x = np.asarray(x)
    if rng is not None and cfg.train_mode_randomized:
        shape = x.shape if x.ndim < 2 else (x.shape[0],) + (1,) * (x.ndim - 1)
        r = rng.random(shape, dtype=np.float32).astype(x.dtype, copy=False)
        slope = cfg.lower + (cfg.upper - cfg.lower) * r
    else:
        slope = x.dtype.type(cfg.eval_slope)
    # slope < 0, so max(x, slope * x) is x for x > 0 and slope * x otherwise
    y = x * slope
    np.maximum(x, y, out=y)
    deriv = (x > 0) * (1 - slope) + slope
    return y, deriv.astype(x.dtype, copy=False)


def softplus(x):
    return np.logaddexp(0.0, x).astype(x.dtype, copy=False)


def sigmoid(x):
    return expit(x)


@dataclass
class Tape:
    """Activations cached by the forward passes for :meth:`LeafNetwork.backward`."""

    x: np.ndarray
    inputs: list = field(default_factory=list)
    derivs: list = field(default_factory=list)
    feature: Optional[np.ndarray] = None
    raw_density: Optional[np.ndarray] = None
    rows: Optional[np.ndarray] = None
    view_input: Optional[np.ndarray] = None
    view_deriv: Optional[np.ndarray] = None
    hidden: Optional[np.ndarray] = None
    rgb: Optional[np.ndarray] = None


class LeafNetwork:
    def __init__(self, arch: ArchConfig = ArchConfig(), seed=0, dtype=np.float32, params=None):
        self.arch = arch
        self.dtype = np.dtype(dtype)
        self._layout = []
        offset = 0
        for name, n_in, n_out in arch.layer_shapes():
            self._layout.append((name, offset, n_in, n_out))
            offset += n_in * n_out + n_out
        if params is None:
            self.params = np.zeros(offset, dtype=self.dtype)
            self._bind()
            self._init(np.random.default_rng(seed))
        else:
            params = np.asarray(params)
            if params.shape != (offset,):
                raise ValueError(f"expected {offset} parameters, got {params.shape}")
            self.params = params.astype(self.dtype, copy=True)
            self._bind()

    def _bind(self) -> None:
        self.W, self.b = {}, {}
        for name, off, n_in, n_out in self._layout:
            self.W[name] = self.params[off : off + n_in * n_out].reshape(n_in, n_out)
            self.b[name] = self.params[off + n_in * n_out : off + n_in * n_out + n_out]

    def _init(self, rng: np.random.Generator) -> None:
        a = self.arch.activation.eval_slope
        gain = np.sqrt(2.0 / (1.0 + a * a))
        for name, _, n_in, _ in self._layout:
            if name == "density":
                continue  # zero density head: sigma starts at softplus(0)
            bound = gain * np.sqrt(3.0 / n_in)
            if name == "rgb":
                bound = np.sqrt(3.0 / n_in)
            self.W[name][...] = rng.uniform(-bound, bound, size=self.W[name].shape)

    @property
    def n_params(self) -> int:
        return self.params.size

    def copy(self) -> "LeafNetwork":
        return LeafNetwork(self.arch, dtype=self.dtype, params=self.params)

    def layer_names(self) -> list[str]:
        return [name for name, *_ in self._layout]

    def check_finite(self) -> None:
        if np.isfinite(self.params).all():
            return
        bad = int(np.argmin(np.isfinite(self.params)))
        for name, off, n_in, n_out in self._layout:
            if off <= bad < off + n_in * n_out + n_out:
                part = "weight" if bad < off + n_in * n_out else "bias"
                raise NonFiniteParameterError(
                    f"non-finite {part} in layer '{name}' (flat index {bad})"
                )

    # -- forward -----------------------------------------------------------
    def forward_density(self, x, rng=None, record: bool = False):
        """Density for node-local positions ``x`` of shape ``(n, 3)``.

        Returns ``(sigma, feature, tape)``; ``tape`` is ``None`` unless
        ``record`` is set.
        """
        self.check_finite()
        act = self.arch.activation
        x = np.asarray(x, dtype=self.dtype)
        tape = Tape(x=x) if record else None
        h = pos_encode(x, self.arch.encoding.freq_position)
        for k in range(self.arch.depth):
            name = f"trunk{k}"
            z = h @ self.W[name]
            z += self.b[name]
            if record:
                tape.inputs.append(h)
            h, d = rrelu(z, act, rng)
            if record:
                tape.derivs.append(d)
        raw = (h @ self.W["density"])[:, 0] + self.b["density"][0]
        sigma = softplus(raw)
        if record:
            tape.feature = h
            tape.raw_density = raw
        return sigma, h, tape

    def forward_color(self, feature, d, tape: Optional[Tape] = None, rng=None, rows=None):
        """RGB for trunk ``feature`` rows and unit directions ``d``.

        ``rows`` restricts evaluation to a subset of the feature rows; the
        subset is remembered on ``tape`` for the backward pass.
        """
        act = self.arch.activation
        if rows is not None:
            feature = feature[rows]
        ed = pos_encode(np.asarray(d, dtype=self.dtype), self.arch.encoding.freq_direction)
        inp = np.concatenate([feature, ed], axis=1)
        z = inp @ self.W["view"]
        z += self.b["view"]
        hid, deriv = rrelu(z, act, rng)
        o = hid @ self.W["rgb"]
        o += self.b["rgb"]
        rgb = sigmoid(o)
        if tape is not None:
            tape.rows = rows
            tape.view_input = inp
            tape.view_deriv = deriv
            tape.hidden = hid
            tape.rgb = rgb
        return rgb

    def __call__(self, x, d):
        sigma, feat, _ = self.forward_density(x)
        return sigma, self.forward_color(feat, d)

    # -- backward ----------------------------------------------------------
    def backward(self, tape: Tape, dsigma=None, drgb=None, want_dx: bool = False):
        """Reverse pass. Returns the flat parameter gradient (and ``dL/dx``)."""
        grad = np.zeros_like(self.params)
        gW, gb = self._grad_views(grad)
        width = self.arch.width
        n = tape.x.shape[0]
        dh = np.zeros((n, width), dtype=self.params.dtype)
        if dsigma is not None:
            dsigma = np.asarray(dsigma, dtype=self.dtype).reshape(n)
            if dsigma.shape[0] != n:
                raise ValueError("dsigma shape mismatch")
            draw = dsigma * sigmoid(tape.raw_density)
            gW["density"][:, 0] = tape.feature.T @ draw
            gb["density"][0] = draw.sum()
            dh += draw[:, None] * self.W["density"][:, 0][None, :]
        if drgb is not None:
            if tape.rgb is None:
                raise ValueError("color backward needs a recorded forward_color")
            drgb = np.asarray(drgb, dtype=self.dtype)
            if drgb.shape != tape.rgb.shape:
                raise ValueError("drgb shape mismatch")
            do = drgb * tape.rgb * (1.0 - tape.rgb)
            gW["rgb"][...] = tape.hidden.T @ do
            gb["rgb"][...] = do.sum(axis=0)
            dz = (do @ self.W["rgb"].T) * tape.view_deriv
            gW["view"][...] = tape.view_input.T @ dz
            gb["view"][...] = dz.sum(axis=0)
            dfeat = dz @ self.W["view"][:width].T
            if tape.rows is None:
                dh += dfeat
            else:
                dh[tape.rows] += dfeat  # rows are unique
        for k in reversed(range(self.arch.depth)):
            name = f"trunk{k}"
            dz = dh * tape.derivs[k]
            gW[name][...] = tape.inputs[k].T @ dz
            gb[name][...] = dz.sum(axis=0)
            if k > 0 or want_dx:
                dh = dz @ self.W[name].T
        if want_dx:
            dx = pos_encode_jacobian_apply(tape.x, self.arch.encoding.freq_position, dh)
            return grad, dx
        return grad

    def _grad_views(self, grad):
        gW, gb = {}, {}
        for name, off, n_in, n_out in self._layout:
            gW[name] = grad[off : off + n_in * n_out].reshape(n_in, n_out)
            gb[name] = grad[off + n_in * n_out : off + n_in * n_out + n_out]
        return gW, gb


# -- optimizer ---------------------------------------------------------------


@dataclass
class OptimizerState:
    """Adaptive-moment (Adam) accumulators for one flat parameter vector."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params) -> "OptimizerState":
        return cls(np.zeros_like(params), np.zeros_like(params))


def learning_rate(epoch: int, base: float = 5e-4, decay: float = 0.1, every: int = 10) -> float:
    return base * decay ** (epoch // every)


def optimizer_step(state: OptimizerState, params, grads, lr: float) -> None:
    """In-place Adam update of ``params``."""
    if grads.shape != params.shape or state.m.shape != params.shape:
        raise ValueError("optimizer shapes do not match")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    state.m *= b1
    state.m += (1.0 - b1) * grads
    state.v *= b2
    state.v += (1.0 - b2) * grads * grads
    scale = lr * np.sqrt(1.0 - b2**state.step) / (1.0 - b1**state.step)
    params -= (scale * state.m / (np.sqrt(state.v) + state.eps)).astype(params.dtype, copy=False)
