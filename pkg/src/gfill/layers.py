"""Trainable convolution layers: vanilla, partial, and gated variants, plus
spectral normalization for discriminator weights.

A gated layer computes phi(feature) * sigmoid(gating) from two parallel
convolutions over the same input; a partial layer restricts and renormalizes
the convolution to valid pixels under a binary mask and emits the rule-updated
mask for the next layer.  All layers are plain containers of Tensors; forward
builds a fresh graph every call.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (
    ConvGeometry,
    ShapeError,
    Tensor,
    _im2col,
    conv2d,
    elu,
    leaky_relu,
    make_op,
    mul,
    relu,
    sigmoid,
    tanh,
)

ACTIVATIONS = ("none", "elu", "relu", "leaky_relu", "tanh")


def apply_activation(name: str, x: Tensor, leaky_alpha: float = 0.2) -> Tensor:
    if name == "none":
        return x
    if name == "elu":
        return elu(x)
    if name == "relu":
        return relu(x)
    if name == "leaky_relu":
        return leaky_relu(x, leaky_alpha)
    if name == "tanh":
        return tanh(x)
    raise ValueError(f"unknown activation {name!r}; expected one of {ACTIVATIONS}")


def _check_binary_mask(mask: np.ndarray):
    if not np.all((mask == 0) | (mask == 1)):
        raise ValueError("mask must be strictly binary (0 = hole, 1 = valid)")


class VanillaConv:
    """Plain convolution with bias and an optional activation."""

    kind = "vanilla"

    def __init__(self, weight: Tensor, bias: Tensor, geom: ConvGeometry,
                 activation: str = "none", name: str = "conv"):
        self.weight = weight
        self.bias = bias
        self.geom = geom
        self.activation = activation
        self.name = name
        weight.name = f"{name}.W"
        bias.name = f"{name}.b"

    def forward(self, x: Tensor) -> Tensor:
        return apply_activation(self.activation, conv2d(x, self.weight, self.bias, self.geom))

    __call__ = forward

    def named_parameters(self):
        return [(f"{self.name}.W", self.weight), (f"{self.name}.b", self.bias)]

    def parameters(self):
        return [p for _, p in self.named_parameters()]


class GatedConv:
    """Gated convolution: output = phi(W_f * x + b_f) .* sigmoid(W_g * x + b_g).

    Implemented as a literal composition of the tensor primitives so it is
    bitwise identical to wiring conv2d + sigmoid + mul by hand.  With
    ``gate_mode="uniform"`` the sigmoid branch is replaced by the constant
    0.5 (the gating parameters stay allocated but receive no gradient),
    which is the frozen-gate ablation model.
    """

    kind = "gated"

    def __init__(self, w_f: Tensor, w_g: Tensor, b_f: Tensor, b_g: Tensor,
                 geom: ConvGeometry, activation: str = "elu",
                 gate_mode: str = "learned", name: str = "gconv"):
        if w_f.data.shape != w_g.data.shape:
            raise ShapeError(
                f"feature and gating kernels must match: {w_f.data.shape} vs {w_g.data.shape}")
        if gate_mode not in ("learned", "uniform"):
            raise ValueError(f"gate_mode must be 'learned' or 'uniform', got {gate_mode!r}")
        self.w_f, self.w_g = w_f, w_g
        self.b_f, self.b_g = b_f, b_g
        self.geom = geom
        self.activation = activation
        self.gate_mode = gate_mode
        self.name = name
        for suffix, p in (("Wf", w_f), ("Wg", w_g), ("bf", b_f), ("bg", b_g)):
            p.name = f"{name}.{suffix}"

    @property
    def out_channels(self) -> int:
        return self.w_f.data.shape[0]

    def forward(self, x: Tensor, gate_record: list | None = None) -> Tensor:
        feat = apply_activation(self.activation, conv2d(x, self.w_f, self.b_f, self.geom))
        if self.gate_mode == "uniform":
            if gate_record is not None:
                gate_record.append((self.name, np.full(feat.data.shape, 0.5, dtype=feat.data.dtype)))
            return mul(feat, 0.5)
        gate = sigmoid(conv2d(x, self.w_g, self.b_g, self.geom))
        if gate_record is not None:
            gate_record.append((self.name, gate.data))
        return mul(feat, gate)

    __call__ = forward

    def named_parameters(self):
        return [(f"{self.name}.Wf", self.w_f), (f"{self.name}.Wg", self.w_g),
                (f"{self.name}.bf", self.b_f), (f"{self.name}.bg", self.b_g)]

    def parameters(self):
        return [p for _, p in self.named_parameters()]


class PartialConv:
    """Mask-renormalized convolution with the rule-based mask update.

    Output at each location is sum(W * (I .* M)) * scale + b where the window
    mask count is positive, and exactly 0 (bias suppressed) otherwise.  The
    default ``scaling="count"`` divides by the window's valid count, the
    literal M/sum(M) form; ``scaling="ratio"`` switches to the
    sum(1)/sum(M) renormalization of the original partial-conv work.
    The updated mask (1 iff the window saw any valid pixel) is returned
    alongside the features and is not differentiable.
    """

    kind = "partial"

    def __init__(self, weight: Tensor, bias: Tensor, geom: ConvGeometry,
                 scaling: str = "count", name: str = "pconv"):
        if scaling not in ("count", "ratio"):
            raise ValueError(f"scaling must be 'count' or 'ratio', got {scaling!r}")
        self.weight = weight
        self.bias = bias
        self.geom = geom
        self.scaling = scaling
        self.name = name
        weight.name = f"{name}.W"
        bias.name = f"{name}.b"

    def forward(self, x: Tensor, mask: np.ndarray) -> tuple[Tensor, np.ndarray]:
        weight, bias, geom = self.weight, self.bias, self.geom
        if x.data.ndim != 4:
            raise ShapeError(f"partial conv input must be 4-D, got {x.data.shape}")
        n, c, h, w = x.data.shape
        mask = np.asarray(mask)
        if mask.shape != (n, 1, h, w):
            raise ShapeError(
                f"mask shape {mask.shape} must be (n, 1, h, w) = {(n, 1, h, w)}")
        _check_binary_mask(mask)
        mask = mask.astype(x.data.dtype, copy=False)
        kh, kw = geom.kernel
        co, ci, _, _ = weight.data.shape
        if c != ci:
            raise ShapeError(
                f"partial conv input {x.data.shape} has {c} channels but weight "
                f"{weight.data.shape} expects {ci}")
        s, d, p = geom.stride, geom.dilation, geom.padding
        oh, ow = geom.out_size(h, w)
        if oh <= 0 or ow <= 0:
            raise ShapeError(f"partial conv: zero-size output for input {x.data.shape}")

        xm = x.data * mask
        if p:
            xm = np.pad(xm, ((0, 0), (0, 0), (p, p), (p, p)))
            mp = np.pad(mask, ((0, 0), (0, 0), (p, p), (p, p)))
        else:
            mp = mask
        cols = _im2col(xm, kh, kw, s, d, oh, ow)                      # (n*oh*ow, c*kh*kw)
        mcols = _im2col(mp, kh, kw, s, d, oh, ow)                     # (n*oh*ow, kh*kw)
        counts = mcols.sum(axis=1).reshape(n, 1, oh, ow)
        valid = counts > 0
        if self.scaling == "count":
            scale = np.where(valid, 1.0 / np.where(valid, counts, 1.0), 0.0)
        else:
            scale = np.where(valid, (kh * kw) / np.where(valid, counts, 1.0), 0.0)
        scale = scale.astype(x.data.dtype)

        wmat = weight.data.reshape(co, ci * kh * kw)
        raw = (cols @ wmat.T).reshape(n, oh, ow, co).transpose(0, 3, 1, 2)
        out = raw * scale + bias.data[None, :, None, None] * valid
        out = np.ascontiguousarray(out.astype(x.data.dtype, copy=False))
        new_mask = valid.astype(x.data.dtype)

        def backward_fn(g):
            gs = g * scale                                            # (n,co,oh,ow)
            g2 = np.ascontiguousarray(gs.transpose(0, 2, 3, 1)).reshape(n * oh * ow, co)
            gx = gw = gb = None
            if weight.requires_grad:
                gw = (g2.T @ cols).reshape(weight.data.shape)
            if bias.requires_grad:
                gb = (g * valid).sum(axis=(0, 2, 3))
            if x.requires_grad:
                gxp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=g.dtype)
                for i in range(kh):
                    for j in range(kw):
                        contrib = (g2 @ weight.data[:, :, i, j]).reshape(n, oh, ow, c)
                        gxp[:, :, i * d: i * d + s * oh: s, j * d: j * d + s * ow: s] += \
                            contrib.transpose(0, 3, 1, 2)
                gx = (gxp[:, :, p: p + h, p: p + w] if p else gxp) * mask
            return gx, gw, gb

        return make_op(out, (x, weight, bias), backward_fn), new_mask

    __call__ = forward

    def named_parameters(self):
        return [(f"{self.name}.W", self.weight), (f"{self.name}.b", self.bias)]

    def parameters(self):
        return [p for _, p in self.named_parameters()]


def propagate_mask(geomchain, mask) -> list:
    """Apply only the rule-based mask update through a chain of geometries.

    Accepts a 2-D binary array (or anything with a ``bits`` attribute) and
    returns the mask after every layer, so the layer-by-layer disappearance
    of hole information can be inspected directly.
    """
    if not geomchain:
        raise ValueError("propagate_mask needs a non-empty geometry chain")
    bits = np.asarray(getattr(mask, "bits", mask))
    if bits.ndim != 2:
        raise ShapeError(f"mask must be 2-D, got shape {bits.shape}")
    _check_binary_mask(bits)
    out = []
    m = bits.astype(np.float32)
    for geom in geomchain:
        kh, kw = geom.kernel
        h, w = m.shape
        oh, ow = geom.out_size(h, w)
        if oh <= 0 or ow <= 0:
            raise ShapeError(f"mask of shape {m.shape} shrank to nothing under {geom}")
        p = geom.padding
        mp = np.pad(m, p)[None, None] if p else m[None, None]
        mcols = _im2col(mp, kh, kw, geom.stride, geom.dilation, oh, ow)
        m = (mcols.sum(axis=1).reshape(oh, ow) > 0).astype(np.float32)
        out.append(m.astype(np.uint8))
    return out


# ---------------------------------------------------------------------------
# spectral normalization
# ---------------------------------------------------------------------------


@dataclass
class SpectralNormState:
    """Persistent left singular vector estimate for the power iteration."""

    u: np.ndarray
    n_power_iterations: int = 1

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.float64)
        if self.u.ndim != 1:
            raise ShapeError(f"u must be a vector, got shape {self.u.shape}")
        n = np.linalg.norm(self.u)
        if n == 0:
            raise ValueError("u must be nonzero")
        self.u = self.u / n


def spectral_normalize(weight: Tensor, state: SpectralNormState,
                       update: bool = True) -> tuple[Tensor, float]:
    """Divide a kernel by its power-iteration estimate of the top singular value.

    The kernel is viewed as a (out_channels, everything-else) matrix.  Runs
    ``state.n_power_iterations`` iterations from the persistent ``u``; with
    ``update`` the refined ``u`` is written back (training), otherwise the
    state is left untouched (evaluation / gradient checking).  Gradients flow
    through W/sigma with u and v treated as constants of the current step.
    """
    rows = weight.data.shape[0]
    wmat = weight.data.reshape(rows, -1)
    if state.u.shape != (rows,):
        raise ShapeError(f"u shape {state.u.shape} does not match {rows} output rows")
    if not np.any(wmat):
        raise ValueError("cannot spectral-normalize a zero matrix (undefined direction)")

    u = state.u.astype(np.float64)
    w64 = wmat.astype(np.float64)
    v = None
    for _ in range(state.n_power_iterations):
        v = w64.T @ u
        v /= max(np.linalg.norm(v), 1e-12)
        u = w64 @ v
        u /= max(np.linalg.norm(u), 1e-12)
    if v is None:
        v = w64.T @ u
        v /= max(np.linalg.norm(v), 1e-12)
    if update:
        state.u = u
    sigma = float(u @ w64 @ v)
    if sigma <= 0:
        raise ValueError("spectral norm estimate collapsed to zero")

    dtype = weight.data.dtype
    out = (weight.data / dtype.type(sigma)).astype(dtype, copy=False)
    uvt = np.outer(u, v).reshape(weight.data.shape).astype(dtype)

    def backward_fn(g):
        if not weight.requires_grad:
            return (None,)
        inner = np.sum(g * out)
        return ((g - inner * uvt) / dtype.type(sigma),)

    return make_op(out, (weight,), backward_fn), sigma


class SpectralNormConv:
    """Convolution whose weight is spectral-normalized on every forward.

    An all-zero weight (possible only by construction, never by training)
    cannot be normalized, so it is used as-is; the output is zero either way.
    """

    kind = "spectral"

    def __init__(self, weight: Tensor, bias: Tensor, geom: ConvGeometry,
                 state: SpectralNormState, activation: str = "leaky_relu",
                 name: str = "snconv"):
        self.weight = weight
        self.bias = bias
        self.geom = geom
        self.state = state
        self.activation = activation
        self.name = name
        weight.name = f"{name}.W"
        bias.name = f"{name}.b"

    def forward(self, x: Tensor, update_sn: bool = True) -> Tensor:
        if not np.any(self.weight.data):
            w_used = self.weight
        else:
            w_used, _ = spectral_normalize(self.weight, self.state, update=update_sn)
        return apply_activation(self.activation, conv2d(x, w_used, self.bias, self.geom))

    __call__ = forward

    def normalized_weight(self) -> np.ndarray:
        """Current W/sigma without touching the persistent state."""
        w, _ = spectral_normalize(self.weight, self.state, update=False)
        return w.data

    def named_parameters(self):
        return [(f"{self.name}.W", self.weight), (f"{self.name}.b", self.bias)]

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_states(self):
        return [(f"{self.name}.u", self.state.u)]


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------


def he_std(fan_in: int) -> float:
    return float(np.sqrt(2.0 / fan_in))


def xavier_std(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(2.0 / (fan_in + fan_out)))


def init_layer(kind: str, out_channels: int, in_channels: int, geom: ConvGeometry,
               rng: np.random.Generator, activation: str | None = None,
               dtype=np.float32, name: str = "layer", **kwargs):
    """Build a freshly initialized layer of the given kind.

    Feature and vanilla kernels use He fan-in scaling, gating kernels use
    Xavier scaling, biases start at zero (so gates open at 0.5), and the
    spectral-norm ``u`` is a unit-normalized draw from the same rng.  Draw
    order is fixed, so a fixed seed reproduces the layer bit for bit.
    """
    kh, kw = geom.kernel
    shape = (out_channels, in_channels, kh, kw)
    fan_in = in_channels * kh * kw
    fan_out = out_channels * kh * kw

    def draw(std):
        return Tensor((rng.standard_normal(shape) * std).astype(dtype), requires_grad=True)

    zeros = lambda: Tensor(np.zeros(out_channels, dtype=dtype), requires_grad=True)

    if kind == "vanilla":
        return VanillaConv(draw(he_std(fan_in)), zeros(), geom,
                           activation=activation or "none", name=name)
    if kind == "partial":
        return PartialConv(draw(he_std(fan_in)), zeros(), geom,
                           scaling=kwargs.get("scaling", "count"), name=name)
    if kind == "gated":
        w_f = draw(he_std(fan_in))
        w_g = draw(xavier_std(fan_in, fan_out))
        return GatedConv(w_f, w_g, zeros(), zeros(), geom,
                         activation=activation or "elu",
                         gate_mode=kwargs.get("gate_mode", "learned"), name=name)
    if kind == "spectral":
        w = draw(he_std(fan_in))
        u = rng.standard_normal(out_channels)
        state = SpectralNormState(u=u, n_power_iterations=kwargs.get("n_power_iterations", 1))
        return SpectralNormConv(w, zeros(), geom, state,
                                activation=activation or "leaky_relu", name=name)
    raise ValueError(f"unknown layer kind {kind!r}")
