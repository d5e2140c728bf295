"""Dense 4-D tensors with reverse-mode automatic differentiation.

The engine is intentionally small: a :class:`Tensor` wraps a numpy array,
every operation records a closure that knows how to push gradients to its
parents, and :func:`backward` replays the tape in reverse topological
order.  Graphs are rebuilt on every forward pass.

Conventions:
  * feature maps are (batch, channels, height, width), row-major;
  * binary ops require identical shapes, only python scalars broadcast;
  * float32 is the training precision, float64 the gradient-checking
    precision; ops never change the dtype of their inputs;
  * tensors are treated as immutable once they enter a graph (only the
    ``grad`` buffer mutates); parameter updates between graphs are fine.

Determinism: all array math funnels through numpy/BLAS, which is bitwise
reproducible for a fixed thread count (set ``OMP_NUM_THREADS`` to pin it).
"""

from __future__ import annotations

import struct
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "ConvGeometry",
    "no_grad",
    "make_op",
    "conv2d",
    "sigmoid",
    "tanh",
    "relu",
    "leaky_relu",
    "elu",
    "add",
    "sub",
    "mul",
    "upsample_nearest",
    "concat_channels",
    "reduce_sum",
    "reduce_mean",
    "backward",
    "grad_check",
    "gft1_encode",
    "gft1_decode",
    "save_tensor",
    "load_tensor",
]

_FLOAT_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (forward values only)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A numpy array plus optional gradient and tape bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        """A new leaf sharing this tensor's data, outside any graph."""
        return Tensor(self.data, requires_grad=False, name=self.name)

    def backward(self):
        backward(self)

    def sum(self) -> "Tensor":
        return reduce_sum(self)

    def mean(self) -> "Tensor":
        return reduce_mean(self)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag}, requires_grad={self.requires_grad})"


def make_op(data: np.ndarray, parents, backward_fn) -> Tensor:
    """Wrap an op result into the graph.

    Extension point for composite layers that need a fused backward rule
    (partial convolution, spectral normalization).  ``backward_fn`` maps the
    incoming gradient array to a tuple of gradient arrays aligned with
    ``parents`` (``None`` for non-differentiable slots).  The closure is only
    attached when grad mode is on and some parent requires grad.
    """
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConvGeometry:
    """Kernel size, stride, dilation, and symmetric zero padding.

    Only odd kernels are allowed so the center-tap indexing of the sliding
    window is exact.
    """

    kernel: tuple[int, int]
    stride: int = 1
    dilation: int = 1
    padding: int = 0

    def __post_init__(self):
        kh, kw = self.kernel
        if kh < 1 or kw < 1 or kh % 2 == 0 or kw % 2 == 0:
            raise ValueError(f"kernel must be odd and positive, got {self.kernel}")
        if self.stride < 1:
            raise ValueError(f"stride must be positive, got {self.stride}")
        if self.dilation < 1:
            raise ValueError(f"dilation must be positive, got {self.dilation}")
        if self.padding < 0:
            raise ValueError(f"padding must be non-negative, got {self.padding}")

    def out_size(self, h: int, w: int) -> tuple[int, int]:
        kh, kw = self.kernel
        oh = (h + 2 * self.padding - self.dilation * (kh - 1) - 1) // self.stride + 1
        ow = (w + 2 * self.padding - self.dilation * (kw - 1) - 1) // self.stride + 1
        return oh, ow


def same_padding(kernel: int, dilation: int = 1) -> int:
    """Padding that preserves spatial size at stride 1."""
    return dilation * (kernel - 1) // 2


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, dilation: int,
            oh: int, ow: int) -> np.ndarray:
    """Flatten sliding windows of a padded (n,c,H,W) array to (n*oh*ow, c*kh*kw)."""
    n, c, _, _ = xp.shape
    sn, sc, sh, sw = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, oh, ow, c, kh, kw),
        strides=(sn, stride * sh, stride * sw, sc, dilation * sh, dilation * sw),
        writeable=False,
    )
    return win.reshape(n * oh * ow, c * kh * kw)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None, geom: ConvGeometry) -> Tensor:
    """2-D convolution (cross-correlation) over (n,c,h,w) input.

    ``weight`` is stored (out_channels, in_channels, k_h, k_w).  Output
    spatial size follows floor((H + 2p - d*(k-1) - 1)/s) + 1.  Differentiable
    w.r.t. input, weight, and bias.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d: input must be 4-D, got shape {x.data.shape}")
    if weight.data.ndim != 4:
        raise ShapeError(f"conv2d: weight must be 4-D, got shape {weight.data.shape}")
    kh, kw = geom.kernel
    co, ci, wkh, wkw = weight.data.shape
    if (wkh, wkw) != (kh, kw):
        raise ShapeError(
            f"conv2d: weight shape {weight.data.shape} disagrees with geometry kernel {geom.kernel}")
    n, c, h, w = x.data.shape
    if c != ci:
        raise ShapeError(
            f"conv2d: input shape {x.data.shape} has {c} channels but weight shape "
            f"{weight.data.shape} expects {ci}")
    if bias is not None and bias.data.shape != (co,):
        raise ShapeError(
            f"conv2d: bias shape {bias.data.shape} does not match out_channels {co}")
    s, d, p = geom.stride, geom.dilation, geom.padding
    oh, ow = geom.out_size(h, w)
    if oh <= 0 or ow <= 0:
        raise ShapeError(
            f"conv2d: zero-size output for input {x.data.shape} with kernel {geom.kernel}, "
            f"stride {s}, dilation {d}, padding {p}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    cols = _im2col(xp, kh, kw, s, d, oh, ow)
    wmat = weight.data.reshape(co, ci * kh * kw)
    out2 = cols @ wmat.T
    if bias is not None:
        out2 = out2 + bias.data
    out = np.ascontiguousarray(out2.reshape(n, oh, ow, co).transpose(0, 3, 1, 2))

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward_fn(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * oh * ow, co)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = (g2.T @ cols).reshape(weight.data.shape)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=0)
        if x.requires_grad:
            gxp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    contrib = (g2 @ weight.data[:, :, i, j]).reshape(n, oh, ow, c)
                    gxp[:, :, i * d: i * d + s * oh: s, j * d: j * d + s * ow: s] += \
                        contrib.transpose(0, 3, 1, 2)
            gx = gxp[:, :, p: p + h, p: p + w] if p else gxp
        return (gx, gw) if bias is None else (gx, gw, gb)

    return make_op(out, parents, backward_fn)


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------


def _coerce_scalar(x: Tensor, other):
    """Cast a python scalar to the tensor's dtype; reject array broadcasting."""
    if isinstance(other, Tensor):
        return None
    if np.ndim(other) != 0:
        raise ShapeError(f"expected a Tensor or scalar, got array of shape {np.shape(other)}")
    return x.data.dtype.type(other)


def _check_same_shape(op: str, a: Tensor, b: Tensor):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} differ")
    if a.data.dtype != b.data.dtype:
        raise ShapeError(f"{op}: dtypes {a.data.dtype} and {b.data.dtype} differ")


def add(a: Tensor, b) -> Tensor:
    s = _coerce_scalar(a, b)
    if s is not None:
        return make_op(a.data + s, (a,), lambda g: (g,))
    _check_same_shape("add", a, b)
    return make_op(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b) -> Tensor:
    s = _coerce_scalar(a, b)
    if s is not None:
        return make_op(a.data - s, (a,), lambda g: (g,))
    _check_same_shape("sub", a, b)
    return make_op(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b) -> Tensor:
    s = _coerce_scalar(a, b)
    if s is not None:
        return make_op(a.data * s, (a,), lambda g: (g * s,))
    _check_same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return make_op(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def sigmoid(x: Tensor) -> Tensor:
    """Logistic sigmoid, clipped to stay strictly inside (0, 1)."""
    xd = x.data
    z = np.exp(-np.abs(xd))
    s = np.where(xd >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    info = np.finfo(s.dtype)
    np.clip(s, info.tiny, 1.0 - info.epsneg, out=s)
    return make_op(s, (x,), lambda g: (g * (s * (1.0 - s)),))


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return make_op(t, (x,), lambda g: (g * (1.0 - t * t),))


def relu(x: Tensor) -> Tensor:
    xd = x.data
    return make_op(np.maximum(xd, 0), (x,), lambda g: (g * (xd > 0),))


def leaky_relu(x: Tensor, alpha: float = 0.2) -> Tensor:
    xd = x.data
    pos = xd > 0
    a = xd.dtype.type(alpha)
    return make_op(np.where(pos, xd, a * xd), (x,), lambda g: (g * np.where(pos, g.dtype.type(1), a),))


def elu(x: Tensor, alpha: float = 1.0) -> Tensor:
    xd = x.data
    pos = xd > 0
    a = xd.dtype.type(alpha)
    ex = np.exp(np.minimum(xd, 0))
    out = np.where(pos, xd, a * (ex - 1.0))
    return make_op(out, (x,), lambda g: (g * np.where(pos, g.dtype.type(1), a * ex),))


# ---------------------------------------------------------------------------
# shape / reduction ops
# ---------------------------------------------------------------------------


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    """Replicate each pixel factor x factor; gradient sums replicated cells."""
    if x.data.ndim != 4:
        raise ShapeError(f"upsample_nearest: input must be 4-D, got {x.data.shape}")
    f = int(factor)
    if f < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    n, c, h, w = x.data.shape
    out = x.data.repeat(f, axis=2).repeat(f, axis=3)

    def backward_fn(g):
        return (g.reshape(n, c, h, f, w, f).sum(axis=(3, 5)),)

    return make_op(out, (x,), backward_fn)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ShapeError(f"concat_channels: inputs must be 4-D, got {a.data.shape} and {b.data.shape}")
    na, ca, ha, wa = a.data.shape
    nb, cb, hb, wb = b.data.shape
    if (na, ha, wa) != (nb, hb, wb):
        raise ShapeError(
            f"concat_channels: shapes {a.data.shape} and {b.data.shape} disagree outside the channel axis")
    if a.data.dtype != b.data.dtype:
        raise ShapeError(f"concat_channels: dtypes {a.data.dtype} and {b.data.dtype} differ")
    out = np.concatenate([a.data, b.data], axis=1)

    def backward_fn(g):
        return (np.ascontiguousarray(g[:, :ca]), np.ascontiguousarray(g[:, ca:]))

    return make_op(out, (a, b), backward_fn)


def reduce_sum(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(), dtype=x.data.dtype)
    return make_op(out, (x,), lambda g: (np.full_like(x.data, g),))


def reduce_mean(x: Tensor) -> Tensor:
    size = x.data.size
    out = np.asarray(x.data.sum() / size, dtype=x.data.dtype)
    return make_op(out, (x,), lambda g: (np.full_like(x.data, g / size),))


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires_grad ancestor of a scalar loss.

    Repeated calls accumulate into existing grad buffers.
    """
    if loss.data.shape != ():
        raise ShapeError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any requires_grad tensor")
    order = _topo_order(loss)
    incoming: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.data.dtype)}
    for node in reversed(order):
        g = incoming.pop(id(node), None)
        if g is None:
            continue
        if node.grad is None:
            node.grad = np.zeros_like(node.data)
        node.grad += g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            held = incoming.get(id(parent))
            incoming[id(parent)] = pg if held is None else held + pg


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def grad_check(f, inputs, eps: float = 1e-5, sample: int | None = None, rng=None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` is a nullary callable returning a scalar Tensor; it must rebuild
    the graph from ``inputs`` on every call.  Relative error per element is
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).  With ``sample``
    set, at most that many elements per tensor are probed (chosen by ``rng``),
    which keeps full-network checks tractable.  Use float64 inputs: central
    differences are unreliable in float32.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    inputs = list(inputs)
    for k, t in enumerate(inputs):
        if not t.requires_grad:
            raise ValueError(f"grad_check input {t.name or k} does not require grad")
        if not t.data.flags["C_CONTIGUOUS"]:
            raise ValueError(f"grad_check input {t.name or k} must be contiguous")
        t.grad = None

    loss = f()
    if loss.data.shape != ():
        raise ShapeError(f"grad_check expects a scalar-valued f, got shape {loss.data.shape}")
    if not np.isfinite(loss.data):
        raise ValueError("grad_check: f() returned a non-finite value")
    backward(loss)

    analytic = []
    for k, t in enumerate(inputs):
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        if not np.all(np.isfinite(g)):
            raise ValueError(f"non-finite analytic gradient for parameter {t.name or k}")
        analytic.append(g.reshape(-1).copy())

    worst = 0.0
    for k, t in enumerate(inputs):
        name = t.name or f"inputs[{k}]"
        flat = t.data.reshape(-1)
        if sample is not None and flat.size > sample:
            gen = rng if rng is not None else np.random.default_rng(0)
            idxs = gen.choice(flat.size, size=sample, replace=False)
        else:
            idxs = range(flat.size)
        for i in idxs:
            keep = flat[i]
            flat[i] = keep + eps
            fp = float(f().data)
            flat[i] = keep - eps
            fm = float(f().data)
            flat[i] = keep
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise ValueError(f"non-finite value while perturbing parameter {name}")
            numeric = (fp - fm) / (2.0 * eps)
            ana = float(analytic[k][i])
            rel = abs(ana - numeric) / max(abs(ana), abs(numeric), 1e-8)
            worst = max(worst, rel)
    return worst


# ---------------------------------------------------------------------------
# serialization ("GFT1")
# ---------------------------------------------------------------------------

GFT1_MAGIC = b"GFT1"


def gft1_encode(arr: np.ndarray) -> bytes:
    """Serialize an array: magic, u32 rank, u32 dims, u8 dtype tag, f32 payload.

    Little-endian throughout; tag 0 (float32) is the only defined dtype.
    """
    arr = np.asarray(arr)
    if arr.dtype not in _FLOAT_DTYPES:
        raise ValueError(f"gft1_encode: unsupported dtype {arr.dtype}")
    header = GFT1_MAGIC + struct.pack("<I", arr.ndim)
    if arr.ndim:
        header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    header += struct.pack("<B", 0)
    payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    return header + payload


def gft1_decode(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one GFT1 record starting at ``offset``; returns (array, next offset)."""
    if buf[offset: offset + 4] != GFT1_MAGIC:
        raise ValueError(f"bad tensor magic at offset {offset}: {buf[offset: offset + 4]!r}")
    offset += 4
    (rank,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    dims = struct.unpack_from(f"<{rank}I", buf, offset) if rank else ()
    offset += 4 * rank
    (tag,) = struct.unpack_from("<B", buf, offset)
    offset += 1
    if tag != 0:
        raise ValueError(f"unsupported dtype tag {tag}")
    count = int(np.prod(dims)) if rank else 1
    arr = np.frombuffer(buf, dtype="<f4", count=count, offset=offset).reshape(dims).copy()
    return arr, offset + 4 * count


def save_tensor(path, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(gft1_encode(arr))


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    arr, end = gft1_decode(buf)
    if end != len(buf):
        raise ValueError(f"trailing bytes after tensor payload in {path}")
    return arr
