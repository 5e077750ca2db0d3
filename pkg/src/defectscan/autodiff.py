"""Dense-tensor numerics with reverse-mode gradients.

A Tensor wraps a contiguous float array (float32 by default, float64 for
oracle work).  Differentiable primitives record themselves on the innermost
active GradientTape; since records are appended in execution order, the tape
is already topologically sorted and backward() is a single reverse sweep.

Convolution forward/backward share two memory-movement kernels (im2col /
col2im) provided by the selected backend; everything else is plain numpy.
"""

import math
import threading

import numpy as np

from . import backend
from .errors import ConfigurationError, ContractError, DimensionError, NumericsError

__all__ = [
    "Tensor", "GradientTape", "backward",
    "add", "sub", "mul", "scale", "add_scalar",
    "add_channelwise", "add_row_bias",
    "matmul", "bmm", "conv2d", "conv_transpose2d",
    "group_norm", "silu", "softmax_last",
    "reshape", "permute", "concat_channels",
    "sum_all", "mean_all", "mse",
    "self_attention", "sinusoidal_embedding", "embed_timesteps",
]

_FLOAT_TYPES = (np.float32, np.float64)


class Tensor:
    """N-dimensional float array, optionally participating in gradient recording.

    `data` is owned and treated as immutable once produced by an op; `grad`
    accumulates with += semantics during backward().
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in _FLOAT_TYPES else np.float32
        # asarray with order="C" keeps 0-d scalars 0-d (ascontiguousarray does not)
        self.data = np.asarray(arr, dtype=dtype, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(-1)[0])

    def check_finite(self, what="tensor"):
        """Raise NumericsError if any value is NaN or infinite."""
        if not np.all(np.isfinite(self.data)):
            raise NumericsError(f"{what} contains non-finite values")
        return self

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # Small operator sugar used by tests; the named functions are the real API.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__


class GradientTape:
    """Execution-ordered record of differentiable operations.

    Records are appended as ops execute, so iterating the list in reverse
    visits every node exactly once in reverse topological order.
    """

    def __init__(self):
        self.records = []  # (output, inputs, backward_fn)

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self.records)


_TLS = threading.local()


def _tape_stack():
    # per-thread stacks: a tape is single-threaded, and inference workers
    # running alongside a training tape must not record onto it
    stack = getattr(_TLS, "stack", None)
    if stack is None:
        stack = _TLS.stack = []
    return stack


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


def _record(out, inputs, backward_fn):
    tape = _active_tape()
    if tape is not None and any(i.requires_grad for i in inputs):
        out.requires_grad = True
        tape.records.append((out, inputs, backward_fn))
    return out


def backward(loss, tape):
    """Populate .grad on every recorded tensor reachable from a scalar loss.

    Gradients accumulate (+=) so parameters shared across ops collect every
    contribution.  Raises ContractError for non-scalar losses.
    """
    if not isinstance(loss, Tensor):
        raise ContractError("backward expects a Tensor loss")
    if loss.data.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if not np.all(np.isfinite(loss.data)):
        raise NumericsError("loss is non-finite; cannot backpropagate")
    loss.grad = np.ones_like(loss.data)
    records = tape.records
    for i in range(len(records) - 1, -1, -1):
        out, inputs, fn = records[i]
        records[i] = None  # release closures (and their captures) as we go
        g = out.grad
        if g is None:
            continue
        grads = fn(g)
        out.grad = None  # every consumer already ran; free the buffer
        for inp, gi in zip(inputs, grads):
            if gi is None or not inp.requires_grad:
                continue
            inp.grad = gi if inp.grad is None else inp.grad + gi
    records.clear()


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(a, b, op):
    if a.data.shape != b.data.shape:
        raise DimensionError(f"{op}: shape {a.data.shape} != {b.data.shape}")


# ---------------------------------------------------------------------------
# elementwise / broadcast-lite primitives
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "add")
    out = Tensor(a.data + b.data)

    def bwd(g):
        return g, g

    return _record(out, (a, b), bwd)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "sub")
    out = Tensor(a.data - b.data)

    def bwd(g):
        return g, -g

    return _record(out, (a, b), bwd)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "mul")
    out = Tensor(a.data * b.data)

    def bwd(g):
        return (g * b.data if a.requires_grad else None,
                g * a.data if b.requires_grad else None)

    return _record(out, (a, b), bwd)


def scale(a, s):
    s = float(s)
    out = Tensor(a.data * a.dtype.type(s))

    def bwd(g):
        return (g * s,)

    return _record(out, (a,), bwd)


def add_scalar(a, s):
    out = Tensor(a.data + a.dtype.type(float(s)))

    def bwd(g):
        return (g,)

    return _record(out, (a,), bwd)


def add_channelwise(x, b):
    """x[N,C,H,W] + b[N,C] broadcast over the spatial axes (time-embedding injection)."""
    if x.data.ndim != 4 or b.data.ndim != 2 or x.data.shape[:2] != b.data.shape:
        raise DimensionError(
            f"add_channelwise: x {x.data.shape} incompatible with bias {b.data.shape} (axes 0,1)")
    out = Tensor(x.data + b.data[:, :, None, None])

    def bwd(g):
        return g, g.sum(axis=(2, 3))

    return _record(out, (x, b), bwd)


def add_row_bias(x, b):
    """x[N,D] + b[D] broadcast over rows (dense-layer bias)."""
    if x.data.ndim != 2 or b.data.ndim != 1 or x.data.shape[1] != b.data.shape[0]:
        raise DimensionError(
            f"add_row_bias: x {x.data.shape} incompatible with bias {b.data.shape} (axis 1)")
    out = Tensor(x.data + b.data[None, :])

    def bwd(g):
        return g, g.sum(axis=0)

    return _record(out, (x, b), bwd)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b):
    """a[..., M, K] @ b[K, N] with a 2-D or batched-3-D left operand."""
    if a.data.ndim not in (2, 3) or b.data.ndim != 2:
        raise DimensionError(f"matmul: unsupported ranks {a.data.ndim} x {b.data.ndim}")
    if a.data.shape[-1] != b.data.shape[0]:
        raise DimensionError(
            f"matmul: inner axes {a.data.shape[-1]} != {b.data.shape[0]}")
    out = Tensor(a.data @ b.data)

    def bwd(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if a.data.ndim == 2:
                gb = a.data.T @ g
            else:
                gb = np.tensordot(a.data, g, axes=((0, 1), (0, 1)))
        return ga, gb

    return _record(out, (a, b), bwd)


def bmm(a, b):
    """Batched matmul a[B,M,K] @ b[B,K,N]."""
    if a.data.ndim != 3 or b.data.ndim != 3 or a.data.shape[0] != b.data.shape[0] \
            or a.data.shape[2] != b.data.shape[1]:
        raise DimensionError(f"bmm: shapes {a.data.shape} x {b.data.shape}")
    out = Tensor(a.data @ b.data)

    def bwd(g):
        ga = g @ b.data.transpose(0, 2, 1) if a.requires_grad else None
        gb = a.data.transpose(0, 2, 1) @ g if b.requires_grad else None
        return ga, gb

    return _record(out, (a, b), bwd)


# ---------------------------------------------------------------------------
# convolutions
# ---------------------------------------------------------------------------

def _conv_geometry(h, w, kh, kw, stride, padding):
    if stride < 1 or padding < 0:
        raise ConfigurationError(f"conv: stride {stride} / padding {padding} out of range")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise DimensionError(
            f"conv: kernel {kh}x{kw} exceeds padded input {hp}x{wp} (spatial axes)")
    return (hp - kh) // stride + 1, (wp - kw) // stride + 1


def _pad2d(x, p):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _crop2d(xp, p, h, w):
    if p == 0:
        return xp
    return xp[:, :, p:p + h, p:p + w]


def conv2d(x, w, b, stride=1, padding=0):
    """Cross-correlation of x[N,C,H,W] with w[O,C,kh,kw] plus bias b[O].

    Output spatial size floor((H + 2*padding - kh)/stride) + 1; differentiable
    w.r.t. all three tensor arguments.
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise DimensionError(f"conv2d: need 4-D input/kernel, got {x.data.ndim}/{w.data.ndim}")
    n, c, h, wd = x.data.shape
    o, ck, kh, kw = w.data.shape
    if c != ck:
        raise DimensionError(f"conv2d: input channels {c} != kernel channels {ck} (axis 1)")
    if b.data.shape != (o,):
        raise DimensionError(f"conv2d: bias shape {b.data.shape} != ({o},) (axis 0)")
    oh, ow = _conv_geometry(h, wd, kh, kw, stride, padding)
    ckk = c * kh * kw
    npos = oh * ow

    # 1x1 stride-1 convolutions skip the unfold: columns are just NHWC rows
    pointwise = kh == 1 and kw == 1 and stride == 1 and padding == 0

    def unfold(data):
        if pointwise:
            return np.ascontiguousarray(
                data.reshape(n, c, npos).transpose(0, 2, 1)).reshape(n * npos, c)
        return backend.im2col(_pad2d(data, padding), kh, kw, stride, oh, ow) \
            .reshape(n * npos, ckk)

    w2 = w.data.reshape(o, ckk)
    y = (unfold(x.data) @ w2.T).reshape(n, npos, o)
    y = np.ascontiguousarray(y.transpose(0, 2, 1)).reshape(n, o, oh, ow)
    y += b.data[None, :, None, None]
    out = Tensor(y)

    def bwd(g):
        g2 = np.ascontiguousarray(g.reshape(n, o, npos).transpose(0, 2, 1)) \
            .reshape(n * npos, o)
        gx = gw = gb = None
        if x.requires_grad:
            gcols = g2 @ w2
            if pointwise:
                gx = np.ascontiguousarray(
                    gcols.reshape(n, npos, c).transpose(0, 2, 1)).reshape(n, c, h, wd)
            else:
                gxp = backend.col2im(gcols.reshape(n, npos, ckk), c,
                                     h + 2 * padding, wd + 2 * padding,
                                     kh, kw, stride, oh, ow)
                gx = np.ascontiguousarray(_crop2d(gxp, padding, h, wd))
        if w.requires_grad:
            # columns are recomputed here: cheaper than pinning them on the tape
            gw = (g2.T @ unfold(x.data)).reshape(w.data.shape)
        if b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    return _record(out, (x, w, b), bwd)


def conv_transpose2d(x, w, b, stride=1, padding=0):
    """Transposed convolution: x[N,C,H,W], w[C,O,kh,kw], bias b[O].

    Output spatial size (H-1)*stride - 2*padding + kh.  Exact adjoint of
    conv2d with the same kernel memory layout, stride and padding.
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise DimensionError(f"conv_transpose2d: need 4-D input/kernel, got {x.data.ndim}/{w.data.ndim}")
    n, c, h, wd = x.data.shape
    ck, o, kh, kw = w.data.shape
    if c != ck:
        raise DimensionError(f"conv_transpose2d: input channels {c} != kernel channels {ck} (axis 0)")
    if b.data.shape != (o,):
        raise DimensionError(f"conv_transpose2d: bias shape {b.data.shape} != ({o},) (axis 0)")
    if stride < 1 or padding < 0:
        raise ConfigurationError(f"conv_transpose2d: stride {stride} / padding {padding} out of range")
    hf, wf = (h - 1) * stride + kh, (wd - 1) * stride + kw
    oh, ow = hf - 2 * padding, wf - 2 * padding
    if oh < 1 or ow < 1:
        raise DimensionError(f"conv_transpose2d: output {oh}x{ow} collapsed (spatial axes)")

    npos = h * wd
    okk = o * kh * kw
    w2 = w.data.reshape(c, okk)
    x2 = np.ascontiguousarray(x.data.reshape(n, c, npos).transpose(0, 2, 1)) \
        .reshape(n * npos, c)
    cols = (x2 @ w2).reshape(n, npos, okk)
    yf = backend.col2im(cols, o, hf, wf, kh, kw, stride, h, wd)
    y = np.ascontiguousarray(yf[:, :, padding:padding + oh, padding:padding + ow])
    y += b.data[None, :, None, None]
    out = Tensor(y)

    def bwd(g):
        gx = gw = gb = None
        if x.requires_grad or w.requires_grad:
            gf = np.zeros((n, o, hf, wf), dtype=g.dtype)
            gf[:, :, padding:padding + oh, padding:padding + ow] = g
            gcols = backend.im2col(gf, kh, kw, stride, h, wd).reshape(n * npos, okk)
        if x.requires_grad:
            gx2 = (gcols @ w2.T).reshape(n, npos, c)
            gx = np.ascontiguousarray(gx2.transpose(0, 2, 1)).reshape(n, c, h, wd)
        if w.requires_grad:
            gw = (x2.T @ gcols).reshape(w.data.shape)
        if b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    return _record(out, (x, w, b), bwd)


# ---------------------------------------------------------------------------
# normalization / activation / attention pieces
# ---------------------------------------------------------------------------

def group_norm(x, groups, gamma, beta, eps=1e-5):
    """Per-(sample, group) standardization of x[N,C,H,W] followed by a channel affine."""
    if x.data.ndim != 4:
        raise DimensionError(f"group_norm: need 4-D input, got {x.data.ndim}-D")
    n, c, h, w = x.data.shape
    if c % groups != 0:
        raise ConfigurationError(f"group_norm: channels {c} not divisible by groups {groups}")
    if eps <= 0:
        raise ConfigurationError(f"group_norm: eps must be positive, got {eps}")
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise DimensionError(f"group_norm: affine shapes {gamma.data.shape}/{beta.data.shape} != ({c},)")

    m = (c // groups) * h * w
    xr = x.data.reshape(n, groups, m)
    mu = xr.mean(axis=-1, keepdims=True)
    var = xr.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat_r = (xr - mu) * inv
    xhat = xhat_r.reshape(n, c, h, w)
    out = Tensor(gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None])

    def bwd(g):
        gx = gg = gb = None
        if x.requires_grad:
            dxhat = (g * gamma.data[None, :, None, None]).reshape(n, groups, m)
            term = dxhat - dxhat.mean(axis=-1, keepdims=True) \
                - xhat_r * (dxhat * xhat_r).mean(axis=-1, keepdims=True)
            gx = (inv * term).reshape(n, c, h, w)
        if gamma.requires_grad:
            gg = (g * xhat).sum(axis=(0, 2, 3))
        if beta.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gg, gb

    return _record(out, (x, gamma, beta), bwd)


def silu(x):
    """Elementwise x * sigmoid(x)."""
    e = np.exp(-np.abs(x.data))
    sig = np.where(x.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    out = Tensor(x.data * sig)

    def bwd(g):
        return (g * (sig + x.data * sig * (1.0 - sig)),)

    return _record(out, (x,), bwd)


def softmax_last(x):
    """Softmax over the last axis, numerically stabilized."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y)

    def bwd(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _record(out, (x,), bwd)


# ---------------------------------------------------------------------------
# shape plumbing
# ---------------------------------------------------------------------------

def reshape(x, shape):
    out = Tensor(x.data.reshape(shape))

    def bwd(g):
        return (g.reshape(x.data.shape),)

    return _record(out, (x,), bwd)


def permute(x, axes):
    inv = tuple(np.argsort(axes))
    out = Tensor(np.ascontiguousarray(x.data.transpose(axes)))

    def bwd(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return _record(out, (x,), bwd)


def concat_channels(a, b):
    """Concatenate two [N,C,H,W] tensors along the channel axis."""
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise DimensionError("concat_channels: need 4-D inputs")
    if a.data.shape[0] != b.data.shape[0] or a.data.shape[2:] != b.data.shape[2:]:
        raise DimensionError(
            f"concat_channels: {a.data.shape} and {b.data.shape} differ off the channel axis")
    ca = a.data.shape[1]
    out = Tensor(np.concatenate([a.data, b.data], axis=1))

    def bwd(g):
        return g[:, :ca], g[:, ca:]

    return _record(out, (a, b), bwd)


def sum_all(x):
    out = Tensor(np.asarray(x.data.sum(), dtype=x.dtype))

    def bwd(g):
        return (np.full(x.data.shape, float(g), dtype=x.dtype),)

    return _record(out, (x,), bwd)


def mean_all(x):
    inv = 1.0 / x.data.size
    out = Tensor(np.asarray(x.data.mean(), dtype=x.dtype))

    def bwd(g):
        return (np.full(x.data.shape, float(g) * inv, dtype=x.dtype),)

    return _record(out, (x,), bwd)


def mse(a, b):
    """Mean squared error over all elements, as a scalar tensor."""
    d = sub(a, b)
    return mean_all(mul(d, d))


# ---------------------------------------------------------------------------
# attention and time embeddings
# ---------------------------------------------------------------------------

def self_attention(x, wq, wk, wv, wo, return_weights=False):
    """Spatial self-attention over x[N,C,H,W] with a residual connection.

    Flattens the spatial grid to a sequence of H*W tokens, attends with
    softmax(Q K^T / sqrt(C)) V, projects back through wo and adds the input.
    """
    n, c, h, w = x.data.shape
    for name, m in (("wq", wq), ("wk", wk), ("wv", wv), ("wo", wo)):
        if m.data.shape != (c, c):
            raise DimensionError(f"self_attention: {name} shape {m.data.shape} != ({c},{c})")
    seq = permute(reshape(x, (n, c, h * w)), (0, 2, 1))  # [N, HW, C]
    q = matmul(seq, wq)
    k = matmul(seq, wk)
    v = matmul(seq, wv)
    scores = scale(bmm(q, permute(k, (0, 2, 1))), 1.0 / math.sqrt(c))
    weights = softmax_last(scores)
    ctx = matmul(bmm(weights, v), wo)
    out = add(x, reshape(permute(ctx, (0, 2, 1)), (n, c, h, w)))
    if return_weights:
        return out, weights.data
    return out


def _embedding_divisors(dim, max_period):
    half = dim // 2
    if half == 1:
        return np.ones(1)
    exponents = np.arange(half) / (half - 1)
    return max_period ** exponents


def sinusoidal_embedding(t, dim, max_period=10000.0):
    """Fixed sin/cos positional code of a timestep: half sines, half cosines.

    Wavelength divisors are geometrically spaced over [1, max_period].
    """
    if dim % 2 != 0:
        raise ConfigurationError(f"sinusoidal_embedding: dim must be even, got {dim}")
    if t < 0:
        raise ContractError(f"sinusoidal_embedding: t must be >= 0, got {t}")
    args = float(t) / _embedding_divisors(dim, max_period)
    return Tensor(np.concatenate([np.sin(args), np.cos(args)]).astype(np.float32))


def embed_timesteps(ts, dim, max_period=10000.0):
    """Vectorized sinusoidal_embedding for a batch of timesteps -> Tensor[N, dim]."""
    if dim % 2 != 0:
        raise ConfigurationError(f"embed_timesteps: dim must be even, got {dim}")
    ts = np.asarray(ts, dtype=np.float64).reshape(-1)
    if np.any(ts < 0):
        raise ContractError("embed_timesteps: timesteps must be >= 0")
    args = ts[:, None] / _embedding_divisors(dim, max_period)[None, :]
    return Tensor(np.concatenate([np.sin(args), np.cos(args)], axis=1).astype(np.float32))
