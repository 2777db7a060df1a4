"""Dense float64 tensors with tape-free reverse-mode autodiff.

Every primitive is registered in ``OPS`` and produces a new :class:`Tensor`
that remembers its parents, the op name and the attributes it was called with.
That is enough to walk the graph backwards (``backward``) and to replay it
forwards from the leaves (``ComputationRecord.replay``).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64

_ids = itertools.count()


class ShapeMismatch(ValueError):
    pass


class NonFinite(FloatingPointError):
    pass


class NotScalar(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "id", "op", "parents", "attrs", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.id = next(_ids)
        self.op: Optional[str] = None
        self.parents: Tuple[Tensor, ...] = ()
        self.attrs: dict = {}
        self._backward: Optional[Callable] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self.op is None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None):
        return tsum(self, axis=axis)

    def mean(self, axis=None):
        return mean(self, axis=axis)

    def relu(self):
        return relu(self)

    def backward(self, seed: float = 1.0):
        return backward(self, seed)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


OPS: Dict[str, Callable] = {}


def primitive(fn):
    OPS[fn.__name__] = fn
    return fn


def _make(op: str, parents: Sequence[Tensor], out: np.ndarray, backward_fn, attrs: dict) -> Tensor:
    if not np.all(np.isfinite(out)):
        raise NonFinite(f"{op} produced non-finite values")
    t = Tensor(out)
    t.op = op
    t.parents = tuple(parents)
    t.attrs = attrs
    t.requires_grad = any(p.requires_grad for p in parents)
    if t.requires_grad:
        t._backward = backward_fn
    return t


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeMismatch(f"{op}: {a.shape} vs {b.shape}") from exc


# ---------------------------------------------------------------- elementwise


@primitive
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make("add", (a, b), a.data + b.data, bw, {})


@primitive
def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make("sub", (a, b), a.data - b.data, bw, {})


@primitive
def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make("mul", (a, b), a.data * b.data, bw, {})


@primitive
def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make("neg", (a,), -a.data, lambda g: (-g,), {})


@primitive
def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make("exp", (a,), out, lambda g: (g * out,), {})


@primitive
def square(a) -> Tensor:
    a = as_tensor(a)
    return _make("square", (a,), a.data * a.data, lambda g: (2.0 * a.data * g,), {})


@primitive
def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make("relu", (a,), np.where(mask, a.data, 0.0), lambda g: (g * mask,), {})


# ---------------------------------------------------------------- reductions / shape


@primitive
def tsum(a, axis=None) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis)

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make("tsum", (a,), np.asarray(out), bw, {"axis": axis})


@primitive
def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    out = a.data.mean(axis=axis)
    n = a.data.size // max(np.asarray(out).size, 1)

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _make("mean", (a,), np.asarray(out), bw, {"axis": axis})


@primitive
def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeMismatch(f"reshape: {a.shape} -> {shape}") from exc
    return _make("reshape", (a,), out, lambda g: (g.reshape(a.shape),), {"shape": tuple(shape)})


def flatten(a) -> Tensor:
    """Collapse everything but the leading (batch) axis."""
    a = as_tensor(a)
    return reshape(a, (a.shape[0], -1))


@primitive
def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")

    if b.ndim == 2 and a.ndim > 2:
        # shared right operand: fold the batch into rows so each side is one GEMM
        k = a.shape[-1]
        a2 = a.data.reshape(-1, k)

        def bw(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        out = (a2 @ b.data).reshape(a.shape[:-1] + (b.shape[-1],))
        return _make("matmul", (a, b), out, bw, {})

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _make("matmul", (a, b), a.data @ b.data, bw, {})


@primitive
def l2_norm(a) -> Tensor:
    a = as_tensor(a)
    n = float(np.sqrt(np.sum(a.data * a.data)))

    def bw(g):
        if n == 0.0:
            return (np.zeros_like(a.data),)
        return (g * a.data / n,)

    return _make("l2_norm", (a,), np.asarray(n), bw, {})


# ---------------------------------------------------------------- pooling / conv


@primitive
def global_avg_pool(a) -> Tensor:
    """Mean over the two trailing (spatial) axes."""
    a = as_tensor(a)
    if a.ndim < 2:
        raise ShapeMismatch(f"global_avg_pool needs >= 2 dims, got {a.shape}")
    h, w = a.shape[-2:]
    out = a.data.mean(axis=(-2, -1))

    def bw(g):
        return (np.broadcast_to(g[..., None, None] / (h * w), a.shape).copy(),)

    return _make("global_avg_pool", (a,), out, bw, {})


@primitive
def block_avg_pool(a, kernel: int) -> Tensor:
    """Non-overlapping ``kernel x kernel`` means over the trailing axes."""
    a = as_tensor(a)
    h, w = a.shape[-2:]
    if h % kernel or w % kernel:
        raise ShapeMismatch(f"block_avg_pool: kernel {kernel} does not tile {h}x{w}")
    lead = a.shape[:-2]
    blocks = a.data.reshape(lead + (h // kernel, kernel, w // kernel, kernel))
    out = blocks.mean(axis=(-3, -1))

    def bw(g):
        gb = np.broadcast_to(
            g[..., :, None, :, None] / (kernel * kernel),
            lead + (h // kernel, kernel, w // kernel, kernel),
        )
        return (gb.reshape(a.shape).copy(),)

    return _make("block_avg_pool", (a,), out, bw, {"kernel": kernel})


def conv_output_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


@primitive
def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """NCHW cross-correlation via im2col."""
    x, w = as_tensor(x), as_tensor(w)
    parents = (x, w) if b is None else (x, w, as_tensor(b))
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeMismatch(f"conv2d: input {x.shape} weight {w.shape}")
    if b is not None and parents[2].shape != (w.shape[0],):
        raise ShapeMismatch(f"conv2d: bias {parents[2].shape} for {w.shape[0]} filters")
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(wd, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeMismatch(f"conv2d: kernel {kh}x{kw} larger than padded input {h}x{wd}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, cin * kh * kw)
    wm = w.data.reshape(cout, -1)
    out = cols @ wm.T
    if b is not None:
        out = out + parents[2].data
    out = out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)

    def bw(g):
        gr = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)
        gx = gw = gb = None
        if w.requires_grad:
            gw = (gr.T @ cols).reshape(w.shape)
        if x.requires_grad:
            # col2im in NHWC so every tap is a contiguous (cin) slab
            wt = w.data.transpose(0, 2, 3, 1).reshape(cout, -1)
            gcols = (gr @ wt).reshape(n, ho, wo, kh, kw, cin)
            gxp = np.zeros((n, xp.shape[2], xp.shape[3], cin), dtype=DTYPE)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[:, :, :, i, j]
            gx = gxp[:, padding : padding + h, padding : padding + wd].transpose(0, 3, 1, 2)
            gx = np.ascontiguousarray(gx)
        if b is not None and parents[2].requires_grad:
            gb = gr.sum(axis=0)
        return (gx, gw) if b is None else (gx, gw, gb)

    return _make("conv2d", parents, np.ascontiguousarray(out), bw, {"stride": stride, "padding": padding})


# ---------------------------------------------------------------- losses


def log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def _labels(labels, n):
    y = np.asarray(labels, dtype=np.int64)
    if y.shape != (n,):
        raise ShapeMismatch(f"labels shape {y.shape} for batch of {n}")
    return y


@primitive
def softmax_cross_entropy(logits, labels) -> Tensor:
    """Batch-mean cross entropy of ``logits`` (N, K) against integer labels."""
    z = as_tensor(logits)
    if z.ndim != 2:
        raise ShapeMismatch(f"logits must be (N, K), got {z.shape}")
    n = z.shape[0]
    y = _labels(labels, n)
    lp = log_softmax(z.data)
    loss = -lp[np.arange(n), y].mean()

    def bw(g):
        p = np.exp(lp)
        p[np.arange(n), y] -= 1.0
        return (g * p / n,)

    return _make("softmax_cross_entropy", (z,), np.asarray(loss), bw, {"labels": y})


@primitive
def kl_div_softmax(p_logits, q_logits) -> Tensor:
    """Batch-mean KL(softmax(p_logits) || softmax(q_logits))."""
    a, b = as_tensor(p_logits), as_tensor(q_logits)
    if a.shape != b.shape or a.ndim != 2:
        raise ShapeMismatch(f"kl_div_softmax: {a.shape} vs {b.shape}")
    n = a.shape[0]
    lp, lq = log_softmax(a.data), log_softmax(b.data)
    p = np.exp(lp)
    per = (p * (lp - lq)).sum(axis=-1)

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = g * p * ((lp - lq) - per[:, None]) / n
        if b.requires_grad:
            gb = g * (np.exp(lq) - p) / n
        return ga, gb

    return _make("kl_div_softmax", (a, b), np.asarray(per.mean()), bw, {})


@primitive
def cw_margin(logits, labels, kappa: float = 0.0) -> Tensor:
    """Batch-mean of min(max_{j != y} z_j - z_y, kappa).

    Increasing it pushes the true logit under the best competitor; the cap at
    ``kappa`` stops the push once the sample is misclassified by that margin.
    """
    z = as_tensor(logits)
    if z.ndim != 2 or z.shape[1] < 2:
        raise ShapeMismatch(f"cw_margin needs (N, K>=2) logits, got {z.shape}")
    n = z.shape[0]
    y = _labels(labels, n)
    rows = np.arange(n)
    masked = z.data.copy()
    masked[rows, y] = -np.inf
    other = masked.argmax(axis=1)
    margin = z.data[rows, other] - z.data[rows, y]
    active = margin < kappa
    out = np.where(active, margin, kappa).mean()

    def bw(g):
        gz = np.zeros_like(z.data)
        gz[rows, other] += active * g / n
        gz[rows, y] -= active * g / n
        return (gz,)

    return _make("cw_margin", (z,), np.asarray(out), bw, {"labels": y, "kappa": kappa})


def margin(logits: np.ndarray, labels) -> np.ndarray:
    """Raw per-sample margin max_{j != y} z_j - z_y (positive means misclassified)."""
    z = np.asarray(logits, dtype=DTYPE)
    y = np.asarray(labels, dtype=np.int64)
    rows = np.arange(len(y))
    masked = z.copy()
    masked[rows, y] = -np.inf
    return masked.max(axis=1) - z[rows, y]


# ---------------------------------------------------------------- records


@dataclass
class RecordEntry:
    op: str
    input_ids: Tuple[int, ...]
    output_id: int
    attrs: dict = field(default_factory=dict)


@dataclass
class ComputationRecord:
    """Topologically ordered view of the graph that produced ``output``."""

    entries: List[RecordEntry]
    leaves: Dict[int, Tensor]
    nodes: Dict[int, Tensor]
    output: Tensor

    @classmethod
    def of(cls, output: Tensor) -> "ComputationRecord":
        order = _topo(output)
        leaves = {t.id: t for t in order if t.is_leaf}
        entries = [
            RecordEntry(t.op, tuple(p.id for p in t.parents), t.id, t.attrs) for t in order if not t.is_leaf
        ]
        return cls(entries, leaves, {t.id: t for t in order}, output)

    def replay(self) -> Dict[int, np.ndarray]:
        """Re-run every op from the stored leaves; returns output id -> data."""
        values: Dict[int, Tensor] = {i: Tensor(t.data) for i, t in self.leaves.items()}
        for e in self.entries:
            args = [values[i] for i in e.input_ids]
            values[e.output_id] = OPS[e.op](*args, **e.attrs)
        return {e.output_id: values[e.output_id].data for e in self.entries}


def _topo(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.id in seen:
            continue
        seen.add(node.id)
        stack.append((node, True))
        for p in node.parents:
            if p.id not in seen:
                stack.append((p, False))
    return order


def backward(root, seed: float = 1.0) -> Dict[int, np.ndarray]:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every leaf that requires grad.

    ``root`` may be a Tensor or a ComputationRecord. Returns leaf id -> gradient.
    """
    if isinstance(root, ComputationRecord):
        root = root.output
    if root.data.ndim != 0:
        raise NotScalar(f"backward needs a 0-d output, got shape {root.shape}")
    grads: Dict[int, np.ndarray] = {root.id: np.asarray(seed, dtype=DTYPE)}
    out: Dict[int, np.ndarray] = {}
    for node in reversed(_topo(root)):
        g = grads.pop(node.id, None)
        if g is None or not node.requires_grad:
            continue
        if node.is_leaf:
            node.grad = g if node.grad is None else node.grad + g
            out[node.id] = node.grad
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            grads[parent.id] = pg if parent.id not in grads else grads[parent.id] + pg
    return out


# ---------------------------------------------------------------- spec-driven evaluation


def evaluate(inputs: Dict[str, Tensor], graph_spec: Sequence[tuple]) -> Dict[str, Tensor]:
    """Run an op sequence over named tensors.

    Each step is ``(op, input_names, output_name)`` or
    ``(op, input_names, output_name, attrs)``. Returns every named value,
    inputs included.
    """
    env = dict(inputs)
    for step in graph_spec:
        op, names, out_name = step[:3]
        attrs = step[3] if len(step) > 3 else {}
        if op not in OPS:
            raise KeyError(f"unknown op {op!r}")
        env[out_name] = OPS[op](*(env[n] for n in names), **attrs)
    return env


@dataclass
class GradCheck:
    max_rel_error: float
    worst_index: Optional[Tuple[int, ...]]
    passed: bool
    message: str = ""


def finite_difference_check(
    fn: Callable[[Tensor], Tensor], point, step: float = 1e-5, tol: float = 1e-4
) -> GradCheck:
    """Compare reverse-mode gradients of scalar ``fn`` against central differences.

    Error per coordinate is |analytic - numeric| / max(1, |analytic|).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x0 = np.array(as_tensor(point).data, dtype=DTYPE)
    x = Tensor(x0.copy(), requires_grad=True)
    try:
        y = fn(x)
        backward(y)
    except (NonFinite, FloatingPointError) as exc:
        return GradCheck(float("inf"), None, False, f"analytic pass failed: {exc}")
    analytic = np.zeros_like(x0) if x.grad is None else x.grad
    worst, worst_idx = 0.0, None
    flat = x0.reshape(-1)
    for i in range(flat.size):
        idx = np.unravel_index(i, x0.shape)
        hi, lo = flat.copy(), flat.copy()
        hi[i] += step
        lo[i] -= step
        try:
            fh = fn(Tensor(hi.reshape(x0.shape))).item()
            fl = fn(Tensor(lo.reshape(x0.shape))).item()
        except (NonFinite, FloatingPointError) as exc:
            return GradCheck(float("inf"), idx, False, f"non-finite at {idx}: {exc}")
        num = (fh - fl) / (2 * step)
        a = analytic[idx]
        if not (np.isfinite(num) and np.isfinite(a)):
            return GradCheck(float("inf"), idx, False, f"non-finite gradient at {idx}")
        err = abs(a - num) / max(1.0, abs(a))
        if err > worst:
            worst, worst_idx = err, idx
    return GradCheck(worst, worst_idx, worst <= tol)


def sign(a: np.ndarray) -> np.ndarray:
    """np.sign, spelled out: sign(0) == 0 keeps signed steps inert on flat gradients."""
    return np.sign(a)
