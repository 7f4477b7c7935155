"""Dense float64 tensors with reverse-mode automatic differentiation.

The graph is rebuilt on every forward pass (define-by-run): each operation
returns a new Tensor holding references to its parents and a VJP closure.
``Tensor.backward()`` walks the graph once in reverse topological order and
accumulates gradients into ``.grad`` buffers, summing across repeated calls
so a trainer can accumulate over a batch before stepping.

Everything is float64. Every operation validates that its output is finite
and raises :class:`NumericsError` otherwise; NaN/Inf is never propagated
silently.

Non-smooth operations (``relu``, ``bilinear_sample``) additionally record a
discrete "branch signature" (activation masks, interpolation cells) when a
:func:`record_branch_signature` context is active. The finite-difference
harness uses the signature to detect perturbations that cross a kink, where
a central difference is not a valid derivative estimate.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericsError, ShapeError, UsageError

__all__ = [
    "Tensor",
    "constant",
    "parameter",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "transpose",
    "transpose_axes",
    "reshape",
    "concat_rows",
    "slice_cols",
    "relu",
    "softmax_rows",
    "mean_rows",
    "sum_all",
    "conv2d",
    "bilinear_sample",
    "cross_entropy",
    "no_grad",
    "record_branch_signature",
    "grad_check",
    "GradCheckReport",
]

# 3x3 tap offsets in (dy, dx) order matching a row-major kernel layout:
# tap index t = (ky * 3 + kx) with ky, kx in {0, 1, 2} and offset = index - 1.
CONV_TAPS = tuple((ky - 1, kx - 1) for ky in range(3) for kx in range(3))

_SIGNATURE_SINK: list | None = None
_GRAD_ENABLED = True


def _as_f64(data) -> np.ndarray:
    if isinstance(data, np.ndarray) and data.dtype == np.float64 and data.flags.c_contiguous:
        return data
    arr = np.asarray(data, dtype=np.float64)
    return np.ascontiguousarray(arr)


def _ensure_finite(arr: np.ndarray, op: str) -> None:
    # cheap screen first: the sum is non-finite whenever any element is
    # (and only spuriously so on astronomic overflow)
    if not np.isfinite(arr.sum()) and not np.all(np.isfinite(arr)):
        raise NumericsError(f"{op} produced non-finite values")


def _record_signature(item) -> None:
    if _SIGNATURE_SINK is not None:
        _SIGNATURE_SINK.append(item)


@contextmanager
def no_grad():
    """Disable graph recording inside the context (forward-only evaluation)."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


@contextmanager
def record_branch_signature():
    """Collect discrete branch decisions (relu masks, bilinear cells) made
    by all ops evaluated inside the context. Yields the signature list."""
    global _SIGNATURE_SINK
    previous = _SIGNATURE_SINK
    sink: list = []
    _SIGNATURE_SINK = sink
    try:
        yield sink
    finally:
        _SIGNATURE_SINK = previous


class Tensor:
    """A dense float64 array plus optional gradient bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _vjp=None):
        self.data = _as_f64(data)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = _parents
        self._vjp = _vjp

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.size != 1:
            raise UsageError(f"item() on tensor of size {self.size}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, seed: np.ndarray | None = None) -> None:
        """Reverse-mode sweep from this tensor.

        Without an explicit seed the tensor must be a scalar (size 1).
        Gradients accumulate into ``.grad``; call :meth:`zero_grad` on leaves
        between unrelated backward passes.
        """
        if seed is None:
            if self.size != 1:
                raise UsageError("backward() without seed requires a scalar tensor")
            seed = np.ones_like(self.data)
        else:
            seed = _as_f64(seed)
            if seed.shape != self.shape:
                raise ShapeError("seed shape does not match tensor shape")

        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): seed}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad and node._vjp is None:
                # leaf: accumulate into persistent buffer
                if node.grad is None:
                    node.grad = g.copy()
                else:
                    node.grad += g
                continue
            if node._vjp is None:
                continue
            parent_grads = node._vjp(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    # out-of-place: a vjp may return the same (or a viewed)
                    # array for several parents, so stored grads must never
                    # be mutated in place
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


def _topo_order(root: Tensor) -> list[Tensor]:
    """Reverse topological order; each node visited exactly once."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen and parent.requires_grad:
                stack.append((parent, False))
    order.reverse()
    return order


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over dimensions that were broadcast in the forward op."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _make(out_data: np.ndarray, op: str, parents: tuple[Tensor, ...], vjp) -> Tensor:
    _ensure_finite(out_data, op)
    requires = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    return Tensor(out_data, requires_grad=requires,
                  _parents=parents if requires else (),
                  _vjp=vjp if requires else None)


def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, "add", (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(out, "sub", (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out = a.data * b.data
    a_data, b_data = a.data, b.data

    def vjp(g):
        return _unbroadcast(g * b_data, a.shape), _unbroadcast(g * a_data, b.shape)

    return _make(out, "mul", (a, b), vjp)


def scale(a, s: float) -> Tensor:
    """Multiply by a Python scalar constant (no gradient w.r.t. s)."""
    a = _coerce(a)
    s = float(s)
    out = a.data * s

    def vjp(g):
        return (g * s,)

    return _make(out, "scale", (a,), vjp)


def matmul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    out = a.data @ b.data
    a_data, b_data = a.data, b.data

    def vjp(g):
        return g @ b_data.T, a_data.T @ g

    return _make(out, "matmul", (a, b), vjp)


def transpose(a) -> Tensor:
    a = _coerce(a)
    if a.ndim != 2:
        raise ShapeError("transpose expects a 2-D tensor")
    out = a.data.T.copy()

    def vjp(g):
        return (g.T,)

    return _make(out, "transpose", (a,), vjp)


def transpose_axes(a, axes: tuple[int, ...]) -> Tensor:
    a = _coerce(a)
    out = np.ascontiguousarray(np.transpose(a.data, axes))
    inverse = tuple(np.argsort(axes))

    def vjp(g):
        return (np.transpose(g, inverse),)

    return _make(out, "transpose_axes", (a,), vjp)


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = _coerce(a)
    out = a.data.reshape(shape)
    orig = a.shape

    def vjp(g):
        return (g.reshape(orig),)

    return _make(out, "reshape", (a,), vjp)


def concat_rows(parts: list[Tensor]) -> Tensor:
    parts = [_coerce(p) for p in parts]
    if not parts:
        raise UsageError("concat_rows of an empty list")
    out = np.concatenate([p.data for p in parts], axis=0)
    sizes = [p.shape[0] for p in parts]

    def vjp(g):
        grads = []
        start = 0
        for n in sizes:
            grads.append(g[start:start + n])
            start += n
        return tuple(grads)

    return _make(out, "concat_rows", tuple(parts), vjp)


def slice_cols(a, j0: int, j1: int) -> Tensor:
    a = _coerce(a)
    if a.ndim != 2:
        raise ShapeError("slice_cols expects a 2-D tensor")
    out = a.data[:, j0:j1].copy()
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        full[:, j0:j1] = g
        return (full,)

    return _make(out, "slice_cols", (a,), vjp)


def relu(a) -> Tensor:
    a = _coerce(a)
    mask = a.data > 0.0
    _record_signature(("relu", mask.tobytes()))
    out = np.where(mask, a.data, 0.0)

    def vjp(g):
        return (g * mask,)

    return _make(out, "relu", (a,), vjp)


def softmax_rows(a) -> Tensor:
    """Row-wise softmax with per-row max subtraction for stability."""
    a = _coerce(a)
    if a.ndim != 2:
        raise ShapeError("softmax_rows expects a 2-D tensor")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        inner = (g * out).sum(axis=1, keepdims=True)
        return (out * (g - inner),)

    return _make(out, "softmax_rows", (a,), vjp)


def mean_rows(a) -> Tensor:
    """Mean over axis 0, keeping a leading dimension of 1."""
    a = _coerce(a)
    if a.ndim != 2:
        raise ShapeError("mean_rows expects a 2-D tensor")
    n = a.shape[0]
    out = a.data.mean(axis=0, keepdims=True)

    def vjp(g):
        return (np.broadcast_to(g / n, (n, g.shape[1])).copy(),)

    return _make(out, "mean_rows", (a,), vjp)


def sum_all(a) -> Tensor:
    a = _coerce(a)
    out = np.array([[a.data.sum()]])
    shape = a.shape

    def vjp(g):
        return (np.full(shape, g.reshape(-1)[0]),)

    return _make(out, "sum_all", (a,), vjp)


def _im2col(padded: np.ndarray, h: int, w: int) -> np.ndarray:
    """(c, h+2, w+2) -> (c*9, h*w) with rows ordered channel-major, then tap."""
    c = padded.shape[0]
    cols = np.empty((c, 9, h, w))
    for t, (dy, dx) in enumerate(CONV_TAPS):
        cols[:, t] = padded[:, dy + 1:dy + 1 + h, dx + 1:dx + 1 + w]
    return cols.reshape(c * 9, h * w)


def conv2d(x, kernel) -> Tensor:
    """3x3 cross-correlation with zero padding 1.

    x: (c, h, w); kernel: (o, c, 3, 3) -> (o, h, w).
    """
    x, kernel = _coerce(x), _coerce(kernel)
    if x.ndim != 3:
        raise ShapeError(f"conv2d input must be (c, h, w), got {x.shape}")
    if kernel.ndim != 4 or kernel.shape[2:] != (3, 3):
        raise ShapeError(f"conv2d kernel must be (o, c, 3, 3), got {kernel.shape}")
    c, h, w = x.shape
    o = kernel.shape[0]
    if kernel.shape[1] != c:
        raise ShapeError(f"conv2d channel mismatch: input {c}, kernel {kernel.shape[1]}")

    padded = np.zeros((c, h + 2, w + 2))
    padded[:, 1:-1, 1:-1] = x.data
    col = _im2col(padded, h, w)
    k_flat = kernel.data.reshape(o, c * 9)
    out = (k_flat @ col).reshape(o, h, w)

    def vjp(g):
        g_flat = g.reshape(o, h * w)
        g_kernel = (g_flat @ col.T).reshape(kernel.shape)
        g_col = (k_flat.T @ g_flat).reshape(c, 9, h, w)
        g_padded = np.zeros((c, h + 2, w + 2))
        for t, (dy, dx) in enumerate(CONV_TAPS):
            g_padded[:, dy + 1:dy + 1 + h, dx + 1:dx + 1 + w] += g_col[:, t]
        return g_padded[:, 1:-1, 1:-1], g_kernel

    return _make(out, "conv2d", (x, kernel), vjp)


def bilinear_sample(x, coords) -> Tensor:
    """Bilinear interpolation of (c, h, w) at real-valued (y, x) positions.

    coords: (L, 2) tensor or list of (y, x) pairs. Out-of-bounds reads are
    zero (matching conv2d's zero padding). Differentiable in both arguments;
    the coordinate gradient is undefined on the integer lattice, where the
    left/right derivatives differ.
    """
    x = _coerce(x)
    coords = _coerce(coords)
    if x.ndim != 3:
        raise ShapeError(f"bilinear_sample input must be (c, h, w), got {x.shape}")
    if coords.ndim != 2 or coords.shape[1] != 2:
        raise ShapeError(f"coords must be (L, 2), got {coords.shape}")
    c, h, w = x.shape
    ys = coords.data[:, 0]
    xs = coords.data[:, 1]
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    wy = ys - y0
    wx = xs - x0
    _record_signature(("bilinear", y0.tobytes(), x0.tobytes()))

    def corner(yi, xi):
        valid = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
        vals = x.data[:, yi.clip(0, h - 1), xi.clip(0, w - 1)] * valid
        return vals, valid

    v00, m00 = corner(y0, x0)
    v01, m01 = corner(y0, x0 + 1)
    v10, m10 = corner(y0 + 1, x0)
    v11, m11 = corner(y0 + 1, x0 + 1)
    w00 = (1 - wy) * (1 - wx)
    w01 = (1 - wy) * wx
    w10 = wy * (1 - wx)
    w11 = wy * wx
    out = v00 * w00 + v01 * w01 + v10 * w10 + v11 * w11

    def vjp(g):
        flat = [(y0, x0, m00, w00), (y0, x0 + 1, m01, w01),
                (y0 + 1, x0, m10, w10), (y0 + 1, x0 + 1, m11, w11)]
        idx_parts, contrib_parts = [], []
        for yi, xi, mask, wgt in flat:
            if not mask.any():
                continue
            idx_parts.append((yi.clip(0, h - 1) * w + xi.clip(0, w - 1))[mask])
            contrib_parts.append(g[:, mask] * wgt[mask])
        if idx_parts:
            idx_all = np.concatenate(idx_parts)
            contrib_all = np.concatenate(contrib_parts, axis=1)
            g_x = np.stack([np.bincount(idx_all, weights=contrib_all[ch],
                                        minlength=h * w)
                            for ch in range(c)]).reshape(c, h, w)
        else:
            g_x = np.zeros((c, h, w))

        # d out / d y  and  d out / d x per sample, summed over channels
        dy_vals = ((v10 - v00) * (1 - wx) + (v11 - v01) * wx)
        dx_vals = ((v01 - v00) * (1 - wy) + (v11 - v10) * wy)
        g_coords = np.stack([(g * dy_vals).sum(axis=0),
                             (g * dx_vals).sum(axis=0)], axis=1)
        return g_x, g_coords

    return _make(out, "bilinear_sample", (x, coords), vjp)


def cross_entropy(logits, target: int) -> Tensor:
    """Stable cross-entropy of a single logit row against an integer class."""
    logits = _coerce(logits)
    if logits.ndim == 1:
        logits = reshape(logits, (1, logits.shape[0]))
    if logits.ndim != 2 or logits.shape[0] != 1:
        raise ShapeError(f"cross_entropy expects a single logit row, got {logits.shape}")
    k = logits.shape[1]
    target = int(target)
    if not 0 <= target < k:
        raise UsageError(f"target {target} out of range for {k} classes")
    z = logits.data[0]
    m = z.max()
    lse = m + math.log(np.exp(z - m).sum())
    out = np.array([[lse - z[target]]])
    probs = np.exp(z - lse)

    def vjp(g):
        grad = probs.copy()
        grad[target] -= 1.0
        return (g.reshape(-1)[0] * grad.reshape(1, k),)

    return _make(out, "cross_entropy", (logits,), vjp)


# ---------------------------------------------------------------------------
# Finite-difference verification harness
# ---------------------------------------------------------------------------

@dataclass
class ParamCheck:
    max_rel_error: float
    n_checked: int
    n_skipped: int


@dataclass
class GradCheckReport:
    """Per-parameter outcome of a central-finite-difference comparison."""
    per_param: dict[str, ParamCheck] = field(default_factory=dict)
    eps: float = 0.0

    @property
    def max_rel_error(self) -> float:
        checked = [c.max_rel_error for c in self.per_param.values() if c.n_checked]
        return max(checked) if checked else 0.0

    @property
    def worst_param(self) -> str:
        worst, value = "", -1.0
        for name, c in self.per_param.items():
            if c.n_checked and c.max_rel_error > value:
                worst, value = name, c.max_rel_error
        return worst

    def summary(self) -> str:
        lines = [f"grad check (eps={self.eps:g}): max rel err {self.max_rel_error:.3e}"]
        for name, c in sorted(self.per_param.items()):
            lines.append(f"  {name}: max_rel={c.max_rel_error:.3e} "
                         f"checked={c.n_checked} skipped={c.n_skipped}")
        return "\n".join(lines)


def grad_check(f, params: dict[str, Tensor], eps: float = 1e-3,
               samples_per_param: int | None = None,
               rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare analytic gradients of a scalar function against central
    finite differences, elementwise per parameter.

    ``f`` takes no arguments and returns a scalar Tensor built from the
    current values of ``params``. When ``samples_per_param`` is set, a
    random subset of elements per parameter is checked (seeded via ``rng``);
    otherwise every element is checked.

    Elements whose +/-eps evaluations land on different sides of a
    non-smooth branch (relu mask or bilinear cell change) are skipped and
    counted: a central difference across a kink does not estimate the
    derivative. Relative error uses max(1e-8, |a| + |n|) as denominator.
    """
    if rng is None:
        rng = np.random.default_rng(0)

    with record_branch_signature() as sig_ref:
        loss = f()
    if loss.size != 1:
        raise UsageError("grad_check requires a scalar-valued function")
    if not np.isfinite(loss.data).all():
        raise NumericsError("grad_check: function value is not finite")
    for t in params.values():
        t.zero_grad()
    loss.backward()
    analytic = {name: (t.grad.copy() if t.grad is not None else np.zeros(t.shape))
                for name, t in params.items()}

    def eval_at() -> tuple[float, list]:
        with record_branch_signature() as sig:
            value = f()
        return value.item(), sig

    report = GradCheckReport(eps=eps)
    for name, tensor in params.items():
        flat = tensor.data.reshape(-1)
        grad_flat = analytic[name].reshape(-1)
        n = flat.size
        if samples_per_param is None or samples_per_param >= n:
            candidates = np.arange(n)
            wanted = n
        else:
            candidates = rng.permutation(n)
            wanted = samples_per_param
        checked = skipped = 0
        max_rel = 0.0
        for i in candidates:
            if checked >= wanted:
                break
            original = flat[i]
            flat[i] = original + eps
            loss_plus, sig_plus = eval_at()
            flat[i] = original - eps
            loss_minus, sig_minus = eval_at()
            flat[i] = original
            if sig_plus != sig_minus or sig_plus != sig_ref:
                skipped += 1
                continue
            numeric = (loss_plus - loss_minus) / (2.0 * eps)
            a = grad_flat[i]
            rel = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            max_rel = max(max_rel, rel)
            checked += 1
        report.per_param[name] = ParamCheck(max_rel, checked, skipped)
    return report
