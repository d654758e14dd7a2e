"""Minimal reverse-mode autodiff over dense numpy tensors.

The op set is closed: every differentiable operation the detector needs is
defined here, ships with a gradient, and is covered by a finite-difference
test. Two precisions are supported: float64 for verification (finite
differences are unreliable in float32) and float32 for training speed.

A tape is implicit: ops append TapeNodes onto their outputs whenever grad
recording is enabled and at least one input participates. One backward pass
per tape; tapes are not reusable.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field

import numpy as np

F32 = np.float32
F64 = np.float64

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class ShapeError(ValueError):
    """Raised when operand shapes do not conform to an op's contract."""


class NonFiniteError(ArithmeticError):
    """Raised when an op produces NaN or Inf."""


_grad_state = threading.local()  # per-thread: concurrent no-tape inference is safe


@contextlib.contextmanager
def no_grad():
    """Disable tape recording in this thread for the enclosed block."""
    prev = grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = prev


def grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


class TapeNode:
    """One recorded op: symbolic tag, parent nodes, and a gradient slot.

    ``backward_fn(g)`` maps the output gradient to a tuple of parent
    gradients (None for parents that do not participate).
    """

    __slots__ = ("op", "parents", "backward_fn", "grad")

    def __init__(self, op, parents, backward_fn):
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn
        self.grad = None


class Tensor:
    """Dense real tensor, row-major, float32 or float64.

    ``requires_grad=True`` marks a leaf parameter; intermediate tensors get
    their tape node from the op that produced them.
    """

    __slots__ = ("data", "node")

    def __init__(self, data, dtype=None, requires_grad=False):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(F64)
        self.data = arr
        self.node = TapeNode("leaf", (), None) if requires_grad else None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def requires_grad(self):
        return self.node is not None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name})"


def tensor(data, dtype=F64) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype))


def param(data, dtype=None) -> Tensor:
    """Leaf tensor that accumulates gradients."""
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True)


def zeros(shape, dtype=F64) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype))


def _check_finite(op: str, arr: np.ndarray) -> None:
    # cheap probe: NaN/Inf anywhere poisons the sum; a finite-but-overflowing
    # sum (false positive) is caught by the exact recheck before raising
    if not np.isfinite(arr.sum()):
        if np.isfinite(arr).all():
            return
        raise NonFiniteError(f"non-finite values in output of op '{op}'")


def _result(op: str, out: np.ndarray, inputs, backward_fn) -> Tensor:
    """Wrap an op output, recording a TapeNode when recording is on."""
    _check_finite(op, out)
    t = Tensor(out)
    if grad_enabled() and any(x.node is not None for x in inputs):
        t.node = TapeNode(op, tuple(x.node for x in inputs), backward_fn)
    return t


def _result_moved(op: str, out: np.ndarray, inputs, backward_fn) -> Tensor:
    """Like _result but for ops that only rearrange finite values
    (reshape/transpose/slice/concat/tile): inputs were already checked, so
    the per-op finiteness invariant holds without another pass."""
    t = Tensor(out)
    if grad_enabled() and any(x.node is not None for x in inputs):
        t.node = TapeNode(op, tuple(x.node for x in inputs), backward_fn)
    return t


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to ``shape`` by summing."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _binary_check(op: str, a: Tensor, b: Tensor) -> None:
    if a.dtype != b.dtype:
        raise ShapeError(f"{op}: dtype mismatch {a.dtype.name} vs {b.dtype.name}")


# --- element-wise and linear ops ------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _binary_check("add", a, b)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast")
    return _result("add", out, (a, b), lambda g: (
        _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _binary_check("mul", a, b)
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast")
    ad, bd = a.data, b.data
    return _result("mul", out, (a, b), lambda g: (
        _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result("scale", a.data * c, (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _binary_check("matmul", a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be >=2-D, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not broadcast")
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return _result("matmul", out, (a, b), backward)


# --- shape ops --------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    src_shape = a.shape
    return _result_moved("reshape", out, (a,), lambda g: (g.reshape(src_shape),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(int(x) for x in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {a.shape}")
    inv = np.argsort(axes)
    return _result_moved("transpose", np.transpose(a.data, axes), (a,),
                   lambda g: (np.transpose(g, inv),))


def tile(a: Tensor, reps) -> Tensor:
    reps = tuple(int(r) for r in reps)
    if len(reps) != a.ndim:
        raise ShapeError(f"tile: reps {reps} must match rank of {a.shape}")
    out = np.tile(a.data, reps)
    src_shape = a.shape

    def backward(g):
        # fold (r0*s0, r1*s1, ...) -> (r0, s0, r1, s1, ...) and sum the r axes
        interleaved = []
        for r, s in zip(reps, src_shape):
            interleaved.extend((r, s))
        return (g.reshape(interleaved).sum(axis=tuple(range(0, 2 * len(reps), 2))),)

    return _result_moved("tile", out, (a,), backward)


def concat(tensors, axis: int) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat: empty input list")
    for t in tensors[1:]:
        _binary_check("concat", tensors[0], t)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(
            f"concat: shapes {[t.shape for t in tensors]} do not align on axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _result_moved("concat", out, tensors, backward)


def slice_(a: Tensor, key) -> Tensor:
    """Basic indexing with a tuple of slices / ints. Backward scatters."""
    if not isinstance(key, tuple):
        key = (key,)
    out = a.data[key]
    src_shape, src_dtype = a.shape, a.dtype

    def backward(g):
        full = np.zeros(src_shape, dtype=src_dtype)
        full[key] = g
        return (full,)

    return _result_moved("slice", np.ascontiguousarray(out), (a,), backward)


def embed_lookup(table: Tensor, indices) -> Tensor:
    """Row gather: out[i] = table[indices[i]]. Backward scatter-adds."""
    idx = np.asarray(indices, dtype=np.int64)
    if table.ndim < 1:
        raise ShapeError("embed-lookup: table must be at least 1-D")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(
            f"embed-lookup: index out of range for table of {table.shape[0]} rows")
    out = table.data[idx]
    tbl_shape, tbl_dtype = table.shape, table.dtype

    def backward(g):
        full = np.zeros(tbl_shape, dtype=tbl_dtype)
        np.add.at(full, idx, g)
        return (full,)

    return _result_moved("embed-lookup", out, (table,), backward)


# --- nonlinearities and reductions ------------------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _result("softmax", out, (a,), backward)


LAYERNORM_EPS = 1e-6


def layernorm(a: Tensor, eps: float = LAYERNORM_EPS) -> Tensor:
    """Normalize the last axis to zero mean / unit variance (no affine)."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    istd = 1.0 / np.sqrt(var + eps)
    xhat = centered * istd

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (istd * (g - gm - xhat * gx),)

    return _result("layernorm", xhat, (a,), backward)


_GELU_K = float(np.sqrt(2.0 / np.pi))  # python float: must not promote f32 arrays


def gelu(a: Tensor) -> Tensor:
    """tanh-approximation GELU (smooth, library-free)."""
    x = a.data
    x2 = x * x
    inner = _GELU_K * (x + 0.044715 * (x2 * x))
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _GELU_K * (1.0 + 3 * 0.044715 * x2)
        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
        return (g * d,)

    return _result("gelu", out, (a,), backward)


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    x = a.data
    out = np.where(x >= 0, x, slope * x)
    return _result("leaky-relu", out, (a,),
                   lambda g: (g * np.where(x >= 0, 1.0, slope).astype(x.dtype),))


def _restore_axes(g, src_ndim, axis, keepdims):
    if axis is None or keepdims:
        return g
    axes = axis if isinstance(axis, tuple) else (axis,)
    axes = tuple(a % src_ndim for a in axes)
    return np.expand_dims(g, axes)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)
    src_shape, src_ndim = a.shape, a.ndim

    def backward(g):
        g = _restore_axes(np.asarray(g), src_ndim, axis, keepdims)
        return (np.broadcast_to(g, src_shape).copy(),)

    return _result("sum", np.asarray(out), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.mean(axis=axis, keepdims=keepdims)
    src_shape, src_ndim = a.shape, a.ndim
    count = float(a.data.size if axis is None else np.prod(
        [a.shape[x % a.ndim] for x in (axis if isinstance(axis, tuple) else (axis,))]))

    def backward(g):
        g = _restore_axes(np.asarray(g), src_ndim, axis, keepdims)
        return (np.broadcast_to(g, src_shape) / count,)

    return _result("mean", np.asarray(out), (a,), backward)


def l2_normalize(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    norm = np.sqrt((x ** 2).sum(axis=axis, keepdims=True))
    if (norm == 0).any():
        raise ShapeError("l2-normalize: zero-norm slice, normalization undefined")
    out = x / norm

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - out * dot) / norm,)

    return _result("l2-normalize", out, (a,), backward)


def log(a: Tensor, floor: float | None = None) -> Tensor:
    """Natural log; optional floor clamps the argument at ``floor``.

    Where the clamp is active the gradient is zero.
    """
    x = a.data
    if floor is None:
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.log(x)

        def backward(g):
            return (g / x,)
    else:
        clamped = np.maximum(x, floor)
        out = np.log(clamped)

        def backward(g):
            return (np.where(x >= floor, g / clamped, 0.0),)

    return _result("log", out, (a,), backward)


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _result("exp", out, (a,), lambda g: (g * out,))


# --- dispatch surface --------------------------------------------------------

OPS = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "scale": scale,
    "reshape": reshape,
    "tile": tile,
    "concat": lambda *ts, axis: concat(ts, axis=axis),
    "slice": slice_,
    "softmax": softmax,
    "layernorm": layernorm,
    "gelu": gelu,
    "leaky-relu": leaky_relu,
    "mean": mean,
    "sum": sum_,
    "transpose": transpose,
    "embed-lookup": embed_lookup,
    "l2-normalize": l2_normalize,
    "log": log,
    "exp": exp,
}


def forward_op(op: str, inputs, **kwargs) -> Tensor:
    """Apply an op from the closed set by tag."""
    if op not in OPS:
        raise ValueError(f"unknown op '{op}'; valid: {sorted(OPS)}")
    return OPS[op](*inputs, **kwargs)


# --- backward ----------------------------------------------------------------


def _topo_order(root: TapeNode) -> list[TapeNode]:
    """Reverse-topological order, each node visited exactly once."""
    order: list[TapeNode] = []
    seen: set[int] = set()
    stack: list[tuple[TapeNode, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p is not None and id(p) not in seen:
                stack.append((p, False))
    order.reverse()
    return order


def backward(root: Tensor, leaves=None) -> dict[Tensor, Tensor]:
    """Accumulate d(root)/d(leaf) for every requested leaf.

    ``root`` must be a recorded scalar. Returns a map keyed by leaf Tensor;
    leaves unused by the graph get zero gradients.
    """
    if root.data.size != 1:
        raise ShapeError(f"backward: root must be scalar, got shape {root.shape}")
    if root.node is None:
        raise ValueError("backward: root has no tape (recording was off?)")

    root.node.grad = np.ones_like(root.data)
    order = _topo_order(root.node)
    for node in order:
        if node.grad is None or node.backward_fn is None:
            continue
        grads = node.backward_fn(node.grad)
        for parent, g in zip(node.parents, grads):
            if parent is None or g is None:
                continue
            if parent.grad is None:
                parent.grad = g
            else:
                # never in place: g may alias a sibling's gradient buffer
                parent.grad = parent.grad + g
        node.grad = None

    out: dict[Tensor, Tensor] = {}
    if leaves is not None:
        for leaf in leaves:
            if leaf.node is None:
                raise ValueError("backward: leaf does not require grad")
            g = leaf.node.grad
            out[leaf] = Tensor(g if g is not None else np.zeros_like(leaf.data))
    for node in order:
        node.grad = None  # leaves not in ``leaves`` must not leak into later tapes
    return out


# --- finite-difference verification -----------------------------------------


@dataclass
class FiniteDiffReport:
    """Per-parameter max relative error of tape gradients vs central differences."""

    step: float
    tol: float
    per_param: dict[str, float] = field(default_factory=dict)
    checked_coords: int = 0
    worst: tuple[str, int, float, float, float] | None = None  # name, idx, analytic, numeric, rel
    below_resolution: list[str] = field(default_factory=list)

    @property
    def max_rel_err(self) -> float:
        return max(self.per_param.values()) if self.per_param else 0.0

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol

    def lines(self) -> list[str]:
        out = [f"{name}: max_rel_err={err:.3e}" for name, err in sorted(self.per_param.items())]
        for name in self.below_resolution:
            out.append(f"{name}: all gradients below the central-difference "
                       f"resolution at step {self.step:g} (consistent with zero)")
        verdict = "PASS" if self.passed else "FAIL"
        out.append(f"{verdict}: max_rel_err={self.max_rel_err:.3e} "
                   f"(tol={self.tol:g}, step={self.step:g}, coords={self.checked_coords})")
        return out


def relative_error(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


def finite_diff_check(loss_fn, params: dict[str, Tensor], step: float = 1e-6,
                      tol: float = 1e-4, coords_per_param: int | None = None,
                      seed: int = 0, coord_mode: str = "random",
                      min_grad: float | None = None) -> FiniteDiffReport:
    """Compare tape gradients of ``loss_fn()`` against central differences.

    ``loss_fn`` must be deterministic and close over ``params``. When a
    parameter has more coordinates than ``coords_per_param``, a subset is
    checked: seeded-random by default, or the coordinates with the largest
    analytic gradient magnitude (``coord_mode="largest"``). The latter is
    the right choice for deep composite losses, where central differences
    at step 1e-6 bottom out near rounding noise (~eps*|loss|/step) and
    near-zero gradient coordinates are unverifiable by any implementation.

    ``min_grad`` skips coordinates whose analytic gradient sits below the
    stated magnitude: such coordinates cannot be distinguished from zero by
    the difference quotient at this step, so they are reported as below
    resolution instead of being compared against noise.
    """
    if step <= 0:
        raise ValueError("finite_diff_check: step must be positive")
    if coord_mode not in ("random", "largest"):
        raise ValueError(f"finite_diff_check: unknown coord_mode {coord_mode!r}")
    loss = loss_fn()
    grads = backward(loss, leaves=params.values())
    by_name = {name: grads[p].data for name, p in params.items()}

    rng = np.random.default_rng(seed)
    report = FiniteDiffReport(step=step, tol=tol)
    for name, p in params.items():
        flat = p.data.reshape(-1)
        n = flat.size
        mags = np.abs(by_name[name].reshape(-1))
        if coords_per_param is not None and n > coords_per_param:
            if coord_mode == "largest":
                coords = np.sort(np.argsort(-mags, kind="stable")[:coords_per_param])
            else:
                coords = np.sort(rng.choice(n, size=coords_per_param, replace=False))
        else:
            coords = np.arange(n)
        if min_grad is not None:
            coords = coords[mags[coords] >= min_grad]
            if coords.size == 0:
                report.below_resolution.append(name)
                continue
        analytic = by_name[name].reshape(-1)
        worst = 0.0
        for k in coords:
            orig = flat[k]
            flat[k] = orig + step
            with no_grad():
                f_plus = loss_fn().item()
            flat[k] = orig - step
            with no_grad():
                f_minus = loss_fn().item()
            flat[k] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            rel = relative_error(float(analytic[k]), numeric)
            if rel > worst:
                worst = rel
            if report.worst is None or rel > report.worst[4]:
                report.worst = (name, int(k), float(analytic[k]), numeric, rel)
            report.checked_coords += 1
        report.per_param[name] = worst
    return report
