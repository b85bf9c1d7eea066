"""Dense-matrix reverse-mode differentiation over a closed op set.

Tensors wrap float64 numpy arrays (the training and verification precision;
feature banks are stored in float32 on disk and converted up on load). Every
op validates shapes up front and checks its output for NaN/Inf, so a
diverging computation fails at the op that produced it rather than steps
later. The op inventory is exactly what the matching graph needs — each
backward rule is small enough to verify in isolation against finite
differences, which grad_check does.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ConfigError, DataError, NumericError, ShapeError

# While not None, relu/max-pool nodes append their branch decisions here.
# grad_check compares the traces of its two probe passes to detect finite
# differences that straddle a kink (where the two-sided estimate is invalid).
_kink_trace: list | None = None


class Tensor:
    """A node in the computation graph: a value plus its provenance.

    Leaves built with requires_grad=True are trainable parameters. Interior
    nodes keep whatever their backward rule needs captured in the `_backward`
    closure. Data is immutable by convention once a node is produced; only
    the optimizer writes into leaf data, between steps.
    """

    __slots__ = ("data", "parents", "op", "requires_grad", "grad", "_backward", "name")

    def __init__(self, data, requires_grad=False, parents=(), op="leaf", name=None):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.parents = tuple(parents)
        self.op = op
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        if self.data.shape != ():
            raise ShapeError(f"item() on non-scalar tensor of shape {self.data.shape}")
        return float(self.data)

    def detach(self) -> "Tensor":
        """Constant view of this tensor's value, cut out of the graph."""
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Small amount of operator sugar; the module-level functions are the API.
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_scalar(self, other)

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_scalar(self, -other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else mul_scalar(self, other)

    def __rmul__(self, other):
        return mul_scalar(self, other)

    def __neg__(self):
        return mul_scalar(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad=False, name=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _finite_or_raise(arr: np.ndarray, op: str) -> np.ndarray:
    # cheap screen first: any NaN/Inf makes the sum non-finite; a non-finite
    # sum of finite values (overflow) is ruled out by the exact re-check
    if not np.isfinite(arr.sum()) and not np.all(np.isfinite(arr)):
        raise NumericError(f"op {op!r} produced non-finite values")
    return arr


def _node(data, parents, op, backward) -> Tensor:
    """Assemble an interior node; backward is attached only when needed."""
    out = Tensor(_finite_or_raise(np.asarray(data, dtype=np.float64), op),
                 requires_grad=any(p.requires_grad for p in parents),
                 parents=parents, op=op)
    if out.requires_grad:
        out._backward = backward
    return out


def _accumulate(parent: Tensor, grad: np.ndarray) -> None:
    if not parent.requires_grad:
        return
    if grad.shape != parent.data.shape:
        raise ShapeError(
            f"gradient shape {grad.shape} != value shape {parent.data.shape} (op bug)")
    if parent.grad is None:
        parent.grad = np.zeros_like(parent.data)
    parent.grad += grad


# ---------------------------------------------------------------------------
# Elementwise and scalar ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.shape != b.data.shape and b.data.shape != () and a.data.shape != ():
        raise ShapeError(f"add: shapes {a.data.shape} and {b.data.shape} differ")

    def backward(g):
        ga = g if a.data.shape == g.shape else np.sum(g).reshape(a.data.shape)
        gb = g if b.data.shape == g.shape else np.sum(g).reshape(b.data.shape)
        return ga, gb

    return _node(a.data + b.data, (a, b), "add", backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.shape != b.data.shape and b.data.shape != () and a.data.shape != ():
        raise ShapeError(f"sub: shapes {a.data.shape} and {b.data.shape} differ")

    def backward(g):
        ga = g if a.data.shape == g.shape else np.sum(g).reshape(a.data.shape)
        gb = -g if b.data.shape == g.shape else -np.sum(g).reshape(b.data.shape)
        return ga, gb

    return _node(a.data - b.data, (a, b), "sub", backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; either operand may be a scalar (0-d) tensor."""
    a, b = _wrap(a), _wrap(b)
    if a.data.shape != b.data.shape and b.data.shape != () and a.data.shape != ():
        raise ShapeError(f"mul: shapes {a.data.shape} and {b.data.shape} differ")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g * bd
        gb = g * ad
        if a.data.shape != ga.shape:
            ga = np.sum(ga).reshape(a.data.shape)
        if b.data.shape != gb.shape:
            gb = np.sum(gb).reshape(b.data.shape)
        return ga, gb

    return _node(ad * bd, (a, b), "mul", backward)


def add_scalar(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _node(x.data + c, (x,), "add_scalar", lambda g: (g,))


def mul_scalar(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _node(x.data * c, (x,), "mul_scalar", lambda g: (g * c,))


def pow_scalar(x: Tensor, p: float) -> Tensor:
    """x**p elementwise. Non-integer p requires strictly positive inputs."""
    p = float(p)
    xd = x.data
    if p != int(p) and np.any(xd <= 0.0):
        raise NumericError(f"pow_scalar: exponent {p} on non-positive input")
    out = xd ** p

    def backward(g):
        return (g * p * xd ** (p - 1.0),)

    return _node(out, (x,), "pow_scalar", backward)


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # overflow becomes inf, caught by the finite check
        out = np.exp(x.data)
    return _node(out, (x,), "exp", lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    if np.any(xd <= 0.0):
        raise NumericError("log: non-positive input")
    return _node(np.log(xd), (x,), "log", lambda g: (g / xd,))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _node(out, (x,), "tanh", lambda g: (g * (1.0 - out * out),))


def relu(x: Tensor) -> Tensor:
    active = x.data > 0.0
    if _kink_trace is not None:
        _kink_trace.append(("relu", active.tobytes()))
    return _node(np.where(active, x.data, 0.0), (x,), "relu",
                 lambda g: (g * active,))


def activate(x: Tensor, kind: str) -> Tensor:
    """Elementwise activation, kind in {'relu', 'tanh'}."""
    if kind == "relu":
        return relu(x)
    if kind == "tanh":
        return tanh(x)
    raise ConfigError(f"unknown activation kind {kind!r}")


def emax(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise maximum; ties route the gradient to the first operand."""
    a, b = _wrap(a), _wrap(b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"emax: shapes {a.data.shape} and {b.data.shape} differ")
    take_a = a.data >= b.data
    if _kink_trace is not None:
        _kink_trace.append(("emax", take_a.tobytes()))

    def backward(g):
        return g * take_a, g * ~take_a

    return _node(np.where(take_a, a.data, b.data), (a, b), "emax", backward)


# ---------------------------------------------------------------------------
# Shape plumbing
# ---------------------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    orig = x.data.shape
    if int(np.prod(shape, dtype=np.int64)) != x.data.size:
        raise ShapeError(f"reshape: cannot view {orig} as {shape}")
    return _node(x.data.reshape(shape), (x,), "reshape",
                 lambda g: (g.reshape(orig),))


def as_row(v: Tensor) -> Tensor:
    if v.data.ndim != 1:
        raise ShapeError("as_row expects a 1-d vector")
    return reshape(v, (1, v.data.shape[0]))


def as_col(v: Tensor) -> Tensor:
    if v.data.ndim != 1:
        raise ShapeError("as_col expects a 1-d vector")
    return reshape(v, (v.data.shape[0], 1))


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError("transpose expects a matrix")
    return _node(x.data.T, (x,), "transpose", lambda g: (g.T,))


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError("slice_rows expects a matrix")
    m = x.data.shape[0]
    if not (0 <= start < stop <= m):
        raise ShapeError(f"slice_rows: [{start}:{stop}] out of range for {m} rows")

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[start:stop] = g
        return (gx,)

    return _node(x.data[start:stop], (x,), "slice_rows", backward)


def element(v: Tensor, i: int) -> Tensor:
    """Scalar tensor holding v[i] of a 1-d vector."""
    if v.data.ndim != 1:
        raise ShapeError("element expects a 1-d vector")
    if not (0 <= i < v.data.shape[0]):
        raise ShapeError(f"element: index {i} out of range")

    def backward(g):
        gv = np.zeros_like(v.data)
        gv[i] = g
        return (gv,)

    return _node(v.data[i], (v,), "element", backward)


def diag_part(x: Tensor) -> Tensor:
    if x.data.ndim != 2 or x.data.shape[0] != x.data.shape[1]:
        raise ShapeError("diag_part expects a square matrix")

    def backward(g):
        gx = np.zeros_like(x.data)
        np.fill_diagonal(gx, g)
        return (gx,)

    return _node(np.diag(x.data).copy(), (x,), "diag_part", backward)


def concat_rows(parts) -> Tensor:
    """Stack parts vertically; 1-d parts are treated as single rows."""
    parts = [_wrap(p) for p in parts]
    if not parts:
        raise ShapeError("concat_rows of no parts")
    blocks = [p.data.reshape(1, -1) if p.data.ndim == 1 else p.data for p in parts]
    width = blocks[0].shape[1]
    if any(b.ndim != 2 or b.shape[1] != width for b in blocks):
        raise ShapeError("concat_rows: inconsistent widths")
    sizes = [b.shape[0] for b in blocks]

    def backward(g):
        grads, off = [], 0
        for p, n in zip(parts, sizes):
            piece = g[off:off + n]
            grads.append(piece.reshape(p.data.shape))
            off += n
        return tuple(grads)

    return _node(np.concatenate(blocks, axis=0), tuple(parts), "concat_rows", backward)


def concat_cols(parts) -> Tensor:
    """Stack matrices horizontally."""
    parts = [_wrap(p) for p in parts]
    if not parts or any(p.data.ndim != 2 for p in parts):
        raise ShapeError("concat_cols expects matrices")
    height = parts[0].data.shape[0]
    if any(p.data.shape[0] != height for p in parts):
        raise ShapeError("concat_cols: inconsistent heights")
    sizes = [p.data.shape[1] for p in parts]

    def backward(g):
        grads, off = [], 0
        for n in sizes:
            grads.append(g[:, off:off + n])
            off += n
        return tuple(grads)

    return _node(np.concatenate([p.data for p in parts], axis=1),
                 tuple(parts), "concat_cols", backward)


# ---------------------------------------------------------------------------
# Linear algebra and reductions
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError("matmul expects matrices")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: inner dims {a.data.shape} x {b.data.shape} disagree")
    ad, bd = a.data, b.data

    def backward(g):
        return g @ bd.T, ad.T @ g

    return _node(ad @ bd, (a, b), "matmul", backward)


def dot(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 1 or b.data.ndim != 1 or a.data.shape != b.data.shape:
        raise ShapeError(f"dot: vectors of equal length required, got {a.data.shape} and {b.data.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        return g * bd, g * ad

    return _node(ad @ bd, (a, b), "dot", backward)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Row-broadcast bias add: (m,n) + (n,)."""
    b = _wrap(b)
    if x.data.ndim != 2 or b.data.ndim != 1 or x.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"add_bias: shapes {x.data.shape} and {b.data.shape} incompatible")

    def backward(g):
        return g, g.sum(axis=0)

    return _node(x.data + b.data, (x, b), "add_bias", backward)


def scale_rows(x: Tensor, v: Tensor) -> Tensor:
    """Row-wise scaling: row i of x times v[i]."""
    v = _wrap(v)
    if x.data.ndim != 2 or v.data.ndim != 1 or x.data.shape[0] != v.data.shape[0]:
        raise ShapeError(f"scale_rows: shapes {x.data.shape} and {v.data.shape} incompatible")
    xd, vd = x.data, v.data

    def backward(g):
        return g * vd[:, None], (g * xd).sum(axis=1)

    return _node(xd * vd[:, None], (x, v), "scale_rows", backward)


def tsum(x: Tensor, axis=None) -> Tensor:
    """Sum over all elements (axis=None) or one axis of a matrix."""
    xd = x.data
    if axis is None:
        return _node(xd.sum(), (x,), "sum", lambda g: (np.full_like(xd, float(g)),))
    if xd.ndim != 2 or axis not in (0, 1):
        raise ShapeError("axis sum expects a matrix and axis in {0, 1}")

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axis), xd.shape).copy(),)

    return _node(xd.sum(axis=axis), (x,), "sum", backward)


def tmean(x: Tensor, axis=None) -> Tensor:
    n = x.data.size if axis is None else x.data.shape[axis]
    if n == 0:
        raise ShapeError("mean over empty axis")
    return mul_scalar(tsum(x, axis=axis), 1.0 / n)


# ---------------------------------------------------------------------------
# Softmax family and pooling
# ---------------------------------------------------------------------------

def _normalize_mask(mask, shape) -> np.ndarray:
    m = np.asarray(mask, dtype=bool)
    if m.shape == shape:
        return m
    try:
        return np.broadcast_to(m, shape).copy()
    except ValueError:
        raise ShapeError(f"mask shape {m.shape} incompatible with {shape}") from None


def _softmax(x: Tensor, axis: int, mask, op: str) -> Tensor:
    """Shift-stabilized softmax along one axis; masked positions get weight 0."""
    xd = x.data
    if xd.ndim != 2:
        raise ShapeError(f"{op} expects a matrix")
    if mask is None:
        valid = np.ones(xd.shape, dtype=bool)
    else:
        valid = _normalize_mask(mask, xd.shape)
        if not valid.any(axis=axis).all():
            raise DataError(f"{op}: a slice has all positions masked")
    neg = np.where(valid, xd, -np.inf)
    shifted = neg - neg.max(axis=axis, keepdims=True)
    e = np.exp(shifted)          # exp(-inf) underflows to exactly 0
    p = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        s = (g * p).sum(axis=axis, keepdims=True)
        return (p * (g - s),)

    return _node(p, (x,), op, backward)


def row_softmax(x: Tensor, mask=None) -> Tensor:
    """Each row normalized to sum 1; mask marks valid columns."""
    return _softmax(x, 1, mask, "row_softmax")


def col_softmax(x: Tensor, mask=None) -> Tensor:
    """Each column normalized to sum 1; mask marks valid rows."""
    return _softmax(x, 0, mask, "col_softmax")


def pool_rows(x: Tensor, mode: str, mask=None) -> Tensor:
    """Collapse a (m,n) matrix to an (n,) vector over its rows.

    mean: average of valid rows. max: columnwise maximum over valid rows.
    soft: per-column softmax of the values themselves used as weights
    (a single valid row is passed through unchanged).
    """
    xd = x.data
    if xd.ndim != 2 or xd.shape[0] == 0:
        raise ShapeError("pool_rows expects a non-empty matrix")
    if mask is None:
        rows_valid = np.ones(xd.shape[0], dtype=bool)
    else:
        rows_valid = np.asarray(mask, dtype=bool).reshape(-1)
        if rows_valid.shape[0] != xd.shape[0]:
            raise ShapeError("pool_rows: mask length != row count")
        if not rows_valid.any():
            raise DataError("pool_rows: all rows masked")

    if mode == "mean":
        count = float(rows_valid.sum())

        def backward(g):
            gx = np.zeros_like(xd)
            gx[rows_valid] = g / count
            return (gx,)

        return _node(xd[rows_valid].sum(axis=0) / count, (x,), "pool_mean", backward)

    if mode == "max":
        masked = np.where(rows_valid[:, None], xd, -np.inf)
        arg = masked.argmax(axis=0)
        if _kink_trace is not None:
            _kink_trace.append(("pool_max", arg.tobytes()))

        def backward(g):
            gx = np.zeros_like(xd)
            gx[arg, np.arange(xd.shape[1])] = g
            return (gx,)

        return _node(masked.max(axis=0), (x,), "pool_max", backward)

    if mode == "soft":
        masked = np.where(rows_valid[:, None], xd, -np.inf)
        shifted = masked - masked.max(axis=0, keepdims=True)
        e = np.exp(shifted)
        p = e / e.sum(axis=0, keepdims=True)
        out = (p * np.where(rows_valid[:, None], xd, 0.0)).sum(axis=0)

        def backward(g):
            # d out_c / d x_rc = p_rc * (1 + x_rc - out_c) on valid rows
            gx = p * (1.0 + xd - out[None, :]) * g[None, :]
            gx[~rows_valid] = 0.0
            return (gx,)

        return _node(out, (x,), "pool_soft", backward)

    raise ConfigError(f"unknown pooling mode {mode!r}")


def softmax_cross_entropy(scores: Tensor, gold) -> Tensor:
    """Mean over rows of -log softmax(row)[gold[row]]."""
    sd = scores.data
    if sd.ndim != 2:
        raise ShapeError("softmax_cross_entropy expects a score matrix")
    gold = np.asarray(gold, dtype=np.int64).reshape(-1)
    m, c = sd.shape
    if gold.shape[0] != m:
        raise ShapeError("softmax_cross_entropy: one gold index per row required")
    if np.any(gold < 0) or np.any(gold >= c):
        raise ShapeError("softmax_cross_entropy: gold index out of range")
    shifted = sd - sd.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    losses = lse - shifted[np.arange(m), gold]

    def backward(g):
        p = np.exp(shifted)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(m), gold] -= 1.0
        return (p * (float(g) / m),)

    return _node(losses.mean(), (scores,), "softmax_cross_entropy", backward)


# ---------------------------------------------------------------------------
# Backward pass and gradient checking
# ---------------------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen, stack = [], set(), [(root, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate .grad on every tensor the scalar loss depends on."""
    if loss.data.shape != ():
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    loss.grad = np.ones(())
    for node in reversed(order):
        if node._backward is None or node.grad is None:
            continue
        grads = node._backward(node.grad)
        for parent, g in zip(node.parents, grads):
            if parent.requires_grad and g is not None:
                _accumulate(parent, np.asarray(g, dtype=np.float64))


def gradients(loss: Tensor, params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    """Backward pass returning one gradient per named parameter.

    Parameters the loss never touches get zero gradients.
    """
    backward(loss)
    return {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
            for name, p in params.items()}


class GradCheckResult:
    """Outcome of a finite-difference check over sampled coordinates."""

    def __init__(self):
        self.max_rel_error = 0.0
        self.worst = None            # (param name, flat index)
        self.checked = 0
        self.skipped = []            # kink coordinates, as (name, flat index)

    def __repr__(self):
        return (f"GradCheckResult(max_rel_error={self.max_rel_error:.3e}, "
                f"checked={self.checked}, skipped={len(self.skipped)})")


def grad_check(build_loss, params: dict[str, Tensor], h: float = 1e-5,
               rng=None, max_coords_per_param: int | None = None) -> GradCheckResult:
    """Compare analytic gradients against central finite differences.

    build_loss() must rebuild the loss graph from the current parameter data
    each time it is called. Coordinates whose two probe evaluations land on
    different sides of a relu/max kink are skipped and reported, not failed.
    """
    global _kink_trace
    if not (1e-6 <= h <= 1e-4):
        raise ConfigError(f"grad_check step h={h} outside [1e-6, 1e-4]")
    for p in params.values():
        p.grad = None
    analytic = gradients(build_loss(), params)

    def probe():
        global _kink_trace
        _kink_trace = []
        try:
            value = build_loss().item()
        finally:
            trace, _kink_trace = _kink_trace, None
        if not math.isfinite(value):
            raise NumericError("grad_check: loss became non-finite while probing")
        return value, trace

    result = GradCheckResult()
    for name, p in params.items():
        flat = p.data.reshape(-1)
        idxs = np.arange(flat.size)
        if max_coords_per_param is not None and flat.size > max_coords_per_param:
            if rng is None:
                rng = np.random.default_rng(0)
            idxs = rng.choice(flat.size, size=max_coords_per_param, replace=False)
        for i in idxs:
            keep = flat[i]
            flat[i] = keep + h
            up, trace_up = probe()
            flat[i] = keep - h
            down, trace_down = probe()
            flat[i] = keep
            if trace_up != trace_down:
                result.skipped.append((name, int(i)))
                continue
            numeric = (up - down) / (2.0 * h)
            a = float(analytic[name].reshape(-1)[i])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            result.checked += 1
            if rel > result.max_rel_error:
                result.max_rel_error = rel
                result.worst = (name, int(i))
    return result


# ---------------------------------------------------------------------------
# AdamW
# ---------------------------------------------------------------------------

class OptimizerState:
    """AdamW moment estimates plus the shared step counter."""

    def __init__(self, params: dict[str, Tensor], lr: float, weight_decay: float = 0.01,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if lr < 0:
            raise ConfigError(f"learning rate must be >= 0, got {lr}")
        self.lr = float(lr)
        self.weight_decay = float(weight_decay)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.step = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}


def adamw_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
               state: OptimizerState) -> None:
    """One decoupled-weight-decay Adam update, in place.

    p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.data.shape:
            raise ShapeError(f"adamw_step: grad shape {g.shape} != param {p.data.shape} for {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        m_hat = m / bc1
        v_hat = v / bc2
        p.data -= state.lr * (m_hat / (np.sqrt(v_hat) + state.eps)
                              + state.weight_decay * p.data)
        _finite_or_raise(p.data, "adamw_step")


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm."""
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total > max_norm > 0:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total
