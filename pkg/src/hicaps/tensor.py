"""Dense n-d arrays with reverse-mode automatic differentiation.

The engine is define-by-run: every operation records its inputs on the
output tensor, so the computation graph is rebuilt from scratch on each
forward pass and torn down when the result goes out of scope.  Calling
``backward()`` on a scalar tensor topologically sorts the recorded ops
(``trace``) and applies each op's gradient closure exactly once, in
reverse order.  Gradients accumulate additively into ``Tensor.grad``
until ``zero_grad`` is called.

Shapes are strict: elementwise ops require identical shapes, and the only
broadcasts are the documented bias additions in ``dense``/``conv2d`` and
multiplication by non-differentiated constant arrays (``mul_const``).

Training runs in float32.  ``precision("float64")`` switches newly created
tensors to float64; it exists to make finite-difference gradient checks
sharp and is not meant for training.
"""

from __future__ import annotations

import numpy as np

_DEFAULT_DTYPE = np.float32
_FINITE_CHECKS = False


class ShapeError(ValueError):
    """Raised when operand shapes do not satisfy an op's contract."""


class GraphError(RuntimeError):
    """Raised on misuse of the autodiff graph (e.g. backward on non-scalar)."""


def default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype):
    """Set the dtype used for newly created tensors ('float32' or 'float64')."""
    global _DEFAULT_DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype!r}; use float32 or float64")
    _DEFAULT_DTYPE = dt.type
    return _DEFAULT_DTYPE


class precision:
    """Context manager switching the default dtype, e.g. for gradient checks.

    >>> with precision("float64"):
    ...     t = tensor([1.0, 2.0])
    """

    def __init__(self, dtype):
        self._dtype = dtype
        self._saved = None

    def __enter__(self):
        self._saved = _DEFAULT_DTYPE
        set_default_dtype(self._dtype)
        return self

    def __exit__(self, *exc):
        set_default_dtype(self._saved)
        return False


def finite_checks(enabled: bool):
    """Toggle per-op NaN/Inf assertions (slow; for debugging and tests)."""
    global _FINITE_CHECKS
    _FINITE_CHECKS = bool(enabled)


class Tensor:
    """A dense array plus optional gradient buffer and graph linkage.

    ``data`` is a row-major numpy array.  ``grad`` is lazily allocated with
    the same shape.  ``op`` names the operation that produced the tensor
    ("leaf" for inputs and parameters).
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, op="leaf", parents=()):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents = tuple(parents)
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self):
        """Populate grads of every requires_grad tensor reachable from self.

        Only valid on scalar tensors.  Repeated calls accumulate.
        """
        if self.data.size != 1:
            raise GraphError(
                f"backward() requires a scalar loss, got shape {self.data.shape}"
            )
        order = trace(self)
        self.accumulate_grad(np.ones_like(self.data))
        for t in reversed(order):
            if t._backward is not None and t.grad is not None:
                t._backward(t.grad)

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.data.shape}, dtype={self.data.dtype})"

    # Sugar for the common elementwise ops; the named functions are the API.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)


def tensor(data, requires_grad=False):
    """Create a leaf tensor in the current default dtype."""
    arr = np.asarray(data, dtype=_DEFAULT_DTYPE)
    return Tensor(arr, requires_grad=requires_grad)


def trace(root: Tensor):
    """Ordered record of the ops reachable from ``root``.

    Every tensor appears after all tensors that produced it, so iterating
    in reverse gives a valid reverse-mode sweep that visits each op once.
    """
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def first_nonfinite(root: Tensor):
    """First tensor (in forward order) holding NaN/Inf, or None.

    Used by the training loop to turn a NaN loss into a diagnostic that
    names the offending op.
    """
    for t in trace(root):
        if not np.all(np.isfinite(t.data)):
            return t
    return None


def _result(data, parents, op, backward_fn, requires_grad=None):
    if _FINITE_CHECKS and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by op {op!r}")
    if requires_grad is None:
        requires_grad = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=requires_grad, op=op, parents=parents)
    if requires_grad:
        out._backward = backward_fn
    return out


def _check_same_shape(op, a, b):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


# ---------------------------------------------------------------------------
# elementwise ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("add", a, b)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(g)

    return _result(a.data + b.data, (a, b), "add", backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("sub", a, b)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(-g)

    return _result(a.data - b.data, (a, b), "sub", backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("mul", a, b)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * b.data)
        if b.requires_grad:
            b.accumulate_grad(g * a.data)

    return _result(a.data * b.data, (a, b), "mul", backward)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * s)

    return _result(a.data * s, (a,), "scale", backward)


def affine(a: Tensor, mul_by: float, add_to: float) -> Tensor:
    """Elementwise mul_by * a + add_to with scalar constants."""
    mul_by = float(mul_by)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * mul_by)

    return _result(a.data * mul_by + float(add_to), (a,), "affine", backward)


def square(a: Tensor) -> Tensor:
    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * (2.0 * a.data))

    return _result(a.data * a.data, (a,), "square", backward)


def add_const(a: Tensor, const) -> Tensor:
    """Add a non-differentiated constant array of identical shape."""
    const = np.asarray(const, dtype=a.data.dtype)
    if const.shape != a.data.shape:
        raise ShapeError(
            f"add_const: constant shape {const.shape} != {a.data.shape}"
        )

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g)

    return _result(a.data + const, (a,), "add_const", backward)


def mul_const(a: Tensor, const) -> Tensor:
    """Multiply by a non-differentiated constant array (broadcast allowed)."""
    const = np.asarray(const, dtype=a.data.dtype)
    out = a.data * const
    if out.shape != a.data.shape:
        raise ShapeError(
            f"mul_const: constant {const.shape} would broadcast {a.data.shape} "
            f"to {out.shape}"
        )

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * const)

    return _result(out, (a,), "mul_const", backward)


def relu(a: Tensor) -> Tensor:
    # Subgradient 0 at exactly 0.
    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * (a.data > 0))

    return _result(np.maximum(a.data, 0.0), (a,), "relu", backward)


def sigmoid(a: Tensor) -> Tensor:
    y = 1.0 / (1.0 + np.exp(-a.data))

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * (y * (1.0 - y)))

    return _result(y, (a,), "sigmoid", backward)


# ---------------------------------------------------------------------------
# shape / reduction ops


def _check_axis(op, a, axis):
    nd = a.data.ndim
    if not -nd <= axis < nd:
        raise ShapeError(f"{op}: axis {axis} out of range for rank {nd}")
    return axis % nd


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != a.data.size:
        raise ShapeError(f"reshape: cannot view {a.data.shape} as {shape}")
    old = a.data.shape

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g.reshape(old))

    return _result(a.data.reshape(shape), (a,), "reshape", backward)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g.transpose(inverse))

    return _result(a.data.transpose(axes), (a,), "transpose", backward)


def sum_along(a: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is not None:
        axis = _check_axis("sum", a, axis)
    shape = a.data.shape

    def backward(g):
        if not a.requires_grad:
            return
        if axis is None:
            a.accumulate_grad(np.broadcast_to(g, shape).copy())
        else:
            ge = g if keepdims else np.expand_dims(g, axis)
            a.accumulate_grad(np.broadcast_to(ge, shape).copy())

    return _result(a.data.sum(axis=axis, keepdims=keepdims), (a,), "sum", backward)


def concat(tensors, axis: int) -> Tensor:
    if not tensors:
        raise ShapeError("concat: need at least one tensor")
    axis = _check_axis("concat", tensors[0], axis)
    base = list(tensors[0].data.shape)
    for t in tensors[1:]:
        other = list(t.data.shape)
        if len(other) != len(base) or any(
            o != b for i, (o, b) in enumerate(zip(other, base)) if i != axis
        ):
            raise ShapeError(
                f"concat: extent mismatch off axis {axis}: "
                f"{tensors[0].data.shape} vs {t.data.shape}"
            )
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                index = [slice(None)] * g.ndim
                index[axis] = slice(lo, hi)
                t.accumulate_grad(g[tuple(index)])

    data = np.concatenate([t.data for t in tensors], axis=axis)
    return _result(data, tuple(tensors), "concat", backward)


def softmax(a: Tensor, axis: int) -> Tensor:
    axis = _check_axis("softmax", a, axis)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        if a.requires_grad:
            dot = (g * y).sum(axis=axis, keepdims=True)
            a.accumulate_grad(y * (g - dot))

    return _result(y, (a,), "softmax", backward)


def l2_norm(a: Tensor, axis: int = -1) -> Tensor:
    """Vector L2 norm along ``axis`` (axis removed from the output shape).

    At an exactly-zero vector the gradient is defined as 0.
    """
    axis = _check_axis("l2_norm", a, axis)
    norm = np.sqrt((a.data * a.data).sum(axis=axis))

    def backward(g):
        if not a.requires_grad:
            return
        n = np.expand_dims(norm, axis)
        safe = np.maximum(n, np.finfo(a.data.dtype).tiny)
        direction = np.where(n > 0, a.data / safe, 0.0)
        a.accumulate_grad(np.expand_dims(g, axis) * direction)

    return _result(norm, (a,), "l2_norm", backward)


# ---------------------------------------------------------------------------
# linear-algebra ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: {a.data.shape} @ {b.data.shape}")

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g @ b.data.T)
        if b.requires_grad:
            b.accumulate_grad(a.data.T @ g)

    return _result(a.data @ b.data, (a, b), "matmul", backward)


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map x @ weight + bias for x:[B,I], weight:[I,O], bias:[O]."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ShapeError(
            f"dense: expected 2-d input and weight, got {x.data.shape} and "
            f"{weight.data.shape}"
        )
    if x.data.shape[1] != weight.data.shape[0]:
        raise ShapeError(
            f"dense: inner dims disagree: input {x.data.shape} vs weight "
            f"{weight.data.shape}"
        )
    if bias.data.shape != (weight.data.shape[1],):
        raise ShapeError(
            f"dense: bias shape {bias.data.shape} != ({weight.data.shape[1]},)"
        )

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g @ weight.data.T)
        if weight.requires_grad:
            weight.accumulate_grad(x.data.T @ g)
        if bias.requires_grad:
            bias.accumulate_grad(g.sum(axis=0))

    return _result(x.data @ weight.data + bias.data, (x, weight, bias), "dense", backward)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """3x3 same-padding stride-1 convolution: [B,C,H,W] -> [B,F,H,W].

    Implemented as im2col + one BLAS matmul; the patch matrix is retained
    for the backward pass.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d: input must be [B,C,H,W], got {x.data.shape}")
    if kernel.data.ndim != 4 or kernel.data.shape[2:] != (3, 3):
        raise ShapeError(
            f"conv2d: kernel must be [F,C,3,3], got {kernel.data.shape}"
        )
    B, C, H, W = x.data.shape
    F, Ck = kernel.data.shape[:2]
    if Ck != C:
        raise ShapeError(
            f"conv2d: input has {C} channels but kernel expects {Ck}"
        )
    if bias.data.shape != (F,):
        raise ShapeError(f"conv2d: bias shape {bias.data.shape} != ({F},)")

    padded = np.zeros((B, C, H + 2, W + 2), dtype=x.data.dtype)
    padded[:, :, 1:-1, 1:-1] = x.data
    windows = np.lib.stride_tricks.sliding_window_view(padded, (3, 3), axis=(2, 3))
    # [B,C,H,W,3,3] -> [B*H*W, C*9], matching kernel.reshape(F, C*9)
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(B * H * W, C * 9)
    kmat = kernel.data.reshape(F, C * 9)
    out = cols @ kmat.T + bias.data
    out = out.reshape(B, H, W, F).transpose(0, 3, 1, 2)

    def backward(g):
        go = g.transpose(0, 2, 3, 1).reshape(B * H * W, F)
        if kernel.requires_grad:
            kernel.accumulate_grad((go.T @ cols).reshape(F, C, 3, 3))
        if bias.requires_grad:
            bias.accumulate_grad(go.sum(axis=0))
        if x.requires_grad:
            gcols = (go @ kmat).reshape(B, H, W, C, 3, 3).transpose(0, 3, 1, 2, 4, 5)
            gpad = np.zeros_like(padded)
            for di in range(3):
                for dj in range(3):
                    gpad[:, :, di : di + H, dj : dj + W] += gcols[:, :, :, :, di, dj]
            x.accumulate_grad(gpad[:, :, 1:-1, 1:-1])

    return _result(out, (x, kernel, bias), "conv2d", backward)


# ---------------------------------------------------------------------------
# capsule-shaped contractions (batched BLAS matmuls under the hood)


def caps_transform(u: Tensor, W: Tensor) -> Tensor:
    """Per-capsule linear votes: u:[B,N,Di], W:[N,K,Di,Do] -> [B,N,K,Do]."""
    if u.data.ndim != 3 or W.data.ndim != 4:
        raise ShapeError(
            f"caps_transform: expected u:[B,N,Di], W:[N,K,Di,Do], got "
            f"{u.data.shape} and {W.data.shape}"
        )
    B, N, Di = u.data.shape
    Nw, K, Diw, Do = W.data.shape
    if Nw != N or Diw != Di:
        raise ShapeError(
            f"caps_transform: u {u.data.shape} incompatible with W {W.data.shape}"
        )
    ut = np.ascontiguousarray(u.data.transpose(1, 0, 2))  # [N,B,Di]
    wm = np.ascontiguousarray(W.data.transpose(0, 2, 1, 3)).reshape(N, Di, K * Do)
    out = (ut @ wm).transpose(1, 0, 2).reshape(B, N, K, Do)

    def backward(g):
        gt = np.ascontiguousarray(g.reshape(B, N, K * Do).transpose(1, 0, 2))
        if u.requires_grad:
            u.accumulate_grad((gt @ wm.transpose(0, 2, 1)).transpose(1, 0, 2))
        if W.requires_grad:
            gw = ut.transpose(0, 2, 1) @ gt  # [N,Di,K*Do]
            W.accumulate_grad(gw.reshape(N, Di, K, Do).transpose(0, 2, 1, 3))

    return _result(out, (u, W), "caps_transform", backward)


def weighted_sum_const(u_hat: Tensor, coupling) -> Tensor:
    """s[b,k,:] = sum_n c[b,n,k] * u_hat[b,n,k,:] with constant coupling c."""
    c = np.asarray(coupling, dtype=u_hat.data.dtype)
    if u_hat.data.ndim != 4 or c.shape != u_hat.data.shape[:3]:
        raise ShapeError(
            f"weighted_sum_const: coupling {c.shape} does not match votes "
            f"{u_hat.data.shape}"
        )
    out = np.einsum("bnk,bnkd->bkd", c, u_hat.data)

    def backward(g):
        if u_hat.requires_grad:
            u_hat.accumulate_grad(c[..., None] * g[:, None, :, :])

    return _result(out, (u_hat,), "weighted_sum_const", backward)


def coupling_mul(u_hat: Tensor, coupling: Tensor) -> Tensor:
    """u_hat[b,n,k,:] * c[b,n,k], with c on the gradient tape."""
    if u_hat.data.ndim != 4 or coupling.data.shape != u_hat.data.shape[:3]:
        raise ShapeError(
            f"coupling_mul: coupling {coupling.data.shape} does not match votes "
            f"{u_hat.data.shape}"
        )
    out = u_hat.data * coupling.data[..., None]

    def backward(g):
        if u_hat.requires_grad:
            u_hat.accumulate_grad(g * coupling.data[..., None])
        if coupling.requires_grad:
            coupling.accumulate_grad((g * u_hat.data).sum(axis=-1))

    return _result(out, (u_hat, coupling), "coupling_mul", backward)


def agreement(u_hat: Tensor, v: Tensor) -> Tensor:
    """Dot products between votes and outputs: [B,N,K,D],[B,K,D] -> [B,N,K]."""
    if (
        u_hat.data.ndim != 4
        or v.data.ndim != 3
        or v.data.shape != (u_hat.data.shape[0],) + u_hat.data.shape[2:]
    ):
        raise ShapeError(
            f"agreement: votes {u_hat.data.shape} vs outputs {v.data.shape}"
        )
    out = np.einsum("bnkd,bkd->bnk", u_hat.data, v.data)

    def backward(g):
        if u_hat.requires_grad:
            u_hat.accumulate_grad(g[..., None] * v.data[:, None, :, :])
        if v.requires_grad:
            v.accumulate_grad(np.einsum("bnk,bnkd->bkd", g, u_hat.data))

    return _result(out, (u_hat, v), "agreement", backward)
