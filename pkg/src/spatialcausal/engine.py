"""Reverse-mode automatic differentiation on numpy arrays.

A ``Tape`` records every operation executed while it is active; ``Tape.backward``
replays the records in reverse and accumulates vector-Jacobian products into the
``grad`` buffers of the participating leaf tensors.  All arithmetic is float64.
Outside an active tape the same operations run as plain numpy forward passes.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError

_TAPE_STACK: list["Tape"] = []


def _check_finite(arr: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {where}")


class Tensor:
    """A float64 array with an optional gradient buffer.

    Leaves are built directly; op outputs are built by the op functions below.
    ``grad`` accumulates additively across backward passes until cleared.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        _check_finite(arr, "tensor data")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    """Wrap arrays and scalars as constant tensors; pass tensors through."""
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


class _Node:
    __slots__ = ("kind", "inputs", "output", "vjp")

    def __init__(self, kind: str, inputs: tuple, output: Tensor, vjp: Callable):
        self.kind = kind
        self.inputs = inputs
        self.output = output
        self.vjp = vjp


class Tape:
    """Ordered record of operations, used as a context manager.

    Only the innermost active tape records.  ``backward`` seeds the scalar loss
    with gradient 1 and walks the records last to first.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        if popped is not self:
            raise ContractError("tape stack corrupted by unbalanced enter/exit")

    def backward(self, loss: Tensor) -> None:
        if loss.data.shape != ():
            raise ContractError("backward requires a scalar loss")
        grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
        for node in reversed(self.nodes):
            out_grad = grads.pop(id(node.output), None)
            if out_grad is None:
                continue
            in_grads = node.vjp(out_grad)
            for tensor, g in zip(node.inputs, in_grads):
                if g is None or not tensor.requires_grad:
                    continue
                _check_finite(g, f"gradient of {node.kind}")
                key = id(tensor)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
        # Flush whatever remains: these are leaves (never produced by a node).
        for node in self.nodes:
            for tensor in node.inputs:
                self._flush(tensor, grads)
        self._flush(loss, grads)

    @staticmethod
    def _flush(tensor: Tensor, grads: dict) -> None:
        g = grads.pop(id(tensor), None)
        if g is None:
            return
        if tensor.grad is None:
            tensor.grad = np.zeros_like(tensor.data)
        tensor.grad += g


def _record(kind: str, inputs: tuple, out_data: np.ndarray, vjp: Callable) -> Tensor:
    _check_finite(out_data, f"output of {kind}")
    needs = any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.requires_grad = needs
    out.grad = None
    if _TAPE_STACK and needs:
        _TAPE_STACK[-1].nodes.append(_Node(kind, inputs, out, vjp))
    return out


# ---------------------------------------------------------------------------
# ops
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(
            f"matmul expects (n,k)@(k,m), got {a.data.shape} and {b.data.shape}")
    ad, bd = a.data, b.data

    def vjp(g):
        return g @ bd.T, ad.T @ g

    return _record("matmul", (a, b), ad @ bd, vjp)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape != b.data.shape:
        raise DimensionError(f"add expects equal shapes, got {a.data.shape} and {b.data.shape}")

    def vjp(g):
        return g, g

    return _record("add", (a, b), a.data + b.data, vjp)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape != b.data.shape:
        raise DimensionError(f"sub expects equal shapes, got {a.data.shape} and {b.data.shape}")

    def vjp(g):
        return g, -g

    return _record("sub", (a, b), a.data - b.data, vjp)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape != b.data.shape:
        raise DimensionError(f"mul expects equal shapes, got {a.data.shape} and {b.data.shape}")
    ad, bd = a.data, b.data

    def vjp(g):
        return g * bd, g * ad

    return _record("mul", (a, b), ad * bd, vjp)


def scale(x, s) -> Tensor:
    """Multiply an array by a scalar; the scalar may itself carry a gradient."""
    x, s = as_tensor(x), as_tensor(s)
    if s.data.shape not in ((), (1,)):
        raise DimensionError(f"scale factor must be scalar, got shape {s.data.shape}")
    xd = x.data
    sval = float(s.data.reshape(()))
    sshape = s.data.shape

    def vjp(g):
        gs = np.sum(g * xd)
        return g * sval, np.full(sshape, gs) if sshape else np.asarray(gs)

    return _record("scale", (x, s), xd * sval, vjp)


def bias_add(x, b) -> Tensor:
    """Add a per-feature bias: (n,d)+(d,), or (n,c,h,w)+(c,) on the channel axis."""
    x, b = as_tensor(x), as_tensor(b)
    xd, bd = x.data, b.data
    if bd.ndim != 1:
        raise DimensionError(f"bias must be 1-d, got shape {bd.shape}")
    if xd.ndim == 2:
        if xd.shape[1] != bd.shape[0]:
            raise DimensionError(f"bias length {bd.shape[0]} does not match {xd.shape}")
        out = xd + bd[None, :]

        def vjp(g):
            return g, g.sum(axis=0)
    elif xd.ndim == 4:
        if xd.shape[1] != bd.shape[0]:
            raise DimensionError(f"bias length {bd.shape[0]} does not match {xd.shape}")
        out = xd + bd[None, :, None, None]

        def vjp(g):
            return g, g.sum(axis=(0, 2, 3))
    else:
        raise DimensionError(f"bias_add expects 2-d or 4-d input, got {xd.shape}")
    return _record("bias_add", (x, b), out, vjp)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0.0

    def vjp(g):
        return (g * mask,)

    return _record("relu", (x,), np.where(mask, x.data, 0.0), vjp)


def elu(x, alpha: float = 1.0) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    neg = np.expm1(np.minimum(xd, 0.0)) * alpha
    out = np.where(xd > 0.0, xd, neg)

    def vjp(g):
        return (np.where(xd > 0.0, g, g * (neg + alpha)),)

    return _record("elu", (x,), out, vjp)


def conv2d(x, w, bias=None, padding: int = 0) -> Tensor:
    """2-d convolution, stride 1, square kernel, optional zero padding.

    ``x`` is (n, c_in, h, w); ``w`` is (c_out, c_in, kh, kw).  Implemented by
    unrolling patches to columns so the inner product is a single matmul.
    """
    x, w = as_tensor(x), as_tensor(w)
    xd, wd = x.data, w.data
    if xd.ndim != 4 or wd.ndim != 4 or xd.shape[1] != wd.shape[1]:
        raise DimensionError(f"conv2d got input {xd.shape} and kernel {wd.shape}")
    n, cin, h, wdt = xd.shape
    cout, _, kh, kw = wd.shape
    p = int(padding)
    ho, wo = h + 2 * p - kh + 1, wdt + 2 * p - kw + 1
    if ho <= 0 or wo <= 0:
        raise DimensionError(f"kernel {kh}x{kw} too large for input {h}x{wdt} pad {p}")
    xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p))) if p else xd
    cols = np.empty((n, cin, kh, kw, ho, wo), dtype=np.float64)
    for di in range(kh):
        for dj in range(kw):
            cols[:, :, di, dj] = xp[:, :, di:di + ho, dj:dj + wo]
    cols2 = cols.reshape(n, cin * kh * kw, ho * wo)
    wmat = wd.reshape(cout, cin * kh * kw)
    out = (wmat[None] @ cols2).reshape(n, cout, ho, wo)

    def vjp(g):
        gm = g.reshape(n, cout, ho * wo)
        gw = np.einsum("nfp,nkp->fk", gm, cols2).reshape(wd.shape)
        gcols = (wmat.T[None] @ gm).reshape(n, cin, kh, kw, ho, wo)
        gxp = np.zeros_like(xp)
        for di in range(kh):
            for dj in range(kw):
                gxp[:, :, di:di + ho, dj:dj + wo] += gcols[:, :, di, dj]
        gx = gxp[:, :, p:p + h, p:p + wdt] if p else gxp
        return gx, gw

    out_t = _record("conv2d", (x, w), out, vjp)
    if bias is not None:
        out_t = bias_add(out_t, bias)
    return out_t


def maxpool2(x) -> Tensor:
    """2x2 max pooling with stride 2; ties resolve to the first position scanned."""
    x = as_tensor(x)
    xd = x.data
    if xd.ndim != 4:
        raise DimensionError(f"maxpool2 expects 4-d input, got {xd.shape}")
    n, c, h, w = xd.shape
    if h % 2 or w % 2:
        raise DimensionError(f"maxpool2 requires even spatial sides, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    windows = xd.reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
    idx = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]

    def vjp(g):
        gw = np.zeros((n, c, h2, w2, 4), dtype=np.float64)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        return (gw.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w),)

    return _record("maxpool2", (x,), out, vjp)


def upsample2(x) -> Tensor:
    """Nearest-neighbor upsampling by a factor of 2 in both spatial dimensions."""
    x = as_tensor(x)
    xd = x.data
    if xd.ndim != 4:
        raise DimensionError(f"upsample2 expects 4-d input, got {xd.shape}")
    n, c, h, w = xd.shape
    out = np.repeat(np.repeat(xd, 2, axis=2), 2, axis=3)

    def vjp(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _record("upsample2", (x,), out, vjp)


def concat_channels(xs: Sequence) -> Tensor:
    xs = tuple(as_tensor(x) for x in xs)
    if not xs:
        raise DimensionError("concat_channels needs at least one input")
    if any(x.data.ndim != 4 for x in xs):
        raise DimensionError("concat_channels expects 4-d inputs")
    splits = np.cumsum([x.data.shape[1] for x in xs])[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=1))

    return _record("concat", xs, np.concatenate([x.data for x in xs], axis=1), vjp)


def pad2d(x, top: int, bottom: int, left: int, right: int) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    if xd.ndim != 4:
        raise DimensionError(f"pad2d expects 4-d input, got {xd.shape}")
    n, c, h, w = xd.shape
    out = np.pad(xd, ((0, 0), (0, 0), (top, bottom), (left, right)))

    def vjp(g):
        return (g[:, :, top:top + h, left:left + w],)

    return _record("pad2d", (x,), out, vjp)


def crop2d(x, r0: int, r1: int, c0: int, c1: int) -> Tensor:
    """Keep rows [r0, r1) and columns [c0, c1)."""
    x = as_tensor(x)
    xd = x.data
    if xd.ndim != 4:
        raise DimensionError(f"crop2d expects 4-d input, got {xd.shape}")
    n, c, h, w = xd.shape
    if not (0 <= r0 < r1 <= h and 0 <= c0 < c1 <= w):
        raise DimensionError(f"crop [{r0}:{r1},{c0}:{c1}] outside {h}x{w}")

    def vjp(g):
        gx = np.zeros_like(xd)
        gx[:, :, r0:r1, c0:c1] = g
        return (gx,)

    return _record("crop2d", (x,), xd[:, :, r0:r1, c0:c1].copy(), vjp)


def center_pixel(x) -> Tensor:
    """Extract the center pixel of an odd-sided map: (n,c,h,w) -> (n,c)."""
    x = as_tensor(x)
    xd = x.data
    if xd.ndim != 4:
        raise DimensionError(f"center_pixel expects 4-d input, got {xd.shape}")
    n, c, h, w = xd.shape
    if h % 2 == 0 or w % 2 == 0:
        raise ContractError(f"center_pixel requires odd spatial sides, got {h}x{w}")
    ci, cj = h // 2, w // 2

    def vjp(g):
        gx = np.zeros_like(xd)
        gx[:, :, ci, cj] = g
        return (gx,)

    return _record("center_pixel", (x,), xd[:, :, ci, cj].copy(), vjp)


def global_avg_pool(x) -> Tensor:
    """Average each channel map to one value: (n,c,h,w) -> (n,c)."""
    x = as_tensor(x)
    xd = x.data
    if xd.ndim != 4:
        raise DimensionError(f"global_avg_pool expects 4-d input, got {xd.shape}")
    n, c, h, w = xd.shape
    area = float(h * w)

    def vjp(g):
        return (np.broadcast_to(g[:, :, None, None] / area, xd.shape).copy(),)

    return _record("gap2d", (x,), xd.mean(axis=(2, 3)), vjp)


def reshape(x, shape: tuple) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    orig = xd.shape
    try:
        out = xd.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {orig} to {shape}") from exc

    def vjp(g):
        return (g.reshape(orig),)

    return _record("reshape", (x,), out, vjp)


def tsum(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data

    def vjp(g):
        return (np.broadcast_to(g, xd.shape).copy(),)

    return _record("sum", (x,), np.asarray(xd.sum()), vjp)


def tmean(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    count = float(xd.size)

    def vjp(g):
        return (np.broadcast_to(g / count, xd.shape).copy(),)

    return _record("mean", (x,), np.asarray(xd.mean()), vjp)


def mse(pred, target) -> Tensor:
    """Mean squared error over all elements; the batch-mean convention."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.data.shape != target.data.shape:
        raise DimensionError(
            f"mse expects equal shapes, got {pred.data.shape} and {target.data.shape}")
    diff = pred.data - target.data
    count = float(diff.size)

    def vjp(g):
        gd = (2.0 / count) * diff * g
        return gd, -gd

    return _record("mse", (pred, target), np.asarray(np.mean(diff * diff)), vjp)


_OPS: dict[str, Callable] = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": scale,
    "bias_add": bias_add,
    "relu": relu,
    "elu": elu,
    "conv2d": conv2d,
    "maxpool2": maxpool2,
    "upsample2": upsample2,
    "concat": concat_channels,
    "pad2d": pad2d,
    "crop2d": crop2d,
    "center_pixel": center_pixel,
    "gap2d": global_avg_pool,
    "reshape": reshape,
    "sum": tsum,
    "mean": tmean,
    "mse": mse,
}


def forward_op(kind: str, *inputs, **kwargs) -> Tensor:
    """Dispatch an operation by name; unknown kinds raise ContractError."""
    fn = _OPS.get(kind)
    if fn is None:
        raise ContractError(f"unknown op kind {kind!r}")
    if kind == "concat":
        return fn(inputs, **kwargs)
    return fn(*inputs, **kwargs)


def op_kinds() -> tuple:
    return tuple(sorted(_OPS))


# ---------------------------------------------------------------------------
# finite-difference gradient checking
# ---------------------------------------------------------------------------

class GradCheckReport:
    """Outcome of a finite-difference sweep: worst relative error and verdict."""

    def __init__(self, max_rel_err: float, tolerance: float, per_param: list):
        self.max_rel_err = max_rel_err
        self.tolerance = tolerance
        self.per_param = per_param
        self.passed = max_rel_err <= tolerance

    def __repr__(self) -> str:
        flag = "pass" if self.passed else "FAIL"
        return f"GradCheckReport(max_rel_err={self.max_rel_err:.3e}, {flag})"


def finite_diff_check(fn: Callable[[], Tensor], params: Iterable[Tensor],
                      tolerance: float = 1e-4, step: float = 1e-5) -> GradCheckReport:
    """Compare tape gradients of ``fn`` against central differences.

    ``fn`` takes no arguments and recomputes the scalar loss from the current
    contents of ``params``; each coordinate is perturbed in place by ``step``.
    The relative error for a coordinate is |a - n| / max(|a|, |n|, 1e-8).
    """
    params = list(params)
    for p in params:
        if not p.requires_grad:
            raise ContractError("finite_diff_check params must require gradients")
        p.zero_grad()
    with Tape() as tape:
        loss = fn()
    if loss.data.shape != ():
        raise ContractError("finite_diff_check requires a scalar-valued fn")
    tape.backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    max_rel = 0.0
    per_param = []
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        num = np.zeros_like(flat)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + step
            hi = float(fn().data)
            flat[i] = keep - step
            lo = float(fn().data)
            flat[i] = keep
            num[i] = (hi - lo) / (2.0 * step)
        aflat = a.reshape(-1)
        denom = np.maximum(np.maximum(np.abs(aflat), np.abs(num)), 1e-8)
        rel = float(np.max(np.abs(aflat - num) / denom)) if flat.size else 0.0
        per_param.append(rel)
        max_rel = max(max_rel, rel)
        p.zero_grad()
    return GradCheckReport(max_rel, tolerance, per_param)


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------

class Optimizer:
    """Base: holds parameter list and per-parameter state buffers."""

    def __init__(self, params: Iterable[Tensor]):
        self.params = list(params)
        if not all(p.requires_grad for p in self.params):
            raise ContractError("optimizer parameters must require gradients")
        self.step_count = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        raise NotImplementedError


class SGD(Optimizer):
    """Stochastic gradient descent with classical momentum.

    v <- momentum * v + grad;  p <- p - lr * v.  Momentum 0 recovers the
    vanilla update.
    """

    def __init__(self, params: Iterable[Tensor], lr: float, momentum: float = 0.0):
        super().__init__(params)
        if lr <= 0.0:
            raise ContractError(f"lr must be positive, got {lr}")
        if not 0.0 <= momentum < 1.0:
            raise ContractError(f"momentum must lie in [0, 1), got {momentum}")
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.step_count += 1
        for p, v in zip(self.params, self.velocity):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            v *= self.momentum
            v += g
            p.data -= self.lr * v


class Adam(Optimizer):
    """Adam with bias-corrected first and second moment estimates."""

    def __init__(self, params: Iterable[Tensor], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        super().__init__(params)
        if lr <= 0.0:
            raise ContractError(f"lr must be positive, got {lr}")
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.step_count += 1
        b1t = 1.0 - self.beta1 ** self.step_count
        b2t = 1.0 - self.beta2 ** self.step_count
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)
