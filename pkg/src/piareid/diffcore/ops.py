"""Primitive catalog: forward rules, hand-derived backward rules, wrappers.

Every primitive is a pair of pure functions registered under a string kind.
``apply`` runs the forward rule, wraps the result, and records a tape node
when recording is active.  Backward rules receive the upstream gradient and
return one gradient (or ``None``) per input, in input order.

Conventions:
  - spatial tensors are [C, H, W] or [N, C, H, W]; vector batches are [D]
    or [N, D]
  - reductions to a scalar produce a 0-d array
  - ties in max operations route the full gradient to the lowest index
"""

from __future__ import annotations

from typing import Callable, NamedTuple

import numpy as np

from .tensor import (
    InvalidAttributeError,
    ShapeMismatchError,
    Tensor,
    record,
)

NORM_FLOOR = 1e-12
BN_EPS = 1e-12
BN_MOMENTUM = 0.1


class PrimitiveRule(NamedTuple):
    forward: Callable
    backward: Callable


_RULES: dict[str, PrimitiveRule] = {}


def register(kind: str):
    """Register the (forward, backward) pair returned by the decorated builder."""

    def wrap(builder: Callable) -> PrimitiveRule:
        rule = PrimitiveRule(*builder())
        _RULES[kind] = rule
        return rule

    return wrap


def registered_kinds() -> tuple[str, ...]:
    return tuple(sorted(_RULES))


def apply(kind: str, inputs, **attrs) -> Tensor:
    """Run one primitive and record it on the active tape if needed."""
    rule = _RULES.get(kind)
    if rule is None:
        raise InvalidAttributeError(f"unknown primitive kind {kind!r}")
    for pos, tens in enumerate(inputs):
        if not isinstance(tens, Tensor):
            raise InvalidAttributeError(
                f"{kind}: input {pos} is {type(tens).__name__}, expected Tensor"
            )
    ctx: dict = {}
    arrays = [t.data for t in inputs]
    out_data = rule.forward(ctx, arrays, attrs)
    out = Tensor(out_data, requires_grad=any(t.requires_grad for t in inputs))
    record(kind, inputs, out, rule.backward, ctx)
    return out


def _require_int(attrs: dict, key: str, kind: str, minimum: int) -> int:
    value = attrs.get(key)
    if not isinstance(value, (int, np.integer)) or isinstance(value, bool):
        raise InvalidAttributeError(f"{kind}: attribute {key!r} must be an int")
    value = int(value)
    if value < minimum:
        raise InvalidAttributeError(
            f"{kind}: attribute {key!r} must be >= {minimum}, got {value}"
        )
    return value


def _as_batched_map(x: np.ndarray, kind: str) -> tuple[np.ndarray, bool]:
    """Promote [C,H,W] to [1,C,H,W]; reject other ranks."""
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeMismatchError(
        f"{kind}: expected a 3-d or 4-d feature map, got shape {x.shape}"
    )


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise


def _ew_binary_forward(op, kind: str):
    def forward(ctx, arrays, attrs):
        a, b = arrays
        try:
            np.broadcast_shapes(a.shape, b.shape)
        except ValueError as exc:
            raise ShapeMismatchError(
                f"{kind}: shapes {a.shape} and {b.shape} do not broadcast"
            ) from exc
        ctx["a"] = a
        ctx["b"] = b
        return op(a, b)

    return forward


@register("add")
def _add():
    forward = _ew_binary_forward(np.add, "add")

    def backward(ctx, grad):
        return [
            _unbroadcast(grad, ctx["a"].shape),
            _unbroadcast(grad, ctx["b"].shape),
        ]

    return forward, backward



@register("sub")
def _sub():
    forward = _ew_binary_forward(np.subtract, "sub")

    def backward(ctx, grad):
        return [
            _unbroadcast(grad, ctx["a"].shape),
            _unbroadcast(-grad, ctx["b"].shape),
        ]

    return forward, backward



@register("mul")
def _mul():
    forward = _ew_binary_forward(np.multiply, "mul")

    def backward(ctx, grad):
        return [
            _unbroadcast(grad * ctx["b"], ctx["a"].shape),
            _unbroadcast(grad * ctx["a"], ctx["b"].shape),
        ]

    return forward, backward



@register("scale")
def _scale():
    def forward(ctx, arrays, attrs):
        if "factor" not in attrs:
            raise InvalidAttributeError("scale: attribute 'factor' is required")
        factor = attrs["factor"]
        if isinstance(factor, bool) or not isinstance(
            factor, (int, float, np.integer, np.floating)
        ):
            raise InvalidAttributeError("scale: attribute 'factor' must be a number")
        ctx["factor"] = float(factor)
        (x,) = arrays
        return x * ctx["factor"]

    def backward(ctx, grad):
        return [grad * ctx["factor"]]

    return forward, backward



@register("relu")
def _relu():
    def forward(ctx, arrays, attrs):
        (x,) = arrays
        ctx["mask"] = x > 0.0
        return np.where(ctx["mask"], x, 0.0)

    def backward(ctx, grad):
        return [np.where(ctx["mask"], grad, 0.0)]

    return forward, backward



@register("sigmoid")
def _sigmoid():
    def forward(ctx, arrays, attrs):
        (x,) = arrays
        out = 0.5 * (np.tanh(0.5 * x) + 1.0)
        ctx["out"] = out
        return out

    def backward(ctx, grad):
        out = ctx["out"]
        return [grad * out * (1.0 - out)]

    return forward, backward



@register("abs")
def _abs():
    def forward(ctx, arrays, attrs):
        (x,) = arrays
        ctx["sign"] = np.sign(x)
        return np.abs(x)

    def backward(ctx, grad):
        # subgradient 0 at exactly zero
        return [grad * ctx["sign"]]

    return forward, backward



# ---------------------------------------------------------------------------
# convolution


@register("conv2d")
def _conv2d():
    def forward(ctx, arrays, attrs):
        x, w, b = arrays
        stride = _require_int(attrs, "stride", "conv2d", 1)
        padding = _require_int(attrs, "padding", "conv2d", 0)
        x4, squeezed = _as_batched_map(x, "conv2d")
        if w.ndim != 4:
            raise ShapeMismatchError(
                f"conv2d: weight must be [C_out, C_in, kh, kw], got {w.shape}"
            )
        n, c_in, height, width = x4.shape
        c_out, c_in_w, kh, kw = w.shape
        if c_in != c_in_w:
            raise ShapeMismatchError(
                f"conv2d: input has {c_in} channels, weight expects {c_in_w}"
            )
        if b.shape != (c_out,):
            raise ShapeMismatchError(
                f"conv2d: bias shape {b.shape} must be ({c_out},)"
            )
        h_pad = height + 2 * padding
        w_pad = width + 2 * padding
        if h_pad < kh or w_pad < kw:
            raise ShapeMismatchError(
                f"conv2d: kernel {kh}x{kw} exceeds padded input {h_pad}x{w_pad}"
            )
        h_out = (h_pad - kh) // stride + 1
        w_out = (w_pad - kw) // stride + 1

        xp = np.pad(x4, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        cols = np.empty((n, c_in, kh, kw, h_out, w_out), dtype=np.float64)
        for i in range(kh):
            for j in range(kw):
                cols[:, :, i, j] = xp[
                    :,
                    :,
                    i : i + stride * (h_out - 1) + 1 : stride,
                    j : j + stride * (w_out - 1) + 1 : stride,
                ]
        flat = cols.reshape(n, c_in * kh * kw, h_out * w_out)
        w_flat = w.reshape(c_out, c_in * kh * kw)
        out = np.tensordot(flat, w_flat, axes=([1], [1]))  # [n, L, c_out]
        out = out.transpose(0, 2, 1).reshape(n, c_out, h_out, w_out)
        out = out + b[None, :, None, None]

        ctx.update(
            flat=flat,
            w_flat=w_flat,
            stride=stride,
            padding=padding,
            squeezed=squeezed,
            x_shape=x4.shape,
            xp_shape=xp.shape,
            w_shape=w.shape,
            out_hw=(h_out, w_out),
        )
        return out[0] if squeezed else out

    def backward(ctx, grad):
        n, c_in, height, width = ctx["x_shape"]
        c_out, _, kh, kw = ctx["w_shape"]
        h_out, w_out = ctx["out_hw"]
        stride = ctx["stride"]
        padding = ctx["padding"]
        grad4 = grad[None] if ctx["squeezed"] else grad

        grad_b = grad4.sum(axis=(0, 2, 3))
        grad_flat_out = grad4.reshape(n, c_out, h_out * w_out)
        grad_w = np.tensordot(grad_flat_out, ctx["flat"], axes=([0, 2], [0, 2]))
        grad_w = grad_w.reshape(ctx["w_shape"])
        grad_cols = np.tensordot(grad_flat_out, ctx["w_flat"], axes=([1], [0]))
        grad_cols = grad_cols.transpose(0, 2, 1).reshape(
            n, c_in, kh, kw, h_out, w_out
        )
        grad_xp = np.zeros(ctx["xp_shape"], dtype=np.float64)
        for i in range(kh):
            for j in range(kw):
                grad_xp[
                    :,
                    :,
                    i : i + stride * (h_out - 1) + 1 : stride,
                    j : j + stride * (w_out - 1) + 1 : stride,
                ] += grad_cols[:, :, i, j]
        if padding:
            grad_x = grad_xp[:, :, padding : padding + height, padding : padding + width]
        else:
            grad_x = grad_xp
        return [grad_x[0] if ctx["squeezed"] else grad_x, grad_w, grad_b]

    return forward, backward



# ---------------------------------------------------------------------------
# pooling


@register("channel_avg_pool")
def _channel_avg_pool():
    def forward(ctx, arrays, attrs):
        (x,) = arrays
        x4, squeezed = _as_batched_map(x, "channel_avg_pool")
        ctx["channels"] = x4.shape[1]
        ctx["squeezed"] = squeezed
        out = x4.mean(axis=1, keepdims=True)
        return out[0] if squeezed else out

    def backward(ctx, grad):
        grad4 = grad[None] if ctx["squeezed"] else grad
        spread = np.repeat(grad4 / ctx["channels"], ctx["channels"], axis=1)
        return [spread[0] if ctx["squeezed"] else spread]

    return forward, backward



@register("channel_max_pool")
def _channel_max_pool():
    def forward(ctx, arrays, attrs):
        (x,) = arrays
        x4, squeezed = _as_batched_map(x, "channel_max_pool")
        argmax = x4.argmax(axis=1)  # first maximizer on ties
        ctx["argmax"] = argmax
        ctx["shape"] = x4.shape
        ctx["squeezed"] = squeezed
        out = np.take_along_axis(x4, argmax[:, None], axis=1)
        return out[0] if squeezed else out

    def backward(ctx, grad):
        grad4 = grad[None] if ctx["squeezed"] else grad
        out = np.zeros(ctx["shape"], dtype=np.float64)
        np.put_along_axis(out, ctx["argmax"][:, None], grad4, axis=1)
        return [out[0] if ctx["squeezed"] else out]

    return forward, backward



@register("global_avg_pool")
def _global_avg_pool():
    def forward(ctx, arrays, attrs):
        (x,) = arrays
        x4, squeezed = _as_batched_map(x, "global_avg_pool")
        ctx["hw"] = x4.shape[2:]
        ctx["squeezed"] = squeezed
        out = x4.mean(axis=(2, 3))
        return out[0] if squeezed else out

    def backward(ctx, grad):
        grad2 = grad[None] if ctx["squeezed"] else grad
        h, w = ctx["hw"]
        spread = np.broadcast_to(
            grad2[:, :, None, None] / (h * w), grad2.shape + (h, w)
        ).copy()
        return [spread[0] if ctx["squeezed"] else spread]

    return forward, backward



@register("global_max_pool")
def _global_max_pool():
    def forward(ctx, arrays, attrs):
        (x,) = arrays
        x4, squeezed = _as_batched_map(x, "global_max_pool")
        n, c, h, w = x4.shape
        flat = x4.reshape(n, c, h * w)
        argmax = flat.argmax(axis=2)  # first maximizer on ties
        ctx["argmax"] = argmax
        ctx["shape"] = x4.shape
        ctx["squeezed"] = squeezed
        out = np.take_along_axis(flat, argmax[:, :, None], axis=2)[:, :, 0]
        return out[0] if squeezed else out

    def backward(ctx, grad):
        grad2 = grad[None] if ctx["squeezed"] else grad
        n, c, h, w = ctx["shape"]
        flat = np.zeros((n, c, h * w), dtype=np.float64)
        np.put_along_axis(flat, ctx["argmax"][:, :, None], grad2[:, :, None], axis=2)
        out = flat.reshape(n, c, h, w)
        return [out[0] if ctx["squeezed"] else out]

    return forward, backward



# ---------------------------------------------------------------------------
# joins and dense algebra


@register("concat")
def _concat():
    def forward(ctx, arrays, attrs):
        if "axis" not in attrs:
            raise InvalidAttributeError("concat: attribute 'axis' is required")
        axis = attrs["axis"]
        if not isinstance(axis, (int, np.integer)) or isinstance(axis, bool):
            raise InvalidAttributeError("concat: attribute 'axis' must be an int")
        if not arrays:
            raise ShapeMismatchError("concat: needs at least one input")
        rank = arrays[0].ndim
        axis = int(axis)
        if axis < 0:
            axis += rank
        if not 0 <= axis < rank:
            raise InvalidAttributeError(
                f"concat: axis {attrs['axis']} out of range for rank {rank}"
            )
        for pos, arr in enumerate(arrays):
            if arr.ndim != rank:
                raise ShapeMismatchError(
                    f"concat: input {pos} has rank {arr.ndim}, expected {rank}"
                )
            for dim in range(rank):
                if dim != axis and arr.shape[dim] != arrays[0].shape[dim]:
                    raise ShapeMismatchError(
                        f"concat: input {pos} shape {arr.shape} differs from "
                        f"{arrays[0].shape} outside axis {axis}"
                    )
        ctx["axis"] = axis
        ctx["sizes"] = [arr.shape[axis] for arr in arrays]
        return np.concatenate(arrays, axis=axis)

    def backward(ctx, grad):
        splits = np.cumsum(ctx["sizes"])[:-1]
        return list(np.split(grad, splits, axis=ctx["axis"]))

    return forward, backward



@register("linear")
def _linear():
    def forward(ctx, arrays, attrs):
        x, w, b = arrays
        if w.ndim != 2:
            raise ShapeMismatchError(f"linear: weight must be 2-d, got {w.shape}")
        d_in, d_out = w.shape
        if b.shape != (d_out,):
            raise ShapeMismatchError(
                f"linear: bias shape {b.shape} must be ({d_out},)"
            )
        if x.ndim == 1:
            squeezed = True
            x2 = x[None]
        elif x.ndim == 2:
            squeezed = False
            x2 = x
        else:
            raise ShapeMismatchError(f"linear: input must be 1-d or 2-d, got {x.shape}")
        if x2.shape[1] != d_in:
            raise ShapeMismatchError(
                f"linear: input width {x2.shape[1]} does not match weight rows {d_in}"
            )
        ctx["x2"] = x2
        ctx["w"] = w
        ctx["squeezed"] = squeezed
        out = x2 @ w + b
        return out[0] if squeezed else out

    def backward(ctx, grad):
        grad2 = grad[None] if ctx["squeezed"] else grad
        grad_x = grad2 @ ctx["w"].T
        grad_w = ctx["x2"].T @ grad2
        grad_b = grad2.sum(axis=0)
        return [grad_x[0] if ctx["squeezed"] else grad_x, grad_w, grad_b]

    return forward, backward



@register("dot")
def _dot():
    def forward(ctx, arrays, attrs):
        a, b = arrays
        if a.ndim != 1 or b.ndim != 1 or a.shape != b.shape:
            raise ShapeMismatchError(
                f"dot: expects two equal-length vectors, got {a.shape} and {b.shape}"
            )
        ctx["a"] = a
        ctx["b"] = b
        return np.asarray(a @ b)

    def backward(ctx, grad):
        return [grad * ctx["b"], grad * ctx["a"]]

    return forward, backward



# ---------------------------------------------------------------------------
# normalization and reductions


@register("batch_norm")
def _batch_norm():
    def forward(ctx, arrays, attrs):
        x, gamma, beta = arrays
        state = attrs.get("state")
        training = attrs.get("training")
        momentum = float(attrs.get("momentum", BN_MOMENTUM))
        eps = float(attrs.get("eps", BN_EPS))
        if state is None:
            raise InvalidAttributeError("batch_norm: attribute 'state' is required")
        if not isinstance(training, (bool, np.bool_)):
            raise InvalidAttributeError("batch_norm: attribute 'training' must be a bool")
        if x.ndim == 1:
            squeezed = True
            x2 = x[None]
        elif x.ndim == 2:
            squeezed = False
            x2 = x
        else:
            raise ShapeMismatchError(
                f"batch_norm: input must be [D] or [N, D], got {x.shape}"
            )
        dim = x2.shape[1]
        for name, arr in (("gamma", gamma), ("beta", beta)):
            if arr.shape != (dim,):
                raise ShapeMismatchError(
                    f"batch_norm: {name} shape {arr.shape} must be ({dim},)"
                )
        if state.running_mean.shape != (dim,) or state.running_var.shape != (dim,):
            raise ShapeMismatchError(
                "batch_norm: running statistics do not match feature width"
            )

        if training:
            mean = x2.mean(axis=0)
            var = x2.var(axis=0)  # biased
            state.running_mean[:] = (1.0 - momentum) * state.running_mean + momentum * mean
            state.running_var[:] = (1.0 - momentum) * state.running_var + momentum * var
        else:
            mean = state.running_mean
            var = state.running_var
        inv_std = 1.0 / np.sqrt(var + eps)
        x_hat = (x2 - mean) * inv_std
        out = gamma * x_hat + beta

        ctx.update(
            x_hat=x_hat,
            inv_std=inv_std,
            gamma=gamma,
            training=bool(training),
            n=x2.shape[0],
            squeezed=squeezed,
        )
        return out[0] if squeezed else out

    def backward(ctx, grad):
        grad2 = grad[None] if ctx["squeezed"] else grad
        x_hat = ctx["x_hat"]
        inv_std = ctx["inv_std"]
        grad_gamma = (grad2 * x_hat).sum(axis=0)
        grad_beta = grad2.sum(axis=0)
        if ctx["training"]:
            grad_xhat = grad2 * ctx["gamma"]
            grad_x = (
                grad_xhat
                - grad_xhat.mean(axis=0)
                - x_hat * (grad_xhat * x_hat).mean(axis=0)
            ) * inv_std
        else:
            grad_x = grad2 * ctx["gamma"] * inv_std
        return [grad_x[0] if ctx["squeezed"] else grad_x, grad_gamma, grad_beta]

    return forward, backward



def _resolve_axis(axis, rank: int, kind: str) -> int:
    if not isinstance(axis, (int, np.integer)) or isinstance(axis, bool):
        raise InvalidAttributeError(f"{kind}: attribute 'axis' must be an int")
    axis = int(axis)
    if axis < 0:
        axis += rank
    if not 0 <= axis < rank:
        raise InvalidAttributeError(f"{kind}: axis out of range for rank {rank}")
    return axis


@register("log_softmax")
def _log_softmax():
    def forward(ctx, arrays, attrs):
        (x,) = arrays
        axis = _resolve_axis(attrs.get("axis", -1), x.ndim, "log_softmax")
        shifted = x - x.max(axis=axis, keepdims=True)
        log_z = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
        out = shifted - log_z
        ctx["out"] = out
        ctx["axis"] = axis
        return out

    def backward(ctx, grad):
        axis = ctx["axis"]
        softmax = np.exp(ctx["out"])
        return [grad - softmax * grad.sum(axis=axis, keepdims=True)]

    return forward, backward



@register("l2_normalize")
def _l2_normalize():
    def forward(ctx, arrays, attrs):
        (x,) = arrays
        axis = _resolve_axis(attrs.get("axis", -1), x.ndim, "l2_normalize")
        norm = np.sqrt((x * x).sum(axis=axis, keepdims=True))
        denom = np.maximum(norm, NORM_FLOOR)
        out = x / denom
        ctx.update(x=x, axis=axis, norm=norm, denom=denom)
        return out

    def backward(ctx, grad):
        x = ctx["x"]
        axis = ctx["axis"]
        denom = ctx["denom"]
        floored = ctx["norm"] <= NORM_FLOOR
        inner = (grad * x).sum(axis=axis, keepdims=True)
        grad_x = grad / denom - x * inner / denom**3
        if np.any(floored):
            # below the floor the denominator is a constant
            grad_x = np.where(floored, grad / denom, grad_x)
        return [grad_x]

    return forward, backward



def _reduction(kind: str, divide: bool):
    def forward(ctx, arrays, attrs):
        (x,) = arrays
        axis = attrs.get("axis", None)
        if axis is None:
            ctx["axis"] = None
            ctx["shape"] = x.shape
            ctx["count"] = x.size
            out = x.mean() if divide else x.sum()
            return np.asarray(out)
        axis = _resolve_axis(axis, x.ndim, kind)
        ctx["axis"] = axis
        ctx["shape"] = x.shape
        ctx["count"] = x.shape[axis]
        return x.mean(axis=axis) if divide else x.sum(axis=axis)

    def backward(ctx, grad):
        shape = ctx["shape"]
        axis = ctx["axis"]
        scale = 1.0 / ctx["count"] if divide else 1.0
        if axis is None:
            return [np.broadcast_to(grad * scale, shape).copy()]
        expanded = np.expand_dims(grad, axis) * scale
        return [np.broadcast_to(expanded, shape).copy()]

    return forward, backward


register("mean")(lambda: _reduction("mean", divide=True))
register("sum")(lambda: _reduction("sum", divide=False))


# ---------------------------------------------------------------------------
# wrappers


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, *, stride: int = 1, padding: int = 0) -> Tensor:
    return apply("conv2d", [x, weight, bias], stride=stride, padding=padding)


def relu(x: Tensor) -> Tensor:
    return apply("relu", [x])


def sigmoid(x: Tensor) -> Tensor:
    return apply("sigmoid", [x])


def add(a: Tensor, b: Tensor) -> Tensor:
    return apply("add", [a, b])


def sub(a: Tensor, b: Tensor) -> Tensor:
    return apply("sub", [a, b])


def mul(a: Tensor, b: Tensor) -> Tensor:
    return apply("mul", [a, b])


def scale(x: Tensor, factor: float) -> Tensor:
    return apply("scale", [x], factor=factor)


def absolute(x: Tensor) -> Tensor:
    return apply("abs", [x])


def channel_max_pool(x: Tensor) -> Tensor:
    return apply("channel_max_pool", [x])


def channel_avg_pool(x: Tensor) -> Tensor:
    return apply("channel_avg_pool", [x])


def concat(parts, axis: int) -> Tensor:
    return apply("concat", list(parts), axis=axis)


def global_avg_pool(x: Tensor) -> Tensor:
    return apply("global_avg_pool", [x])


def global_max_pool(x: Tensor) -> Tensor:
    return apply("global_max_pool", [x])


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    return apply("linear", [x, weight, bias])


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, *, state, training: bool,
               momentum: float = BN_MOMENTUM, eps: float = BN_EPS) -> Tensor:
    return apply(
        "batch_norm", [x, gamma, beta],
        state=state, training=training, momentum=momentum, eps=eps,
    )


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    return apply("log_softmax", [x], axis=axis)


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    return apply("l2_normalize", [x], axis=axis)


def dot(a: Tensor, b: Tensor) -> Tensor:
    return apply("dot", [a, b])


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    return apply("mean", [x], axis=axis)


def tensor_sum(x: Tensor, axis: int | None = None) -> Tensor:
    return apply("sum", [x], axis=axis)
