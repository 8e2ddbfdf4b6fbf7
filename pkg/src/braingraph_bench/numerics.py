"""Dense 64-bit tensors with tape-based reverse-mode differentiation.

Every model in the package is written against the primitives here. A
`ComputationTape` is opened around a forward pass; operations whose inputs
need gradients append an entry holding their vector-Jacobian product, and
`ComputationTape.backward` walks the entries in reverse.
"""
from __future__ import annotations

import contextvars
import hashlib
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.special import expit

from braingraph_bench.errors import ContractError, DimensionError, NonFiniteError, TrainingError

logger = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

_ACTIVE_TAPE: contextvars.ContextVar["ComputationTape | None"] = contextvars.ContextVar(
    "active_tape", default=None
)

Vjp = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """Immutable float64 array; `requires_grad` marks a trainable parameter."""

    __slots__ = ("value", "requires_grad", "name", "_tape")

    def __init__(self, value, *, requires_grad: bool = False, name: str | None = None) -> None:
        self.value = np.array(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self._tape: ComputationTape | None = None

    @classmethod
    def _wrap(cls, value: np.ndarray, requires_grad: bool) -> "Tensor":
        out = cls.__new__(cls)
        out.value = value
        out.requires_grad = requires_grad
        out.name = None
        out._tape = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    def item(self) -> float:
        if self.value.size != 1:
            raise ContractError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.value.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.value.copy()

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other) -> "Tensor":
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other) -> "Tensor":
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return mul(self, -1.0)

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, other)


def as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


@dataclass(slots=True)
class TapeEntry:
    op: str
    output: Tensor
    inputs: tuple[Tensor, ...]
    vjp: Vjp


class ComputationTape:
    """Ordered record of differentiable operations for one forward pass."""

    def __init__(self) -> None:
        self.entries: list[TapeEntry] = []
        self._token: contextvars.Token | None = None

    def __enter__(self) -> "ComputationTape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc_info) -> None:
        if self._token is not None:
            _ACTIVE_TAPE.reset(self._token)
            self._token = None

    def __len__(self) -> int:
        return len(self.entries)

    def record(self, entry: TapeEntry) -> None:
        self.entries.append(entry)
        entry.output._tape = self

    def backward(self, loss: Tensor, params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise ContractError("loss was not produced on this tape")

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
        for entry in reversed(self.entries):
            upstream = grads.pop(id(entry.output), None)
            if upstream is None:
                continue
            for tensor, grad in zip(entry.inputs, entry.vjp(upstream)):
                if grad is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                if key in grads:
                    grads[key] = grads[key] + grad
                else:
                    grads[key] = grad

        result: dict[str, np.ndarray] = {}
        for name, param in params.items():
            grad = grads.get(id(param))
            result[name] = np.zeros_like(param.value) if grad is None else grad.reshape(param.shape)
        return result


def backward(loss: Tensor, params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    """Gradients of a scalar `loss` w.r.t. `params`; untouched params get zeros."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        raise ContractError("loss was not produced on a live tape")
    return loss._tape.backward(loss, params)


def _emit(op: str, value: np.ndarray, inputs: tuple[Tensor, ...], vjp: Vjp) -> Tensor:
    value = np.asarray(value, dtype=np.float64)
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"{op} produced a non-finite value")
    out = Tensor._wrap(value, any(t.requires_grad for t in inputs))
    tape = _ACTIVE_TAPE.get()
    if tape is not None and out.requires_grad:
        tape.record(TapeEntry(op, out, inputs, vjp))
    return out


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Undo broadcasting so `grad` matches `shape`."""
    if grad.shape == shape:
        return grad
    if math.prod(shape) == 1:
        return np.asarray(grad.sum()).reshape(shape)
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


# --------------------------------------------------------------------------
# Linear algebra and shape ops
# --------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    av, bv = a.value, b.value
    return _emit("matmul", av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def reshape(t, shape: Sequence[int]) -> Tensor:
    t = as_tensor(t)
    original = t.shape
    try:
        value = t.value.reshape(tuple(shape))
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {original} to {tuple(shape)}") from exc
    return _emit("reshape", value, (t,), lambda g: (g.reshape(original),))


def transpose(t, axes: Sequence[int] | None = None) -> Tensor:
    t = as_tensor(t)
    if axes is None:
        axes = tuple(reversed(range(t.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(t.ndim)):
        raise DimensionError(f"invalid axes {axes} for a rank-{t.ndim} tensor")
    inverse = tuple(np.argsort(axes))
    return _emit("transpose", np.transpose(t.value, axes), (t,), lambda g: (np.transpose(g, inverse),))


def broadcast_to(t, shape: Sequence[int]) -> Tensor:
    t = as_tensor(t)
    original = t.shape
    try:
        value = np.broadcast_to(t.value, tuple(shape)).copy()
    except ValueError as exc:
        raise DimensionError(f"cannot broadcast {original} to {tuple(shape)}") from exc
    return _emit("broadcast_to", value, (t,), lambda g: (_reduce_to(g, original),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    parts = tuple(as_tensor(t) for t in tensors)
    if not parts:
        raise DimensionError("concat needs at least one tensor")
    try:
        value = np.concatenate([p.value for p in parts], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"cannot concatenate shapes {[p.shape for p in parts]}") from exc
    splits = np.cumsum([p.shape[axis] for p in parts])[:-1]
    return _emit("concat", value, parts, lambda g: tuple(np.split(g, splits, axis=axis)))


# --------------------------------------------------------------------------
# Elementwise ops (equal shapes, or one operand with a single element)
# --------------------------------------------------------------------------


def _check_pair(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    if a.shape == b.shape:
        return a.shape
    if b.size == 1:
        return a.shape
    if a.size == 1:
        return b.shape
    raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_pair("add", a, b)
    value = a.value + b.value if a.shape == b.shape else _scalar_combine(a, b, np.add)
    return _emit("add", value, (a, b), lambda g: (_reduce_to(g, a.shape), _reduce_to(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_pair("sub", a, b)
    value = a.value - b.value if a.shape == b.shape else _scalar_combine(a, b, np.subtract)
    return _emit("sub", value, (a, b), lambda g: (_reduce_to(g, a.shape), _reduce_to(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_pair("mul", a, b)
    av, bv = a.value, b.value
    value = av * bv if a.shape == b.shape else _scalar_combine(a, b, np.multiply)

    def vjp(g: np.ndarray):
        ga = g * (bv.reshape(-1)[0] if b.size == 1 else bv)
        gb = g * (av.reshape(-1)[0] if a.size == 1 else av)
        return _reduce_to(ga, a.shape), _reduce_to(gb, b.shape)

    return _emit("mul", value, (a, b), vjp)


def _scalar_combine(a: Tensor, b: Tensor, ufunc) -> np.ndarray:
    if b.size == 1 and a.size != 1:
        return ufunc(a.value, b.value.reshape(-1)[0])
    if a.size == 1 and b.size != 1:
        return ufunc(a.value.reshape(-1)[0], b.value)
    # both single-element but differently shaped, e.g. () and (1,)
    shape = a.shape if a.ndim >= b.ndim else b.shape
    return ufunc(a.value.reshape(-1)[0], b.value.reshape(-1)[0]).reshape(shape)


def relu(t) -> Tensor:
    t = as_tensor(t)
    mask = t.value > 0
    return _emit("relu", np.where(mask, t.value, 0.0), (t,), lambda g: (g * mask,))


def leaky_relu(t, slope: float = 0.2) -> Tensor:
    t = as_tensor(t)
    factor = np.where(t.value > 0, 1.0, slope)
    return _emit("leaky_relu", t.value * factor, (t,), lambda g: (g * factor,))


def tanh(t) -> Tensor:
    t = as_tensor(t)
    y = np.tanh(t.value)
    return _emit("tanh", y, (t,), lambda g: (g * (1.0 - y * y),))


def sigmoid(t) -> Tensor:
    t = as_tensor(t)
    y = expit(t.value)
    return _emit("sigmoid", y, (t,), lambda g: (g * y * (1.0 - y),))


_UNARY = {"relu": relu, "tanh": tanh, "sigmoid": sigmoid}
_BINARY = {"add": add, "mul": mul}


def elementwise(op: str, *inputs, slope: float = 0.2) -> Tensor:
    """Dispatch by name: relu, leaky_relu, tanh, sigmoid, add, mul."""
    if op == "leaky_relu":
        (t,) = inputs
        return leaky_relu(t, slope)
    if op in _UNARY:
        (t,) = inputs
        return _UNARY[op](t)
    if op in _BINARY:
        a, b = inputs
        return _BINARY[op](a, b)
    raise ContractError(f"unknown elementwise op {op!r}")


# --------------------------------------------------------------------------
# Reductions
# --------------------------------------------------------------------------


def _check_axis(t: Tensor, axis: int | None) -> None:
    if axis is not None and not -t.ndim <= axis < t.ndim:
        raise DimensionError(f"axis {axis} out of range for a rank-{t.ndim} tensor")


def reduce_sum(t, axis: int | None = None) -> Tensor:
    t = as_tensor(t)
    _check_axis(t, axis)
    shape = t.shape

    def vjp(g: np.ndarray):
        if axis is None:
            return (np.full(shape, g.reshape(-1)[0]),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _emit("sum", np.sum(t.value, axis=axis), (t,), vjp)


def reduce_mean(t, axis: int | None = None) -> Tensor:
    t = as_tensor(t)
    _check_axis(t, axis)
    count = t.size if axis is None else t.shape[axis]
    return mul(reduce_sum(t, axis), 1.0 / count)


def reduce_max(t, axis: int | None = None) -> Tensor:
    """Max; the gradient goes to the first maximal element on ties."""
    t = as_tensor(t)
    _check_axis(t, axis)
    mask = np.zeros_like(t.value)
    if axis is None:
        mask.reshape(-1)[int(np.argmax(t.value))] = 1.0
        value = np.max(t.value)

        def vjp(g: np.ndarray):
            return (mask * g.reshape(-1)[0],)
    else:
        index = np.expand_dims(np.argmax(t.value, axis=axis), axis)
        np.put_along_axis(mask, index, 1.0, axis=axis)
        value = np.max(t.value, axis=axis)

        def vjp(g: np.ndarray):
            return (mask * np.expand_dims(g, axis),)

    return _emit("max", np.asarray(value), (t,), vjp)


_REDUCERS = {"sum": reduce_sum, "mean": reduce_mean, "max": reduce_max}


def reduce(op: str, t, axis: int | None = None) -> Tensor:
    if op not in _REDUCERS:
        raise ContractError(f"unknown reduction {op!r}")
    return _REDUCERS[op](t, axis)


# --------------------------------------------------------------------------
# Normalisers
# --------------------------------------------------------------------------


def masked_softmax(t, mask: np.ndarray, axis: int = -1) -> Tensor:
    """Softmax along `axis` over entries where `mask` is true; others are 0."""
    t = as_tensor(t)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != t.shape:
        raise DimensionError(f"mask shape {mask.shape} differs from tensor shape {t.shape}")
    shifted = np.where(mask, t.value, -np.inf)
    peak = np.max(shifted, axis=axis, keepdims=True)
    peak = np.where(np.isfinite(peak), peak, 0.0)
    weights = np.exp(np.where(mask, t.value - peak, -np.inf))
    total = np.sum(weights, axis=axis, keepdims=True)
    y = np.divide(weights, total, out=np.zeros_like(weights), where=total > 0)

    def vjp(g: np.ndarray):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return _emit("softmax", y, (t,), vjp)


def softmax(t, axis: int = -1) -> Tensor:
    t = as_tensor(t)
    return masked_softmax(t, np.ones(t.shape, dtype=bool), axis=axis)


def _sparsemax_rows(z: np.ndarray) -> np.ndarray:
    ordered = -np.sort(-z, axis=-1)
    cumulative = np.cumsum(ordered, axis=-1)
    ks = np.arange(1, z.shape[-1] + 1)
    support = 1.0 + ks * ordered > cumulative
    k_max = np.max(np.where(support, ks, 0), axis=-1, keepdims=True)
    tau = (np.take_along_axis(cumulative, k_max - 1, axis=-1) - 1.0) / k_max
    return np.maximum(z - tau, 0.0)


def sparsemax(t) -> Tensor:
    """Euclidean projection of each row (last axis) onto the probability simplex."""
    t = as_tensor(t)
    if t.ndim == 0 or t.shape[-1] < 1:
        raise DimensionError("sparsemax needs at least one element per row")
    y = _sparsemax_rows(t.value)
    support = (y > 0).astype(np.float64)

    def vjp(g: np.ndarray):
        count = np.sum(support, axis=-1, keepdims=True)
        centred = np.sum(g * support, axis=-1, keepdims=True) / count
        return (support * (g - centred),)

    return _emit("sparsemax", y, (t,), vjp)


# --------------------------------------------------------------------------
# Temporal convolution
# --------------------------------------------------------------------------


def conv_output_length(length: int, kernel: int, stride: int = 1, dilation: int = 1, padding: int = 0) -> int:
    return (length + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def conv1d(x, kernels, stride: int = 1, dilation: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of `x` [C_in x T] (or [B x C_in x T]) with [C_out x C_in x k] kernels."""
    x, kernels = as_tensor(x), as_tensor(kernels)
    if x.ndim not in (2, 3) or kernels.ndim != 3:
        raise DimensionError(f"conv1d needs x of rank 2/3 and rank-3 kernels, got {x.shape}, {kernels.shape}")
    if stride < 1 or dilation < 1 or padding < 0:
        raise DimensionError("conv1d needs stride >= 1, dilation >= 1, padding >= 0")
    batched = x.ndim == 3
    xv = x.value if batched else x.value[None]
    wv = kernels.value
    c_out, c_in, k = wv.shape
    if xv.shape[1] != c_in:
        raise DimensionError(f"conv1d input has {xv.shape[1]} channels, kernels expect {c_in}")
    length = xv.shape[2]
    padded = length + 2 * padding
    span = dilation * (k - 1) + 1
    if span > padded:
        raise DimensionError(f"kernel span {span} exceeds padded input length {padded}")

    xp = np.pad(xv, ((0, 0), (0, 0), (padding, padding)))
    out_len = conv_output_length(length, k, stride, dilation, padding)
    taps = np.arange(out_len)[:, None] * stride + np.arange(k)[None, :] * dilation
    cols = xp[:, :, taps]  # B x C_in x T' x k
    out = np.einsum("oik,bitk->bot", wv, cols)
    if not batched:
        out = out[0]

    def vjp(g: np.ndarray):
        gb = g if batched else g[None]
        grad_w = np.einsum("bot,bitk->oik", gb, cols)
        grad_cols = np.einsum("oik,bot->bitk", wv, gb)
        grad_xp = np.zeros_like(xp)
        stop = stride * (out_len - 1) + 1
        for j in range(k):
            start = j * dilation
            grad_xp[:, :, start:start + stop:stride] += grad_cols[:, :, :, j]
        grad_x = grad_xp[:, :, padding:padding + length]
        return (grad_x if batched else grad_x[0]), grad_w

    return _emit("conv1d", out, (x, kernels), vjp)


# --------------------------------------------------------------------------
# Losses and regularisation
# --------------------------------------------------------------------------


def bce_with_logits(logit, target: float) -> Tensor:
    """Binary cross-entropy of a single logit against a 0/1 target."""
    logit = as_tensor(logit)
    if logit.size != 1:
        raise ContractError(f"bce_with_logits needs a scalar logit, got shape {logit.shape}")
    z = logit.value.reshape(())
    value = np.maximum(z, 0.0) - z * target + np.log1p(np.exp(-np.abs(z)))
    return _emit(
        "bce", np.asarray(value), (logit,),
        lambda g: ((g * (expit(z) - target)).reshape(logit.shape),),
    )


def dropout(t, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when `rng` is None (evaluation) or rate is 0."""
    t = as_tensor(t)
    if rng is None or rate <= 0.0:
        return t
    keep = (rng.random(t.shape) >= rate) / (1.0 - rate)
    return mul(t, Tensor(keep))


# --------------------------------------------------------------------------
# Random streams and initialisation
# --------------------------------------------------------------------------


def _tag_word(tag: str | int) -> int:
    if isinstance(tag, int) and tag >= 0:
        return tag
    digest = hashlib.sha256(str(tag).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def make_rng(seed: int, *tags: str | int) -> np.random.Generator:
    """Independent Philox stream for (master seed, purpose tags)."""
    words = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [_tag_word(t) for t in tags]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(words)))


def derive_seed(seed: int, *tags: str | int) -> int:
    return int(make_rng(seed, *tags).integers(0, 2**31 - 1))


def _fans(shape: tuple[int, ...]) -> tuple[int, int]:
    if len(shape) == 0:
        return 1, 1
    if len(shape) == 1:
        return shape[0], shape[0]
    if len(shape) == 2:
        return shape[0], shape[1]
    receptive = int(np.prod(shape[2:]))
    return shape[1] * receptive, shape[0] * receptive


def init_params(
    shape: Sequence[int],
    scheme: str,
    rng: np.random.Generator,
    *,
    std: float = 0.01,
    name: str | None = None,
) -> Tensor:
    """Fresh trainable tensor; schemes are glorot_uniform, zeros and normal."""
    shape = tuple(int(s) for s in shape)
    if any(s < 0 for s in shape):
        raise DimensionError(f"invalid shape {shape}")
    if scheme == "zeros":
        value = np.zeros(shape)
    elif scheme == "glorot_uniform":
        fan_in, fan_out = _fans(shape)
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        value = rng.uniform(-bound, bound, size=shape)
    elif scheme == "normal":
        value = rng.normal(0.0, std, size=shape)
    else:
        raise ContractError(f"unknown init scheme {scheme!r}")
    return Tensor(value, requires_grad=True, name=name)


# --------------------------------------------------------------------------
# Optimiser
# --------------------------------------------------------------------------


@dataclass(slots=True)
class OptimizerState:
    learning_rate: float
    weight_decay: float = 0.0
    step: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    state: OptimizerState,
) -> OptimizerState:
    """One Adam update with decoupled weight decay; parameters are replaced in place."""
    for name, param in params.items():
        grad = grads.get(name)
        if grad is None:
            raise DimensionError(f"missing gradient for parameter {name!r}")
        if grad.shape != param.shape:
            raise DimensionError(f"gradient shape {grad.shape} differs from parameter {name!r} {param.shape}")
        if not np.all(np.isfinite(grad)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")

    state.step += 1
    t = state.step
    lr = state.learning_rate
    for name, param in params.items():
        grad = grads[name]
        m = state.first_moment.get(name, np.zeros_like(param.value))
        v = state.second_moment.get(name, np.zeros_like(param.value))
        m = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * grad
        v = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * grad * grad
        m_hat = m / (1.0 - ADAM_BETA1**t)
        v_hat = v / (1.0 - ADAM_BETA2**t)
        updated = param.value - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS) - lr * state.weight_decay * param.value
        if not np.all(np.isfinite(updated)):
            raise TrainingError(f"parameter {name!r} diverged at step {t}")
        state.first_moment[name] = m
        state.second_moment[name] = v
        param.value = updated
    return state


# --------------------------------------------------------------------------
# Gradient checking
# --------------------------------------------------------------------------


def numerical_gradient(fn: Callable[[], Tensor], tensor: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar `fn()` w.r.t. each element of `tensor`."""
    grad = np.zeros_like(tensor.value)
    original = tensor.value
    for index in np.ndindex(*original.shape):
        plus = original.copy()
        plus[index] += h
        tensor.value = plus
        f_plus = fn().item()
        minus = original.copy()
        minus[index] -= h
        tensor.value = minus
        f_minus = fn().item()
        grad[index] = (f_plus - f_minus) / (2.0 * h)
    tensor.value = original
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = np.linalg.norm(a) + np.linalg.norm(b)
    if scale < 1e-12:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)
