"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Ops build a tape of `Tensor` nodes; `backward` walks the tape in reverse
topological order.  Everything runs in 64-bit on the CPU, and single-threaded
execution is bitwise deterministic.
"""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for an op."""


class ContractError(RuntimeError):
    """An operation was called outside its contract."""


class NumericError(FloatingPointError):
    """A non-finite value appeared where a finite one is required."""


class Tensor:
    """A value plus a same-shape gradient accumulator in the tape.

    `grad` is None until something accumulates into it; None means zero.
    """

    __slots__ = ("value", "grad", "op", "parents", "_backward")

    def __init__(self, value, parents: tuple["Tensor", ...] = (), op: str = "leaf"):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.parents = parents
        self.op = op
        self._backward: Callable[[], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def grad_or_zeros(self) -> np.ndarray:
        return self.grad if self.grad is not None else np.zeros_like(self.value)

    def __repr__(self) -> str:
        return f"Tensor(op={self.op!r}, shape={self.value.shape})"


def _acc(t: Tensor, g: np.ndarray) -> None:
    # First write copies: g may alias or view another node's grad buffer.
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad += g


def _acc_zeros(t: Tensor) -> np.ndarray:
    if t.grad is None:
        t.grad = np.zeros_like(t.value)
    return t.grad


def _topo_order(root: Tensor) -> list[Tensor]:
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
        for parent in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(node) into `.grad` for every node reachable from `loss`.

    The gradients of all reachable nodes are reset first, so calling backward
    twice on the same graph yields identical gradients.  Tensors not in the
    graph (e.g. unused parameters) are left untouched; callers zero those
    through `ParamStore.zero_grad`.
    """
    if loss.value.ndim != 0:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.value.shape}")
    order = _topo_order(loss)
    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.value)
    for node in reversed(order):
        if node._backward is not None:
            node._backward()


def _require_2d(name: str, *tensors: Tensor) -> None:
    for t in tensors:
        if t.value.ndim != 2:
            raise ShapeError(f"{name}: expected a 2-D operand, got shape {t.value.shape}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _require_2d("matmul", a, b)
    if a.value.shape[1] != b.value.shape[0]:
        raise ShapeError(f"matmul: inner dims differ, {a.value.shape} @ {b.value.shape}")
    out = Tensor(a.value @ b.value, (a, b), "matmul")

    def _bwd() -> None:
        _acc(a, out.grad @ b.value.T)
        _acc(b, a.value.T @ out.grad)

    out._backward = _bwd
    return out


def matmul_nt(a: Tensor, b: Tensor, factor: float = 1.0) -> Tensor:
    """factor * (a @ b.T); fused form of the attention score product."""
    _require_2d("matmul_nt", a, b)
    if a.value.shape[1] != b.value.shape[1]:
        raise ShapeError(f"matmul_nt: inner dims differ, {a.value.shape} x {b.value.shape}")
    out = Tensor((a.value @ b.value.T) * factor, (a, b), "matmul_nt")

    def _bwd() -> None:
        _acc(a, (out.grad @ b.value) * factor)
        _acc(b, (out.grad.T @ a.value) * factor)

    out._backward = _bwd
    return out


def transpose(a: Tensor) -> Tensor:
    _require_2d("transpose", a)
    out = Tensor(a.value.T, (a,), "transpose")

    def _bwd() -> None:
        _acc(a, out.grad.T)

    out._backward = _bwd
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.value.shape != b.value.shape:
        raise ShapeError(f"add: shapes differ, {a.value.shape} vs {b.value.shape}")
    out = Tensor(a.value + b.value, (a, b), "add")

    def _bwd() -> None:
        _acc(a, out.grad)
        _acc(b, out.grad)

    out._backward = _bwd
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.value.shape != b.value.shape:
        raise ShapeError(f"mul: shapes differ, {a.value.shape} vs {b.value.shape}")
    out = Tensor(a.value * b.value, (a, b), "mul")

    def _bwd() -> None:
        _acc(a, out.grad * b.value)
        _acc(b, out.grad * a.value)

    out._backward = _bwd
    return out


def scale(a: Tensor, factor: float) -> Tensor:
    out = Tensor(a.value * factor, (a,), "scale")

    def _bwd() -> None:
        _acc(a, out.grad * factor)

    out._backward = _bwd
    return out


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Broadcast a length-n bias over the rows of an (m, n) matrix."""
    _require_2d("add_bias", x)
    if b.value.ndim != 1 or b.value.shape[0] != x.value.shape[1]:
        raise ShapeError(f"add_bias: bias {b.value.shape} does not fit {x.value.shape}")
    out = Tensor(x.value + b.value, (x, b), "add_bias")

    def _bwd() -> None:
        _acc(x, out.grad)
        _acc(b, out.grad.sum(axis=0))

    out._backward = _bwd
    return out


def affine_rows(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    """Per-column gain and bias applied to every row: x * gain + bias."""
    _require_2d("affine_rows", x)
    n = x.value.shape[1]
    if gain.value.shape != (n,) or bias.value.shape != (n,):
        raise ShapeError(
            f"affine_rows: gain {gain.value.shape} / bias {bias.value.shape} do not fit {x.value.shape}"
        )
    out = Tensor(x.value * gain.value + bias.value, (x, gain, bias), "affine_rows")

    def _bwd() -> None:
        _acc(x, out.grad * gain.value)
        _acc(gain, (out.grad * x.value).sum(axis=0))
        _acc(bias, out.grad.sum(axis=0))

    out._backward = _bwd
    return out


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """x @ weight + bias as one node; the workhorse projection (also the
    embedding-free input projection)."""
    _require_2d("linear", x, weight)
    if x.value.shape[1] != weight.value.shape[0]:
        raise ShapeError(f"linear: inner dims differ, {x.value.shape} @ {weight.value.shape}")
    if bias.value.ndim != 1 or bias.value.shape[0] != weight.value.shape[1]:
        raise ShapeError(f"linear: bias {bias.value.shape} does not fit {weight.value.shape}")
    out = Tensor(x.value @ weight.value + bias.value, (x, weight, bias), "linear")

    def _bwd() -> None:
        _acc(x, out.grad @ weight.value.T)
        _acc(weight, x.value.T @ out.grad)
        _acc(bias, out.grad.sum(axis=0))

    out._backward = _bwd
    return out


def softmax_rows(x: Tensor) -> Tensor:
    _require_2d("softmax_rows", x)
    shifted = x.value - x.value.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)
    out = Tensor(y, (x,), "softmax_rows")

    def _bwd() -> None:
        g = out.grad
        _acc(x, y * (g - (g * y).sum(axis=1, keepdims=True)))

    out._backward = _bwd
    return out


def log_softmax_rows(x: Tensor) -> Tensor:
    _require_2d("log_softmax_rows", x)
    shifted = x.value - x.value.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    y = shifted - lse
    out = Tensor(y, (x,), "log_softmax_rows")

    def _bwd() -> None:
        g = out.grad
        _acc(x, g - np.exp(y) * g.sum(axis=1, keepdims=True))

    out._backward = _bwd
    return out


def layer_norm_rows(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Rowwise normalization to zero mean / unit variance (no affine part)."""
    _require_2d("layer_norm_rows", x)
    mean = x.value.mean(axis=1, keepdims=True)
    var = x.value.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (x.value - mean) * inv
    out = Tensor(y, (x,), "layer_norm_rows")

    def _bwd() -> None:
        g = out.grad
        _acc(
            x,
            inv * (g - g.mean(axis=1, keepdims=True) - y * (g * y).mean(axis=1, keepdims=True)),
        )

    out._backward = _bwd
    return out


def swish(x: Tensor) -> Tensor:
    sig = 1.0 / (1.0 + np.exp(-x.value))
    out = Tensor(x.value * sig, (x,), "swish")

    def _bwd() -> None:
        _acc(x, out.grad * sig * (1.0 + x.value * (1.0 - sig)))

    out._backward = _bwd
    return out


def depthwise_conv_rows(x: Tensor, kernel: Tensor) -> Tensor:
    """Per-column 1-D convolution along rows with zero 'same' padding.

    `kernel` has shape (k, n) with k odd: one length-k filter per column.
    """
    _require_2d("depthwise_conv_rows", x, kernel)
    k, n = kernel.value.shape
    if n != x.value.shape[1]:
        raise ShapeError(f"depthwise_conv_rows: kernel {kernel.value.shape} does not fit {x.value.shape}")
    if k % 2 != 1:
        raise ShapeError(f"depthwise_conv_rows: kernel length must be odd, got {k}")
    t = x.value.shape[0]
    pad = k // 2
    xp = np.zeros((t + 2 * pad, n))
    xp[pad : pad + t] = x.value
    y = np.zeros_like(x.value)
    for j in range(k):
        y += kernel.value[j] * xp[j : j + t]
    out = Tensor(y, (x, kernel), "depthwise_conv_rows")

    def _bwd() -> None:
        g = out.grad
        kg = _acc_zeros(kernel)
        gxp = np.zeros_like(xp)
        for j in range(k):
            kg[j] += (g * xp[j : j + t]).sum(axis=0)
            gxp[j : j + t] += g * kernel.value[j]
        _acc(x, gxp[pad : pad + t])

    out._backward = _bwd
    return out


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    _require_2d("slice_cols", x)
    if not 0 <= start < stop <= x.value.shape[1]:
        raise ShapeError(f"slice_cols: [{start}:{stop}] invalid for shape {x.value.shape}")
    out = Tensor(x.value[:, start:stop].copy(), (x,), "slice_cols")

    def _bwd() -> None:
        _acc_zeros(x)[:, start:stop] += out.grad

    out._backward = _bwd
    return out


def concat_cols(xs: Sequence[Tensor]) -> Tensor:
    if not xs:
        raise ShapeError("concat_cols: empty input list")
    _require_2d("concat_cols", *xs)
    rows = xs[0].value.shape[0]
    if any(x.value.shape[0] != rows for x in xs):
        raise ShapeError("concat_cols: row counts differ")
    out = Tensor(np.concatenate([x.value for x in xs], axis=1), tuple(xs), "concat_cols")
    widths = [x.value.shape[1] for x in xs]

    def _bwd() -> None:
        at = 0
        for x, w in zip(xs, widths):
            _acc(x, out.grad[:, at : at + w])
            at += w

    out._backward = _bwd
    return out


def concat_rows(xs: Sequence[Tensor]) -> Tensor:
    """Stack row blocks; with `mask_rows` this realizes masked batching."""
    if not xs:
        raise ShapeError("concat_rows: empty input list")
    _require_2d("concat_rows", *xs)
    cols = xs[0].value.shape[1]
    if any(x.value.shape[1] != cols for x in xs):
        raise ShapeError("concat_rows: column counts differ")
    out = Tensor(np.concatenate([x.value for x in xs], axis=0), tuple(xs), "concat_rows")
    heights = [x.value.shape[0] for x in xs]

    def _bwd() -> None:
        at = 0
        for x, h in zip(xs, heights):
            _acc(x, out.grad[at : at + h])
            at += h

    out._backward = _bwd
    return out


def mask_rows(x: Tensor, mask: np.ndarray) -> Tensor:
    """Zero out rows where mask is 0; gradients of masked rows are zeroed too."""
    _require_2d("mask_rows", x)
    m = np.asarray(mask, dtype=np.float64).reshape(-1, 1)
    if m.shape[0] != x.value.shape[0]:
        raise ShapeError(f"mask_rows: mask length {m.shape[0]} != rows {x.value.shape[0]}")
    out = Tensor(x.value * m, (x,), "mask_rows")

    def _bwd() -> None:
        _acc(x, out.grad * m)

    out._backward = _bwd
    return out


def mean_reduce(x: Tensor) -> Tensor:
    """Scalar mean over all elements."""
    out = Tensor(np.float64(x.value.mean()), (x,), "mean_reduce")
    size = x.value.size

    def _bwd() -> None:
        _acc_zeros(x)
        x.grad += float(out.grad) / size

    out._backward = _bwd
    return out


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    """uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out))."""
    if len(shape) == 2:
        fan_in, fan_out = shape
    else:
        fan_in = fan_out = shape[0]
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


_CONTAINER_MAGIC = b"NTC1\n"


class ParamStore:
    """Named trainable tensors with per-parameter Adam moment buffers."""

    def __init__(self) -> None:
        self._tensors: dict[str, Tensor] = {}
        self._moments: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        self.step_count = 0

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._tensors:
            raise ContractError(f"parameter {name!r} already exists")
        t = Tensor(np.array(value, dtype=np.float64))
        self._tensors[name] = t
        self._moments[name] = (np.zeros_like(t.value), np.zeros_like(t.value))
        return t

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def names(self) -> list[str]:
        return sorted(self._tensors)

    def moments(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        return self._moments[name]

    @property
    def total_parameters(self) -> int:
        return sum(t.value.size for t in self._tensors.values())

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.grad = np.zeros_like(t.value)

    def clone(self) -> "ParamStore":
        """Copy of the parameter values; moment buffers start fresh."""
        out = ParamStore()
        for name in self.names():
            out.add(name, self._tensors[name].value.copy())
        return out

    def values(self) -> dict[str, np.ndarray]:
        return {name: self._tensors[name].value.copy() for name in self.names()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        if sorted(values) != self.names():
            raise ContractError("parameter names do not match the store")
        for name, arr in values.items():
            t = self._tensors[name]
            if arr.shape != t.value.shape:
                raise ContractError(f"shape mismatch for {name!r}: {arr.shape} vs {t.value.shape}")
            t.value[...] = arr

    def save(self, path: str | Path, meta: dict | None = None) -> None:
        """Write a named-tensor container: an index of (name, shape, dtype)
        records followed by the row-major float64 payloads.  Byte-deterministic
        for identical contents."""
        names = self.names()
        index = {
            "meta": meta or {},
            "tensors": [
                {"name": n, "shape": list(self._tensors[n].value.shape), "dtype": "float64"}
                for n in names
            ],
        }
        with open(path, "wb") as fh:
            fh.write(_CONTAINER_MAGIC)
            fh.write(json.dumps(index, sort_keys=True).encode("utf-8") + b"\n")
            for n in names:
                fh.write(np.ascontiguousarray(self._tensors[n].value).tobytes())

    @classmethod
    def load(cls, path: str | Path) -> tuple["ParamStore", dict]:
        with open(path, "rb") as fh:
            magic = fh.read(len(_CONTAINER_MAGIC))
            if magic != _CONTAINER_MAGIC:
                raise ContractError(f"{path}: not a named-tensor container")
            index = json.loads(fh.readline().decode("utf-8"))
            store = cls()
            for rec in index["tensors"]:
                shape = tuple(rec["shape"])
                count = int(np.prod(shape)) if shape else 1
                payload = fh.read(count * 8)
                arr = np.frombuffer(payload, dtype=np.float64).reshape(shape).copy()
                store.add(rec["name"], arr)
        return store, index["meta"]


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare backward() gradients of the scalar loss `f()` against central
    finite differences.

    `f` must be deterministic and rebuild its graph from the current values of
    `params` on every call.  Returns the worst relative error
    |analytic - numeric| / max(1, |analytic|, |numeric|); when `max_entries`
    is given, only that many randomly chosen entries per parameter are probed.
    """
    loss = f()
    backward(loss)
    analytic = [p.grad_or_zeros().reshape(-1).copy() for p in params]
    worst = 0.0
    for p, ana in zip(params, analytic):
        flat = p.value.reshape(-1)
        if max_entries is not None and flat.size > max_entries:
            if rng is None:
                rng = np.random.default_rng(0)
            idxs = rng.choice(flat.size, size=max_entries, replace=False)
        else:
            idxs = np.arange(flat.size)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(f().value)
            flat[i] = orig - eps
            lo = float(f().value)
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * eps)
            err = abs(ana[i] - numeric) / max(1.0, abs(ana[i]), abs(numeric))
            worst = max(worst, err)
    return worst
