"""Dense-tensor numeric core with reverse-mode differentiation.

Values are immutable float32 arrays by default (float64 is supported so
gradient checking can run in a higher-precision shadow mode).  Every
operation returns a new `Tensor` that remembers its parents and how to
push gradients back to them; `backward` walks the graph once and collects
gradients for a `ParamSet`.

Broadcasting is deliberately limited: `affine` batches over leading axes,
everything else wants explicit shapes (reshape first).  Any op that
produces a NaN/Inf raises `NumericsError` instead of letting it propagate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import (
    ContractError,
    DeterminismError,
    DimensionError,
    LabelError,
    NumericsError,
)

_ALLOWED_DTYPES = (np.float32, np.float64)

# tanh-approximation GELU constants
_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def _contiguous(arr: np.ndarray) -> np.ndarray:
    # ascontiguousarray would promote 0-d arrays to shape (1,)
    return np.ascontiguousarray(arr) if arr.ndim else arr


def _as_array(values, dtype):
    return _contiguous(np.asarray(values, dtype=dtype))


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericsError(f"{op} produced non-finite values")


class Tensor:
    """An immutable array that doubles as a node in the computation graph.

    Leaves are created with `constant` (no gradient) or `parameter`
    (gradient tracked); interior nodes are created by the ops below.
    """

    __slots__ = ("data", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        arr = np.asarray(data)
        if arr.dtype.type not in _ALLOWED_DTYPES:
            arr = arr.astype(np.float32)
        arr = _contiguous(arr)
        if arr.flags.writeable:
            arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad) or any(
            p.requires_grad for p in _parents
        )
        self._parents = tuple(_parents)
        self._backward = _backward

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)


def constant(values, dtype=np.float32) -> Tensor:
    """Leaf tensor excluded from differentiation."""
    arr = _as_array(values, dtype)
    _check_finite(arr, "constant")
    return Tensor(arr)


def parameter(values, dtype=np.float32) -> Tensor:
    """Leaf tensor whose gradient `backward` will report."""
    arr = _as_array(values, dtype)
    _check_finite(arr, "parameter")
    return Tensor(arr, requires_grad=True)


class ParamSet:
    """Named, deterministically ordered collection of trainable tensors.

    Iteration is always lexicographic by parameter id, which makes
    serialized blobs and optimizer walks reproducible.
    """

    def __init__(self, tensors: dict[str, Tensor] | None = None):
        self._tensors: dict[str, Tensor] = {}
        if tensors:
            for pid, t in tensors.items():
                self.add(pid, t)

    def add(self, pid: str, tensor: Tensor) -> Tensor:
        if pid in self._tensors:
            raise ContractError(f"duplicate parameter id {pid!r}")
        if not isinstance(tensor, Tensor):
            tensor = parameter(tensor)
        if not tensor.requires_grad:
            raise ContractError(f"parameter {pid!r} must be created with parameter()")
        self._tensors[pid] = tensor
        return tensor

    def ids(self) -> list[str]:
        return sorted(self._tensors)

    def items(self):
        for pid in self.ids():
            yield pid, self._tensors[pid]

    def arrays(self) -> dict[str, np.ndarray]:
        return {pid: t.data for pid, t in self.items()}

    def astype(self, dtype) -> "ParamSet":
        return ParamSet(
            {pid: parameter(t.data.astype(dtype), dtype=dtype) for pid, t in self.items()}
        )

    def replace(self, pid: str, values) -> "ParamSet":
        """New ParamSet with one entry swapped (used by perturbation loops)."""
        if pid not in self._tensors:
            raise KeyError(pid)
        out = dict(self._tensors)
        out[pid] = parameter(values, dtype=self._tensors[pid].dtype)
        return ParamSet(out)

    def size(self) -> int:
        return sum(t.data.size for t in self._tensors.values())

    def __getitem__(self, pid: str) -> Tensor:
        return self._tensors[pid]

    def __contains__(self, pid: str) -> bool:
        return pid in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def __iter__(self):
        return iter(self.ids())


@dataclass
class GradReport:
    """Per-parameter gradients for one scalar loss evaluation."""

    loss: float
    grads: dict[str, np.ndarray]

    def __post_init__(self):
        for pid, g in self.grads.items():
            if not isinstance(g, np.ndarray):
                self.grads[pid] = np.asarray(g)


# ---------------------------------------------------------------------------
# ops
# ---------------------------------------------------------------------------


def _binary_same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise DimensionError(f"{op} requires equal shapes, got {a.shape} and {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _binary_same_shape(a, b, "add")
    with np.errstate(over="ignore", invalid="ignore"):
        out = a.data + b.data
    _check_finite(out, "add")
    return Tensor(out, _parents=(a, b), _backward=lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _binary_same_shape(a, b, "sub")
    with np.errstate(over="ignore", invalid="ignore"):
        out = a.data - b.data
    _check_finite(out, "sub")
    return Tensor(out, _parents=(a, b), _backward=lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _binary_same_shape(a, b, "mul")
    with np.errstate(over="ignore", invalid="ignore"):
        out = a.data * b.data
    _check_finite(out, "mul")
    return Tensor(out, _parents=(a, b), _backward=lambda g: (g * b.data, g * a.data))


def scale_by(x: Tensor, s: Tensor) -> Tensor:
    """Multiply a tensor by a scalar (shape ()) tensor."""
    if s.data.shape != ():
        raise DimensionError(f"scale_by expects a scalar, got shape {s.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        out = x.data * s.data
    _check_finite(out, "scale_by")

    def back(g):
        return g * s.data, np.asarray((g * x.data).sum(), dtype=g.dtype)

    return Tensor(out, _parents=(x, s), _backward=back)


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """y[..., j] = sum_i x[..., i] * w[i, j] + b[j], batching over leading axes."""
    if w.data.ndim != 2:
        raise DimensionError(f"affine weight must be rank 2, got shape {w.shape}")
    d_in, d_out = w.shape
    if x.data.ndim < 1 or x.shape[-1] != d_in:
        raise DimensionError(
            f"affine input/weight mismatch: x shape {x.shape}, w shape {w.shape}"
        )
    if b.shape != (d_out,):
        raise DimensionError(
            f"affine bias must have shape ({d_out},), got {b.shape}"
        )
    with np.errstate(over="ignore", invalid="ignore"):
        out = x.data @ w.data + b.data
    _check_finite(out, "affine")

    def back(g):
        g2 = g.reshape(-1, d_out)
        x2 = x.data.reshape(-1, d_in)
        return (g @ w.data.T, x2.T @ g2, g2.sum(axis=0))

    return Tensor(out, _parents=(x, w, b), _backward=back)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along one axis (max subtraction)."""
    nd = x.data.ndim
    if not (-nd <= axis < nd) or nd == 0:
        raise DimensionError(f"softmax axis {axis} invalid for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    _check_finite(out, "softmax")

    def back(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return Tensor(out, _parents=(x,), _backward=back)


def gelu(x: Tensor) -> Tensor:
    """GELU via the tanh approximation: 0.5*x*(1 + tanh(c*(x + a*x^3)))."""
    xd = x.data
    inner = _GELU_C * (xd + _GELU_A * xd**3)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)
    _check_finite(out, "gelu")

    def back(g):
        dinner = _GELU_C * (1.0 + 3.0 * _GELU_A * xd**2)
        d = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t**2) * dinner
        return (g * d,)

    return Tensor(out, _parents=(x,), _backward=back)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean over rows of -log softmax(logits)[target].

    `logits` is (N, K); `targets` is an integer array of shape (N,).
    """
    if logits.data.ndim != 2:
        raise DimensionError(f"cross_entropy expects (N, K) logits, got {logits.shape}")
    t = np.asarray(targets)
    n, k = logits.shape
    if t.shape != (n,):
        raise DimensionError(
            f"cross_entropy targets must have shape ({n},), got {t.shape}"
        )
    if not np.issubdtype(t.dtype, np.integer):
        raise LabelError(f"targets must be integers, got dtype {t.dtype}")
    if t.min() < 0 or t.max() >= k:
        raise LabelError(
            f"target out of range: values in [{t.min()}, {t.max()}] for K={k}"
        )
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    z = e.sum(axis=1, keepdims=True)
    log_probs = shifted - np.log(z)
    out = np.asarray(-log_probs[np.arange(n), t].mean(), dtype=logits.dtype)
    _check_finite(out, "cross_entropy")

    def back(g):
        sm = e / z
        grad = sm.copy()
        grad[np.arange(n), t] -= 1.0
        return (grad * (g / n),)

    return Tensor(out, _parents=(logits,), _backward=back)


def channel_mix(x: Tensor, w: Tensor) -> Tensor:
    """y[...] = sum_c x[..., c] * w[c]  (contract the last axis with a vector)."""
    if w.data.ndim != 1:
        raise DimensionError(f"channel_mix weights must be rank 1, got {w.shape}")
    if x.data.ndim < 1 or x.shape[-1] != w.shape[0]:
        raise DimensionError(
            f"channel_mix mismatch: x shape {x.shape}, weights shape {w.shape}"
        )
    with np.errstate(over="ignore", invalid="ignore"):
        out = x.data @ w.data
    _check_finite(out, "channel_mix")

    def back(g):
        gx = g[..., None] * w.data
        gw = np.tensordot(g, x.data, axes=(tuple(range(g.ndim)), tuple(range(g.ndim))))
        return gx, gw

    return Tensor(out, _parents=(x, w), _backward=back)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = x.data.reshape(shape)
    return Tensor(out, _parents=(x,), _backward=lambda g: (g.reshape(x.shape),))


def flatten_last2(x: Tensor) -> Tensor:
    """(..., A, B) -> (..., A*B), row-major."""
    if x.data.ndim < 2:
        raise DimensionError(f"flatten_last2 needs rank >= 2, got shape {x.shape}")
    return reshape(x, x.shape[:-2] + (x.shape[-2] * x.shape[-1],))


def swap_last2(x: Tensor) -> Tensor:
    """Transpose the last two axes."""
    if x.data.ndim < 2:
        raise DimensionError(f"swap_last2 needs rank >= 2, got shape {x.shape}")
    out = np.ascontiguousarray(np.swapaxes(x.data, -1, -2))
    return Tensor(
        out, _parents=(x,), _backward=lambda g: (np.swapaxes(g, -1, -2),)
    )


def index_last(x: Tensor, k: int) -> Tensor:
    """y = x[..., k], dropping the last axis."""
    if x.data.ndim < 1 or not (0 <= k < x.shape[-1]):
        raise DimensionError(f"index {k} out of range for shape {x.shape}")
    out = _contiguous(x.data[..., k])

    def back(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        gx[..., k] = g
        return (gx,)

    return Tensor(out, _parents=(x,), _backward=back)


def stack_last(xs: Sequence[Tensor]) -> Tensor:
    """Stack equal-shape tensors along a new trailing axis."""
    if not xs:
        raise ContractError("stack_last needs at least one tensor")
    shape = xs[0].shape
    for t in xs:
        if t.shape != shape:
            raise DimensionError(
                f"stack_last requires equal shapes, got {shape} and {t.shape}"
            )
    out = np.stack([t.data for t in xs], axis=-1)

    def back(g):
        return tuple(_contiguous(g[..., i]) for i in range(len(xs)))

    return Tensor(out, _parents=tuple(xs), _backward=back)


def concat_last(xs: Sequence[Tensor]) -> Tensor:
    """Concatenate along the existing trailing axis."""
    if not xs:
        raise ContractError("concat_last needs at least one tensor")
    lead = xs[0].shape[:-1]
    for t in xs:
        if t.data.ndim < 1 or t.shape[:-1] != lead:
            raise DimensionError(
                f"concat_last requires equal leading shapes, got "
                f"{xs[0].shape} and {t.shape}"
            )
    out = np.concatenate([t.data for t in xs], axis=-1)
    widths = [t.shape[-1] for t in xs]
    splits = np.cumsum(widths)[:-1]

    def back(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=-1))

    return Tensor(out, _parents=tuple(xs), _backward=back)


def sum_all(x: Tensor) -> Tensor:
    """Sum every element into a scalar."""
    out = np.asarray(x.data.sum(), dtype=x.dtype)
    _check_finite(out, "sum_all")
    return Tensor(
        out, _parents=(x,), _backward=lambda g: (np.full(x.shape, g, dtype=g.dtype),)
    )


def conv_seq(x: Tensor, kernel: Tensor) -> Tensor:
    """Sequence-preserving convolution over the hidden axis.

    `x` is (B, T, H, C_in); `kernel` is (K_t, K_h, C_in, C_out).  The token
    extent K_t must be 1, or odd (then the token axis is zero-padded so its
    length is preserved).  The hidden axis uses valid padding, so the output
    is (B, T, H - K_h + 1, C_out).  Any configuration that would change the
    token length is rejected.
    """
    if x.data.ndim != 4:
        raise DimensionError(f"conv_seq input must be (B, T, H, C), got {x.shape}")
    if kernel.data.ndim != 4:
        raise DimensionError(
            f"conv_seq kernel must be (K_t, K_h, C_in, C_out), got {kernel.shape}"
        )
    b, t, h, c_in = x.shape
    k_t, k_h, kc_in, c_out = kernel.shape
    if kc_in != c_in:
        raise DimensionError(
            f"kernel input channels {kc_in} do not match stack channels {c_in}"
        )
    if k_h < 1 or k_h > h:
        raise DimensionError(f"kernel hidden extent {k_h} invalid for H={h}")
    if k_t != 1 and k_t % 2 == 0:
        raise ContractError(
            f"kernel token extent {k_t} would shrink the token axis; "
            "use extent 1 or an odd extent (zero-padded)"
        )
    if k_t > t:
        raise ContractError(f"kernel token extent {k_t} exceeds token length {t}")

    pad = (k_t - 1) // 2
    xp = x.data
    if pad:
        xp = np.pad(xp, ((0, 0), (pad, pad), (0, 0), (0, 0)))
    windows = np.lib.stride_tricks.sliding_window_view(xp, (k_t, k_h), axis=(1, 2))
    # windows: (B, T, H_out, C_in, K_t, K_h)
    out = np.einsum("bthcuv,uvco->btho", windows, kernel.data, optimize=True)
    out = np.ascontiguousarray(out)
    _check_finite(out, "conv_seq")
    h_out = h - k_h + 1

    def back(g):
        gk = np.einsum("bthcuv,btho->uvco", windows, g, optimize=True)
        gx = np.zeros_like(xp)
        for u in range(k_t):
            for v in range(k_h):
                gx[:, u : u + t, v : v + h_out, :] += np.einsum(
                    "btho,co->bthc", g, kernel.data[u, v], optimize=True
                )
        if pad:
            gx = np.ascontiguousarray(gx[:, pad : pad + t])
        return gx, gk

    return Tensor(out, _parents=(x, kernel), _backward=back)


# ---------------------------------------------------------------------------
# reverse pass and gradient checking
# ---------------------------------------------------------------------------


def _topo_order(loss: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: ParamSet) -> GradReport:
    """Differentiate a scalar loss w.r.t. every entry of `params`.

    Parameters not reachable from the loss get exact zero gradients.
    """
    if loss.data.shape != ():
        raise ContractError(f"loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.dtype)}
    if loss.requires_grad:
        for node in reversed(_topo_order(loss)):
            if node._backward is None:
                continue  # leaf: keep its accumulated gradient for the report
            g = grads.pop(id(node), None)
            if g is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if not parent.requires_grad:
                    continue
                acc = grads.get(id(parent))
                grads[id(parent)] = pg if acc is None else acc + pg
    report = {}
    for pid, p in params.items():
        g = grads.get(id(p))
        if g is None:
            g = np.zeros(p.shape, dtype=p.dtype)
        if g.shape != p.data.shape:
            raise ContractError(
                f"gradient shape {g.shape} != parameter shape {p.shape} for {pid!r}"
            )
        report[pid] = _contiguous(g)
    return GradReport(loss=float(loss.data), grads=report)


def finite_diff_check(
    loss_fn: Callable[[ParamSet], Tensor],
    params: ParamSet,
    eps: float = 1e-3,
    max_coords: int = 64,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    The check re-evaluates `loss_fn` on a float64 copy of the parameters
    (float32 differences would drown the 1e-4 tolerance in roundoff) over a
    seeded sample of at least `max_coords` coordinates, or every coordinate
    if the model is smaller.  Relative error per coordinate is
    |a - n| / max(|a|, |n|, 1e-8).
    """
    if eps <= 0:
        raise ContractError(f"eps must be positive, got {eps}")
    p64 = params.astype(np.float64)

    first = float(loss_fn(p64).data)
    second = float(loss_fn(p64).data)
    if first != second:
        raise DeterminismError(
            f"loss_fn is not deterministic: {first!r} != {second!r}"
        )

    analytic = backward(loss_fn(p64), p64).grads

    coords: list[tuple[str, int]] = []
    for pid, t in p64.items():
        coords.extend((pid, k) for k in range(t.data.size))
    rng = np.random.default_rng(seed)
    if len(coords) > max_coords:
        picked = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[i] for i in sorted(picked)]

    worst = 0.0
    for pid, flat_idx in coords:
        base = p64[pid].data
        plus = base.copy().reshape(-1)
        plus[flat_idx] += eps
        minus = base.copy().reshape(-1)
        minus[flat_idx] -= eps
        f_plus = float(loss_fn(p64.replace(pid, plus.reshape(base.shape))).data)
        f_minus = float(loss_fn(p64.replace(pid, minus.reshape(base.shape))).data)
        numeric = (f_plus - f_minus) / (2.0 * eps)
        a = float(analytic[pid].reshape(-1)[flat_idx])
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst
