"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable operation returns a new :class:`Tensor` that remembers its
parents and a closure mapping the output gradient to parent gradients.  Calling
:func:`backward` on a scalar walks the recorded graph in reverse topological
order exactly once.

Storage is a numpy array; all arithmetic is 64-bit.
"""

from __future__ import annotations

import contextlib
import math
import struct
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

DTYPE = np.float64
CHECKPOINT_MAGIC = b"LSMT0001"

_grad_enabled = True
# op name -> multiplier applied to that op's analytic gradient (test hook)
_grad_faults: dict[str, float] = {}


class DimensionError(ValueError):
    """Operand shapes do not conform."""


class DomainError(ValueError):
    """An input lies outside an operation's mathematical domain."""


class GradError(RuntimeError):
    """Misuse of the gradient tape."""


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def inject_grad_fault(op: str, scale: float = 1.01):
    """Scale the analytic gradient of ``op`` so a checker can be shown to catch it."""
    _grad_faults[op] = scale
    try:
        yield
    finally:
        _grad_faults.pop(op, None)


def rng(seed: int, *stream: str | int) -> np.random.Generator:
    """PCG64 generator keyed by ``seed`` and an optional named sub-stream.

    Names are folded to 32-bit words with FNV-1a, so the same (seed, name)
    pair always yields the same sequence regardless of call order elsewhere.
    """
    words = [int(seed) & 0xFFFFFFFF, (int(seed) >> 32) & 0xFFFFFFFF]
    for part in stream:
        if isinstance(part, str):
            words.append(fnv1a_64(part.encode()) & 0xFFFFFFFF)
        else:
            words.append(int(part) & 0xFFFFFFFF)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(words)))


def fnv1a_64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for byte in data:
        h ^= byte
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def _fault(op: str, g: np.ndarray) -> np.ndarray:
    if _grad_faults and op in _grad_faults:
        return g * _grad_faults[op]
    return g


class Tensor:
    """An n-dimensional float64 array that may participate in the gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_consumed", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op = "leaf"
        self._consumed = False
        self.name = name

    # -- construction helpers -------------------------------------------------
    @staticmethod
    def _result(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.name = None
        out._consumed = False
        out._op = op
        track = _grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = track
        if track:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> Tensor:
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- arithmetic -------------------------------------------------------------
    def __add__(self, other) -> Tensor:
        other = as_tensor(other)
        a_shape, b_shape = self.shape, other.shape
        return Tensor._result(
            self.data + other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape)),
            "add",
        )

    __radd__ = __add__

    def __neg__(self) -> Tensor:
        return Tensor._result(-self.data, (self,), lambda g: (-g,), "neg")

    def __sub__(self, other) -> Tensor:
        return self + (-as_tensor(other))

    def __rsub__(self, other) -> Tensor:
        return as_tensor(other) + (-self)

    def __mul__(self, other) -> Tensor:
        other = as_tensor(other)
        a, b = self.data, other.data

        def back(g):
            return (
                _unbroadcast(_fault("mul", g * b), a.shape),
                _unbroadcast(_fault("mul", g * a), b.shape),
            )

        return Tensor._result(a * b, (self, other), back, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other) -> Tensor:
        other = as_tensor(other)
        a, b = self.data, other.data
        out = a / b

        def back(g):
            return _unbroadcast(g / b, a.shape), _unbroadcast(-g * out / b, b.shape)

        return Tensor._result(out, (self, other), back, "div")

    def __rtruediv__(self, other) -> Tensor:
        return as_tensor(other) / self

    def __pow__(self, p: float) -> Tensor:
        a = self.data
        return Tensor._result(a**p, (self,), lambda g: (g * p * a ** (p - 1),), "pow")

    def __matmul__(self, other) -> Tensor:
        return matmul(self, other)

    def __getitem__(self, idx) -> Tensor:
        a_shape = self.shape

        def back(g):
            full = np.zeros(a_shape, dtype=DTYPE)
            np.add.at(full, idx, g)
            return (full,)

        return Tensor._result(self.data[idx], (self,), back, "getitem")

    # -- reductions and shape ---------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        a_shape = self.shape

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a_shape).copy(),)

        return Tensor._result(np.sum(self.data, axis=axis, keepdims=keepdims), (self,), back, "sum")

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        if axis is None:
            count = self.size
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            count = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a_shape = self.shape
        return Tensor._result(self.data.reshape(shape), (self,), lambda g: (g.reshape(a_shape),), "reshape")

    def transpose(self, *axes) -> Tensor:
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inverse = tuple(np.argsort(axes))
        return Tensor._result(
            np.transpose(self.data, axes), (self,), lambda g: (np.transpose(g, inverse),), "transpose"
        )

    @property
    def T(self) -> Tensor:
        return self.transpose()

    # -- elementwise --------------------------------------------------------------
    def exp(self) -> Tensor:
        return elementwise(self, "exp")

    def log(self) -> Tensor:
        return elementwise(self, "log")

    def sigmoid(self) -> Tensor:
        return elementwise(self, "sigmoid")

    def gelu(self) -> Tensor:
        return elementwise(self, "gelu")

    def elu(self) -> Tensor:
        return elementwise(self, "elu")

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


# ---------------------------------------------------------------------------
# Core operations
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batch semantics over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data

    def back(g):
        ga = _unbroadcast(_fault("matmul", g @ np.swapaxes(B, -1, -2)), A.shape)
        gb = _unbroadcast(_fault("matmul", np.swapaxes(A, -1, -2) @ g), B.shape)
        return ga, gb

    return Tensor._result(A @ B, (a, b), back, "matmul")


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # split by sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def elementwise(x: Tensor, f: str, other=None) -> Tensor:
    """Apply a named pointwise function: add, mul, gelu, elu, sigmoid, exp, log."""
    x = as_tensor(x)
    if f == "add":
        return x + other
    if f == "mul":
        return x * other
    a = x.data
    if f == "exp":
        out = np.exp(a)
        return Tensor._result(out, (x,), lambda g: (_fault("exp", g * out),), "exp")
    if f == "log":
        if np.any(a <= 0):
            raise DomainError("log of non-positive value")
        return Tensor._result(np.log(a), (x,), lambda g: (_fault("log", g / a),), "log")
    if f == "sigmoid":
        out = _sigmoid_np(a)
        return Tensor._result(out, (x,), lambda g: (_fault("sigmoid", g * out * (1.0 - out)),), "sigmoid")
    if f == "gelu":
        cdf = 0.5 * (1.0 + erf(a * _INV_SQRT2))
        pdf = _INV_SQRT2PI * np.exp(-0.5 * a * a)
        return Tensor._result(a * cdf, (x,), lambda g: (_fault("gelu", g * (cdf + a * pdf)),), "gelu")
    if f == "elu":
        neg = a < 0
        em1 = np.expm1(np.minimum(a, 0.0))
        out = np.where(neg, em1, a)
        deriv = np.where(neg, em1 + 1.0, 1.0)
        return Tensor._result(out, (x,), lambda g: (_fault("elu", g * deriv),), "elu")
    raise ValueError(f"unknown elementwise function {f!r}")


def exp(x: Tensor) -> Tensor:
    return elementwise(x, "exp")


def log(x: Tensor) -> Tensor:
    return elementwise(x, "log")


def sigmoid(x: Tensor) -> Tensor:
    return elementwise(x, "sigmoid")


def gelu(x: Tensor) -> Tensor:
    return elementwise(x, "gelu")


def elu(x: Tensor) -> Tensor:
    return elementwise(x, "elu")


def clamp_max(x: Tensor, bound: float) -> Tensor:
    a = x.data
    mask = a <= bound
    return Tensor._result(np.minimum(a, bound), (x,), lambda g: (g * mask,), "clamp_max")


def _check_axis(x: Tensor, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"axis {axis} out of range for shape {x.shape}")
    return axis % x.ndim


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    axis = _check_axis(x, axis)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (_fault("softmax", out * (g - (g * out).sum(axis=axis, keepdims=True))),)

    return Tensor._result(out, (x,), back, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    axis = _check_axis(x, axis)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def back(g):
        return (_fault("log_softmax", g - p * g.sum(axis=axis, keepdims=True)),)

    return Tensor._result(out, (x,), back, "log_softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each row (last axis) to zero mean, unit variance, then scale and shift."""
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: gain {gain.shape} / bias {bias.shape} vs width {d}")
    a = x.data
    mu = a.mean(axis=-1, keepdims=True)
    xc = a - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    G = gain.data

    def back(g):
        gh = g * G
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return _fault("layer_norm", gx), (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return Tensor._result(xhat * G + bias.data, (x, gain, bias), back, "layer_norm")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._result(np.concatenate([t.data for t in tensors], axis=axis), tensors, back, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def back(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return Tensor._result(np.stack([t.data for t in tensors], axis=axis), tensors, back, "stack")


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    norm = ((x * x).sum(axis=axis, keepdims=True) + eps) ** 0.5
    return x / norm


# ---------------------------------------------------------------------------
# Generalized contraction
# ---------------------------------------------------------------------------


def parse_contraction(spec: str) -> tuple[list[str], str]:
    """Parse ``"n d, e s d -> n e s"`` (or compact ``"nd,esd->nes"``) into axis labels."""
    if "->" not in spec:
        raise DimensionError(f"contraction spec {spec!r} lacks '->'")
    lhs, rhs = spec.split("->")
    operands = [_labels(term) for term in lhs.split(",")]
    out = _labels(rhs)
    for term in operands + [out]:
        if len(set(term)) != len(term):
            raise DimensionError(f"axis repeated within one operand in {spec!r}")
    seen = set("".join(operands))
    if not set(out) <= seen:
        raise DimensionError(f"output axis absent from inputs in {spec!r}")
    return operands, out


def _labels(term: str) -> str:
    parts = term.split()
    if len(parts) > 1:
        if any(len(p) != 1 for p in parts):
            raise DimensionError(f"axis names must be single letters: {term!r}")
        return "".join(parts)
    return term.strip()


def contract(spec: str, a: Tensor, b: Tensor) -> Tensor:
    """Einstein-summation contraction of two operands.

    Axes shared by both inputs and absent from the output are summed; axes
    present in only one input and absent from the output are summed too.
    """
    a, b = as_tensor(a), as_tensor(b)
    (sa, sb), so = parse_contraction(spec)
    if len(sa) != a.ndim or len(sb) != b.ndim:
        raise DimensionError(f"{spec!r}: operand ranks {a.ndim}, {b.ndim} do not match labels")
    extents: dict[str, int] = {}
    for labels, shape in ((sa, a.shape), (sb, b.shape)):
        for lab, n in zip(labels, shape):
            if extents.setdefault(lab, n) != n:
                raise DimensionError(f"{spec!r}: axis {lab!r} has extents {extents[lab]} and {n}")
    A, B = a.data, b.data
    out = np.einsum(f"{sa},{sb}->{so}", A, B)

    def grad_for(target: str, g: np.ndarray, other_labels: str, other: np.ndarray) -> np.ndarray:
        # labels of the target that appear elsewhere can be produced directly;
        # the rest were summed out and come back by broadcasting
        available = set(so) | set(other_labels)
        keep = "".join(l for l in target if l in available)
        part = np.einsum(f"{so},{other_labels}->{keep}", g, other)
        if keep != target:
            part = part.reshape([extents[l] if l in keep else 1 for l in target])
            part = np.broadcast_to(part, [extents[l] for l in target]).copy()
        return part

    def back(g):
        return (
            _fault("contract", grad_for(sa, g, sb, B)),
            _fault("contract", grad_for(sb, g, sa, A)),
        )

    return Tensor._result(out, (a, b), back, "contract")


# ---------------------------------------------------------------------------
# Backward pass and gradient checking
# ---------------------------------------------------------------------------


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor requiring grad."""
    if loss.size != 1:
        raise GradError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GradError("backward already ran on this graph; rebuild the forward pass first")
    if not loss.requires_grad:
        raise GradError("loss is not on an active tape (no input requires grad)")
    order = _topological(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    for node in order:
        if node._backward is not None:
            node._consumed = True
            node._parents = ()
            node._backward = None


def numerical_grad(f: Callable[[], Tensor], x: Tensor, h: float = 1e-5, index: Iterable | None = None):
    """Central differences of scalar ``f()`` w.r.t. entries of ``x`` (perturbed in place)."""
    flat = x.data.reshape(-1)
    idx = range(flat.size) if index is None else index
    out = {}
    with no_grad():
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = f().item()
            flat[i] = orig - h
            fm = f().item()
            flat[i] = orig
            out[i] = (fp - fm) / (2.0 * h)
    return out


class GradCheckReport:
    __slots__ = ("max_rel_error", "passed", "tol", "checked")

    def __init__(self, max_rel_error: float, tol: float, checked: int):
        self.max_rel_error = max_rel_error
        self.tol = tol
        self.checked = checked
        self.passed = bool(max_rel_error < tol)

    def __repr__(self) -> str:
        verdict = "pass" if self.passed else "FAIL"
        return f"GradCheckReport({verdict}, max_rel_error={self.max_rel_error:.3e}, checked={self.checked})"


def grad_check(
    f: Callable[[], Tensor],
    wrt: Tensor | Sequence[Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    max_entries: int | None = None,
    seed: int = 0,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare tape gradients of scalar ``f()`` against central differences.

    The relative error per entry is ``|a - n| / max(|a|, |n|, floor)``; the
    floor keeps entries whose true gradient is zero from dividing by noise.
    ``max_entries`` samples that many coordinates per tensor instead of all.
    """
    tensors = [wrt] if isinstance(wrt, Tensor) else list(wrt)
    saved = [(t.grad, t.requires_grad) for t in tensors]
    for t in tensors:
        t.grad = None
        t.requires_grad = True
    try:
        loss = f()
        backward(loss)
        analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]
    finally:
        for t, (g, rg) in zip(tensors, saved):
            t.grad, t.requires_grad = g, rg
    gen = np.random.default_rng(seed)
    worst = 0.0
    checked = 0
    for t, a in zip(tensors, analytic):
        n = t.size
        if max_entries is not None and n > max_entries:
            idx = sorted(gen.choice(n, size=max_entries, replace=False).tolist())
        else:
            idx = range(n)
        num = numerical_grad(f, t, h, idx)
        af = a.reshape(-1)
        for i, nv in num.items():
            denom = max(abs(af[i]), abs(nv), floor)
            worst = max(worst, abs(af[i] - nv) / denom)
            checked += 1
    return GradCheckReport(worst, tol, checked)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(params: dict[str, Tensor], path) -> None:
    """Write named parameters: magic, then per tensor name/rank/extents/raw f64 LE."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        for name, t in params.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", t.ndim))
            fh.write(struct.pack(f"<{t.ndim}I", *t.shape))
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


class CheckpointError(ValueError):
    pass


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic at offset 0")
    pos = 8
    out: dict[str, np.ndarray] = {}

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointError(f"{path}: truncated at offset {pos}")
        chunk = blob[pos : pos + n]
        pos += n
        return chunk

    while pos < len(blob):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(shape)) if rank else 1
        out[name] = np.frombuffer(take(8 * count), dtype="<f8").reshape(shape).astype(DTYPE)
    return out
