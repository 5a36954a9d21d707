"""Dense float64 tensors with a minimal reverse-mode gradient tape.

Forward ops run on numpy arrays. When a GradTape is active (used as a
context manager), every op appends (output, [(source, vjp), ...]) to the
tape; backward() walks the records in reverse and pushes cotangents to
the sources. Parameters are graph leaves: their cotangents accumulate
into .grad, so calling backward twice without zeroing doubles every
gradient. Cotangent arrays may be shared between entries, so they are
never mutated in place.

Tensors are rank 1 or 2 (scalars from reductions are rank 0). Batching
is expressed as the leading dimension.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np


class NumericError(ValueError):
    pass


class ShapeMismatch(NumericError):
    pass


class NonFiniteInput(NumericError):
    pass


class InvalidDistribution(NumericError):
    pass


class NonScalarLoss(NumericError):
    pass


LOG_CLAMP = 1e-12  # floor applied to probabilities before log


class Tensor:
    """Immutable-by-convention wrapper over a float64 ndarray."""

    __slots__ = ("data",)

    def __init__(self, data):
        self.data = np.asarray(data, dtype=np.float64)

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"


def tensor(values) -> Tensor:
    return Tensor(values)


class Parameter:
    """Trainable leaf: value plus an accumulating gradient of the same shape."""

    __slots__ = ("value", "grad", "name")

    def __init__(self, value, name: str):
        self.value = Tensor(value)
        self.grad = Tensor(np.zeros_like(self.value.data))
        self.name = name

    def zero_grad(self):
        self.grad.data[...] = 0.0

    def __repr__(self):
        return f"Parameter({self.name}, shape={self.value.shape})"


_ACTIVE = threading.local()


class GradTape:
    """Ordered record of forward ops; backward visits them exactly once, in reverse."""

    def __init__(self):
        self.records = []

    def __enter__(self):
        stack = getattr(_ACTIVE, "stack", None)
        if stack is None:
            stack = _ACTIVE.stack = []
        stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _ACTIVE.stack.pop()
        return False


def _record(out: Tensor, vjps):
    stack = getattr(_ACTIVE, "stack", None)
    if stack:
        stack[-1].records.append((out, vjps))


def _data(x) -> np.ndarray:
    return x.value.data if isinstance(x, Parameter) else x.data


def backward(tape: GradTape, loss: Tensor) -> None:
    """Accumulate dLoss/dParameter into every Parameter reachable from loss."""
    if loss.data.size != 1:
        raise NonScalarLoss(f"loss must be scalar, got shape {loss.data.shape}")
    cot = {id(loss): np.ones_like(loss.data)}
    for out, vjps in reversed(tape.records):
        g = cot.pop(id(out), None)
        if g is None:
            continue
        for src, vjp in vjps:
            piece = vjp(g)
            if isinstance(src, Parameter):
                src.grad.data += piece
            else:
                key = id(src)
                prev = cot.get(key)
                # fresh array on purpose: pieces may alias other cotangents
                cot[key] = piece if prev is None else prev + piece


# ---------------------------------------------------------------------------
# forward ops


def matmul(a, b) -> Tensor:
    av, bv = _data(a), _data(b)
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ShapeMismatch(f"matmul {av.shape} x {bv.shape}")
    out = Tensor(av @ bv)
    _record(out, ((a, lambda g, bv=bv: g @ bv.T), (b, lambda g, av=av: av.T @ g)))
    return out


def matmul_t(a, b) -> Tensor:
    """a @ b.T for a (m,k) and b (n,k); avoids materializing transposes."""
    av, bv = _data(a), _data(b)
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[1]:
        raise ShapeMismatch(f"matmul_t {av.shape} x {bv.shape}")
    out = Tensor(av @ bv.T)
    _record(out, ((a, lambda g, bv=bv: g @ bv), (b, lambda g, av=av: g.T @ av)))
    return out


def affine_pair(x, W, h, U, b) -> Tensor:
    """Fused x @ W.T + h @ U.T + b for the recurrent gate pre-activations.

    One tape record instead of four; gradients match the composition of
    matmul_t, add and add_bias.
    """
    xv, Wv, hv, Uv, bv = _data(x), _data(W), _data(h), _data(U), _data(b)
    if (xv.ndim != 2 or hv.ndim != 2 or xv.shape[1] != Wv.shape[1]
            or hv.shape[1] != Uv.shape[1] or Wv.shape[0] != Uv.shape[0]
            or bv.shape != (Wv.shape[0],)):
        raise ShapeMismatch(
            f"affine_pair x{xv.shape} W{Wv.shape} h{hv.shape} U{Uv.shape} b{bv.shape}")
    out = Tensor(xv @ Wv.T + hv @ Uv.T + bv)
    _record(out, (
        (x, lambda g, Wv=Wv: g @ Wv),
        (W, lambda g, xv=xv: g.T @ xv),
        (h, lambda g, Uv=Uv: g @ Uv),
        (U, lambda g, hv=hv: g.T @ hv),
        (b, lambda g: g.sum(axis=0)),
    ))
    return out


def add(a, b) -> Tensor:
    av, bv = _data(a), _data(b)
    if av.shape != bv.shape:
        raise ShapeMismatch(f"add {av.shape} + {bv.shape}")
    out = Tensor(av + bv)
    _record(out, ((a, lambda g: g), (b, lambda g: g)))
    return out


def add_bias(a, b) -> Tensor:
    """Row-broadcast add: (m,n) + (n,). Bias gradient sums over rows."""
    av, bv = _data(a), _data(b)
    if av.ndim != 2 or bv.ndim != 1 or av.shape[1] != bv.shape[0]:
        raise ShapeMismatch(f"add_bias {av.shape} + {bv.shape}")
    out = Tensor(av + bv)
    _record(out, ((a, lambda g: g), (b, lambda g: g.sum(axis=0))))
    return out


def mul(a, b) -> Tensor:
    av, bv = _data(a), _data(b)
    if av.shape != bv.shape:
        raise ShapeMismatch(f"mul {av.shape} * {bv.shape}")
    out = Tensor(av * bv)
    _record(out, ((a, lambda g, bv=bv: g * bv), (b, lambda g, av=av: g * av)))
    return out


def one_minus(a) -> Tensor:
    out = Tensor(1.0 - _data(a))
    _record(out, ((a, lambda g: -g),))
    return out


def _sigmoid_grad(g, y):
    return g * y * (1.0 - y)


def sigmoid(a) -> Tensor:
    x = _data(a)
    # exp(-|x|) never overflows; the where() picks the stable branch
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    out = Tensor(y)
    _record(out, ((a, lambda g, y=y: _sigmoid_grad(g, y)),))
    return out


def tanh(a) -> Tensor:
    y = np.tanh(_data(a))
    out = Tensor(y)
    _record(out, ((a, lambda g, y=y: g * (1.0 - y * y)),))
    return out


ELEMENTWISE_KINDS = ("add", "mul", "sigmoid", "tanh", "one_minus")


def elementwise(kind: str, *args) -> Tensor:
    """Dispatch by kind name; add/mul take two tensors, the rest one."""
    table = {"add": add, "mul": mul, "sigmoid": sigmoid, "tanh": tanh, "one_minus": one_minus}
    if kind not in table:
        raise NumericError(f"unknown elementwise kind {kind!r}")
    return table[kind](*args)


def embed(table, indices) -> Tensor:
    """Gather rows of a (V,E) table; gradient scatter-adds into the table."""
    tv = _data(table)
    idx = np.asarray(indices, dtype=np.intp)
    if tv.ndim != 2 or idx.ndim != 1:
        raise ShapeMismatch(f"embed table {tv.shape}, indices {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= tv.shape[0]):
        raise ShapeMismatch("embedding index out of range")
    out = Tensor(tv[idx])

    def vjp(g, idx=idx, shape=tv.shape):
        z = np.zeros(shape)
        np.add.at(z, idx, g)
        return z

    _record(out, ((table, vjp),))
    return out


def concat_cols(a, b) -> Tensor:
    av, bv = _data(a), _data(b)
    if av.ndim != 2 or bv.ndim != 2 or av.shape[0] != bv.shape[0]:
        raise ShapeMismatch(f"concat_cols {av.shape} | {bv.shape}")
    p = av.shape[1]
    out = Tensor(np.concatenate([av, bv], axis=1))
    _record(out, ((a, lambda g, p=p: g[:, :p]), (b, lambda g, p=p: g[:, p:])))
    return out


def where_rows(mask, a, b) -> Tensor:
    """Rowwise select: rows where mask is 1 come from a, else from b."""
    av, bv = _data(a), _data(b)
    m = np.asarray(mask, dtype=np.float64).reshape(-1, 1)
    if av.shape != bv.shape or av.ndim != 2 or m.shape[0] != av.shape[0]:
        raise ShapeMismatch(f"where_rows mask {m.shape}, {av.shape}, {bv.shape}")
    out = Tensor(av * m + bv * (1.0 - m))
    _record(out, ((a, lambda g, m=m: g * m), (b, lambda g, m=m: g * (1.0 - m))))
    return out


def reshape(a, shape) -> Tensor:
    av = _data(a)
    out = Tensor(av.reshape(shape))
    _record(out, ((a, lambda g, s=av.shape: g.reshape(s)),))
    return out


def softmax(logits) -> Tensor:
    """Row-stable softmax over the last axis (rank 1 or 2)."""
    x = _data(logits)
    if not np.isfinite(x).all():
        raise NonFiniteInput("softmax input contains NaN or Inf")
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y)

    def vjp(g, y=y):
        gy = g * y
        return gy - y * gy.sum(axis=-1, keepdims=True)

    _record(out, ((logits, vjp),))
    return out


def cross_entropy(target: int, q) -> Tensor:
    """-log q[target] for a rank-1 distribution q, clamped below at 1e-12."""
    qv = _data(q)
    if qv.ndim != 1:
        raise InvalidDistribution(f"expected rank-1 distribution, got shape {qv.shape}")
    if not (0 <= target < qv.shape[0]):
        raise InvalidDistribution(f"target {target} out of range for {qv.shape[0]} classes")
    if qv.min() < -1e-9 or abs(qv.sum() - 1.0) > 1e-6:
        raise InvalidDistribution("q is not a probability distribution")
    p = max(qv[target], LOG_CLAMP)
    out = Tensor(-np.log(p))

    def vjp(g, qv=qv, target=target, p=p):
        z = np.zeros_like(qv)
        if qv[target] >= LOG_CLAMP:
            z[target] = -g / p
        return z

    _record(out, ((q, vjp),))
    return out


def cross_entropy_rows(q, targets, mask=None) -> Tensor:
    """Masked sum of per-row cross-entropies for q (B,n) and integer targets (B,).

    q rows are assumed to be softmax outputs; no distribution check here.
    """
    qv = _data(q)
    t = np.asarray(targets, dtype=np.intp)
    if qv.ndim != 2 or t.shape != (qv.shape[0],):
        raise ShapeMismatch(f"cross_entropy_rows q {qv.shape}, targets {t.shape}")
    m = np.ones(qv.shape[0]) if mask is None else np.asarray(mask, dtype=np.float64)
    rows = np.arange(qv.shape[0])
    picked = qv[rows, t]
    clamped = np.maximum(picked, LOG_CLAMP)
    out = Tensor(-(m * np.log(clamped)).sum())

    def vjp(g, qv=qv, t=t, m=m, picked=picked, clamped=clamped, rows=rows):
        z = np.zeros_like(qv)
        z[rows, t] = np.where(picked >= LOG_CLAMP, -m * g / clamped, 0.0)
        return z

    _record(out, ((q, vjp),))
    return out


def total_sum(a) -> Tensor:
    av = _data(a)
    out = Tensor(av.sum())
    _record(out, ((a, lambda g, shape=av.shape: np.broadcast_to(g, shape) * np.ones(shape)),))
    return out


def scale(a, c: float) -> Tensor:
    av = _data(a)
    out = Tensor(av * c)
    _record(out, ((a, lambda g, c=c: g * c),))
    return out


# ---------------------------------------------------------------------------
# gradient verification


@dataclass
class GradCheckEntry:
    name: str
    max_rel_err: float
    coords_checked: int


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry] = field(default_factory=list)

    @property
    def max_rel_err(self) -> float:
        return max((e.max_rel_err for e in self.entries), default=0.0)

    def passed(self, tol: float) -> bool:
        return self.max_rel_err < tol

    def summary(self) -> str:
        lines = [f"{e.name}: max_rel_err={e.max_rel_err:.3e} ({e.coords_checked} coords)"
                 for e in self.entries]
        lines.append(f"overall max_rel_err={self.max_rel_err:.3e}")
        return "\n".join(lines)


def grad_check(f, params, eps: float = 1e-5, tol: float = 1e-4,
               rng=None, min_coords: int = 32) -> GradCheckReport:
    """Compare tape gradients of scalar f() against central differences.

    f must be a deterministic function of the parameter values only. For
    tensors larger than min_coords, a random sample of min_coords
    coordinates is checked. The relative-error denominator is floored at
    the central-difference noise level (machine epsilon times the loss
    magnitude, divided by eps), so rounding noise on near-zero gradients
    cannot fail the check; genuinely wrong rules produce errors on the
    order of the gradients themselves and stay detectable.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    rng = np.random.default_rng(0) if rng is None else rng
    for p in params:
        p.zero_grad()
    with GradTape() as tape:
        loss = f()
    backward(tape, loss)
    analytic = {p.name: p.grad.data.copy() for p in params}
    machine_eps = np.finfo(np.float64).eps
    guard = max(1e-6, 3e4 * machine_eps * max(1.0, abs(loss.item())) / eps)

    report = GradCheckReport()
    for p in params:
        flat = p.value.data.reshape(-1)
        size = flat.shape[0]
        if size <= min_coords:
            coords = np.arange(size)
        else:
            coords = rng.choice(size, size=min_coords, replace=False)
        worst = 0.0
        a_flat = analytic[p.name].reshape(-1)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            f_plus = f().item()
            flat[c] = orig - eps
            f_minus = f().item()
            flat[c] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = a_flat[c]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), guard)
            worst = max(worst, rel)
        report.entries.append(GradCheckEntry(p.name, worst, len(coords)))
    return report


# ---------------------------------------------------------------------------
# checkpoint persistence

CHECKPOINT_HEADER = "faplearn-ckpt v1"


def save_checkpoint(path, params, manifest=None) -> None:
    """Text checkpoint: header, optional `meta key value` lines, then per
    parameter a `name dim...` line followed by the values at 17
    significant digits (exact float64 round trip)."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(CHECKPOINT_HEADER + "\n")
        for key, value in (manifest or {}).items():
            if any(ch in key for ch in " \t\n"):
                raise NumericError(f"manifest key {key!r} may not contain whitespace")
            fh.write(f"meta {key} {value}\n")
        for p in params:
            if " " in p.name or p.name == "meta":
                raise NumericError(f"bad parameter name {p.name!r}")
            dims = " ".join(str(d) for d in p.value.data.shape)
            fh.write(f"{p.name} {dims}\n")
            fh.write(" ".join("%.17g" % v for v in p.value.data.reshape(-1)) + "\n")


def load_checkpoint(path):
    """Returns (manifest dict, {name: ndarray})."""
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if header != CHECKPOINT_HEADER:
            raise NumericError(f"bad checkpoint header {header!r}")
        manifest = {}
        arrays = {}
        while True:
            line = fh.readline()
            if not line:
                break
            line = line.rstrip("\n")
            if not line:
                continue
            if line.startswith("meta "):
                _, key, value = line.split(" ", 2)
                manifest[key] = value
                continue
            parts = line.split(" ")
            name, dims = parts[0], tuple(int(d) for d in parts[1:])
            values = fh.readline().split()
            n = int(np.prod(dims)) if dims else 1
            if len(values) != n:
                raise NumericError(f"parameter {name}: expected {n} values, got {len(values)}")
            arrays[name] = np.array([float(v) for v in values]).reshape(dims)
    return manifest, arrays
