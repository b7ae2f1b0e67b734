"""Dense float64 tensors on a reverse-mode tape, plus an AdamW optimizer.

Ops run eagerly on numpy buffers. While a tape is active, any op whose
inputs lie on the gradient path records a backward closure; a tape lives
for one training step and is consumed by a single backward() call.
Everything is 64-bit and deterministic: same inputs, same bits out.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np

LAYERNORM_EPS = 1e-12

_GELU_C = 0.044715
_GELU_K = math.sqrt(2.0 / math.pi)

_strict = False
_active_tape: "Tape | None" = None


def set_strict(flag: bool) -> None:
    """Toggle strict mode: every primitive rejects non-finite inputs."""
    global _strict
    _strict = bool(flag)


class Tape:
    """Ordered record of primitive applications for one backward pass."""

    __slots__ = ("nodes", "consumed")

    def __init__(self) -> None:
        # (op name, input tensors, per-input need-grad flags, output, vjp)
        self.nodes: list[tuple] = []
        self.consumed = False

    def __len__(self) -> int:
        return len(self.nodes)


@contextmanager
def tape() -> Iterator[Tape]:
    """Activate a fresh tape for the duration of the block."""
    global _active_tape
    prev = _active_tape
    _active_tape = Tape()
    try:
        yield _active_tape
    finally:
        _active_tape = prev


@contextmanager
def no_grad() -> Iterator[None]:
    """Suspend recording; ops inside run as plain numpy."""
    global _active_tape
    prev = _active_tape
    _active_tape = None
    try:
        yield
    finally:
        _active_tape = prev


class Tensor:
    """Dense float64 array with an optional gradient slot."""

    __slots__ = ("values", "grad", "requires_grad", "tape", "tape_id")

    def __init__(self, values, requires_grad: bool = False) -> None:
        self.values = np.asarray(values, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.tape: Tape | None = None
        self.tape_id = -1

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        return float(self.values.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.values.shape}{flag})"

    # Small operator sugar; everything routes through the primitives below.
    def __add__(self, other) -> "Tensor":
        return add(self, _as_tensor(other))

    def __radd__(self, other) -> "Tensor":
        return add(_as_tensor(other), self)

    def __sub__(self, other) -> "Tensor":
        return add(self, scalar_scale(_as_tensor(other), -1.0))

    def __neg__(self) -> "Tensor":
        return scalar_scale(self, -1.0)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, (int, float)):
            return scalar_scale(self, float(other))
        return elementwise_mul(self, other)

    def __rmul__(self, other) -> "Tensor":
        return self.__mul__(other)

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _tracked(t: Tensor) -> bool:
    return t.requires_grad or (t.tape is not None and t.tape is _active_tape)


def _check_finite(op: str, *tensors: Tensor) -> None:
    if not _strict:
        return
    for t in tensors:
        if not np.all(np.isfinite(t.values)):
            raise FloatingPointError(f"{op}: non-finite input values in strict mode")


def _record(op: str, inputs: tuple[Tensor, ...], out_values: np.ndarray,
            vjp: Callable) -> Tensor:
    out = Tensor(out_values)
    tp = _active_tape
    if tp is not None:
        needs = tuple(_tracked(t) for t in inputs)
        if any(needs):
            out.tape = tp
            out.tape_id = len(tp.nodes)
            tp.nodes.append((op, inputs, needs, out, vjp))
    return out


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, (gdim, sdim) in enumerate(zip(g.shape, shape)):
        if sdim == 1 and gdim != 1:
            g = g.sum(axis=ax, keepdims=True)
    if g.shape != shape:
        raise ValueError(f"cannot reduce gradient of shape {g.shape} to {shape}")
    return g


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_finite("matmul", a, b)
    av, bv = a.values, b.values
    if bv.ndim != 2 or av.ndim not in (1, 2) or av.shape[-1] != bv.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {av.shape} and {bv.shape}")
    out = av @ bv

    def vjp(g, needs):
        ga = g @ bv.T if needs[0] else None
        if not needs[1]:
            return ga, None
        gb = np.outer(av, g) if av.ndim == 1 else av.T @ g
        return ga, gb

    return _record("matmul", (a, b), out, vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_finite("add", a, b)
    av, bv = a.values, b.values
    try:
        out = av + bv
    except ValueError:
        raise ValueError(f"add: incompatible shapes {av.shape} and {bv.shape}")

    def vjp(g, needs):
        return (_reduce_to(g, av.shape) if needs[0] else None,
                _reduce_to(g, bv.shape) if needs[1] else None)

    return _record("add", (a, b), out, vjp)


def elementwise_mul(a: Tensor, b: Tensor) -> Tensor:
    _check_finite("elementwise-mul", a, b)
    av, bv = a.values, b.values
    try:
        out = av * bv
    except ValueError:
        raise ValueError(f"elementwise-mul: incompatible shapes {av.shape} and {bv.shape}")

    def vjp(g, needs):
        return (_reduce_to(g * bv, av.shape) if needs[0] else None,
                _reduce_to(g * av, bv.shape) if needs[1] else None)

    return _record("elementwise-mul", (a, b), out, vjp)


def scalar_scale(a: Tensor, c: float) -> Tensor:
    _check_finite("scalar-scale", a)
    c = float(c)
    out = a.values * c

    def vjp(g, needs):
        return (g * c,)

    return _record("scalar-scale", (a,), out, vjp)


def transpose(a: Tensor) -> Tensor:
    _check_finite("transpose", a)
    if a.ndim != 2:
        raise ValueError(f"transpose: expected a matrix, got shape {a.shape}")
    out = np.ascontiguousarray(a.values.T)

    def vjp(g, needs):
        return (np.ascontiguousarray(g.T),)

    return _record("transpose", (a,), out, vjp)


def row_softmax(a: Tensor) -> Tensor:
    _check_finite("row-softmax", a)
    if a.ndim not in (1, 2):
        raise ValueError(f"row-softmax: expected 1-D or 2-D input, got shape {a.shape}")
    av = a.values
    shifted = av - av.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def vjp(g, needs):
        dot = (g * s).sum(axis=-1, keepdims=True)
        return (s * (g - dot),)

    return _record("row-softmax", (a,), out_values=s, vjp=vjp)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """Per-row normalization over the last axis, then affine rescale."""
    _check_finite("layernorm", x, gamma, beta)
    if x.ndim != 2:
        raise ValueError(f"layernorm: expected a matrix, got shape {x.shape}")
    d = x.shape[1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ValueError(
            f"layernorm: affine shapes {gamma.shape}/{beta.shape} do not match width {d}")
    xv = x.values
    mu = xv.mean(axis=-1, keepdims=True)
    xc = xv - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LAYERNORM_EPS)
    xhat = xc * inv
    out = xhat * gamma.values + beta.values
    gv = gamma.values

    def vjp(g, needs):
        ghat = g * gv
        m1 = ghat.mean(axis=-1, keepdims=True)
        m2 = (ghat * xhat).mean(axis=-1, keepdims=True)
        gx = (ghat - m1 - xhat * m2) * inv if needs[0] else None
        gg = (g * xhat).sum(axis=0) if needs[1] else None
        gb = g.sum(axis=0) if needs[2] else None
        return gx, gg, gb

    return _record("layernorm", (x, gamma, beta), out, vjp)


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximation GELU; bit-reproducible across runs."""
    _check_finite("gelu", x)
    xv = x.values
    inner = _GELU_K * (xv + _GELU_C * xv ** 3)
    t = np.tanh(inner)
    out = 0.5 * xv * (1.0 + t)

    def vjp(g, needs):
        dinner = _GELU_K * (1.0 + 3.0 * _GELU_C * xv * xv)
        local = 0.5 * (1.0 + t) + 0.5 * xv * (1.0 - t * t) * dinner
        return (g * local,)

    return _record("gelu", (x,), out, vjp)


def embedding_gather(table: Tensor, ids) -> Tensor:
    """Gather rows of an embedding table; ids are fixed integers."""
    _check_finite("embedding-gather", table)
    idx = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2 or idx.ndim != 1 or idx.size == 0:
        raise ValueError("embedding-gather: expected a 2-D table and 1-D non-empty ids")
    if idx.min() < 0 or idx.max() >= table.shape[0]:
        raise ValueError(f"embedding-gather: id out of range for table of {table.shape[0]} rows")
    out = table.values[idx]
    shape = table.shape

    def vjp(g, needs):
        gt = np.zeros(shape, dtype=np.float64)
        np.add.at(gt, idx, g)
        return (gt,)

    return _record("embedding-gather", (table,), out, vjp)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ValueError("concat: empty input list")
    if axis not in (0, 1):
        raise ValueError(f"concat: unsupported axis {axis}")
    vals = [p.values for p in parts]
    try:
        out = np.concatenate(vals, axis=axis)
    except ValueError:
        raise ValueError(f"concat: incompatible shapes {[v.shape for v in vals]}")
    sizes = [v.shape[axis] for v in vals]

    def vjp(g, needs):
        grads = []
        offset = 0
        for size, need in zip(sizes, needs):
            if need:
                sl = g[offset:offset + size] if axis == 0 else g[:, offset:offset + size]
                grads.append(np.ascontiguousarray(sl))
            else:
                grads.append(None)
            offset += size
        return tuple(grads)

    return _record("concat", tuple(parts), out, vjp)


def slice_(a: Tensor, start: int, stop: int, axis: int = 0) -> Tensor:
    if axis not in (0, 1) or axis >= a.ndim:
        raise ValueError(f"slice: axis {axis} invalid for shape {a.shape}")
    dim = a.shape[axis]
    if not (0 <= start < stop <= dim):
        raise ValueError(f"slice: range [{start}, {stop}) invalid for size {dim}")
    av = a.values
    out = np.ascontiguousarray(av[start:stop] if axis == 0 else av[:, start:stop])
    shape = a.shape

    def vjp(g, needs):
        ga = np.zeros(shape, dtype=np.float64)
        if axis == 0:
            ga[start:stop] = g
        else:
            ga[:, start:stop] = g
        return (ga,)

    return _record("slice", (a,), out, vjp)


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    _check_finite("mean", a)
    if axis not in (None, 0):
        raise ValueError(f"mean: unsupported axis {axis}")
    av = a.values
    if axis is None:
        out = np.asarray(av.mean())
        n = av.size

        def vjp(g, needs):
            return (np.full(av.shape, float(g) / n),)
    else:
        out = av.mean(axis=0)
        n = av.shape[0]

        def vjp(g, needs):
            return (np.broadcast_to(g / n, av.shape).copy(),)

    return _record("mean", (a,), out, vjp)


def log(a: Tensor) -> Tensor:
    _check_finite("log", a)
    if np.any(a.values <= 0.0):
        raise ValueError("log: input must be strictly positive")
    out = np.log(a.values)
    av = a.values

    def vjp(g, needs):
        return (g / av,)

    return _record("log", (a,), out, vjp)


def cross_entropy_with_logits(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean negative log-likelihood over unmasked rows.

    logits: (T, V) or (V,); targets: T integer class ids; mask: optional
    per-row 0/1 weights (rows with 0 drop out of the mean).
    """
    _check_finite("cross-entropy-with-logits", logits)
    lv = logits.values
    if lv.ndim == 1:
        lv2 = lv[None, :]
    elif lv.ndim == 2:
        lv2 = lv
    else:
        raise ValueError(f"cross-entropy-with-logits: bad logits shape {lv.shape}")
    t_rows, v = lv2.shape
    idx = np.asarray(targets, dtype=np.int64).reshape(-1)
    if idx.shape[0] != t_rows:
        raise ValueError(
            f"cross-entropy-with-logits: {t_rows} rows vs {idx.shape[0]} targets")
    if idx.min() < 0 or idx.max() >= v:
        raise ValueError(f"cross-entropy-with-logits: target id out of range [0, {v})")
    if mask is None:
        m = np.ones(t_rows, dtype=np.float64)
    else:
        m = np.asarray(mask, dtype=np.float64).reshape(-1)
        if m.shape[0] != t_rows:
            raise ValueError("cross-entropy-with-logits: mask length mismatch")
    n = m.sum()
    if n <= 0:
        raise ValueError("cross-entropy-with-logits: mask selects no rows")

    mx = lv2.max(axis=-1, keepdims=True)
    e = np.exp(lv2 - mx)
    z = e.sum(axis=-1, keepdims=True)
    probs = e / z
    lse = mx[:, 0] + np.log(z[:, 0])
    nll = lse - lv2[np.arange(t_rows), idx]
    out = np.asarray((nll * m).sum() / n)
    in_shape = lv.shape

    def vjp(g, needs):
        grad = probs.copy()
        grad[np.arange(t_rows), idx] -= 1.0
        grad *= (m / n)[:, None] * float(g)
        return (grad.reshape(in_shape),)

    return _record("cross-entropy-with-logits", (logits,), out, vjp)


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Cosine of the angle between the flattened operands."""
    _check_finite("cosine-similarity", a, b)
    af = a.values.reshape(-1)
    bf = b.values.reshape(-1)
    if af.shape != bf.shape:
        raise ValueError(f"cosine-similarity: incompatible shapes {a.shape} and {b.shape}")
    na = np.sqrt(af @ af)
    nb = np.sqrt(bf @ bf)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine-similarity: zero-norm input")
    c = (af @ bf) / (na * nb)
    out = np.asarray(c)

    def vjp(g, needs):
        gf = float(g)
        ga = (gf * (bf / (na * nb) - c * af / (na * na))).reshape(a.shape) if needs[0] else None
        gb = (gf * (af / (na * nb) - c * bf / (nb * nb))).reshape(b.shape) if needs[1] else None
        return ga, gb

    return _record("cosine-similarity", (a, b), out, vjp)


def attention_core(q: Tensor, k: Tensor, v: Tensor, n_heads: int,
                   mask: np.ndarray | None = None) -> Tensor:
    """Fused multi-head scaled dot-product attention.

    q: (Tq, d); k, v: (Tk, d); mask: optional additive (Tq, Tk) array
    applied to the attention scores of every head.
    """
    _check_finite("attention-core", q, k, v)
    tq, d = q.shape
    tk, dk = k.shape
    if dk != d or v.shape != (tk, d):
        raise ValueError(
            f"attention-core: incompatible shapes q={q.shape} k={k.shape} v={v.shape}")
    if d % n_heads != 0:
        raise ValueError(f"attention-core: width {d} not divisible by {n_heads} heads")
    dh = d // n_heads
    inv = 1.0 / math.sqrt(dh)
    qh = q.values.reshape(tq, n_heads, dh)
    kh = k.values.reshape(tk, n_heads, dh)
    vh = v.values.reshape(tk, n_heads, dh)
    scores = np.einsum("qhd,khd->hqk", qh, kh) * inv
    if mask is not None:
        scores = scores + mask
    scores -= scores.max(axis=-1, keepdims=True)
    e = np.exp(scores)
    p = e / e.sum(axis=-1, keepdims=True)
    ctx = np.einsum("hqk,khd->qhd", p, vh)
    out = ctx.reshape(tq, d)

    def vjp(g, needs):
        gh = g.reshape(tq, n_heads, dh)
        gp = np.einsum("qhd,khd->hqk", gh, vh)
        gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True))
        gq = (np.einsum("hqk,khd->qhd", gs, kh) * inv).reshape(tq, d) if needs[0] else None
        gk = (np.einsum("hqk,qhd->khd", gs, qh) * inv).reshape(tk, d) if needs[1] else None
        gv = np.einsum("hqk,qhd->khd", p, gh).reshape(tk, d) if needs[2] else None
        return gq, gk, gv

    return _record("attention-core", (q, k, v), out, vjp)


_PRIMITIVES: dict[str, Callable] = {
    "matmul": matmul,
    "add": add,
    "elementwise-mul": elementwise_mul,
    "scalar-scale": scalar_scale,
    "transpose": transpose,
    "row-softmax": row_softmax,
    "layernorm": layernorm,
    "gelu": gelu,
    "embedding-gather": embedding_gather,
    "concat": concat,
    "slice": slice_,
    "mean": mean,
    "log": log,
    "cross-entropy-with-logits": cross_entropy_with_logits,
    "cosine-similarity": cosine_similarity,
    "attention-core": attention_core,
}


def apply_primitive(kind: str, *inputs, **kwargs) -> Tensor:
    """Apply a primitive by name; see _PRIMITIVES for the supported kinds."""
    fn = _PRIMITIVES.get(kind)
    if fn is None:
        raise ValueError(f"unknown primitive kind '{kind}'")
    return fn(*inputs, **kwargs)


def primitive_kinds() -> tuple[str, ...]:
    return tuple(_PRIMITIVES)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Accumulate gradients of a scalar loss into every reachable parameter.

    Returns a map from each requires_grad leaf to its gradient; the same
    arrays are accumulated into the leaves' .grad slots. The loss's tape
    is consumed: a second backward on it raises.
    """
    if loss.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    tp = loss.tape
    if tp is None:
        if loss.requires_grad:
            g = np.ones_like(loss.values)
            loss.grad = g if loss.grad is None else loss.grad + g
            return {loss: g}
        raise RuntimeError("backward: loss is not attached to a tape")
    if tp.consumed:
        raise RuntimeError("backward: tape already consumed; build a fresh tape per step")
    tp.consumed = True

    acc: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
    leaves: dict[int, Tensor] = {}
    for _op, inputs, needs, out, vjp in reversed(tp.nodes):
        g = acc.pop(id(out), None)
        if g is None:
            continue
        grads = vjp(np.asarray(g), needs)
        for t, need, gt in zip(inputs, needs, grads):
            if not need or gt is None:
                continue
            key = id(t)
            if key in acc:
                acc[key] = acc[key] + gt
            else:
                acc[key] = gt
            if t.requires_grad:
                leaves[key] = t

    result: dict[Tensor, np.ndarray] = {}
    for key, t in leaves.items():
        g = acc[key]
        t.grad = g.copy() if t.grad is None else t.grad + g
        result[t] = g
    return result


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class AdamW:
    """Decoupled-weight-decay Adam over a fixed parameter list."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0) -> None:
        self.params = list(params)
        for p in self.params:
            if not p.requires_grad:
                raise ValueError("AdamW: every parameter must have requires_grad=True")
        self.lr = float(lr)
        self.beta1, self.beta2 = float(betas[0]), float(betas[1])
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.m = [np.zeros_like(p.values) for p in self.params]
        self.v = [np.zeros_like(p.values) for p in self.params]
        self.step_count = 0

    def step(self, lr: float | None = None) -> None:
        """Apply one update from the parameters' .grad slots."""
        if lr is None:
            lr = self.lr
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** t
        bc2 = 1.0 - b2 ** t
        for p, m, v in zip(self.params, self.m, self.v):
            if m.shape != p.values.shape:
                raise ValueError(
                    f"AdamW: state shape {m.shape} does not match parameter {p.values.shape}")
            g = p.grad
            if g is None:
                m *= b1
                v *= b2
            else:
                m *= b1
                m += (1.0 - b1) * g
                v *= b2
                v += (1.0 - b2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay != 0.0:
                update = update + self.weight_decay * p.values
            p.values -= lr * update

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


# ---------------------------------------------------------------------------
# numeric checking
# ---------------------------------------------------------------------------

def numeric_gradient(loss_fn: Callable[[], Tensor], param: Tensor,
                     h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar-valued closure wrt one tensor."""
    base = param.values
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(loss_fn().values)
            flat[i] = orig - h
            down = float(loss_fn().values)
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * h)
    return grad


def check_gradients(loss_fn: Callable[[], Tensor], params: Sequence[Tensor],
                    h: float = 1e-5, rel_tol: float = 1e-4,
                    abs_tol: float = 1e-6, abs_gate: float = 1e-3) -> list[str]:
    """Compare tape gradients of a scalar closure against finite differences.

    Returns a list of human-readable violations (empty when all entries
    agree). Entries with analytic magnitude below abs_gate are held to the
    absolute tolerance instead of the relative one.
    """
    with tape():
        loss = loss_fn()
        backward(loss)
    failures: list[str] = []
    for pi, p in enumerate(params):
        analytic = p.grad if p.grad is not None else np.zeros_like(p.values)
        numeric = numeric_gradient(loss_fn, p, h=h)
        af = analytic.reshape(-1)
        nf = numeric.reshape(-1)
        for i in range(af.size):
            a, n = af[i], nf[i]
            err = abs(a - n)
            scale = max(abs(a), abs(n))
            if abs(a) < abs_gate and err < abs_tol:
                continue
            if scale > 0 and err / scale < rel_tol:
                continue
            if err == 0.0:
                continue
            failures.append(
                f"param {pi} index {i}: analytic {a!r} vs numeric {n!r}")
        p.grad = None
    return failures
