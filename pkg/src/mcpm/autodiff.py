"""Tape-based automatic differentiation over float64 numpy arrays.

Every primitive records a node on a :class:`Tape` together with two local
rules: a vector-Jacobian product used by :func:`backward` and a
Jacobian-vector product used by :func:`jvp`.  Only first-order derivatives
are supported; that is all the meta-reweighting optimizer needs.

Spatial primitives (``conv2d``, ``maxpool2``, ``upsample2``, ``concat``)
accept either a single ``[c, h, w]`` tensor or a batch ``[n, c, h, w]``.
"""
from __future__ import annotations

import contextlib
import itertools
import weakref
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "Node",
    "Tape",
    "backward",
    "jvp",
    "conv2d",
    "add",
    "sub",
    "mul",
    "neg",
    "relu",
    "sigmoid",
    "log",
    "clamp",
    "concat",
    "upsample2",
    "maxpool2",
    "softmax",
    "channel_sum",
    "sum",
    "mean",
    "record_decisions",
    "replay_decisions",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with a primitive."""


_ids = itertools.count()


class Node:
    __slots__ = (
        "id", "op", "parents", "value", "tangent", "adjoint",
        "_tape", "requires_grad", "_vjp", "_jvp",
    )

    def __init__(self, tape, op, parents, value, vjp=None, jvp=None):
        self.id = next(_ids)
        self.op = op
        self.parents = tuple(parents)
        self.value = value
        self.tangent = None
        self.adjoint = None
        # weak: a strong back-reference would make every graph a reference
        # cycle, and cycles holding large arrays are collected far too late
        self._tape = weakref.ref(tape)
        self._vjp = vjp
        self._jvp = jvp
        if op == "leaf":
            self.requires_grad = True
        else:
            self.requires_grad = any(p.requires_grad for p in self.parents)

    @property
    def tape(self) -> "Tape":
        tape = self._tape()
        if tape is None:
            raise RuntimeError("the tape owning this node no longer exists")
        return tape

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Node(id={self.id}, op={self.op!r}, shape={self.shape})"

    def _lift(self, other) -> "Node":
        if isinstance(other, Node):
            return other
        return self.tape.const(other)

    def __add__(self, other):
        return add(self, self._lift(other))

    def __radd__(self, other):
        return add(self._lift(other), self)

    def __sub__(self, other):
        return sub(self, self._lift(other))

    def __rsub__(self, other):
        return sub(self._lift(other), self)

    def __mul__(self, other):
        return mul(self, self._lift(other))

    def __rmul__(self, other):
        return mul(self._lift(other), self)

    def __neg__(self):
        return neg(self)


class Tape:
    """Ordered record of nodes; parents always precede their children."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.leaf_ids: list[int] = []
        self._by_id: dict[int, Node] = {}

    def __len__(self) -> int:
        return len(self.nodes)

    def __getitem__(self, node_id: int) -> Node:
        return self._by_id[node_id]

    def _push(self, node: Node) -> Node:
        self.nodes.append(node)
        self._by_id[node.id] = node
        return node

    def leaf(self, value) -> Node:
        node = self._push(Node(self, "leaf", (), _as_array(value)))
        self.leaf_ids.append(node.id)
        return node

    def const(self, value) -> Node:
        return self._push(Node(self, "const", (), _as_array(value)))

    def op(self, name, parents, value, vjp, jvp) -> Node:
        for p in parents:
            if p.tape is not self:
                raise ValueError(f"{name}: operands belong to different tapes")
        return self._push(Node(self, name, parents, value, vjp, jvp))


def _as_array(value) -> np.ndarray:
    arr = np.array(value, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor values must be finite")
    return arr


# -- decision record/replay for non-smooth primitives -----------------------
#
# relu masks, maxpool winners and clamp interiors are "decisions".  Recording
# them at one point and replaying them at a nearby point evaluates the smooth
# branch function active at the first point, which is what a finite-difference
# oracle needs when a stencil straddles a kink.

class _DecisionLog:
    def __init__(self, mode: str, entries: list | None = None):
        self.mode = mode
        self.entries = entries if entries is not None else []
        self.cursor = 0


_active_log: list[_DecisionLog] = []


@contextlib.contextmanager
def record_decisions() -> Iterator[list]:
    log = _DecisionLog("record")
    _active_log.append(log)
    try:
        yield log.entries
    finally:
        _active_log.pop()


@contextlib.contextmanager
def replay_decisions(entries: list) -> Iterator[None]:
    log = _DecisionLog("replay", entries)
    _active_log.append(log)
    try:
        yield
    finally:
        _active_log.pop()
    if log.cursor != len(entries):
        raise RuntimeError("replayed graph consumed a different number of decisions")


def _decide(compute: Callable[[], np.ndarray]) -> np.ndarray:
    if not _active_log:
        return compute()
    log = _active_log[-1]
    if log.mode == "replay":
        decision = log.entries[log.cursor]
        log.cursor += 1
        return decision
    decision = compute()
    log.entries.append(decision)
    return decision


# -- helpers ----------------------------------------------------------------

def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(a: Node, b: Node, name: str) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: cannot broadcast {a.shape} with {b.shape}") from None


def _spatial(x: Node, name: str) -> None:
    if x.value.ndim not in (3, 4):
        raise ShapeError(f"{name}: expected [c,h,w] or [n,c,h,w], got {x.shape}")


# -- elementwise ------------------------------------------------------------

def add(a: Node, b: Node) -> Node:
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape

    def vjp(g, needs):
        return (_unbroadcast(g, sa) if needs[0] else None,
                _unbroadcast(g, sb) if needs[1] else None)

    def fwd(ta, tb):
        if ta is None:
            return np.broadcast_to(tb, np.broadcast_shapes(sa, sb)).copy()
        if tb is None:
            return np.broadcast_to(ta, np.broadcast_shapes(sa, sb)).copy()
        return ta + tb

    return a.tape.op("add", (a, b), a.value + b.value, vjp, fwd)


def sub(a: Node, b: Node) -> Node:
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    out_shape = np.broadcast_shapes(sa, sb)

    def vjp(g, needs):
        return (_unbroadcast(g, sa) if needs[0] else None,
                _unbroadcast(-g, sb) if needs[1] else None)

    def fwd(ta, tb):
        if ta is None:
            return np.broadcast_to(-tb, out_shape).copy()
        if tb is None:
            return np.broadcast_to(ta, out_shape).copy()
        return ta - tb

    return a.tape.op("sub", (a, b), a.value - b.value, vjp, fwd)


def mul(a: Node, b: Node) -> Node:
    _broadcast_shape(a, b, "mul")
    av, bv = a.value, b.value

    def vjp(g, needs):
        return (_unbroadcast(g * bv, av.shape) if needs[0] else None,
                _unbroadcast(g * av, bv.shape) if needs[1] else None)

    def fwd(ta, tb):
        out = None
        if ta is not None:
            out = ta * bv
        if tb is not None:
            out = av * tb if out is None else out + av * tb
        return out

    return a.tape.op("mul", (a, b), av * bv, vjp, fwd)


def neg(a: Node) -> Node:
    return a.tape.op("neg", (a,), -a.value,
                     lambda g, needs: (-g,), lambda t: -t)


def relu(x: Node) -> Node:
    xv = x.value
    on = _decide(lambda: xv > 0)
    return x.tape.op("relu", (x,), np.where(on, xv, 0.0),
                     lambda g, needs: (np.where(on, g, 0.0),),
                     lambda t: np.where(on, t, 0.0))


def sigmoid(x: Node) -> Node:
    s = 0.5 * (1.0 + np.tanh(0.5 * x.value))
    ds = s * (1.0 - s)
    return x.tape.op("sigmoid", (x,), s,
                     lambda g, needs: (g * ds,), lambda t: t * ds)


def log(x: Node) -> Node:
    xv = x.value
    if np.any(xv <= 0):
        raise ValueError("log: argument must be strictly positive")
    inv = 1.0 / xv
    return x.tape.op("log", (x,), np.log(xv),
                     lambda g, needs: (g * inv,), lambda t: t * inv)


def clamp(x: Node, lo: float, hi: float) -> Node:
    if not lo < hi:
        raise ValueError(f"clamp: need lo < hi, got [{lo}, {hi}]")
    xv = x.value
    inside = _decide(lambda: (xv > lo) & (xv < hi))
    out = np.where(inside, xv, np.clip(xv, lo, hi))
    return x.tape.op("clamp", (x,), out,
                     lambda g, needs: (np.where(inside, g, 0.0),),
                     lambda t: np.where(inside, t, 0.0))


def softmax(x: Node, axis: int = -3) -> Node:
    z = x.value - x.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def vjp(g, needs):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    def fwd(t):
        return s * (t - (t * s).sum(axis=axis, keepdims=True))

    return x.tape.op("softmax", (x,), s, vjp, fwd)


# -- reductions -------------------------------------------------------------

def sum(x: Node) -> Node:  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    return x.tape.op("sum", (x,), np.array(x.value.sum()),
                     lambda g, needs: (np.broadcast_to(g, shape).copy(),),
                     lambda t: np.array(t.sum()))


def mean(x: Node) -> Node:
    shape, n = x.shape, x.value.size
    return x.tape.op("mean", (x,), np.array(x.value.sum() / n),
                     lambda g, needs: (np.broadcast_to(g / n, shape).copy(),),
                     lambda t: np.array(t.sum() / n))


def channel_sum(x: Node) -> Node:
    """Sum over the channel axis, keeping it as extent 1."""
    _spatial(x, "channel_sum")
    shape = x.shape
    return x.tape.op("channel_sum", (x,), x.value.sum(axis=-3, keepdims=True),
                     lambda g, needs: (np.broadcast_to(g, shape).copy(),),
                     lambda t: t.sum(axis=-3, keepdims=True))


# -- spatial ----------------------------------------------------------------

def concat(xs: Sequence[Node]) -> Node:
    """Concatenate along the channel axis."""
    if not xs:
        raise ShapeError("concat: need at least one operand")
    for x in xs:
        _spatial(x, "concat")
    ref = xs[0].shape
    for x in xs[1:]:
        if x.value.ndim != len(ref) or x.shape[:-3] != ref[:-3] or x.shape[-2:] != ref[-2:]:
            raise ShapeError(f"concat: incompatible shapes {ref} and {x.shape}")
    splits = np.cumsum([x.shape[-3] for x in xs])[:-1]

    def vjp(g, needs):
        return tuple(np.split(g, splits, axis=-3))

    def fwd(*ts):
        parts = [np.zeros(x.shape) if t is None else t for x, t in zip(xs, ts)]
        return np.concatenate(parts, axis=-3)

    value = np.concatenate([x.value for x in xs], axis=-3)
    return xs[0].tape.op("concat", tuple(xs), value, vjp, fwd)


def upsample2(x: Node) -> Node:
    """Nearest-neighbour upsampling by a factor of two in h and w."""
    _spatial(x, "upsample2")
    h, w = x.shape[-2:]

    def up(a):
        return np.repeat(np.repeat(a, 2, axis=-2), 2, axis=-1)

    def vjp(g, needs):
        return (g.reshape(*g.shape[:-2], h, 2, w, 2).sum(axis=(-3, -1)),)

    return x.tape.op("upsample2", (x,), up(x.value), vjp, up)


def maxpool2(x: Node) -> Node:
    """2x2 max pooling with stride 2; ties go to the first element."""
    _spatial(x, "maxpool2")
    *lead, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2: spatial extents must be even, got {(h, w)}")
    lead = tuple(lead)

    def blocks(a):
        a = a.reshape(*lead, h // 2, 2, w // 2, 2).swapaxes(-3, -2)
        return a.reshape(*lead, h // 2, w // 2, 4)

    def unblocks(b):
        b = b.reshape(*lead, h // 2, w // 2, 2, 2).swapaxes(-3, -2)
        return b.reshape(*lead, h, w)

    v = blocks(x.value)
    idx = _decide(lambda: np.argmax(v, axis=-1))[..., None]
    out = np.take_along_axis(v, idx, axis=-1)[..., 0]

    def vjp(g, needs):
        full = np.zeros(v.shape)
        np.put_along_axis(full, idx, g[..., None], axis=-1)
        return (unblocks(full),)

    def fwd(t):
        return np.take_along_axis(blocks(t), idx, axis=-1)[..., 0]

    return x.tape.op("maxpool2", (x,), out, vjp, fwd)


def _im2col(x4: np.ndarray, kh: int, kw: int, pad: int) -> np.ndarray:
    """Columns of shape ``[c*kh*kw, n*ho*wo]`` for a ``[n,c,h,w]`` input."""
    n, c, h, w = x4.shape
    ho, wo = h + 2 * pad - kh + 1, w + 2 * pad - kw + 1
    # channel-major buffer: conv outputs are already laid out this way
    xp = np.zeros((c, n, h + 2 * pad, w + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + w] = x4.transpose(1, 0, 2, 3)
    cols = np.empty((c, kh, kw, n, ho, wo))
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, :, i:i + ho, j:j + wo]
    return cols.reshape(c * kh * kw, -1)


def _col2im(cols: np.ndarray, shape: tuple, kh: int, kw: int, pad: int) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add columns back to ``shape``."""
    n, c, h, w = shape
    ho, wo = h + 2 * pad - kh + 1, w + 2 * pad - kw + 1
    cols = cols.reshape(c, kh, kw, n, ho, wo)
    xp = np.zeros((c, n, h + 2 * pad, w + 2 * pad))
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + ho, j:j + wo] += cols[:, i, j]
    return xp[:, :, pad:pad + h, pad:pad + w].transpose(1, 0, 2, 3)


def _apply_kernel(cols: np.ndarray, k: np.ndarray, n: int, ho: int, wo: int) -> np.ndarray:
    out = k.reshape(k.shape[0], -1) @ cols
    return out.reshape(k.shape[0], n, ho, wo).transpose(1, 0, 2, 3)


def conv2d(x: Node, kernel: Node, bias: Node, padding: int = 0) -> Node:
    """Cross-correlation with zero padding and per-output-channel bias."""
    _spatial(x, "conv2d")
    if kernel.value.ndim != 4:
        raise ShapeError(f"conv2d: kernel must be [c_out,c_in,kh,kw], got {kernel.shape}")
    co, ci, kh, kw = kernel.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel extents must be odd, got {(kh, kw)}")
    if bias.shape != (co,):
        raise ShapeError(f"conv2d: bias must be [{co}], got {bias.shape}")
    if padding < 0:
        raise ShapeError("conv2d: padding must be non-negative")
    batched = x.value.ndim == 4
    x4 = x.value if batched else x.value[None]
    if x4.shape[1] != ci:
        raise ShapeError(f"conv2d: input has {x4.shape[1]} channels, kernel expects {ci}")
    n, _, h, w = x4.shape
    ho, wo = h + 2 * padding - kh + 1, w + 2 * padding - kw + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: output extent {(ho, wo)} is empty")

    k = kernel.value
    cols = _im2col(x4, kh, kw, padding)
    out = _apply_kernel(cols, k, n, ho, wo) + bias.value[None, :, None, None]

    def squeeze(a):
        return a if batched else a[0]

    def vjp(g, needs):
        g4 = g if batched else g[None]
        g2 = g4.transpose(1, 0, 2, 3).reshape(co, -1)
        dx = dk = db = None
        if needs[0]:
            dx = squeeze(_col2im(k.reshape(co, -1).T @ g2, x4.shape, kh, kw, padding))
        if needs[1]:
            dk = (g2 @ cols.T).reshape(co, ci, kh, kw)
        if needs[2]:
            db = g2.sum(axis=1)
        return dx, dk, db

    def fwd(tx, tk, tb):
        t = None
        if tx is not None:
            tcols = _im2col(tx if batched else tx[None], kh, kw, padding)
            t = _apply_kernel(tcols, k, n, ho, wo)
        if tk is not None:
            part = _apply_kernel(cols, tk, n, ho, wo)
            t = part if t is None else t + part
        if tb is not None:
            part = np.broadcast_to(tb[None, :, None, None], (n, co, ho, wo))
            t = part.copy() if t is None else t + part
        return squeeze(t)

    return x.tape.op("conv2d", (x, kernel, bias), squeeze(out), vjp, fwd)


# -- drivers ----------------------------------------------------------------

def backward(tape: Tape, output: Node) -> dict[int, np.ndarray]:
    """Reverse pass; returns the adjoint of every leaf of ``tape``."""
    if output.tape is not tape:
        raise ValueError("output node does not belong to this tape")
    if output.value.size != 1:
        raise ShapeError(f"backward: output must be scalar, got shape {output.shape}")
    for node in tape.nodes:
        node.adjoint = None
    output.adjoint = np.ones(output.shape)
    stop = tape.nodes.index(output) if tape.nodes[-1] is not output else len(tape.nodes) - 1
    for node in reversed(tape.nodes[:stop + 1]):
        g = node.adjoint
        if g is None or node._vjp is None or not node.requires_grad:
            continue
        needs = tuple(p.requires_grad for p in node.parents)
        for parent, pg in zip(node.parents, node._vjp(g, needs)):
            if pg is None or not parent.requires_grad:
                continue
            parent.adjoint = pg if parent.adjoint is None else parent.adjoint + pg
    grads = {}
    for lid in tape.leaf_ids:
        leaf = tape[lid]
        grads[lid] = leaf.adjoint if leaf.adjoint is not None else np.zeros(leaf.shape)
    return grads


class _Tangents(dict):
    def __init__(self, tape: Tape):
        super().__init__()
        self._tape = tape

    def __missing__(self, node_id):
        return np.zeros(self._tape[node_id].shape)


def jvp(tape: Tape, direction: dict[int, np.ndarray]) -> dict[int, np.ndarray]:
    """Forward-mode pass along ``direction`` (leaf id -> tensor).

    Leaves missing from ``direction`` get a zero tangent.  The returned
    mapping covers every node of the tape.
    """
    leaf_set = set(tape.leaf_ids)
    for lid, d in direction.items():
        if lid not in leaf_set:
            raise ValueError(f"jvp: {lid} is not a leaf of this tape")
        if np.shape(d) != tape[lid].shape:
            raise ShapeError(f"jvp: direction for leaf {lid} has shape {np.shape(d)}, "
                             f"leaf has {tape[lid].shape}")
    out = _Tangents(tape)
    for node in tape.nodes:
        if node.op == "leaf":
            d = direction.get(node.id)
            node.tangent = None if d is None else np.asarray(d, dtype=np.float64)
        elif node.op == "const":
            node.tangent = None
        else:
            ts = [p.tangent for p in node.parents]
            node.tangent = None if all(t is None for t in ts) else node._jvp(*ts)
        if node.tangent is not None:
            out[node.id] = node.tangent
    return out


def leaves(tape: Tape) -> Iterable[Node]:
    return (tape[i] for i in tape.leaf_ids)
