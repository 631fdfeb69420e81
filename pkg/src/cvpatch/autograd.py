"""Reverse-mode automatic differentiation on a tape.

Complex values are differentiated as pairs of independent real variables: the
gradient attached to a complex node is a ``ComplexTensor`` whose real part is
dL/d(real) and whose imaginary part is dL/d(imag). Every loss is a real scalar,
so no Wirtinger calculus is involved.

One ``Tape`` records one forward pass. Nodes are appended in creation order,
which is a topological order, and ``Tape.backward`` sweeps them in reverse.
"""

from __future__ import annotations

import json
import struct
from typing import Callable, Iterable, Sequence

import numpy as np

from .ctensor import ComplexTensor, ShapeError, broadcast_shape, read_bundle, write_bundle


class GraphError(RuntimeError):
    """Malformed graph: dangling inputs, non-scalar roots and the like."""


def _zeros_like(v):
    if isinstance(v, ComplexTensor):
        return ComplexTensor(np.zeros_like(v.real), np.zeros_like(v.imag))
    return np.zeros_like(v)


def _accum(a, b):
    if a is None:
        return b
    if isinstance(a, ComplexTensor):
        return ComplexTensor(a.real + b.real, a.imag + b.imag)
    return a + b


class Parameter:
    """A named trainable tensor with an accumulated gradient."""

    def __init__(self, name: str, value, trainable: bool = True):
        self.name = name
        self.value = value
        self.trainable = trainable
        self.grad = _zeros_like(value)

    @property
    def is_complex(self) -> bool:
        return isinstance(self.value, ComplexTensor)

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size * (2 if self.is_complex else 1)

    def parts(self) -> list[np.ndarray]:
        v = self.value
        return [v.real, v.imag] if isinstance(v, ComplexTensor) else [v]

    def grad_parts(self) -> list[np.ndarray]:
        g = self.grad
        return [g.real, g.imag] if isinstance(g, ComplexTensor) else [g]

    def set_parts(self, parts: Sequence[np.ndarray]) -> None:
        if self.is_complex:
            self.value = ComplexTensor(parts[0], parts[1])
        else:
            self.value = parts[0]

    def zero_grad(self) -> None:
        self.grad = _zeros_like(self.value)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape}, complex={self.is_complex})"


class Node:
    __slots__ = ("id", "op_kind", "input_ids", "value", "backward_rule", "tape", "param",
                 "kink_margin")

    def __init__(self, tape, id, op_kind, input_ids, value, backward_rule, param=None,
                 kink_margin=None):
        self.tape = tape
        self.id = id
        self.op_kind = op_kind
        self.input_ids = tuple(input_ids)
        self.value = value
        self.backward_rule = backward_rule
        self.param = param
        # distance of the forward inputs to a non-differentiable set (relu kink,
        # pooling tie, ...); None for smooth ops
        self.kink_margin = kink_margin

    @property
    def shape(self):
        return self.value.shape

    @property
    def is_complex(self) -> bool:
        return isinstance(self.value, ComplexTensor)

    def __repr__(self):
        return f"Node(id={self.id}, op={self.op_kind}, shape={self.shape})"

    # convenience arithmetic; dispatches on real vs complex
    def __add__(self, other):
        return cadd(self, other) if self.is_complex else add(self, other)

    def __sub__(self, other):
        return csub(self, other) if self.is_complex else sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return cmul(self, other) if self.is_complex else mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


class Tape:
    def __init__(self):
        self.nodes: list[Node] = []
        self.parameter_ids: set[int] = set()
        self._param_nodes: dict[int, Node] = {}

    def __len__(self):
        return len(self.nodes)

    def _append(self, op_kind, input_ids, value, backward_rule, param=None, kink_margin=None):
        node = Node(self, len(self.nodes), op_kind, input_ids, value, backward_rule, param,
                    kink_margin)
        self.nodes.append(node)
        return node

    def constant(self, value) -> Node:
        """Leaf node that receives no gradient."""
        if not isinstance(value, ComplexTensor):
            value = np.asarray(value)
            if value.dtype.kind != "f":
                value = value.astype(np.float64)
        return self._append("const", (), value, None)

    def param(self, p: Parameter) -> Node:
        """Leaf node for a parameter; the same parameter maps to one node per tape."""
        key = id(p)
        node = self._param_nodes.get(key)
        if node is None:
            node = self._append("param", (), p.value, None, param=p)
            self._param_nodes[key] = node
            if p.trainable:
                self.parameter_ids.add(node.id)
        return node

    def record(self, op_kind: str, inputs: Iterable, value, backward_rule: Callable,
               kink_margin=None) -> Node:
        ids = []
        for x in inputs:
            if isinstance(x, Node):
                if x.tape is not self:
                    raise GraphError(f"input node {x.id} belongs to another tape")
                ids.append(x.id)
            else:
                i = int(x)
                if not 0 <= i < len(self.nodes):
                    raise GraphError(f"unknown input id {i}")
                ids.append(i)
        return self._append(op_kind, ids, value, backward_rule, kink_margin=kink_margin)

    def release(self) -> None:
        """Drop recorded nodes and closures so large buffers free without a GC pass."""
        for node in self.nodes:
            node.backward_rule = None
        self.nodes.clear()
        self._param_nodes.clear()
        self.parameter_ids.clear()

    def min_kink_margin(self) -> float:
        margins = [n.kink_margin for n in self.nodes if n.kink_margin is not None]
        return min(margins) if margins else float("inf")

    def backward(self, root: Node) -> dict[int, object]:
        """Reverse sweep from a real scalar root.

        Returns {node id: gradient} for trainable parameter nodes and adds the
        same gradients into ``Parameter.grad``.
        """
        if root.tape is not self:
            raise GraphError("root belongs to another tape")
        if root.is_complex or np.size(root.value) != 1:
            raise GraphError(f"backward needs a real scalar root, got shape {root.shape}")
        grads: dict[int, object] = {root.id: np.ones_like(root.value)}
        out: dict[int, object] = {}
        for node in reversed(self.nodes[: root.id + 1]):
            g = grads.pop(node.id, None)
            if g is None:
                continue
            if node.param is not None:
                if node.id in self.parameter_ids:
                    out[node.id] = g
                    node.param.grad = _accum(node.param.grad, g)
                continue
            if node.backward_rule is None:
                continue
            in_grads = node.backward_rule(g)
            for i, gi in zip(node.input_ids, in_grads):
                if gi is not None:
                    grads[i] = _accum(grads.get(i), gi)
        return out


# -- helpers ------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _c_unbroadcast(g: ComplexTensor, shape) -> ComplexTensor:
    return ComplexTensor(_unbroadcast(g.real, shape), _unbroadcast(g.imag, shape))


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Node):
            return x.tape
    raise GraphError("no node among the inputs")


def _node(tape: Tape, x, like=None) -> Node:
    if isinstance(x, Node):
        return x
    if like is not None and isinstance(like, Node) and not like.is_complex and np.ndim(x) == 0:
        x = np.asarray(x, dtype=like.value.dtype)
    return tape.constant(x)


def _real(x: Node, op: str):
    if x.is_complex:
        raise TypeError(f"{op} expects a real node, got complex")
    return x.value


def _cplx(x: Node, op: str) -> ComplexTensor:
    if not x.is_complex:
        raise TypeError(f"{op} expects a complex node, got real")
    return x.value


# -- real primitives (numpy broadcasting) -------------------------------


def add(a, b) -> Node:
    t = _tape_of(a, b)
    a, b = _node(t, a, b), _node(t, b, a)
    av, bv = _real(a, "add"), _real(b, "add")
    return t.record("add", (a, b), av + bv,
                    lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)))


def sub(a, b) -> Node:
    t = _tape_of(a, b)
    a, b = _node(t, a, b), _node(t, b, a)
    av, bv = _real(a, "sub"), _real(b, "sub")
    return t.record("sub", (a, b), av - bv,
                    lambda g: (_unbroadcast(g, av.shape), _unbroadcast(-g, bv.shape)))


def mul(a, b) -> Node:
    t = _tape_of(a, b)
    a, b = _node(t, a, b), _node(t, b, a)
    av, bv = _real(a, "mul"), _real(b, "mul")
    return t.record("mul", (a, b), av * bv,
                    lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def div(a, b) -> Node:
    t = _tape_of(a, b)
    a, b = _node(t, a, b), _node(t, b, a)
    av, bv = _real(a, "div"), _real(b, "div")
    out = av / bv
    return t.record("div", (a, b), out,
                    lambda g: (_unbroadcast(g / bv, av.shape),
                               _unbroadcast(-g * out / bv, bv.shape)))


def scale(x: Node, c: float) -> Node:
    if x.is_complex:
        v = x.value
        return x.tape.record("cscale", (x,), ComplexTensor(v.real * c, v.imag * c),
                             lambda g: (ComplexTensor(g.real * c, g.imag * c),))
    return x.tape.record("scale", (x,), x.value * c, lambda g: (g * c,))


def square(x: Node) -> Node:
    v = _real(x, "square")
    return x.tape.record("square", (x,), v * v, lambda g: (2.0 * g * v,))


def sqrt(x: Node) -> Node:
    v = _real(x, "sqrt")
    out = np.sqrt(v)
    return x.tape.record("sqrt", (x,), out, lambda g: (g * 0.5 / out,))


def exp(x: Node) -> Node:
    out = np.exp(_real(x, "exp"))
    return x.tape.record("exp", (x,), out, lambda g: (g * out,))


def sigmoid(x: Node) -> Node:
    v = _real(x, "sigmoid")
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return x.tape.record("sigmoid", (x,), out, lambda g: (g * out * (1.0 - out),))


def relu(x: Node) -> Node:
    v = _real(x, "relu")
    mask = v > 0
    return x.tape.record("relu", (x,), np.where(mask, v, 0.0).astype(v.dtype),
                         lambda g: (g * mask,), kink_margin=float(np.abs(v).min()) if v.size else None)


def minimum(a: Node, b: Node) -> Node:
    """Elementwise min; ties send the gradient to ``a``."""
    av, bv = _real(a, "minimum"), _real(b, "minimum")
    take_a = av <= bv
    return a.tape.record("minimum", (a, b), np.where(take_a, av, bv),
                         lambda g: (g * take_a, g * ~take_a),
                         kink_margin=float(np.abs(av - bv).min()) if av.size else None)


def sum(x: Node, axis=None, keepdims: bool = False) -> Node:  # noqa: A001
    v = _real(x, "sum")
    out = np.sum(v, axis=axis, keepdims=keepdims)

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, v.shape).copy(),)

    return x.tape.record("sum", (x,), out, rule)


def mean(x: Node, axis=None, keepdims: bool = False) -> Node:
    v = _real(x, "mean")
    if axis is None:
        n = v.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([v.shape[a] for a in axes]))
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x: Node, shape) -> Node:
    if x.is_complex:
        return creshape(x, shape)
    v = x.value
    return x.tape.record("reshape", (x,), v.reshape(shape), lambda g: (g.reshape(v.shape),))


def concat(xs: Sequence[Node], axis: int = -1) -> Node:
    t = _tape_of(*xs)
    if any(x.is_complex for x in xs):
        return cconcat(xs, axis)
    vals = [x.value for x in xs]
    out = np.concatenate(vals, axis=axis)
    bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]
    return t.record("concat", xs, out, lambda g: tuple(np.split(g, bounds, axis=axis)))


def take(x: Node, index) -> Node:
    """Basic-slicing getitem on a real node."""
    v = _real(x, "take")

    def rule(g):
        full = np.zeros_like(v)
        full[index] = g
        return (full,)

    return x.tape.record("take", (x,), v[index], rule)


def matmul(x: Node, w: Node) -> Node:
    xv, wv = _real(x, "matmul"), _real(w, "matmul")
    return x.tape.record("matmul", (x, w), xv @ wv, lambda g: (g @ wv.T, xv.T @ g))


def mse(pred: Node, target) -> Node:
    t = pred.tape
    target = _node(t, target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse length mismatch {pred.shape} vs {target.shape}")
    return mean(square(sub(pred, target)))


# -- complex primitives --------------------------------------------------


def _complex_node(t: Tape, x) -> Node:
    if isinstance(x, Node):
        return x
    if not isinstance(x, ComplexTensor):
        x = ComplexTensor.from_real(x)
    return t.constant(x)


def cadd(a, b) -> Node:
    t = _tape_of(a, b)
    a, b = _complex_node(t, a), _complex_node(t, b)
    av, bv = _cplx(a, "cadd"), _cplx(b, "cadd")
    broadcast_shape(av.shape, bv.shape)
    out = ComplexTensor(av.real + bv.real, av.imag + bv.imag)
    return t.record("cadd", (a, b), out,
                    lambda g: (_c_unbroadcast(g, av.shape), _c_unbroadcast(g, bv.shape)))


def csub(a, b) -> Node:
    t = _tape_of(a, b)
    a, b = _complex_node(t, a), _complex_node(t, b)
    av, bv = _cplx(a, "csub"), _cplx(b, "csub")
    broadcast_shape(av.shape, bv.shape)
    out = ComplexTensor(av.real - bv.real, av.imag - bv.imag)
    return t.record("csub", (a, b), out,
                    lambda g: (_c_unbroadcast(g, av.shape), _c_unbroadcast(-g, bv.shape)))


def cmul(a, b) -> Node:
    t = _tape_of(a, b)
    a, b = _complex_node(t, a), _complex_node(t, b)
    av, bv = _cplx(a, "cmul"), _cplx(b, "cmul")
    broadcast_shape(av.shape, bv.shape)
    out = ComplexTensor(av.real * bv.real - av.imag * bv.imag,
                        av.real * bv.imag + av.imag * bv.real)

    def rule(g):
        # d/d(a_r) = g_r b_r + g_i b_i ; d/d(a_i) = -g_r b_i + g_i b_r  (g * conj(b))
        ga = ComplexTensor(g.real * bv.real + g.imag * bv.imag, g.imag * bv.real - g.real * bv.imag)
        gb = ComplexTensor(g.real * av.real + g.imag * av.imag, g.imag * av.real - g.real * av.imag)
        return _c_unbroadcast(ga, av.shape), _c_unbroadcast(gb, bv.shape)

    return t.record("cmul", (a, b), out, rule)


def modulus(x: Node) -> Node:
    v = _cplx(x, "modulus")
    m = np.hypot(v.real, v.imag)
    safe = np.where(m > 0, m, 1.0)

    def rule(g):
        k = np.where(m > 0, g / safe, 0.0)
        return (ComplexTensor(k * v.real, k * v.imag),)

    return x.tape.record("modulus", (x,), m, rule,
                         kink_margin=float(m.min()) if m.size else None)


def real_part(x: Node) -> Node:
    v = _cplx(x, "real_part")
    return x.tape.record("real_part", (x,), v.real,
                         lambda g: (ComplexTensor(g, np.zeros_like(v.imag)),))


def imag_part(x: Node) -> Node:
    v = _cplx(x, "imag_part")
    return x.tape.record("imag_part", (x,), v.imag,
                         lambda g: (ComplexTensor(np.zeros_like(v.real), g),))


def make_complex(re: Node, im: Node) -> Node:
    t = _tape_of(re, im)
    re, im = _node(t, re), _node(t, im)
    out = ComplexTensor(_real(re, "make_complex"), _real(im, "make_complex"))
    return t.record("make_complex", (re, im), out, lambda g: (g.real, g.imag))


def from_real(x: Node) -> Node:
    v = _real(x, "from_real")
    return x.tape.record("from_real", (x,), ComplexTensor.from_real(v), lambda g: (g.real,))


def creshape(x: Node, shape) -> Node:
    v = _cplx(x, "creshape")
    shape = tuple(shape)
    try:
        out = ComplexTensor(v.real.reshape(shape), v.imag.reshape(shape))
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return x.tape.record("creshape", (x,), out,
                         lambda g: (ComplexTensor(g.real.reshape(v.shape), g.imag.reshape(v.shape)),))


def cconcat(xs: Sequence[Node], axis: int = -1) -> Node:
    t = _tape_of(*xs)
    vals = [_cplx(x, "cconcat") for x in xs]
    try:
        out = ComplexTensor(np.concatenate([v.real for v in vals], axis=axis),
                            np.concatenate([v.imag for v in vals], axis=axis))
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def rule(g):
        rs = np.split(g.real, bounds, axis=axis)
        ims = np.split(g.imag, bounds, axis=axis)
        return tuple(ComplexTensor(r, i) for r, i in zip(rs, ims))

    return t.record("cconcat", xs, out, rule)


def cslice(x: Node, start: int, stop: int, axis: int = 0) -> Node:
    v = _cplx(x, "cslice")
    idx = [slice(None)] * v.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def rule(g):
        r, i = np.zeros_like(v.real), np.zeros_like(v.imag)
        r[idx] = g.real
        i[idx] = g.imag
        return (ComplexTensor(r, i),)

    return x.tape.record("cslice", (x,), v[idx], rule)


def dft2d(x: Node) -> Node:
    """Unnormalized 2D DFT of a real node over its last two axes."""
    v = _real(x, "dft2d")
    h, w = v.shape[-2:]
    z = np.fft.fft2(v, axes=(-2, -1))
    out = ComplexTensor(z.real.astype(v.dtype), z.imag.astype(v.dtype))

    def rule(g):
        # out = F x with F symmetric, so dL/dx = Re(conj(F) g) = H*W * Re(ifft2(g))
        back = np.fft.ifft2(g.real + 1j * g.imag, axes=(-2, -1)).real * (h * w)
        return (back.astype(v.dtype),)

    return x.tape.record("dft2d", (x,), out, rule)


# -- optimizers ------------------------------------------------------------


def zero_grad(params: Iterable[Parameter]) -> None:
    for p in params:
        p.zero_grad()


def _effective_grads(params, weight_decay=0.0, grad_clip=None):
    grads = [[g.copy() for g in p.grad_parts()] for p in params]
    if weight_decay:
        for p, gs in zip(params, grads):
            for g, v in zip(gs, p.parts()):
                g += weight_decay * v
    if grad_clip:
        total = np.sqrt(np.sum([np.sum(g * g) for gs in grads for g in gs]))
        if total > grad_clip:
            k = grad_clip / total
            for gs in grads:
                for g in gs:
                    g *= k
    return grads


def sgd_step(params: Iterable[Parameter], lr: float) -> None:
    for p in params:
        if p.trainable:
            p.set_parts([v - lr * g for v, g in zip(p.parts(), p.grad_parts())])


class Adam:
    """Adam with bias correction. State is keyed by parameter name."""

    def __init__(self, params: Sequence[Parameter], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0, grad_clip: float | None = None):
        self.params = [p for p in params if p.trainable]
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.grad_clip = grad_clip
        self.t = 0
        self.m = {p.name: [np.zeros_like(v) for v in p.parts()] for p in self.params}
        self.v = {p.name: [np.zeros_like(v) for v in p.parts()] for p in self.params}

    def zero_grad(self) -> None:
        zero_grad(self.params)

    def step(self) -> None:
        b1, b2 = self.betas
        self.t += 1
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        grads = _effective_grads(self.params, self.weight_decay, self.grad_clip)
        for p, gs in zip(self.params, grads):
            new_parts = []
            for k, (val, g) in enumerate(zip(p.parts(), gs)):
                m = self.m[p.name][k]
                v = self.v[p.name][k]
                m *= b1
                m += (1.0 - b1) * g
                v *= b2
                v += (1.0 - b2) * (g * g)
                upd = self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
                new_parts.append((val - upd).astype(val.dtype))
            p.set_parts(new_parts)

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.m:
            for k, (m, v) in enumerate(zip(self.m[name], self.v[name])):
                out[f"adam.m.{k}/{name}"] = m
                out[f"adam.v.{k}/{name}"] = v
        out["adam.t"] = np.array([self.t], dtype=np.int64)
        return out

    def load_state_tensors(self, tensors: dict) -> None:
        for name in self.m:
            for k in range(len(self.m[name])):
                self.m[name][k] = np.array(tensors[f"adam.m.{k}/{name}"])
                self.v[name][k] = np.array(tensors[f"adam.v.{k}/{name}"])
        self.t = int(np.asarray(tensors["adam.t"])[0])


def adam_step(params: Sequence[Parameter], optimizer: Adam | None = None, lr: float = 1e-3,
              betas=(0.9, 0.999), eps: float = 1e-8) -> Adam:
    """One Adam update; creates the optimizer state on first use."""
    if optimizer is None:
        optimizer = Adam(params, lr=lr, betas=betas, eps=eps)
    optimizer.step()
    return optimizer


# -- checkpoints ---------------------------------------------------------

CKPT_MAGIC = b"CXCK"
CKPT_VERSION = 1


def save_checkpoint(path, params: Iterable[Parameter], meta: dict,
                    extra: dict | None = None, optimizer: Adam | None = None) -> None:
    """Write ``magic | version | meta json | tensor bundle``.

    The bundle holds ``param/<name>`` entries, optimizer moments and any extra
    tensors (e.g. batch-norm running statistics). Output is byte-deterministic.
    """
    tensors = {f"param/{p.name}": p.value for p in params}
    if optimizer is not None:
        tensors.update(optimizer.state_tensors())
    for k, v in (extra or {}).items():
        tensors[f"extra/{k}"] = v
    raw = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<QQ", CKPT_VERSION, len(raw)))
        f.write(raw)
        write_bundle(f, tensors)


def load_checkpoint(path) -> tuple[dict, dict]:
    with open(path, "rb") as f:
        if f.read(4) != CKPT_MAGIC:
            raise GraphError(f"{path}: not a checkpoint file")
        version, n = struct.unpack("<QQ", f.read(16))
        if version != CKPT_VERSION:
            raise GraphError(f"{path}: unsupported checkpoint version {version}")
        meta = json.loads(f.read(n).decode("utf-8"))
        tensors = read_bundle(f)
    return meta, tensors
