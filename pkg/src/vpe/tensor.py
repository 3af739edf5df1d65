"""Small reverse-mode autodiff over numpy arrays, Adam, the residual MLP and checkpoints.

Operations record themselves on the innermost active :class:`Tape` whenever
one of their operands requires a gradient::

    with Tape() as tape:
        loss = mean(square(mlp_forward(net, x)))
    grads = tape.backward(loss, net.parameters())
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

_TAPES: list = []


class Tensor:
    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=float)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data, False, self.name)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def param(data, name=None):
    return Tensor(np.array(data, dtype=float), requires_grad=True, name=name)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of primitive applications; reverse traversal gives gradients."""

    def __init__(self):
        self.ops = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)

    def record(self, out, inputs, vjp):
        self.ops.append((out, inputs, vjp))

    def backward(self, loss, params=None):
        """Gradients of the scalar ``loss``.

        Returns a dict keyed by tensor. When ``params`` is given, every listed
        parameter gets an entry, zero-filled if the loss does not reach it.
        """
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        grads = {id(loss): np.ones_like(loss.data)}
        leaves = {}
        produced = {id(out) for out, _, _ in self.ops}
        for out, inputs, vjp in reversed(self.ops):
            g = grads.get(id(out))
            if g is None:
                continue
            for x, gx in zip(inputs, vjp(g)):
                if not x.requires_grad:
                    continue
                grads[id(x)] = grads[id(x)] + gx if id(x) in grads else gx
                if id(x) not in produced:
                    leaves[id(x)] = x
        if params is None:
            return {x: grads[k] for k, x in leaves.items()}
        return {p: grads.get(id(p), np.zeros_like(p.data)) for p in params}


def _make(data, inputs, vjp):
    out = Tensor(data)
    if _TAPES and any(x.requires_grad for x in inputs):
        out.requires_grad = True
        _TAPES[-1].record(out, inputs, vjp)
    return out


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# primitives

def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("add", a, b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("sub", a, b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("mul", a, b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def scale(a, c):
    a = _as_tensor(a)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def relu(a):
    a = _as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def square(a):
    a = _as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def exp(a):
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def tanh(a):
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def mean(a):
    a = _as_tensor(a)
    n = a.data.size
    return _make(np.array(a.data.mean()), (a,), lambda g: (np.full(a.shape, g / n),))


def sum(a, axis=None):
    a = _as_tensor(a)
    if axis is None:
        return _make(np.array(a.data.sum()), (a,), lambda g: (np.full(a.shape, g),))
    out = a.data.sum(axis=axis)
    return _make(out, (a,), lambda g: (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),))


def concat(tensors, axis=-1):
    ts = [_as_tensor(t) for t in tensors]
    shapes = [t.shape for t in ts]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ValueError(f"concat: incompatible shapes {shapes}") from None
    splits = np.cumsum([s[axis] for s in shapes])[:-1]
    return _make(out, tuple(ts), lambda g: tuple(np.split(g, splits, axis=axis)))


def take_rows(a, idx):
    """Row gather ``a[idx]``; repeated indices accumulate in the gradient."""
    a = _as_tensor(a)
    idx = np.asarray(idx)

    def vjp(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)
    return _make(a.data[idx], (a,), vjp)


# ---------------------------------------------------------------------------
# residual MLP

@dataclass
class Network:
    """Input projection, pre-activation residual blocks, ReLU, linear head."""

    weights: list
    biases: list
    depth: int
    width: int
    input_dim: int
    output_dim: int

    def parameters(self):
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def named_arrays(self, prefix):
        named = {}
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            named[f"{prefix}.layer{k}.weight"] = W.data
            named[f"{prefix}.layer{k}.bias"] = b.data
        return named

    def load_arrays(self, named, prefix):
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            W.data = np.array(named[f"{prefix}.layer{k}.weight"], dtype=float).reshape(W.shape)
            b.data = np.array(named[f"{prefix}.layer{k}.bias"], dtype=float).reshape(b.shape)

    def copy(self, requires_grad=True):
        return Network([Tensor(W.data.copy(), requires_grad) for W in self.weights],
                       [Tensor(b.data.copy(), requires_grad) for b in self.biases],
                       self.depth, self.width, self.input_dim, self.output_dim)

    def frozen(self):
        """View sharing parameter buffers but excluded from gradient recording."""
        return Network([Tensor(W.data) for W in self.weights], [Tensor(b.data) for b in self.biases],
                       self.depth, self.width, self.input_dim, self.output_dim)

    @property
    def head(self):
        return self.weights[-1], self.biases[-1]


def init_network(input_dim, output_dim, depth=4, width=64, rng=None, head_scale=1.0):
    """He-initialised residual MLP with ``depth`` linear layers.

    ``depth`` must be even: projection + (depth - 2) / 2 two-layer blocks + head.
    """
    if depth < 2 or depth % 2:
        raise ValueError(f"depth must be an even number >= 2, got {depth}")
    rng = np.random.default_rng(0) if rng is None else rng
    dims = [(input_dim, width)] + [(width, width)] * (depth - 2) + [(width, output_dim)]
    weights, biases = [], []
    for k, (fan_in, fan_out) in enumerate(dims):
        std = np.sqrt(2.0 / fan_in)
        if k == len(dims) - 1:
            std *= head_scale
        elif k > 0 and k % 2 == 0:
            # second layer of each block starts small so blocks begin near identity
            std *= 0.1
        weights.append(param(rng.normal(0.0, std, size=(fan_in, fan_out))))
        biases.append(param(np.zeros(fan_out)))
    return Network(weights, biases, depth, width, input_dim, output_dim)


def mlp_forward(net, x):
    x = _as_tensor(x)
    if x.data.ndim != 2 or x.shape[1] != net.input_dim:
        raise ValueError(f"mlp_forward: expected (batch, {net.input_dim}) input, got {x.shape}")
    W, b = net.weights, net.biases
    h = add(matmul(x, W[0]), b[0])
    for k in range(1, net.depth - 1, 2):
        u = add(matmul(relu(h), W[k]), b[k])
        u = add(matmul(relu(u), W[k + 1]), b[k + 1])
        h = add(h, u)
    return add(matmul(relu(h), W[-1]), b[-1])


def mlp_apply(net, x):
    """Gradient-free forward on plain arrays (used for rollouts and targets)."""
    W = [w.data for w in net.weights]
    b = [v.data for v in net.biases]
    h = x @ W[0] + b[0]
    for k in range(1, net.depth - 1, 2):
        u = np.maximum(h, 0.0) @ W[k] + b[k]
        h = h + np.maximum(u, 0.0) @ W[k + 1] + b[k + 1]
    return np.maximum(h, 0.0) @ W[-1] + b[-1]


# ---------------------------------------------------------------------------
# optimisation

@dataclass
class AdamState:
    params: list
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def __post_init__(self):
        if not self.m:
            self.m = [np.zeros_like(p.data) for p in self.params]
            self.v = [np.zeros_like(p.data) for p in self.params]


def adam_step(state, grads):
    """Adam with bias correction and decoupled weight decay, in place.

    ``grads`` is a dict keyed by parameter tensor (as returned by
    :meth:`Tape.backward`) or a list aligned with ``state.params``.
    """
    if isinstance(grads, dict):
        grads = [grads[p] for p in state.params]
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("adam_step: non-finite gradient")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, m, v in zip(state.params, grads, state.m, state.v):
        if state.weight_decay:
            p.data *= 1.0 - state.lr * state.weight_decay
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


def adam_arrays(state, prefix):
    return {f"{prefix}.m{k}": m for k, m in enumerate(state.m)} | \
           {f"{prefix}.v{k}": v for k, v in enumerate(state.v)} | \
           {f"{prefix}.step": np.array([state.step], dtype=float)}


# ---------------------------------------------------------------------------
# checkpoint format: magic, version, section table, then float32 payloads

CKPT_MAGIC = b"VPEC"
CKPT_VERSION = 1


def save_checkpoint(path, sections):
    """Write ``{name: array}`` as named flat float32 sections."""
    names = sorted(sections)
    table = bytearray()
    payload = bytearray()
    for name in names:
        arr = np.ascontiguousarray(np.asarray(sections[name], dtype="<f4"))
        key = name.encode("utf-8")
        table += struct.pack("<H", len(key)) + key
        table += struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        table += struct.pack("<QQ", len(payload), arr.size)
        payload += arr.tobytes()
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(names)))
        f.write(table)
        f.write(payload)


def load_checkpoint(path):
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (magic {blob[:4]!r})")
    version, n = struct.unpack_from("<II", blob, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    entries = []
    for _ in range(n):
        (klen,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos:pos + klen].decode("utf-8")
        pos += klen
        (ndim,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}I", blob, pos)
        pos += 4 * ndim
        offset, size = struct.unpack_from("<QQ", blob, pos)
        pos += 16
        entries.append((name, shape, offset, size))
    out = {}
    for name, shape, offset, size in entries:
        arr = np.frombuffer(blob, dtype="<f4", count=size, offset=pos + offset)
        out[name] = arr.astype(float).reshape(shape)
    return out
