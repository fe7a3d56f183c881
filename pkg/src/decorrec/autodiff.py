"""Minimal reverse-mode autodiff over float64 numpy arrays.

Exactly the operations the two policy networks need, nothing more: matmul,
softmax, attention, a small MLP, and the reductions for a policy-gradient
loss. A tape is recorded per forward pass and freed by backward(); wrap
inference in no_grad() to skip recording entirely.
"""

from __future__ import annotations

import struct
import threading
from contextlib import contextmanager
from math import sqrt

import numpy as np

_tape_state = threading.local()


def _grad_on() -> bool:
    return getattr(_tape_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable tape recording on this thread (tapes are thread-confined)."""
    prev = _grad_on()
    _tape_state.enabled = False
    try:
        yield
    finally:
        _tape_state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad += g

    # Operator sugar; the module-level functions do the work.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple, backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _grad_on() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient back down to the shape it was broadcast from."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, dim in enumerate(shape):
        if dim == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = _make(a.data + b.data, (a, b), None)
    if out._parents:
        def backward(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g, a.data.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g, b.data.shape))
        out._backward = backward
    return out


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = _make(a.data * b.data, (a, b), None)
    if out._parents:
        def backward(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g * b.data, a.data.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g * a.data, b.data.shape))
        out._backward = backward
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul expects 2-D tensors")
    if a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}")
    out = _make(a.data @ b.data, (a, b), None)
    if out._parents:
        def backward(g):
            if a.requires_grad:
                a._accumulate(g @ b.data.T)
            if b.requires_grad:
                b._accumulate(a.data.T @ g)
        out._backward = backward
    return out


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul over the leading axis of two 3-D tensors."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 3 or b.data.ndim != 3:
        raise ValueError("bmm expects 3-D tensors")
    if a.data.shape[0] != b.data.shape[0] or a.data.shape[2] != b.data.shape[1]:
        raise ValueError(f"bmm shape mismatch: {a.data.shape} @ {b.data.shape}")
    out = _make(a.data @ b.data, (a, b), None)
    if out._parents:
        def backward(g):
            if a.requires_grad:
                a._accumulate(g @ b.data.swapaxes(-1, -2))
            if b.requires_grad:
                b._accumulate(a.data.swapaxes(-1, -2) @ g)
        out._backward = backward
    return out


def permute(a: Tensor, axes: tuple) -> Tensor:
    a = _as_tensor(a)
    out = _make(np.ascontiguousarray(a.data.transpose(axes)), (a,), None)
    if out._parents:
        inverse = tuple(np.argsort(axes))
        def backward(g):
            a._accumulate(g.transpose(inverse))
        out._backward = backward
    return out


def transpose(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ValueError("transpose expects a 2-D tensor")
    out = _make(a.data.T.copy(), (a,), None)
    if out._parents:
        def backward(g):
            a._accumulate(g.T)
        out._backward = backward
    return out


def reshape(a: Tensor, shape) -> Tensor:
    a = _as_tensor(a)
    out = _make(a.data.reshape(shape), (a,), None)
    if out._parents:
        def backward(g):
            a._accumulate(g.reshape(a.data.shape))
        out._backward = backward
    return out


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), None)
    if out._parents:
        sizes = [t.data.shape[axis] for t in tensors]
        def backward(g):
            offset = 0
            for t, size in zip(tensors, sizes):
                if t.requires_grad:
                    index = [slice(None)] * g.ndim
                    index[axis] = slice(offset, offset + size)
                    t._accumulate(g[tuple(index)])
                offset += size
        out._backward = backward
    return out


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    a = _as_tensor(a)
    index = [slice(None)] * a.data.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    out = _make(a.data[index].copy(), (a,), None)
    if out._parents:
        def backward(g):
            full = np.zeros_like(a.data)
            full[index] = g
            a._accumulate(full)
        out._backward = backward
    return out


def index_select(a: Tensor, indices) -> Tensor:
    """Gather rows of a 2-D tensor; backward scatter-adds."""
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    out = _make(a.data[idx], (a,), None)
    if out._parents:
        def backward(g):
            full = np.zeros_like(a.data)
            np.add.at(full, idx, g)
            a._accumulate(full)
        out._backward = backward
    return out


def pick(a: Tensor, index: int) -> Tensor:
    """Scalar element of a 1-D tensor."""
    a = _as_tensor(a)
    if a.data.ndim != 1:
        raise ValueError("pick expects a 1-D tensor")
    out = _make(a.data[index].copy(), (a,), None)
    if out._parents:
        def backward(g):
            full = np.zeros_like(a.data)
            full[index] = g
            a._accumulate(full)
        out._backward = backward
    return out


def relu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = _make(np.maximum(a.data, 0.0), (a,), None)
    if out._parents:
        def backward(g):
            a._accumulate(g * (a.data > 0))
        out._backward = backward
    return out


def sigmoid(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    y = 1.0 / (1.0 + np.exp(-a.data))
    out = _make(y, (a,), None)
    if out._parents:
        def backward(g):
            a._accumulate(g * y * (1.0 - y))
        out._backward = backward
    return out


def log(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = _make(np.log(a.data), (a,), None)
    if out._parents:
        def backward(g):
            a._accumulate(g / a.data)
        out._backward = backward
    return out


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    if a.data.shape[axis] == 0:
        raise ValueError("softmax over an empty axis")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = _make(y, (a,), None)
    if out._parents:
        def backward(g):
            dot = (g * y).sum(axis=axis, keepdims=True)
            a._accumulate(y * (g - dot))
        out._backward = backward
    return out


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically safe log probabilities; stays finite however saturated the
    logits are (unlike log(softmax(x)) which underflows to -inf)."""
    a = _as_tensor(a)
    if a.data.shape[axis] == 0:
        raise ValueError("log_softmax over an empty axis")
    y = np_log_softmax(a.data, axis=axis)
    out = _make(y, (a,), None)
    if out._parents:
        p = np.exp(y)
        def backward(g):
            a._accumulate(g - p * g.sum(axis=axis, keepdims=True))
        out._backward = backward
    return out


def np_log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Plain-numpy twin of log_softmax; kept arithmetic-identical so rollout
    log-probs match the training tape bit for bit."""
    shifted = x - x.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def tsum(a: Tensor, axis=None) -> Tensor:
    a = _as_tensor(a)
    out = _make(np.asarray(a.data.sum(axis=axis)), (a,), None)
    if out._parents:
        def backward(g):
            if axis is None:
                a._accumulate(np.broadcast_to(g, a.data.shape).copy())
            else:
                a._accumulate(np.broadcast_to(np.expand_dims(g, axis), a.data.shape).copy())
        out._backward = backward
    return out


def tmean(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size
    out = _make(np.asarray(a.data.mean()), (a,), None)
    if out._parents:
        def backward(g):
            a._accumulate(np.full(a.data.shape, g / n))
        out._backward = backward
    return out


def backward(loss: Tensor) -> None:
    """Reverse accumulation from a scalar; frees the tape as it goes."""
    if loss.data.size != 1:
        raise ValueError("backward requires a scalar loss")
    if not loss.requires_grad:
        raise ValueError("loss is not connected to any parameter")

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        fn = node._backward
        if fn is not None and node.grad is not None:
            fn(node.grad)
        # Free the graph; leaves (parameters) keep their accumulated grads.
        node._parents = ()
        node._backward = None
        if fn is not None and node is not loss:
            node.grad = None


# ---------------------------------------------------------------------------
# Network building blocks


def mlp(x: Tensor, layers: list[tuple[Tensor, Tensor]]) -> Tensor:
    """Affine chain with ReLU between layers; final layer stays affine."""
    if not layers:
        raise ValueError("mlp needs at least one layer")
    for i, (w, b) in enumerate(layers):
        x = add(matmul(x, w), b)
        if i < len(layers) - 1:
            x = relu(x)
    return x


def cross_attention(x_q: Tensor, x: Tensor, wq: Tensor, wk: Tensor, wv: Tensor,
                    num_heads: int) -> Tensor:
    """Multi-head attention with queries from x_q, keys/values from x."""
    h = wq.data.shape[1]
    if h % num_heads != 0:
        raise ValueError(f"embedding dimension {h} not divisible by {num_heads} heads")
    dk = h // num_heads
    q = matmul(x_q, wq)
    k = matmul(x, wk)
    v = matmul(x, wv)
    scale = 1.0 / sqrt(dk)
    if num_heads == 1:
        att = softmax(mul(matmul(q, transpose(k)), scale), axis=-1)
        return matmul(att, v)
    m, n = x_q.data.shape[0], x.data.shape[0]
    qh = permute(reshape(q, (m, num_heads, dk)), (1, 0, 2))
    kh = permute(reshape(k, (n, num_heads, dk)), (1, 2, 0))
    vh = permute(reshape(v, (n, num_heads, dk)), (1, 0, 2))
    att = softmax(mul(bmm(qh, kh), scale), axis=-1)
    out = bmm(att, vh)
    return reshape(permute(out, (1, 0, 2)), (m, h))


def self_attention(x: Tensor, wq: Tensor, wk: Tensor, wv: Tensor, num_heads: int) -> Tensor:
    return cross_attention(x, x, wq, wk, wv, num_heads)


def attention_weights(x_q: np.ndarray, x: np.ndarray, wq: np.ndarray, wk: np.ndarray,
                      num_heads: int) -> np.ndarray:
    """Forward-only per-head attention matrices, shape (heads, m, n)."""
    h = wq.shape[1]
    dk = h // num_heads
    q = x_q @ wq
    k = x @ wk
    out = []
    for i in range(num_heads):
        logits = q[:, i * dk:(i + 1) * dk] @ k[:, i * dk:(i + 1) * dk].T / sqrt(dk)
        shifted = np.exp(logits - logits.max(axis=-1, keepdims=True))
        out.append(shifted / shifted.sum(axis=-1, keepdims=True))
    return np.stack(out)


# ---------------------------------------------------------------------------
# Parameter store, optimizer, checkpoint format


CKPT_MAGIC = b"RCFN"
CKPT_VERSION = 1


class ParamStore:
    """Named trainable tensors; iteration is always sorted by name."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._adam_m: dict[str, np.ndarray] = {}
        self._adam_v: dict[str, np.ndarray] = {}
        self._adam_t = 0

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return sorted(self._params)

    def items(self):
        for name in self.names():
            yield name, self._params[name]

    def zero_grad(self) -> None:
        for _, p in self.items():
            p.grad = np.zeros_like(p.data)

    def grad_norm(self) -> float:
        total = 0.0
        for _, p in self.items():
            if p.grad is not None:
                total += float((p.grad * p.grad).sum())
        return sqrt(total)

    def clip_grad_norm(self, max_norm: float) -> float:
        norm = self.grad_norm()
        if norm > max_norm:
            scale = max_norm / norm
            for _, p in self.items():
                if p.grad is not None:
                    p.grad *= scale
        return norm

    def copy(self) -> "ParamStore":
        dup = ParamStore()
        for name, p in self.items():
            dup.add(name, p.data.copy())
        return dup


def adam_step(params: ParamStore, lr: float, betas: tuple[float, float] = (0.9, 0.999),
              eps: float = 1e-8) -> None:
    """Standard Adam with bias correction; clears grads afterwards."""
    b1, b2 = betas
    missing = [name for name, p in params.items() if p.grad is None]
    if missing:
        raise ValueError(f"adam_step before backward: missing grads for {missing[:3]}")
    params._adam_t += 1
    t = params._adam_t
    for name, p in params.items():
        g = p.grad
        m = params._adam_m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            params._adam_m[name] = m
            params._adam_v[name] = np.zeros_like(p.data)
        v = params._adam_v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        p.data -= lr * mhat / (np.sqrt(vhat) + eps)
        p.grad = None


def grad_check(loss_fn, params: ParamStore, step: float = 1e-5,
               max_entries_per_param: int | None = None, seed: int = 0) -> dict:
    """Compare backward() gradients against central finite differences.

    loss_fn takes no arguments and returns a scalar Tensor computed from the
    current parameter values. Returns a report; never raises on mismatch.
    """
    params.zero_grad()
    loss = loss_fn()
    backward(loss)
    analytic = {name: p.grad.copy() for name, p in params.items()}
    for _, p in params.items():
        p.grad = None

    rng = np.random.default_rng(seed)
    worst = (0.0, None)
    per_param = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        n = flat.size
        if max_entries_per_param is not None and n > max_entries_per_param:
            idxs = rng.choice(n, size=max_entries_per_param, replace=False)
        else:
            idxs = range(n)
        a_flat = analytic[name].reshape(-1)
        local_worst = 0.0
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + step
            with no_grad():
                up = float(loss_fn().data)
            flat[i] = orig - step
            with no_grad():
                down = float(loss_fn().data)
            flat[i] = orig
            numeric = (up - down) / (2 * step)
            denom = max(abs(a_flat[i]), abs(numeric), 1e-6)
            rel = abs(a_flat[i] - numeric) / denom
            if rel > local_worst:
                local_worst = rel
        per_param[name] = local_worst
        if local_worst > worst[0]:
            worst = (local_worst, name)
    return {"max_rel_error": worst[0], "worst_param": worst[1], "per_param": per_param}


def save_checkpoint(params: ParamStore, path) -> None:
    """magic RCFN, version, count, then (name, rank, dims, f32 data) sorted by name."""
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(list(params.names()))))
        for name, p in params.items():
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", p.data.ndim))
            for d in p.data.shape:
                fh.write(struct.pack("<I", d))
            fh.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())


def load_checkpoint(path) -> ParamStore:
    store = ParamStore()
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CKPT_MAGIC:
            raise ValueError(f"bad checkpoint magic: {magic!r}")
        version, count = struct.unpack("<II", fh.read(8))
        if version != CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint version: {version}")
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            (rank,) = struct.unpack("<B", fh.read(1))
            dims = struct.unpack("<" + "I" * rank, fh.read(4 * rank))
            n = int(np.prod(dims)) if rank else 1
            raw = fh.read(n * 4)
            if len(raw) != n * 4:
                raise ValueError("truncated checkpoint")
            data = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(dims)
            store.add(name, data)
    return store
