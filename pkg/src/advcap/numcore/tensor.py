"""Reverse-mode automatic differentiation over dense float64 arrays.

Define-by-run: while a Tape is active (``with Tape() as tape:``), every
primitive that touches a grad-requiring tensor appends one node to the tape.
Nodes are recorded in execution order, which is already a topological order,
so ``backward`` is a single reverse sweep. A tape is rebuilt per forward pass
and supports exactly one backward sweep.

The primitive set is deliberately small: matrix products, elementwise maps,
the full-height text convolution with fused ReLU, max-over-time pooling,
embedding gather, softmax cross-entropy, and the glue (concat, slice, sum)
needed to assemble an LSTM decoder, a highway text-CNN and their losses.
"""

from __future__ import annotations

import numpy as np

from ..errors import ShapeError, TapeStateError

_TAPE_STACK: list["Tape"] = []


class Tensor:
    """Dense float64 array with an optional accumulated gradient."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, requires_grad={self.requires_grad}, name={self.name!r})"


class Tape:
    """Ordered record of primitive applications for one forward pass."""

    def __init__(self):
        self.nodes = []          # (out, inputs tuple, backward fn)
        self._out_ids = set()
        self._used = False

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def record(self, out: Tensor, inputs, backward_fn) -> None:
        self.nodes.append((out, inputs, backward_fn))
        self._out_ids.add(id(out))


def current_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _register(out: Tensor, inputs, backward_fn) -> Tensor:
    """Attach ``out`` to the active tape if any input requires a gradient."""
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, inputs, backward_fn)
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate .grad with d(loss)/d(tensor) for everything reachable from loss.

    Gradients accumulate across multiple uses of a tensor. One backward sweep
    per recording; a second call on the same tape raises TapeStateError.
    """
    if loss.data.shape != ():
        raise ShapeError(f"backward needs a scalar loss, got shape {tuple(loss.data.shape)}")
    if tape._used:
        raise TapeStateError("backward already ran on this tape; re-record the forward pass first")
    if id(loss) not in tape._out_ids:
        raise TapeStateError("loss tensor was not produced under this tape")
    tape._used = True
    loss.grad = np.ones(())
    for out, inputs, backward_fn in reversed(tape.nodes):
        if out.grad is None:
            continue
        grads = backward_fn(out.grad)
        for t, g in zip(inputs, grads):
            if g is not None and t.requires_grad:
                t.accumulate_grad(g)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product: (m,k)@(k,n) -> (m,n), or (m,k)@(k,) -> (m,)."""
    if a.data.ndim != 2 or b.data.ndim not in (1, 2):
        raise ShapeError(f"matmul expects 2-d lhs and 1/2-d rhs, got {a.data.ndim}-d and {b.data.ndim}-d")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul inner dims disagree: {a.data.shape} vs {b.data.shape}")
    out = Tensor(a.data @ b.data)

    def bwd(g):
        if b.data.ndim == 1:
            ga = np.outer(g, b.data)
            gb = a.data.T @ g
        else:
            ga = g @ b.data.T
            gb = a.data.T @ g
        return ga, gb

    return _register(out, (a, b), bwd)


def dot(a: Tensor, b: Tensor) -> Tensor:
    """Inner product of two vectors -> scalar."""
    if a.data.ndim != 1 or a.data.shape != b.data.shape:
        raise ShapeError(f"dot expects equal-length vectors, got {a.data.shape} and {b.data.shape}")
    out = Tensor(np.dot(a.data, b.data))
    return _register(out, (a, b), lambda g: (g * b.data, g * a.data))


def dot_cols(w: Tensor, x: Tensor) -> Tensor:
    """Apply a weight vector to every column: (n,) . (n,B) -> (B,)."""
    if w.data.ndim != 1 or x.data.ndim != 2 or w.data.shape[0] != x.data.shape[0]:
        raise ShapeError(f"dot_cols expects (n,) and (n,B), got {w.data.shape} and {x.data.shape}")
    out = Tensor(w.data @ x.data)
    return _register(out, (w, x), lambda g: (x.data @ g, np.outer(w.data, g)))


def add_scalar(x: Tensor, s: Tensor) -> Tensor:
    """Add a scalar tensor to every element."""
    if s.data.shape != ():
        raise ShapeError("add_scalar needs a scalar second argument")
    out = Tensor(x.data + s.data)
    return _register(out, (x, s), lambda g: (g, np.asarray(g.sum())))


def stack_scalars(parts) -> Tensor:
    """Stack scalar tensors into one vector."""
    parts = list(parts)
    if not parts or any(p.data.shape != () for p in parts):
        raise ShapeError("stack_scalars expects a non-empty list of scalars")
    out = Tensor(np.array([float(p.data) for p in parts]))

    def bwd(g):
        return tuple(np.asarray(g[i]) for i in range(len(parts)))

    return _register(out, tuple(parts), bwd)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add shapes disagree: {a.data.shape} vs {b.data.shape}")
    out = Tensor(a.data + b.data)
    return _register(out, (a, b), lambda g: (g, g))


def add_col(x: Tensor, b: Tensor) -> Tensor:
    """Add a length-n vector to every column of an (n,B) matrix."""
    if x.data.ndim != 2 or b.data.ndim != 1 or x.data.shape[0] != b.data.shape[0]:
        raise ShapeError(f"add_col expects (n,B) and (n,), got {x.data.shape} and {b.data.shape}")
    out = Tensor(x.data + b.data[:, None])
    return _register(out, (x, b), lambda g: (g, g.sum(axis=1)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mul shapes disagree: {a.data.shape} vs {b.data.shape}")
    out = Tensor(a.data * b.data)
    return _register(out, (a, b), lambda g: (g * b.data, g * a.data))


def affine(x: Tensor, scale: float, shift: float = 0.0) -> Tensor:
    """shift + scale * x with constant scale/shift (covers negate, 1-x, c*x)."""
    out = Tensor(shift + scale * x.data)
    return _register(out, (x,), lambda g: (g * scale,))


def activation(x: Tensor, kind: str) -> Tensor:
    """Elementwise relu / sigmoid / tanh. ReLU gradient at exactly 0 is 0."""
    if kind == "relu":
        y = np.maximum(x.data, 0.0)
        bwd = lambda g: (g * (x.data > 0.0),)
    elif kind == "sigmoid":
        y = 1.0 / (1.0 + np.exp(-x.data))
        bwd = lambda g: (g * y * (1.0 - y),)
    elif kind == "tanh":
        y = np.tanh(x.data)
        bwd = lambda g: (g * (1.0 - y * y),)
    else:
        raise ShapeError(f"unknown activation kind {kind!r}")
    return _register(Tensor(y), (x,), bwd)


def relu(x: Tensor) -> Tensor:
    return activation(x, "relu")


def sigmoid(x: Tensor) -> Tensor:
    return activation(x, "sigmoid")


def tanh(x: Tensor) -> Tensor:
    return activation(x, "tanh")


def log(x: Tensor) -> Tensor:
    out = Tensor(np.log(x.data))
    return _register(out, (x,), lambda g: (g / x.data,))


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient passes only where x was strictly inside."""
    y = np.clip(x.data, lo, hi)
    mask = (x.data > lo) & (x.data < hi)
    out = Tensor(y)
    return _register(out, (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# shape glue
# ---------------------------------------------------------------------------

def concat(parts) -> Tensor:
    """Concatenate 1-d tensors into one vector."""
    parts = list(parts)
    if not parts or any(p.data.ndim != 1 for p in parts):
        raise ShapeError("concat expects a non-empty list of vectors")
    out = Tensor(np.concatenate([p.data for p in parts]))
    sizes = [p.data.shape[0] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        return tuple(g[offsets[i]:offsets[i + 1]] for i in range(len(parts)))

    return _register(out, tuple(parts), bwd)


def concat_cols(parts) -> Tensor:
    """Concatenate (d,) vectors / (d,k) matrices horizontally into (d, sum k)."""
    parts = list(parts)
    if not parts:
        raise ShapeError("concat_cols expects a non-empty list")
    mats = [p.data[:, None] if p.data.ndim == 1 else p.data for p in parts]
    d = mats[0].shape[0]
    if any(m.ndim != 2 or m.shape[0] != d for m in mats):
        raise ShapeError("concat_cols expects matching leading dims")
    out = Tensor(np.concatenate(mats, axis=1))
    widths = [m.shape[1] for m in mats]
    offsets = np.cumsum([0] + widths)

    def bwd(g):
        grads = []
        for i, p in enumerate(parts):
            gi = g[:, offsets[i]:offsets[i + 1]]
            grads.append(gi[:, 0] if p.data.ndim == 1 else gi)
        return tuple(grads)

    return _register(out, tuple(parts), bwd)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    """Rows [start, stop) of a 1-d or 2-d tensor."""
    if not (0 <= start < stop <= x.data.shape[0]):
        raise ShapeError(f"slice_rows [{start}:{stop}] out of range for shape {x.data.shape}")
    out = Tensor(x.data[start:stop].copy())

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[start:stop] = g
        return (gx,)

    return _register(out, (x,), bwd)


def sum_all(x: Tensor) -> Tensor:
    out = Tensor(x.data.sum())
    return _register(out, (x,), lambda g: (np.full_like(x.data, float(g)),))


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    out = Tensor(x.data.mean())
    return _register(out, (x,), lambda g: (np.full_like(x.data, float(g) / n),))


# ---------------------------------------------------------------------------
# sequence-model primitives
# ---------------------------------------------------------------------------

def gather_embedding(E: Tensor, ids) -> Tensor:
    """Select columns of a (d,U) embedding matrix: output column t is E[:, ids[t]].

    Backward scatters into the selected columns, accumulating on repeats.
    """
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise ShapeError("gather_embedding expects a 1-d id sequence")
    U = E.data.shape[1]
    if ids.size and (ids.min() < 0 or ids.max() >= U):
        raise IndexError(f"token id out of range [0,{U})")
    out = Tensor(E.data[:, ids])

    def bwd(g):
        gE = np.zeros_like(E.data)
        np.add.at(gE.T, ids, g.T)
        return (gE,)

    return _register(out, (E,), bwd)


def conv_full_height(eps: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Full-height text convolution with fused ReLU.

    eps is a (d,L) feature map, kernel a (d,l) window, bias a scalar;
    output[i] = ReLU(sum(kernel * eps[:, i:i+l]) + bias) for i = 0..L-l.
    """
    d, L = eps.data.shape
    kd, l = kernel.data.shape
    if kd != d:
        raise ShapeError(f"kernel height {kd} != feature-map height {d}")
    if l > L:
        raise ShapeError(f"kernel window {l} wider than feature map {L}; pad the input")
    if bias.data.shape != ():
        raise ShapeError("conv bias must be a scalar tensor")
    windows = np.lib.stride_tricks.sliding_window_view(eps.data, (d, l))[0]  # (L-l+1, d, l)
    pre = np.einsum("pdl,dl->p", windows, kernel.data) + float(bias.data)
    y = np.maximum(pre, 0.0)
    out = Tensor(y)

    def bwd(g):
        gpre = g * (pre > 0.0)
        gk = np.einsum("p,pdl->dl", gpre, windows)
        geps = np.zeros_like(eps.data)
        for i in range(y.shape[0]):
            geps[:, i:i + l] += gpre[i] * kernel.data
        gb = np.asarray(gpre.sum())
        return geps, gk, gb

    return _register(out, (eps, kernel, bias), bwd)


def conv_bank(eps: Tensor, kernels: Tensor, biases: Tensor) -> Tensor:
    """Apply n same-width kernels at once: (d,L) x (n,d,l) -> (n, L-l+1).

    Row k equals conv_full_height(eps, kernels[k], biases[k]).
    """
    d, L = eps.data.shape
    n, kd, l = kernels.data.shape
    if kd != d:
        raise ShapeError(f"kernel height {kd} != feature-map height {d}")
    if l > L:
        raise ShapeError(f"kernel window {l} wider than feature map {L}; pad the input")
    if biases.data.shape != (n,):
        raise ShapeError("conv_bank biases must be (n,)")
    windows = np.lib.stride_tricks.sliding_window_view(eps.data, (d, l))[0]  # (P, d, l)
    pre = np.einsum("kdl,pdl->kp", kernels.data, windows) + biases.data[:, None]
    y = np.maximum(pre, 0.0)
    out = Tensor(y)

    def bwd(g):
        gpre = g * (pre > 0.0)                       # (n, P)
        gk = np.einsum("kp,pdl->kdl", gpre, windows)
        geps = np.zeros_like(eps.data)
        P = y.shape[1]
        col = np.einsum("kp,kdl->pdl", gpre, kernels.data)
        for i in range(P):
            geps[:, i:i + l] += col[i]
        gb = gpre.sum(axis=1)
        return geps, gk, gb

    return _register(out, (eps, kernels, biases), bwd)


def max_over_time(c: Tensor) -> Tensor:
    """Max element of a non-empty vector; gradient flows to the first argmax."""
    if c.data.ndim != 1 or c.data.size == 0:
        raise ShapeError("max_over_time expects a non-empty vector")
    idx = int(np.argmax(c.data))
    out = Tensor(c.data[idx])

    def bwd(g):
        gc = np.zeros_like(c.data)
        gc[idx] = g
        return (gc,)

    return _register(out, (c,), bwd)


def max_over_time_rows(c: Tensor) -> Tensor:
    """Row-wise max of an (n,K) matrix -> (n,); first argmax per row."""
    if c.data.ndim != 2 or c.data.shape[1] == 0:
        raise ShapeError("max_over_time_rows expects a non-empty (n,K) matrix")
    idx = np.argmax(c.data, axis=1)
    rows = np.arange(c.data.shape[0])
    out = Tensor(c.data[rows, idx])

    def bwd(g):
        gc = np.zeros_like(c.data)
        gc[rows, idx] = g
        return (gc,)

    return _register(out, (c,), bwd)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=0, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=0, keepdims=True))


def softmax_xent(logits: Tensor, target: int) -> Tensor:
    """-log softmax(logits)[target] for a 1-d logit vector."""
    if logits.data.ndim != 1:
        raise ShapeError("softmax_xent expects a 1-d logit vector")
    V = logits.data.shape[0]
    target = int(target)
    if not (0 <= target < V):
        raise IndexError(f"target {target} out of range [0,{V})")
    logp = _log_softmax(logits.data)
    out = Tensor(-logp[target])

    def bwd(g):
        grad = np.exp(logp)
        grad[target] -= 1.0
        return (g * grad,)

    return _register(out, (logits,), bwd)


def softmax_xent_cols(logits: Tensor, targets) -> Tensor:
    """Per-column cross-entropy: (U,B) logits with B integer targets -> (B,) losses."""
    if logits.data.ndim != 2:
        raise ShapeError("softmax_xent_cols expects (U,B) logits")
    targets = np.asarray(targets, dtype=np.int64)
    U, B = logits.data.shape
    if targets.shape != (B,):
        raise ShapeError(f"targets must be ({B},), got {targets.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= U):
        raise IndexError(f"target id out of range [0,{U})")
    logp = _log_softmax(logits.data)
    cols = np.arange(B)
    out = Tensor(-logp[targets, cols])

    def bwd(g):
        grad = np.exp(logp)
        grad[targets, cols] -= 1.0
        return (grad * g[None, :],)

    return _register(out, (logits,), bwd)
