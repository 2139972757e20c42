"""Reverse-mode automatic differentiation on dense float64 tensors.

A :class:`Tape` records every primitive operation applied while it is
active; :func:`backward` replays the record once, in reverse, to obtain
gradients of a scalar with respect to a set of watched parameters.  The
same operations run without any tape at all, in which case they are
plain numpy calls.  Both paths share one numerical code path, so a
recorded forward pass and an un-recorded one produce bit-identical
values.

Randomness is isolated in :class:`RngState`, a thin wrapper around
numpy's counter-based Philox generator.  Derived streams are keyed by
``(seed, index)``, which makes datasets reproducible independently of
how work is split across workers.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

# Validate every op output for NaN/Inf.  Costs a few percent; leave on
# except in tight, already-validated benchmark loops.
CHECK_FINITE: bool = True

_EPS_DENOM = 1e-12


class ShapeMismatchError(ValueError):
    """Raised when operand shapes are incompatible for an operation."""


class NonFiniteError(ArithmeticError):
    """Raised when an operation produces NaN or Inf and checking is on."""


class RngState:
    """Deterministic random stream backed by the Philox counter-based generator.

    Parameters
    ----------
    seed : int
        Unsigned 64-bit seed.  Two states built from the same seed
        produce identical streams on any platform.
    stream : int, optional
        Sub-stream index.  ``RngState(seed, stream=i)`` is the stream a
        parent with the same seed derives via :meth:`spawn`, so per-item
        streams can be reconstructed without the parent.
    """

    __slots__ = ("seed", "stream", "_gen")

    def __init__(self, seed: int, stream: int = 0):
        if seed < 0:
            raise ValueError("seed must be a non-negative integer")
        self.seed = int(seed)
        self.stream = int(stream)
        self._gen = np.random.Generator(np.random.Philox(
            key=np.array([self.seed, self.stream], dtype=np.uint64)))

    def spawn(self, index: int) -> "RngState":
        """Independent child stream keyed by ``(seed, index)``.

        The child depends only on the parent's seed and the index, never
        on how much of the parent stream has been consumed.
        """
        return RngState(self.seed, stream=index + 1)

    def normal(self, shape=(), loc: float = 0.0, scale: float = 1.0) -> np.ndarray:
        return self._gen.normal(loc, scale, size=shape)

    def uniform(self, shape=(), low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def shuffle(self, x: np.ndarray) -> None:
        self._gen.shuffle(x)


class Tensor:
    """Immutable dense float64 array participating in autodiff.

    Wraps a numpy array; never mutate ``data`` in place.  Arithmetic
    dunders delegate to the module-level ops so ``a * b + c`` records
    onto the active tape exactly like explicit calls would.
    """

    __slots__ = ("data",)

    def __init__(self, data):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.data.flags.writeable = False

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return self.data.item()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape})"

    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __neg__(self):
        return neg(self)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("op", "inputs", "out", "vjp", "needs_grad")

    def __init__(self, op: str, inputs: tuple, out: Tensor,
                 vjp: Callable | None, needs_grad: bool):
        self.op = op
        self.inputs = inputs      # node indices; -1 marks a constant input
        self.out = out            # keeps the tensor alive so ids stay unique
        self.vjp = vjp            # grad_out -> tuple of grads (None per const)
        self.needs_grad = needs_grad


_active = threading.local()


def _current() -> "Tape | None":
    return getattr(_active, "tape", None)


class Tape:
    """Records operations for one forward pass.

    Parameters
    ----------
    watch : dict[str, Tensor], optional
        Parameters to differentiate with respect to.  When omitted the
        tape records nothing and only carries ``rng`` / ``train`` state,
        which keeps evaluation passes cheap while preserving identical
        dropout behaviour.
    rng : RngState, optional
        Stream consumed by stochastic ops (dropout).
    train : bool
        Enables train-time behaviour such as dropout.
    """

    def __init__(self, watch: dict[str, Tensor] | None = None,
                 rng: RngState | None = None, train: bool = False):
        self.nodes: list[_Node] = []
        self.rng = rng
        self.train = train
        self.recording = watch is not None
        self._watch = dict(watch) if watch else {}
        self._index: dict[int, int] = {}     # id(tensor) -> node index
        self._leaf_of: dict[str, int] = {}   # param name -> node index

    def __enter__(self) -> "Tape":
        if _current() is not None:
            raise RuntimeError("a Tape is already active in this thread")
        _active.tape = self
        for name, t in self._watch.items():
            idx = self._record("param", (), t, None, needs_grad=True)
            self._leaf_of[name] = idx
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _active.tape = None

    def _record(self, op: str, input_ids: tuple, out: Tensor,
                vjp: Callable | None, needs_grad: bool) -> int:
        idx = len(self.nodes)
        self.nodes.append(_Node(op, input_ids, out, vjp, needs_grad))
        self._index[id(out)] = idx
        return idx

    def _lookup(self, t: Tensor) -> int:
        """Node index of ``t`` on this tape, or -1 if it is a constant."""
        return self._index.get(id(t), -1)


def backward(tape: Tape, loss: Tensor) -> dict[str, Tensor]:
    """Gradients of a scalar ``loss`` with respect to every watched parameter.

    Visits each recorded node exactly once, in reverse order.  Watched
    parameters the loss does not depend on get zero gradients.
    """
    if loss.size != 1:
        raise ValueError(
            f"backward requires a scalar loss, got shape {loss.shape}")
    if not tape.recording:
        raise ValueError("backward requires a tape constructed with watch=")
    grads: list[np.ndarray | None] = [None] * len(tape.nodes)
    leaves = set(tape._leaf_of.values())
    start = tape._lookup(loss)
    if start >= 0:
        grads[start] = np.ones_like(loss.data)
        for idx in range(start, -1, -1):
            g = grads[idx]
            node = tape.nodes[idx]
            if idx not in leaves:
                grads[idx] = None
            if g is None or node.vjp is None:
                continue
            in_grads = node.vjp(g)
            for j, gin in zip(node.inputs, in_grads):
                if j < 0 or gin is None or not tape.nodes[j].needs_grad:
                    continue
                if grads[j] is None:
                    grads[j] = gin
                else:
                    grads[j] = grads[j] + gin
    out: dict[str, Tensor] = {}
    for name, idx in tape._leaf_of.items():
        g = grads[idx] if start >= 0 else None
        if g is None:
            g = np.zeros_like(tape.nodes[idx].out.data)
        out[name] = Tensor(g)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape``, undoing numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _emit(op: str, inputs: Sequence[Tensor], out_data: np.ndarray,
          vjp_builder: Callable | None, needs_grad_hint: bool = True) -> Tensor:
    """Finalize an op: finiteness check, wrap, and record if a tape is live."""
    if CHECK_FINITE and not np.all(np.isfinite(out_data)):
        raise NonFiniteError(f"non-finite values produced by op '{op}'")
    out = Tensor(out_data)
    tape = _current()
    if tape is None or not tape.recording:
        return out
    ids = tuple(tape._lookup(t) for t in inputs)
    needs = needs_grad_hint and any(
        i >= 0 and tape.nodes[i].needs_grad for i in ids)
    vjp = vjp_builder() if (needs and vjp_builder is not None) else None
    tape._record(op, ids, out, vjp, needs)
    return out


def _binary_shapes(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatchError(
            f"op '{op}': shapes {a.shape} and {b.shape} do not broadcast")


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes("add", a, b)
    out = a.data + b.data

    def build():
        def vjp(g):
            return (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))
        return vjp
    return _emit("add", (a, b), out, build)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes("sub", a, b)
    out = a.data - b.data

    def build():
        def vjp(g):
            return (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))
        return vjp
    return _emit("sub", (a, b), out, build)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes("mul", a, b)
    out = a.data * b.data

    def build():
        ad, bd = a.data, b.data

        def vjp(g):
            return (_unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape))
        return vjp
    return _emit("mul", (a, b), out, build)


def div(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes("div", a, b)
    with np.errstate(all="ignore"):
        out = a.data / b.data

    def build():
        ad, bd = a.data, b.data

        def vjp(g):
            return (_unbroadcast(g / bd, a.shape),
                    _unbroadcast(-g * ad / (bd * bd), b.shape))
        return vjp
    return _emit("div", (a, b), out, build)


def neg(a: Tensor) -> Tensor:
    return _emit("neg", (a,), -a.data, lambda: lambda g: (-g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(
            f"op 'matmul': cannot multiply {a.shape} by {b.shape}")
    out = a.data @ b.data

    def build():
        ad, bd = a.data, b.data

        def vjp(g):
            return (g @ bd.T, ad.T @ g)
        return vjp
    return _emit("matmul", (a, b), out, build)


def exp(a: Tensor) -> Tensor:
    with np.errstate(all="ignore"):
        out = np.exp(a.data)

    def build():
        def vjp(g):
            return (g * out,)
        return vjp
    return _emit("exp", (a,), out, build)


def log(a: Tensor) -> Tensor:
    with np.errstate(all="ignore"):
        out = np.log(a.data)

    def build():
        ad = a.data

        def vjp(g):
            return (g / ad,)
        return vjp
    return _emit("log", (a,), out, build)


def sqrt(a: Tensor) -> Tensor:
    with np.errstate(all="ignore"):
        out = np.sqrt(a.data)

    def build():
        def vjp(g):
            return (g * 0.5 / out,)
        return vjp
    return _emit("sqrt", (a,), out, build)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def build():
        def vjp(g):
            return (g * (1.0 - out * out),)
        return vjp
    return _emit("tanh", (a,), out, build)


def softplus(a: Tensor) -> Tensor:
    out = np.logaddexp(0.0, a.data)

    def build():
        ad = a.data

        def vjp(g):
            return (g * expit(ad),)
        return vjp
    return _emit("softplus", (a,), out, build)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis, with the usual max-shift for stability."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def build():
        def vjp(g):
            inner = (g * out).sum(axis=-1, keepdims=True)
            return (out * (g - inner),)
        return vjp
    return _emit("softmax", (a,), out, build)


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def build():
        shape = a.shape

        def vjp(g):
            if axis is None:
                return (np.broadcast_to(g, shape).copy(),)
            ax = axis if isinstance(axis, tuple) else (axis,)
            if not keepdims:
                g = np.expand_dims(g, ax)
            return (np.broadcast_to(g, shape).copy(),)
        return vjp
    return _emit("sum", (a,), out, build)


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def build():
        shape = a.shape
        if axis is None:
            count = a.size
        else:
            ax = axis if isinstance(axis, tuple) else (axis,)
            count = int(np.prod([shape[i] for i in ax]))

        def vjp(g):
            if axis is None:
                return (np.broadcast_to(g / count, shape).copy(),)
            ax2 = axis if isinstance(axis, tuple) else (axis,)
            if not keepdims:
                g = np.expand_dims(g, ax2)
            return (np.broadcast_to(g / count, shape).copy(),)
        return vjp
    return _emit("mean", (a,), out, build)


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)

    def build():
        orig = a.shape

        def vjp(g):
            return (g.reshape(orig),)
        return vjp
    return _emit("reshape", (a,), out, build)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of ``length`` entries along ``axis``."""
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = a.data[idx]

    def build():
        shape = a.shape

        def vjp(g):
            full = np.zeros(shape)
            full[idx] = g
            return (full,)
        return vjp
    return _emit("narrow", (a,), out, build)


def concat(tensors: Iterable[Tensor], axis: int = -1) -> Tensor:
    ts = list(tensors)
    out = np.concatenate([t.data for t in ts], axis=axis)

    def build():
        sizes = [t.shape[axis] for t in ts]
        splits = np.cumsum(sizes)[:-1]

        def vjp(g):
            return tuple(np.split(g, splits, axis=axis))
        return vjp
    return _emit("concat", ts, out, build)


def cumsum(a: Tensor, axis: int = -1) -> Tensor:
    out = np.cumsum(a.data, axis=axis)

    def build():
        def vjp(g):
            rev = np.flip(g, axis=axis)
            return (np.flip(np.cumsum(rev, axis=axis), axis=axis),)
        return vjp
    return _emit("cumsum", (a,), out, build)


def take_along(a: Tensor, indices: np.ndarray, axis: int = -1) -> Tensor:
    """Gather along ``axis`` with integer ``indices`` (not differentiated)."""
    out = np.take_along_axis(a.data, indices, axis=axis)

    def build():
        shape = a.shape

        def vjp(g):
            full = np.zeros(shape)
            grid = list(np.indices(g.shape, sparse=True))
            grid[axis] = indices
            np.add.at(full, tuple(grid), g)
            return (full,)
        return vjp
    return _emit("take_along", (a,), out, build)


def where_mask(mask: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    """Select ``a`` where a constant boolean ``mask`` holds, else ``b``."""
    _binary_shapes("where_mask", a, b)
    out = np.where(mask, a.data, b.data)

    def build():
        def vjp(g):
            return (_unbroadcast(np.where(mask, g, 0.0), a.shape),
                    _unbroadcast(np.where(mask, 0.0, g), b.shape))
        return vjp
    return _emit("where_mask", (a, b), out, build)


def permute_cols(a: Tensor, perm: np.ndarray) -> Tensor:
    """Reorder the last axis by a fixed permutation (volume preserving)."""
    if a.shape[-1] != len(perm):
        raise ShapeMismatchError(
            f"op 'permute_cols': {len(perm)}-permutation on shape {a.shape}")
    out = a.data[..., perm]

    def build():
        inv = np.argsort(perm)

        def vjp(g):
            return (g[..., inv],)
        return vjp
    return _emit("permute_cols", (a,), out, build)


def conv1d(x: Tensor, w: Tensor) -> Tensor:
    """Valid-mode 1-D convolution over the time axis.

    ``x`` has shape ``(batch, length, c_in)`` and ``w`` has shape
    ``(kernel, c_in, c_out)``; the result is
    ``(batch, length - kernel + 1, c_out)``.  Stride is 1.
    """
    if x.ndim != 3 or w.ndim != 3 or x.shape[2] != w.shape[1]:
        raise ShapeMismatchError(
            f"op 'conv1d': input {x.shape} incompatible with kernel {w.shape}")
    K = w.shape[0]
    if x.shape[1] < K:
        raise ShapeMismatchError(
            f"op 'conv1d': length {x.shape[1]} shorter than kernel {K}")
    win = np.lib.stride_tricks.sliding_window_view(x.data, K, axis=1)
    # win: (batch, L_out, c_in, K); kernel: (K, c_in, c_out)
    out = np.einsum("blck,kco->blo", win, w.data, optimize=True)

    def build():
        xd, wd = x.data, w.data
        L_out = out.shape[1]

        def vjp(g):
            gw = np.einsum("blck,blo->kco", win, g, optimize=True)
            gx = np.zeros_like(xd)
            for k in range(K):
                gx[:, k:k + L_out, :] += g @ wd[k].T
            return (gx, gw)
        return vjp
    return _emit("conv1d", (x, w), out, build)


def dropout(a: Tensor, rate: float) -> Tensor:
    """Inverted dropout; active only under a training tape with an RNG.

    Outside training (or with rate 0) this is the identity and records
    nothing.
    """
    tape = _current()
    if tape is None or not tape.train or rate <= 0.0:
        return a
    if tape.rng is None:
        raise RuntimeError("dropout under a training tape requires an RngState")
    keep = (tape.rng.uniform(a.shape) >= rate) / (1.0 - rate)
    out = a.data * keep

    def build():
        def vjp(g):
            return (g * keep,)
        return vjp
    return _emit("dropout", (a,), out, build)


# ---------------------------------------------------------------------------
# verification helpers
# ---------------------------------------------------------------------------

def grad_check(f: Callable[[], Tensor], params: dict[str, Tensor],
               h: float = 1e-5, seed: int = 0, train: bool = False,
               return_details: bool = False):
    """Compare tape gradients of ``f`` against central finite differences.

    ``f`` takes no arguments, reads tensors from ``params``, and returns
    a scalar Tensor.  It must be deterministic given the tape RNG, which
    this routine reseeds identically for every evaluation.  Returns the
    worst elementwise relative error
    ``|ad - fd| / (|fd| + 1e-12)`` over all parameter entries, or a
    per-parameter dict of (ad, fd, relerr) triples when
    ``return_details`` is set.
    """
    with Tape(watch=params, rng=RngState(seed), train=train) as tape:
        loss = f()
    ad_grads = backward(tape, loss)

    def evaluate() -> float:
        with Tape(rng=RngState(seed), train=train):
            return f().item()

    worst = 0.0
    details = {}
    for name, p in params.items():
        base = p.data
        fd = np.zeros_like(base)
        flat_fd = fd.reshape(-1)
        for i in range(base.size):
            bumped = base.copy().reshape(-1)
            bumped[i] += h
            params[name] = Tensor(bumped.reshape(base.shape))
            up = evaluate()
            bumped[i] -= 2 * h
            params[name] = Tensor(bumped.reshape(base.shape))
            down = evaluate()
            flat_fd[i] = (up - down) / (2 * h)
        params[name] = Tensor(base)
        ad = ad_grads[name].data
        rel = np.abs(ad - fd) / (np.abs(fd) + _EPS_DENOM)
        details[name] = (ad, fd, rel)
        if rel.size:
            worst = max(worst, float(rel.max()))
    return details if return_details else worst
