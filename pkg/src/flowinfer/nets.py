"""Small feed-forward building blocks shared by the flow and summary nets.

Parameters live in a :class:`ParameterStore`, a name-to-tensor mapping
with stable insertion order.  Layers hold parameter *names* and fetch
the current tensors at call time, so an optimizer (or a finite
difference probe) can rebind entries without the layers noticing.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import RngState, Tensor


class ParameterStore(dict):
    """Ordered mapping of parameter name to Tensor.

    Insertion order defines the serialization order of the flat
    parameter vector, so construction must be deterministic.
    """

    def create(self, name: str, value: np.ndarray) -> str:
        if name in self:
            raise ValueError(f"duplicate parameter name '{name}'")
        self[name] = Tensor(value)
        return name

    def n_params(self) -> int:
        return sum(t.size for t in self.values())

    def flatten(self) -> np.ndarray:
        """All parameters as one float64 vector, in registration order."""
        if not self:
            return np.zeros(0)
        return np.concatenate([t.data.reshape(-1) for t in self.values()])

    def load_flat(self, vec: np.ndarray) -> None:
        """Rebind every parameter from a flat vector (inverse of flatten)."""
        expected = self.n_params()
        if vec.size != expected:
            raise ValueError(
                f"parameter vector has {vec.size} entries, store expects {expected}")
        pos = 0
        for name, t in self.items():
            n = t.size
            self[name] = Tensor(vec[pos:pos + n].reshape(t.shape))
            pos += n


class Dense:
    """Affine layer ``y = x @ W + b``."""

    def __init__(self, store: ParameterStore, prefix: str, n_in: int, n_out: int,
                 rng: RngState, zero_init: bool = False):
        if zero_init:
            W = np.zeros((n_in, n_out))
        else:
            W = rng.normal((n_in, n_out)) * np.sqrt(1.0 / max(n_in, 1))
        self.store = store
        self.w_name = store.create(f"{prefix}.W", W)
        self.b_name = store.create(f"{prefix}.b", np.zeros(n_out))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(ad.matmul(x, self.store[self.w_name]), self.store[self.b_name])


class MLP:
    """Fully connected net with tanh hidden activations and dropout.

    The output layer is linear.  With ``zero_init_output`` the final
    weights and bias start at exactly zero, so a freshly built MLP maps
    every input to the zero vector; the flow layers rely on this to
    start as the identity transform.
    """

    def __init__(self, store: ParameterStore, prefix: str, n_in: int,
                 hidden: tuple[int, ...], n_out: int, rng: RngState,
                 dropout: float = 0.0, zero_init_output: bool = False):
        self.layers = []
        self.dropout = float(dropout)
        last = n_in
        for i, width in enumerate(hidden):
            self.layers.append(Dense(store, f"{prefix}.h{i}", last, width, rng))
            last = width
        self.out = Dense(store, f"{prefix}.out", last, n_out, rng,
                         zero_init=zero_init_output)

    def __call__(self, x: Tensor) -> Tensor:
        h = x
        for layer in self.layers:
            h = ad.tanh(layer(h))
            h = ad.dropout(h, self.dropout)
        return self.out(h)
