"""Learned summaries of multivariate time series observations.

The convolutional network maps a ``(batch, k, n_sensors)`` block of
sensor readings to a fixed-width feature vector regardless of the
record length ``k``: valid-mode convolutions shorten the time axis,
global mean pooling removes it entirely.  The minimum usable length is
the receptive field of the conv stack.

:class:`FlattenSummary` is a parameter-free stand-in for problems whose
observations are short fixed-length vectors; it just reshapes, so the
flow's conditioner sees the (standardized) data directly.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import RngState, Tensor
from .nets import Dense, ParameterStore


class ConvSummaryNetwork:
    """1-D conv stack over time, mean-pooled, with a dense head."""

    kind = "conv"

    def __init__(self, store: ParameterStore, prefix: str, n_sensors: int,
                 channels: tuple[int, ...] = (64, 128), kernel: int = 3,
                 features: int = 256, rng: RngState | None = None,
                 dropout: float = 0.0):
        rng = rng or RngState(0)
        self.n_sensors = n_sensors
        self.channels = tuple(channels)
        self.kernel = int(kernel)
        self.features = int(features)
        self.dropout = float(dropout)
        self.store = store
        self._convs = []
        c_in = n_sensors
        for i, c_out in enumerate(self.channels):
            w = rng.normal((self.kernel, c_in, c_out)) * np.sqrt(1.0 / (self.kernel * c_in))
            self._convs.append((
                store.create(f"{prefix}.conv{i}.W", w),
                store.create(f"{prefix}.conv{i}.b", np.zeros(c_out)),
            ))
            c_in = c_out
        self.head = Dense(store, f"{prefix}.head", c_in, self.features, rng)

    @property
    def k_min(self) -> int:
        """Shortest record the conv stack can ingest (its receptive field)."""
        return len(self.channels) * (self.kernel - 1) + 1

    def __call__(self, u: Tensor) -> Tensor:
        if u.ndim != 3 or u.shape[2] != self.n_sensors:
            raise ValueError(
                f"expected observations shaped (batch, k, {self.n_sensors}), "
                f"got {u.shape}")
        if u.shape[1] < self.k_min:
            raise ValueError(
                f"record length {u.shape[1]} is below the minimum {self.k_min}")
        h = u
        for w_name, b_name in self._convs:
            h = ad.add(ad.conv1d(h, self.store[w_name]), self.store[b_name])
            h = ad.tanh(h)
            h = ad.dropout(h, self.dropout)
        pooled = ad.reduce_mean(h, axis=1)
        return self.head(pooled)

    def descriptor(self) -> dict:
        return {"type": self.kind, "n_sensors": self.n_sensors,
                "channels": list(self.channels), "kernel": self.kernel,
                "features": self.features, "dropout": self.dropout}


class FlattenSummary:
    """Parameter-free summary for fixed-length observation vectors."""

    kind = "flatten"

    def __init__(self, k: int, n_sensors: int):
        self.k = int(k)
        self.n_sensors = int(n_sensors)
        self.features = self.k * self.n_sensors

    @property
    def k_min(self) -> int:
        return self.k

    def __call__(self, u: Tensor) -> Tensor:
        if u.ndim != 3 or u.shape[1] != self.k or u.shape[2] != self.n_sensors:
            raise ValueError(
                f"expected observations shaped (batch, {self.k}, "
                f"{self.n_sensors}), got {u.shape}")
        return ad.reshape(u, (u.shape[0], self.features))

    def descriptor(self) -> dict:
        return {"type": self.kind, "k": self.k, "n_sensors": self.n_sensors}


def summarize(net, u) -> Tensor:
    """Feature vector for a batch of observation blocks."""
    return net(u if isinstance(u, Tensor) else Tensor(u))


def summary_from_descriptor(store: ParameterStore, desc: dict,
                            prefix: str = "summary", rng: RngState | None = None):
    if desc["type"] == "conv":
        return ConvSummaryNetwork(store, prefix, desc["n_sensors"],
                                  channels=tuple(desc["channels"]),
                                  kernel=desc["kernel"],
                                  features=desc["features"], rng=rng,
                                  dropout=desc["dropout"])
    if desc["type"] == "flatten":
        return FlattenSummary(desc["k"], desc["n_sensors"])
    raise ValueError(f"unknown summary type '{desc['type']}'")
