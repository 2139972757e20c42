"""Posterior model: summary network + conditional flow + standardization.

The model owns the parameter store and the input/output scaling.  The
flow always operates on standardized parameter vectors; observations
are standardized per sensor before entering the summary network.  Both
sets of statistics are fitted on the training split and serialized with
the model, so a loaded checkpoint reproduces densities and samples
without access to the original data.

Checkpoint format (magic ``NFCK``, little endian):

========  =====================================================
bytes     content
========  =====================================================
4         magic ``NFCK``
2         format version (u16), currently 1
4         length L of the architecture JSON (u32)
L         UTF-8 JSON: dims, layer spec, permutations, statistics
8         parameter count P (u64)
8 * P     flat float64 parameter vector, store order
========  =====================================================
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .autodiff import RngState, Tensor
from .flow import ConditionalFlow, latent_logprob, sample_posterior
from .nets import ParameterStore
from .summary import summarize, summary_from_descriptor

MAGIC = b"NFCK"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Raised when a model file is malformed or inconsistent."""


class Standardizer:
    """Componentwise affine map to zero mean and unit spread."""

    def __init__(self, mean: np.ndarray, std: np.ndarray):
        self.mean = np.asarray(mean, dtype=np.float64)
        self.std = np.asarray(std, dtype=np.float64)
        if np.any(self.std <= 0):
            bad = np.flatnonzero(self.std <= 0)
            raise ValueError(
                f"cannot standardize: component(s) {bad.tolist()} have "
                "non-positive spread")

    @classmethod
    def identity(cls, n: int) -> "Standardizer":
        return cls(np.zeros(n), np.ones(n))

    @classmethod
    def fit(cls, x: np.ndarray, axis) -> "Standardizer":
        return cls(x.mean(axis=axis), x.std(axis=axis))

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std

    def invert(self, y: np.ndarray) -> np.ndarray:
        return y * self.std + self.mean

    @property
    def log_jacobian(self) -> float:
        """log |d standardized / d raw| = -sum(log std)."""
        return float(-np.sum(np.log(self.std)))


class PosteriorModel:
    """Amortized posterior over a parameter vector given a sensor record."""

    def __init__(self, store: ParameterStore, summary_net, flow: ConditionalFlow,
                 theta_std: Standardizer, obs_std: Standardizer,
                 meta: dict | None = None):
        self.store = store
        self.summary_net = summary_net
        self.flow = flow
        self.theta_std = theta_std
        self.obs_std = obs_std
        self.meta = dict(meta or {})

    @classmethod
    def build(cls, dim: int, n_sensors: int, summary: dict | None = None,
              n_affine: int = 5, n_spline: int = 5,
              hidden: tuple[int, ...] = (128, 128), bins: int = 16,
              bound: float = 3.0, clamp: float = 2.0, dropout: float = 0.5,
              seed: int = 0) -> "PosteriorModel":
        """Fresh identity-initialized model.

        ``summary`` is a descriptor dict (see :mod:`flowinfer.summary`);
        the default is the two-stage conv network with 256 features.
        """
        summary = dict(summary or {"type": "conv", "n_sensors": n_sensors,
                                   "channels": [64, 128], "kernel": 3,
                                   "features": 256, "dropout": dropout})
        store = ParameterStore()
        net = summary_from_descriptor(store, summary,
                                      rng=RngState(seed, stream=1))
        flow = ConditionalFlow(store, dim, net.features, n_affine=n_affine,
                               n_spline=n_spline, hidden=hidden, bins=bins,
                               bound=bound, clamp=clamp, dropout=dropout,
                               init_seed=seed, perm_seed=seed)
        return cls(store, net, flow, Standardizer.identity(dim),
                   Standardizer.identity(n_sensors), meta={"seed": seed})

    @property
    def dim(self) -> int:
        return self.flow.dim

    def fit_standardizers(self, theta: np.ndarray, obs: np.ndarray) -> None:
        """Fit scaling statistics on the training split (call before training)."""
        self.theta_std = Standardizer.fit(theta, axis=0)
        self.obs_std = Standardizer.fit(obs, axis=(0, 1))

    def summarize(self, obs: np.ndarray) -> Tensor:
        """Features for a batch of (k, n_sensors) records."""
        return summarize(self.summary_net, self.obs_std.apply(obs))

    def forward(self, theta: np.ndarray, obs: np.ndarray):
        """Latents and flow log-determinant for a training batch."""
        cond = self.summarize(obs)
        z, logdet = self.flow.forward(Tensor(self.theta_std.apply(theta)), cond)
        return z, logdet

    def log_prob(self, theta: np.ndarray, obs: np.ndarray) -> np.ndarray:
        """Posterior log-density of ``theta`` rows given one record.

        Includes every constant (latent normalization and standardizer
        Jacobian), so exponentiating and integrating over theta gives 1.
        """
        theta = np.atleast_2d(theta)
        cond_row = self.summarize(obs[None]).data[0]
        cond = Tensor(np.broadcast_to(cond_row, (theta.shape[0], cond_row.size)).copy())
        z, logdet = self.flow.forward(Tensor(self.theta_std.apply(theta)), cond)
        return (latent_logprob(z).data + logdet.data + self.theta_std.log_jacobian)

    def sample(self, obs: np.ndarray, n: int, rng: RngState) -> np.ndarray:
        """``n`` posterior draws for a single (k, n_sensors) record."""
        cond_row = self.summarize(obs[None]).data[0]
        std_draws = sample_posterior(self.flow, cond_row, n, rng)
        return self.theta_std.invert(std_draws)

    # -- persistence --------------------------------------------------------

    def _descriptor(self) -> dict:
        return {
            "dim": self.dim,
            "summary": self.summary_net.descriptor(),
            "flow": self.flow.descriptor(),
            "theta_mean": self.theta_std.mean.tolist(),
            "theta_scale": self.theta_std.std.tolist(),
            "obs_mean": self.obs_std.mean.tolist(),
            "obs_scale": self.obs_std.std.tolist(),
            "meta": self.meta,
        }

    def save(self, path) -> None:
        desc = json.dumps(self._descriptor(), sort_keys=True,
                          separators=(",", ":")).encode("utf-8")
        flat = self.store.flatten()
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<H", FORMAT_VERSION))
            fh.write(struct.pack("<I", len(desc)))
            fh.write(desc)
            fh.write(struct.pack("<Q", flat.size))
            fh.write(flat.astype("<f8").tobytes())

    @classmethod
    def load(cls, path) -> "PosteriorModel":
        with open(path, "rb") as fh:
            blob = fh.read()
        if len(blob) < 10 or blob[:4] != MAGIC:
            raise CheckpointError(f"{path}: not a model checkpoint")
        (version,) = struct.unpack_from("<H", blob, 4)
        if version != FORMAT_VERSION:
            raise CheckpointError(
                f"{path}: unsupported checkpoint version {version}")
        (jlen,) = struct.unpack_from("<I", blob, 6)
        desc_end = 10 + jlen
        try:
            desc = json.loads(blob[10:desc_end].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as err:
            raise CheckpointError(f"{path}: corrupt architecture block: {err}")
        (n_params,) = struct.unpack_from("<Q", blob, desc_end)
        body = blob[desc_end + 8:]
        if len(body) != 8 * n_params:
            raise CheckpointError(
                f"{path}: expected {8 * n_params} parameter bytes, "
                f"found {len(body)}")
        store = ParameterStore()
        net = summary_from_descriptor(store, desc["summary"])
        flow = ConditionalFlow.from_descriptor(store, desc["flow"])
        if store.n_params() != n_params:
            raise CheckpointError(
                f"{path}: architecture expects {store.n_params()} parameters, "
                f"file holds {n_params}")
        store.load_flat(np.frombuffer(body, dtype="<f8"))
        return cls(store, net, flow,
                   Standardizer(np.array(desc["theta_mean"]),
                                np.array(desc["theta_scale"])),
                   Standardizer(np.array(desc["obs_mean"]),
                                np.array(desc["obs_scale"])),
                   meta=desc.get("meta", {}))
