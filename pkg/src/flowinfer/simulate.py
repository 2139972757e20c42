"""Desk-scale groundwater simulator and training-set generation.

The forward model integrates the nonlinear transient equation

    S_y du/dt = div( kappa(x) u grad u ) - r

on a small rectangular grid of square cells: backward Euler in time,
five-point finite volumes in space.  ``u`` is the saturated thickness
(head above the aquifer base), ``kappa`` the cell conductivity, ``S_y``
the specific yield and ``r`` a per-area source/sink rate.  The product
``kappa * u`` acts as the transmissivity; on interior faces it enters
through the harmonic mean of the two adjacent cells, on fixed-head
boundary faces through ``2 * kappa_i * u_i`` (half-cell distance).  The
nonlinearity is handled by Picard iteration with the transmissivities
lagged one iterate.

The unknown field is log-conductivity on the active cells, drawn from a
zero-mean Gaussian process with an exponential kernel.  Sensor records
from repeated simulations, plus observation noise, form the training
sets; each sample is produced from its own counter-based random stream
keyed by (seed, sample index), so a data set is reproducible for any
worker count.

Dataset file format (magic ``LFI1``, little endian): after the magic,
u16 version, u32 fields M, N, k, N_u, then M records of N float32
parameters followed by k * N_u float32 observations in time-major
order, then a u32-length-prefixed UTF-8 JSON provenance block.
"""

from __future__ import annotations

import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import spsolve

from .autodiff import RngState

DATASET_MAGIC = b"LFI1"
DATASET_VERSION = 1

_SIDES = {"N": (-1, 0), "S": (1, 0), "W": (0, -1), "E": (0, 1)}


class SimulationError(RuntimeError):
    """Raised when the forward solver cannot produce a valid record."""


@dataclass
class GridSpec:
    """Cell-centered rectangular grid with square cells.

    ``active`` marks the cells that belong to the aquifer (all of them
    by default); the parameter vector runs over active cells in
    row-major order.  ``sensors`` are (row, col) positions of the
    observation wells.
    """

    rows: int = 8
    cols: int = 4
    cell_size: float = 10.0
    sensors: tuple = ((1, 1), (3, 2), (5, 1), (6, 2))
    active: np.ndarray | None = None

    def __post_init__(self):
        if self.active is None:
            self.active = np.ones((self.rows, self.cols), dtype=bool)
        else:
            self.active = np.asarray(self.active, dtype=bool)
            if self.active.shape != (self.rows, self.cols):
                raise ValueError(
                    f"active mask shape {self.active.shape} does not match "
                    f"grid ({self.rows}, {self.cols})")
        if self.n_cells == 0:
            raise ValueError("grid has no active cells")
        self._check_connected()
        for (r, c) in self.sensors:
            if not (0 <= r < self.rows and 0 <= c < self.cols) or not self.active[r, c]:
                raise ValueError(f"sensor ({r}, {c}) is not on an active cell")

    def _check_connected(self) -> None:
        seen = np.zeros_like(self.active)
        stack = [tuple(np.argwhere(self.active)[0])]
        seen[stack[0]] = True
        while stack:
            r, c = stack.pop()
            for dr, dc in _SIDES.values():
                rr, cc = r + dr, c + dc
                if (0 <= rr < self.rows and 0 <= cc < self.cols
                        and self.active[rr, cc] and not seen[rr, cc]):
                    seen[rr, cc] = True
                    stack.append((rr, cc))
        if seen.sum() != self.active.sum():
            raise ValueError("active cells are not a single connected region")

    @property
    def n_cells(self) -> int:
        return int(self.active.sum())

    @property
    def n_sensors(self) -> int:
        return len(self.sensors)

    def index_map(self) -> np.ndarray:
        """(rows, cols) array: active-cell index, -1 where inactive."""
        idx = -np.ones((self.rows, self.cols), dtype=np.int64)
        idx[self.active] = np.arange(self.n_cells)
        return idx

    def cell_centers(self) -> np.ndarray:
        """(N, 2) coordinates of active cell centers, in meters."""
        rr, cc = np.nonzero(self.active)
        return self.cell_size * np.column_stack([cc + 0.5, rr + 0.5])

    def sensor_indices(self) -> np.ndarray:
        idx = self.index_map()
        return np.array([idx[r, c] for (r, c) in self.sensors], dtype=np.int64)

    def to_dict(self) -> dict:
        return {"rows": self.rows, "cols": self.cols,
                "cell_size": self.cell_size,
                "sensors": [list(s) for s in self.sensors],
                "active": self.active.astype(int).tolist()}


@dataclass
class ForwardConfig:
    """Temporal discretization, storage, sources, and boundaries.

    ``fixed_heads`` lists (row, col, side, head): a prescribed head on
    the named face (N/S/W/E) of that cell.  The face must lie on the
    domain boundary.  Faces not listed are no-flow.  ``initial_head``
    and ``recharge`` are scalars or per-active-cell arrays.
    """

    dt: float = 0.5
    n_steps: int = 25
    initial_head: float | np.ndarray = 10.0
    specific_yield: float = 0.2
    recharge: float | np.ndarray = 0.0
    fixed_heads: tuple = ()
    picard_tol: float = 1e-8
    picard_max_iter: int = 50

    def to_dict(self) -> dict:
        def plain(v):
            return np.asarray(v).tolist() if isinstance(v, np.ndarray) else v
        return {"dt": self.dt, "n_steps": self.n_steps,
                "initial_head": plain(self.initial_head),
                "specific_yield": self.specific_yield,
                "recharge": plain(self.recharge),
                "fixed_heads": [list(f) for f in self.fixed_heads],
                "picard_tol": self.picard_tol,
                "picard_max_iter": self.picard_max_iter}


def edge_fixed_heads(grid: GridSpec, heads: dict) -> tuple:
    """Fixed-head faces for whole domain edges.

    ``heads`` maps side letters (N/S/W/E) to a prescribed head; every
    active cell on that edge of the rectangle contributes its face.
    Sides not listed stay no-flow.
    """
    faces = []
    for side, value in heads.items():
        if side not in _SIDES:
            raise ValueError(f"unknown edge side '{side}'")
        dr, dc = _SIDES[side]
        for r in range(grid.rows):
            for c in range(grid.cols):
                on_edge = not (0 <= r + dr < grid.rows and 0 <= c + dc < grid.cols)
                if on_edge and grid.active[r, c]:
                    faces.append((r, c, side, float(value)))
    return tuple(faces)


@dataclass
class GPPrior:
    """Zero-mean Gaussian process with an exponential kernel.

    k(x, x') = variance * exp(-|x - x'| / length_scale), evaluated at
    active cell centers.  Lengths are in meters.
    """

    variance: float = 1.0
    length_scale: float = 20.0
    jitter: float = 1e-10

    def kernel(self, points: np.ndarray) -> np.ndarray:
        diff = points[:, None, :] - points[None, :, :]
        dist = np.sqrt((diff ** 2).sum(axis=-1))
        return self.variance * np.exp(-dist / self.length_scale)

    def cholesky(self, points: np.ndarray) -> np.ndarray:
        """Lower Cholesky factor, escalating jitter on rank deficiency."""
        K = self.kernel(points)
        jit = self.jitter * self.variance
        while jit <= 1e-2 * self.variance:
            try:
                return np.linalg.cholesky(K + jit * np.eye(K.shape[0]))
            except np.linalg.LinAlgError:
                jit *= 10.0
        raise np.linalg.LinAlgError(
            "prior covariance is not positive definite even with jitter")

    def to_dict(self) -> dict:
        return {"variance": self.variance, "length_scale": self.length_scale,
                "jitter": self.jitter}


@dataclass
class NoiseModel:
    """Additive white Gaussian observation noise, per sensor."""

    sigma: float = 0.01

    def to_dict(self) -> dict:
        sig = self.sigma
        return {"sigma": sig.tolist() if isinstance(sig, np.ndarray) else sig}


def sample_prior(prior: GPPrior, grid: GridSpec, n: int, rng: RngState,
                 chol: np.ndarray | None = None) -> np.ndarray:
    """``n`` draws of the log-conductivity field over active cells."""
    L = prior.cholesky(grid.cell_centers()) if chol is None else chol
    z = rng.normal((n, L.shape[0]))
    return z @ L.T


def add_noise(obs: np.ndarray, noise: NoiseModel, rng: RngState) -> np.ndarray:
    """Corrupt (k, N_u) or (M, k, N_u) records with sensor noise."""
    return obs + np.asarray(noise.sigma) * rng.normal(obs.shape)


class _Stencil:
    """Precomputed connectivity for one grid + boundary layout."""

    def __init__(self, grid: GridSpec, fc: ForwardConfig):
        idx = grid.index_map()
        pairs = []
        for r in range(grid.rows):
            for c in range(grid.cols):
                if idx[r, c] < 0:
                    continue
                for dr, dc in ((0, 1), (1, 0)):
                    rr, cc = r + dr, c + dc
                    if rr < grid.rows and cc < grid.cols and idx[rr, cc] >= 0:
                        pairs.append((idx[r, c], idx[rr, cc]))
        self.pair_i = np.array([p[0] for p in pairs], dtype=np.int64)
        self.pair_j = np.array([p[1] for p in pairs], dtype=np.int64)

        bcells, bheads = [], []
        for (r, c, side, head) in fc.fixed_heads:
            if side not in _SIDES:
                raise ValueError(f"unknown face side '{side}'")
            if idx[r, c] < 0:
                raise ValueError(f"fixed head on inactive cell ({r}, {c})")
            dr, dc = _SIDES[side]
            rr, cc = r + dr, c + dc
            interior = (0 <= rr < grid.rows and 0 <= cc < grid.cols
                        and idx[rr, cc] >= 0)
            if interior:
                raise ValueError(
                    f"fixed-head face {side} of cell ({r}, {c}) is not on "
                    "the domain boundary")
            bcells.append(idx[r, c])
            bheads.append(float(head))
        self.bnd_cell = np.array(bcells, dtype=np.int64)
        self.bnd_head = np.array(bheads)
        self.n = grid.n_cells


def solve_groundwater(log_k: np.ndarray, grid: GridSpec, fc: ForwardConfig,
                      return_details: bool = False):
    """Sensor heads for one log-conductivity field.

    Returns a (n_steps, N_u) array, or with ``return_details`` a tuple
    ``(obs, details)`` where ``details`` carries full head fields and a
    per-step mass balance (storage change minus net inflow, in m^3).
    """
    log_k = np.asarray(log_k, dtype=np.float64)
    if log_k.shape != (grid.n_cells,):
        raise ValueError(
            f"expected {grid.n_cells} log-conductivity values, "
            f"got shape {log_k.shape}")
    kappa = np.exp(log_k)
    st = _Stencil(grid, fc)
    n = st.n
    area = grid.cell_size ** 2
    storage = fc.specific_yield * area / fc.dt
    recharge = np.broadcast_to(np.asarray(fc.recharge, dtype=np.float64), (n,))
    sensor_idx = grid.sensor_indices()

    u = np.broadcast_to(np.asarray(fc.initial_head, dtype=np.float64),
                        (n,)).copy()
    if np.any(u <= 0):
        raise SimulationError("initial head must be positive")
    heads = np.empty((fc.n_steps + 1, n))
    heads[0] = u
    obs = np.empty((fc.n_steps, grid.n_sensors))
    residuals = np.empty(fc.n_steps)
    picard_counts = np.empty(fc.n_steps, dtype=np.int64)

    for step in range(fc.n_steps):
        u_old = u
        u_it = u_old.copy()
        for it in range(fc.picard_max_iter):
            if np.any(u_it <= 0):
                raise SimulationError(
                    f"non-positive head during step {step + 1}")
            tp = _harmonic(kappa[st.pair_i] * u_it[st.pair_i],
                           kappa[st.pair_j] * u_it[st.pair_j])
            tb = 2.0 * kappa[st.bnd_cell] * u_it[st.bnd_cell]
            diag = np.full(n, storage)
            np.add.at(diag, st.pair_i, tp)
            np.add.at(diag, st.pair_j, tp)
            np.add.at(diag, st.bnd_cell, tb)
            rows = np.concatenate([np.arange(n), st.pair_i, st.pair_j])
            cols = np.concatenate([np.arange(n), st.pair_j, st.pair_i])
            vals = np.concatenate([diag, -tp, -tp])
            A = sparse.csr_matrix((vals, (rows, cols)), shape=(n, n))
            rhs = storage * u_old - recharge * area
            np.add.at(rhs, st.bnd_cell, tb * st.bnd_head)
            u_new = spsolve(A, rhs)
            if np.max(np.abs(u_new - u_it)) < fc.picard_tol:
                break
            u_it = u_new
        else:
            raise SimulationError(
                f"Picard iteration did not converge within "
                f"{fc.picard_max_iter} iterations at step {step + 1}")
        if np.any(u_new <= 0):
            raise SimulationError(
                f"non-positive head after step {step + 1}")
        # discrete balance with the same lagged transmissivities the
        # accepted solve used; the residual is pure linear-solver error
        inflow = float(np.sum(tb * (st.bnd_head - u_new[st.bnd_cell])))
        stored = fc.specific_yield * area * float(np.sum(u_new - u_old))
        sourced = float(np.sum(recharge * area))
        residuals[step] = stored - fc.dt * (inflow - sourced)
        picard_counts[step] = it + 1
        u = u_new
        heads[step + 1] = u
        obs[step] = u[sensor_idx]

    if return_details:
        return obs, {"heads": heads, "mass_residual": residuals,
                     "picard_iterations": picard_counts}
    return obs


def _harmonic(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return 2.0 * a * b / (a + b)


# ---------------------------------------------------------------------------
# analytically tractable companion model
# ---------------------------------------------------------------------------

class LinearGaussianModel:
    """Linear forward map with Gaussian prior and noise.

    theta ~ N(0, prior_cov), u = G theta + eps, eps ~ N(0, noise_var I).
    The exact posterior is Gaussian and cheap, which makes this the
    reference problem for end-to-end correctness of the learned
    posterior machinery.
    """

    def __init__(self, G: np.ndarray, prior_cov: np.ndarray, noise_var: float):
        self.G = np.asarray(G, dtype=np.float64)
        self.prior_cov = np.asarray(prior_cov, dtype=np.float64)
        self.noise_var = float(noise_var)
        if self.G.ndim != 2 or self.prior_cov.shape != (self.G.shape[1],) * 2:
            raise ValueError("G and prior covariance dimensions disagree")
        if self.noise_var <= 0:
            raise ValueError("noise variance must be positive")
        try:
            self._prior_chol = np.linalg.cholesky(self.prior_cov)
        except np.linalg.LinAlgError:
            raise ValueError("prior covariance must be positive definite")

    @property
    def dim(self) -> int:
        return self.G.shape[1]

    @property
    def n_obs(self) -> int:
        return self.G.shape[0]

    def sample_prior(self, n: int, rng: RngState) -> np.ndarray:
        return rng.normal((n, self.dim)) @ self._prior_chol.T

    def simulate(self, theta: np.ndarray, rng: RngState) -> np.ndarray:
        theta = np.atleast_2d(theta)
        clean = theta @ self.G.T
        return clean + np.sqrt(self.noise_var) * rng.normal(clean.shape)

    def posterior(self, u: np.ndarray):
        """Exact posterior mean and covariance given one observation."""
        precision = (np.linalg.inv(self.prior_cov)
                     + self.G.T @ self.G / self.noise_var)
        cov = np.linalg.inv(precision)
        mean = cov @ self.G.T @ np.asarray(u, dtype=np.float64) / self.noise_var
        return mean, cov

    def generate(self, m: int, seed: int) -> "SimulationDataset":
        """Dataset of (theta, u) pairs; observations shaped (m, k, 1)."""
        theta = np.empty((m, self.dim))
        obs = np.empty((m, self.n_obs, 1))
        root = RngState(seed)
        for i in range(m):
            rng = root.spawn(i)
            theta[i] = self.sample_prior(1, rng)[0]
            obs[i, :, 0] = self.simulate(theta[i], rng)[0]
        provenance = {"kind": "linear_gaussian", "seed": seed, "m": m,
                      "noise_var": self.noise_var}
        return SimulationDataset.from_float64(theta, obs, provenance)


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

@dataclass
class SimulationDataset:
    """Parameter/observation pairs with provenance and a fixed split.

    Values are float32-quantized on creation so that in-memory use and
    a save/load round trip see bit-identical numbers.  The last
    ``n_val + n_test`` records form the validation and test splits.
    """

    theta: np.ndarray
    obs: np.ndarray
    provenance: dict = field(default_factory=dict)
    n_val: int = 0
    n_test: int = 0

    @classmethod
    def from_float64(cls, theta, obs, provenance=None, n_val=0, n_test=0):
        theta = np.asarray(theta, np.float32).astype(np.float64)
        obs = np.asarray(obs, np.float32).astype(np.float64)
        return cls(theta, obs, dict(provenance or {}), n_val, n_test)

    def __post_init__(self):
        if self.theta.ndim != 2 or self.obs.ndim != 3:
            raise ValueError("theta must be (M, N) and obs (M, k, N_u)")
        if self.theta.shape[0] != self.obs.shape[0]:
            raise ValueError("theta and obs record counts differ")
        if self.n_val + self.n_test > self.m:
            raise ValueError("split exceeds the number of records")

    @property
    def m(self) -> int:
        return self.theta.shape[0]

    @property
    def n_train(self) -> int:
        return self.m - self.n_val - self.n_test

    def with_split(self, n_val: int, n_test: int) -> "SimulationDataset":
        return SimulationDataset(self.theta, self.obs, self.provenance,
                                 n_val, n_test)

    @property
    def train_theta(self): return self.theta[:self.n_train]

    @property
    def train_obs(self): return self.obs[:self.n_train]

    @property
    def val_theta(self): return self.theta[self.n_train:self.n_train + self.n_val]

    @property
    def val_obs(self): return self.obs[self.n_train:self.n_train + self.n_val]

    @property
    def test_theta(self): return self.theta[self.n_train + self.n_val:]

    @property
    def test_obs(self): return self.obs[self.n_train + self.n_val:]

    def save(self, path) -> None:
        m, n = self.theta.shape
        _, k, n_u = self.obs.shape
        prov = dict(self.provenance)
        prov["n_val"] = self.n_val
        prov["n_test"] = self.n_test
        pj = json.dumps(prov, sort_keys=True, separators=(",", ":")).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(DATASET_MAGIC)
            fh.write(struct.pack("<HIIII", DATASET_VERSION, m, n, k, n_u))
            for i in range(m):
                fh.write(self.theta[i].astype("<f4").tobytes())
                fh.write(self.obs[i].astype("<f4").tobytes())
            fh.write(struct.pack("<I", len(pj)))
            fh.write(pj)

    @classmethod
    def load(cls, path) -> "SimulationDataset":
        with open(path, "rb") as fh:
            blob = fh.read()
        if len(blob) < 22 or blob[:4] != DATASET_MAGIC:
            raise ValueError(f"{path}: not a dataset file")
        version, m, n, k, n_u = struct.unpack_from("<HIIII", blob, 4)
        if version != DATASET_VERSION:
            raise ValueError(f"{path}: unsupported dataset version {version}")
        rec = n + k * n_u
        body_end = 22 + 4 * m * rec
        if len(blob) < body_end + 4:
            raise ValueError(f"{path}: truncated dataset body")
        flat = np.frombuffer(blob[22:body_end], dtype="<f4").reshape(m, rec)
        theta = flat[:, :n].astype(np.float64)
        obs = flat[:, n:].reshape(m, k, n_u).astype(np.float64)
        (plen,) = struct.unpack_from("<I", blob, body_end)
        pstart = body_end + 4
        if len(blob) != pstart + plen:
            raise ValueError(f"{path}: trailing or missing provenance bytes")
        prov = json.loads(blob[pstart:pstart + plen].decode("utf-8"))
        n_val = int(prov.pop("n_val", 0))
        n_test = int(prov.pop("n_test", 0))
        return cls(theta, obs, prov, n_val, n_test)


def generate_dataset(grid: GridSpec, prior: GPPrior, fc: ForwardConfig,
                     noise: NoiseModel, m: int, seed: int, workers: int = 1,
                     max_retries: int = 5, n_val: int = 0,
                     n_test: int = 0) -> SimulationDataset:
    """Simulate ``m`` training pairs from the groundwater model.

    Sample ``i`` only ever touches the stream keyed (seed, i): the prior
    draw, any retries after solver failures, and the observation noise
    all consume it in a fixed order, so results do not depend on
    ``workers``.
    """
    chol = prior.cholesky(grid.cell_centers())

    def one(i: int):
        rng = RngState(seed).spawn(i)
        for _ in range(max_retries):
            theta = sample_prior(prior, grid, 1, rng, chol=chol)[0]
            try:
                clean = solve_groundwater(theta, grid, fc)
            except SimulationError:
                continue
            return theta, add_noise(clean, noise, rng)
        raise SimulationError(
            f"sample {i}: no valid simulation in {max_retries} attempts")

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, range(m)))
    else:
        results = [one(i) for i in range(m)]

    theta = np.stack([r[0] for r in results])
    obs = np.stack([r[1] for r in results])
    provenance = {"kind": "groundwater", "seed": seed, "m": m,
                  "grid": grid.to_dict(), "forward": fc.to_dict(),
                  "prior": prior.to_dict(), "noise": noise.to_dict()}
    return SimulationDataset.from_float64(theta, obs, provenance,
                                          n_val=n_val, n_test=n_test)


def default_split(m: int) -> tuple[int, int]:
    """Validation/test sizes scaled from the 4800/100/101 reference split."""
    if m < 3:
        raise ValueError("need at least 3 records to split")
    n_val = max(1, round(m * 100 / 5001))
    n_test = max(1, round(m * 101 / 5001))
    return n_val, n_test


def desk_scale_setup():
    """Reference experiment: 8 x 4 grid, 4 wells, 25 daily half-steps.

    A head gradient is imposed along the long axis (11 m on the north
    edge, 9 m on the south edge) starting from a flat 10 m state, so the
    transient drawdown curves at the wells carry information about the
    conductivity field along the flow path.
    """
    grid = GridSpec()
    fc = ForwardConfig(fixed_heads=edge_fixed_heads(grid, {"N": 11.0, "S": 9.0}))
    return grid, GPPrior(), fc, NoiseModel()


def read_observation_csv(path) -> np.ndarray:
    """(k, N_u) record from a plain numeric CSV (no header)."""
    obs = np.atleast_2d(np.loadtxt(path, delimiter=",", dtype=np.float64))
    return obs


def write_observation_csv(path, obs: np.ndarray) -> None:
    np.savetxt(path, np.asarray(obs), delimiter=",", fmt="%.17g")
