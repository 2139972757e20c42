"""Posterior summaries, accuracy metrics, and predictive checks.

Everything here is a pure function over arrays.  The three scalar
accuracy metrics follow their printed definitions exactly: per-component
relative error, relative l2 error, and the log predictive probability
(LPP).  Note that the LPP as defined below is a sum of negative
log-density terms, so smaller values mean closer agreement; it is
reported as defined, without a sign flip.

Credible intervals are empirical 2.5% / 97.5% quantiles with linear
interpolation between order statistics.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import simulate
from .simulate import ForwardConfig, GridSpec, SimulationError

MIN_COVERAGE_SAMPLES = 40


class PosteriorSamples:
    """A bag of posterior draws with per-dimension summaries."""

    def __init__(self, samples: np.ndarray):
        samples = np.asarray(samples, dtype=np.float64)
        if samples.ndim != 2 or samples.shape[0] < 1:
            raise ValueError("samples must be a nonempty (n, N) matrix")
        self.samples = samples

    @property
    def n(self) -> int:
        return self.samples.shape[0]

    @property
    def dim(self) -> int:
        return self.samples.shape[1]

    @property
    def mean(self) -> np.ndarray:
        return self.samples.mean(axis=0)

    @property
    def std(self) -> np.ndarray:
        return self.samples.std(axis=0)

    def quantile(self, q: float) -> np.ndarray:
        return np.quantile(self.samples, q, axis=0, method="linear")

    def interval95(self) -> tuple[np.ndarray, np.ndarray]:
        return self.quantile(0.025), self.quantile(0.975)


def relative_error(est: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """Per-component |est - ref| / |ref|; NaN marks undefined entries.

    Components with ``ref == 0`` have no relative error; they are
    flagged with NaN so report code can exclude and count them.
    """
    est = np.asarray(est, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    out = np.full(ref.shape, np.nan)
    defined = ref != 0.0
    out[defined] = np.abs(est[defined] - ref[defined]) / np.abs(ref[defined])
    return out


def rel_l2_error(est: np.ndarray, ref: np.ndarray) -> float:
    """Euclidean misfit normalized by the reference norm."""
    ref = np.asarray(ref, dtype=np.float64)
    denom = float(np.linalg.norm(ref))
    if denom == 0.0:
        raise ValueError("reference vector has zero norm")
    return float(np.linalg.norm(np.asarray(est, dtype=np.float64) - ref)
                 / denom)


def lpp(est: np.ndarray, ref: np.ndarray) -> float:
    """Log predictive probability, implemented exactly as defined:

        sum_i [ (est_i - ref_i)^2 / (2 ref_i^2) + 0.5 log(2 pi ref_i^2) ]

    Under this definition smaller values indicate closer agreement.
    """
    est = np.asarray(est, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if np.any(ref == 0.0):
        raise ValueError("LPP is undefined for zero reference components")
    return float(np.sum((est - ref) ** 2 / (2.0 * ref ** 2)
                        + 0.5 * np.log(2.0 * np.pi * ref ** 2)))


def coverage(samples, ref: np.ndarray) -> tuple[np.ndarray, float]:
    """Per-dimension 95% credible-interval hit flags and their mean.

    Flags are true where the reference value lies inside the empirical
    [2.5%, 97.5%] interval.  Fewer than 40 draws make those quantiles
    meaningless, so that is an error.
    """
    if not isinstance(samples, PosteriorSamples):
        samples = PosteriorSamples(samples)
    if samples.n < MIN_COVERAGE_SAMPLES:
        raise ValueError(
            f"coverage needs at least {MIN_COVERAGE_SAMPLES} samples, "
            f"got {samples.n}")
    lo, hi = samples.interval95()
    ref = np.asarray(ref, dtype=np.float64)
    flags = (lo <= ref) & (ref <= hi)
    return flags, float(flags.mean())


@dataclass
class PredictiveBands:
    """Pointwise posterior-predictive summary, each field (k, N_u)."""

    mean: np.ndarray
    lo95: np.ndarray
    hi95: np.ndarray


def posterior_predictive(samples, grid: GridSpec, fc: ForwardConfig,
                         workers: int = 1):
    """Forward-simulate every posterior draw.

    Returns ``(predictions, bands)`` with predictions shaped
    (n, k, N_u).  A single draw gives zero-width bands identical to one
    direct solver call.  Solver failures are re-raised with the
    offending sample index attached.
    """
    if isinstance(samples, PosteriorSamples):
        samples = samples.samples
    samples = np.asarray(samples, dtype=np.float64)

    def one(i: int) -> np.ndarray:
        try:
            return simulate.solve_groundwater(samples[i], grid, fc)
        except SimulationError as err:
            raise SimulationError(f"posterior sample {i}: {err}") from err

    n = samples.shape[0]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            preds = np.stack(list(pool.map(one, range(n))))
    else:
        preds = np.stack([one(i) for i in range(n)])
    bands = PredictiveBands(
        mean=preds.mean(axis=0),
        lo95=np.quantile(preds, 0.025, axis=0, method="linear"),
        hi95=np.quantile(preds, 0.975, axis=0, method="linear"))
    return preds, bands


def bands_to_csv(path, bands: PredictiveBands, dt: float = 1.0) -> None:
    """Rows of time, sensor, mean, lo95, hi95 (times start at dt)."""
    k, n_u = bands.mean.shape
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("time,sensor,mean,lo95,hi95\n")
        for t in range(k):
            for s in range(n_u):
                fh.write(f"{(t + 1) * dt!r},{s},{float(bands.mean[t, s])!r},"
                         f"{float(bands.lo95[t, s])!r},"
                         f"{float(bands.hi95[t, s])!r}\n")


@dataclass
class MetricsReport:
    """Accuracy metrics for one estimate against one reference."""

    rel_errors: np.ndarray
    rel_l2: float
    lpp: float
    coverage_flags: np.ndarray | None = None
    coverage_fraction: float = np.nan

    @classmethod
    def evaluate(cls, est: np.ndarray, ref: np.ndarray,
                 samples=None) -> "MetricsReport":
        report = cls(rel_errors=relative_error(est, ref),
                     rel_l2=rel_l2_error(est, ref), lpp=lpp(est, ref))
        if samples is not None:
            report.coverage_flags, report.coverage_fraction = \
                coverage(samples, ref)
        return report

    @property
    def n_undefined(self) -> int:
        return int(np.isnan(self.rel_errors).sum())

    @property
    def average_relative_error(self) -> float:
        defined = self.rel_errors[~np.isnan(self.rel_errors)]
        return float(defined.mean()) if defined.size else np.nan

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("average_relative_error,relative_l2_error,lpp,"
                     "coverage_fraction,n_undefined\n")
            fh.write(f"{self.average_relative_error!r},{self.rel_l2!r},"
                     f"{self.lpp!r},{self.coverage_fraction!r},"
                     f"{self.n_undefined}\n")

    def to_text(self) -> str:
        lines = [
            f"{'average relative error':>24}  {'relative l2 error':>18}  "
            f"{'LPP':>10}",
            f"{self.average_relative_error:>24.4f}  {self.rel_l2:>18.4f}  "
            f"{self.lpp:>10.2f}",
        ]
        if self.coverage_flags is not None:
            lines.append(f"coverage fraction: {self.coverage_fraction:.3f} "
                         f"({int(self.coverage_flags.sum())} of "
                         f"{self.coverage_flags.size} inside)")
        if self.n_undefined:
            lines.append(f"undefined relative errors: {self.n_undefined} "
                         "(zero reference components, excluded)")
        return "\n".join(lines)
