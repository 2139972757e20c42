"""Conditional normalizing flow: coupling layers, splines, permutations.

The flow maps a (standardized) parameter vector to a latent vector of
the same dimension, conditioned on a feature vector extracted from the
observations.  Two layer families are provided:

* :class:`AffineCouplingLayer` rescales and shifts each half of the
  input given the other half and the conditioning features.  Scales are
  soft-clamped so a wild subnetwork output cannot explode the Jacobian.
* :class:`SplineCouplingLayer` applies an elementwise monotone
  rational-quadratic spline to the second half, with knots and slopes
  predicted from the first half and the features.  Outside the knot box
  the transform is exactly the identity.

Both start as the identity map (final subnet layers are zero
initialized), both have an exact algebraic inverse, and both report
``log |det J|`` alongside the transformed batch.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import RngState, Tensor
from .nets import MLP, ParameterStore


def soft_clamp(x: Tensor, c: float) -> Tensor:
    """Smooth clamp of scale logits to (-c, c) via c * tanh(x / c)."""
    return ad.mul(ad.tanh(ad.mul(x, Tensor(1.0 / c))), Tensor(c))


class AffineCouplingLayer:
    """Two-step affine coupling conditioned on external features.

    With input split ``(x1, x2)`` at index ``m = dim // 2``:

        z1 = x1 * exp(s2(x2, f)) + t2(x2, f)
        z2 = x2 * exp(s1(z1, f)) + t1(z1, f)

    Each half is transformed using the other, so one layer touches every
    coordinate.  Inversion solves the two steps in reverse order; the
    log-determinant is the sum of the (clamped) scale logits.
    """

    kind = "affine"

    def __init__(self, store: ParameterStore, prefix: str, dim: int, cond_dim: int,
                 hidden: tuple[int, ...], rng: RngState, dropout: float = 0.0,
                 clamp: float = 2.0):
        self.dim = dim
        self.m = dim // 2
        self.d2 = dim - self.m
        self.clamp = float(clamp)
        # four independent subnets: scales and shifts for each step
        self.s2 = MLP(store, f"{prefix}.s2", self.d2 + cond_dim, hidden,
                      self.m, rng, dropout=dropout, zero_init_output=True)
        self.t2 = MLP(store, f"{prefix}.t2", self.d2 + cond_dim, hidden,
                      self.m, rng, dropout=dropout, zero_init_output=True)
        self.s1 = MLP(store, f"{prefix}.s1", self.m + cond_dim, hidden,
                      self.d2, rng, dropout=dropout, zero_init_output=True)
        self.t1 = MLP(store, f"{prefix}.t1", self.m + cond_dim, hidden,
                      self.d2, rng, dropout=dropout, zero_init_output=True)

    def _split(self, x: Tensor):
        return (ad.narrow(x, -1, 0, self.m), ad.narrow(x, -1, self.m, self.d2))

    def forward(self, x: Tensor, cond: Tensor):
        x1, x2 = self._split(x)
        in2 = ad.concat([x2, cond], axis=-1)
        s2 = soft_clamp(self.s2(in2), self.clamp)
        z1 = ad.add(ad.mul(x1, ad.exp(s2)), self.t2(in2))
        in1 = ad.concat([z1, cond], axis=-1)
        s1 = soft_clamp(self.s1(in1), self.clamp)
        z2 = ad.add(ad.mul(x2, ad.exp(s1)), self.t1(in1))
        logdet = ad.add(ad.reduce_sum(s2, axis=-1), ad.reduce_sum(s1, axis=-1))
        return ad.concat([z1, z2], axis=-1), logdet

    def inverse(self, z: Tensor, cond: Tensor):
        z1, z2 = self._split(z)
        in1 = ad.concat([z1, cond], axis=-1)
        s1 = soft_clamp(self.s1(in1), self.clamp)
        x2 = ad.mul(ad.sub(z2, self.t1(in1)), ad.exp(ad.neg(s1)))
        in2 = ad.concat([x2, cond], axis=-1)
        s2 = soft_clamp(self.s2(in2), self.clamp)
        x1 = ad.mul(ad.sub(z1, self.t2(in2)), ad.exp(ad.neg(s2)))
        logdet = ad.neg(ad.add(ad.reduce_sum(s2, axis=-1),
                               ad.reduce_sum(s1, axis=-1)))
        return ad.concat([x1, x2], axis=-1), logdet


class SplineCouplingLayer:
    """Monotone rational-quadratic spline coupling.

    The first ``m = dim // 2`` coordinates pass through unchanged and,
    together with the conditioning features, parameterize an elementwise
    spline for the remaining coordinates: ``bins`` segments on
    ``[-bound, bound]`` in each axis, boundary slopes pinned to 1, and
    the identity outside the box.  Minimum bin widths and slopes keep
    every segment strictly monotone, which guarantees a unique real
    inverse found in closed form.
    """

    kind = "spline"

    def __init__(self, store: ParameterStore, prefix: str, dim: int, cond_dim: int,
                 hidden: tuple[int, ...], rng: RngState, dropout: float = 0.0,
                 bins: int = 16, bound: float = 3.0,
                 min_bin: float = 1e-3, min_slope: float = 1e-3):
        if bins * min_bin >= 2.0 * bound:
            raise ValueError("bins * min_bin must stay below the box span")
        self.dim = dim
        self.m = dim // 2
        self.d2 = dim - self.m
        self.bins = int(bins)
        self.bound = float(bound)
        self.min_bin = float(min_bin)
        self.min_slope = float(min_slope)
        # added to raw slope logits so zero output gives slope exactly 1
        self._slope_shift = float(np.log(np.expm1(1.0 - min_slope)))
        self.net = MLP(store, f"{prefix}.cond", self.m + cond_dim, hidden,
                       self.d2 * (3 * self.bins - 1), rng, dropout=dropout,
                       zero_init_output=True)

    def _spline_params(self, first_half: Tensor, cond: Tensor):
        """Knot positions and slopes predicted from the untransformed half."""
        B = first_half.shape[0]
        K, d2, bound = self.bins, self.d2, self.bound
        raw = self.net(ad.concat([first_half, cond], axis=-1))
        raw = ad.reshape(raw, (B, d2, 3 * K - 1))
        w_logit = ad.narrow(raw, -1, 0, K)
        h_logit = ad.narrow(raw, -1, K, K)
        s_logit = ad.narrow(raw, -1, 2 * K, K - 1)

        span = 2.0 * bound
        scale = span - K * self.min_bin
        widths = ad.add(ad.mul(ad.softmax(w_logit), Tensor(scale)),
                        Tensor(self.min_bin))
        heights = ad.add(ad.mul(ad.softmax(h_logit), Tensor(scale)),
                         Tensor(self.min_bin))
        left = Tensor(np.full((B, d2, 1), -bound))
        xk = ad.concat([left, ad.add(ad.cumsum(widths, axis=-1), Tensor(-bound))],
                       axis=-1)
        zk = ad.concat([left, ad.add(ad.cumsum(heights, axis=-1), Tensor(-bound))],
                       axis=-1)
        inner = ad.add(ad.softplus(ad.add(s_logit, Tensor(self._slope_shift))),
                       Tensor(self.min_slope))
        ones = Tensor(np.ones((B, d2, 1)))
        slopes = ad.concat([ones, inner, ones], axis=-1)
        return xk, widths, zk, heights, slopes

    @staticmethod
    def _bin_of(values: np.ndarray, knots: np.ndarray, n_bins: int) -> np.ndarray:
        """Index of the segment containing each value (constant w.r.t. AD)."""
        idx = (values[..., None] >= knots[..., :-1]).sum(axis=-1) - 1
        return np.clip(idx, 0, n_bins - 1)[..., None]

    @staticmethod
    def _gather(t: Tensor, idx: np.ndarray) -> Tensor:
        picked = ad.take_along(t, idx, axis=-1)
        return ad.reshape(picked, idx.shape[:-1])

    def forward(self, x: Tensor, cond: Tensor):
        x1 = ad.narrow(x, -1, 0, self.m)
        x2 = ad.narrow(x, -1, self.m, self.d2)
        xk, widths, zk, heights, slopes = self._spline_params(x1, cond)

        inside = np.abs(x2.data) <= self.bound
        zero = Tensor(np.zeros_like(x2.data))
        x2in = ad.where_mask(inside, x2, zero)
        idx = self._bin_of(x2in.data, xk.data, self.bins)

        x_lo = self._gather(xk, idx)
        w = self._gather(widths, idx)
        z_lo = self._gather(zk, idx)
        h = self._gather(heights, idx)
        s_lo = self._gather(slopes, idx)
        s_hi = self._gather(slopes, idx + 1)

        xi = ad.div(ad.sub(x2in, x_lo), w)
        phi = ad.div(h, w)
        z_in, logderiv = self._evaluate(xi, z_lo, h, phi, s_lo, s_hi)

        z2 = ad.where_mask(inside, z_in, x2)
        ld_el = ad.where_mask(inside, logderiv, zero)
        logdet = ad.reduce_sum(ld_el, axis=-1)
        return ad.concat([x1, z2], axis=-1), logdet

    @staticmethod
    def _evaluate(xi: Tensor, z_lo: Tensor, h: Tensor, phi: Tensor,
                  s_lo: Tensor, s_hi: Tensor):
        """Rational-quadratic segment value and log-derivative at ``xi``."""
        one = Tensor(1.0)
        xi1m = ad.sub(one, xi)
        cross = ad.mul(xi, xi1m)
        excess = ad.sub(ad.add(s_hi, s_lo), ad.mul(phi, Tensor(2.0)))
        den = ad.add(phi, ad.mul(excess, cross))
        num = ad.mul(h, ad.add(ad.mul(phi, ad.mul(xi, xi)), ad.mul(s_lo, cross)))
        value = ad.add(z_lo, ad.div(num, den))
        dnum = ad.add(ad.add(ad.mul(s_hi, ad.mul(xi, xi)),
                             ad.mul(ad.mul(phi, Tensor(2.0)), cross)),
                      ad.mul(s_lo, ad.mul(xi1m, xi1m)))
        logderiv = ad.sub(ad.add(ad.mul(ad.log(phi), Tensor(2.0)), ad.log(dnum)),
                          ad.mul(ad.log(den), Tensor(2.0)))
        return value, logderiv

    def inverse(self, z: Tensor, cond: Tensor):
        z1 = ad.narrow(z, -1, 0, self.m)
        z2 = ad.narrow(z, -1, self.m, self.d2)
        xk, widths, zk, heights, slopes = self._spline_params(z1, cond)

        inside = np.abs(z2.data) <= self.bound
        zero = Tensor(np.zeros_like(z2.data))
        z2in = ad.where_mask(inside, z2, zero)
        idx = self._bin_of(z2in.data, zk.data, self.bins)

        x_lo = self._gather(xk, idx)
        w = self._gather(widths, idx)
        z_lo = self._gather(zk, idx)
        h = self._gather(heights, idx)
        s_lo = self._gather(slopes, idx)
        s_hi = self._gather(slopes, idx + 1)

        dy = ad.sub(z2in, z_lo)
        phi = ad.div(h, w)
        excess = ad.sub(ad.add(s_hi, s_lo), ad.mul(phi, Tensor(2.0)))
        qa = ad.add(ad.mul(h, ad.sub(phi, s_lo)), ad.mul(dy, excess))
        qb = ad.sub(ad.mul(h, s_lo), ad.mul(dy, excess))
        qc = ad.neg(ad.mul(phi, dy))

        disc = ad.sub(ad.mul(qb, qb), ad.mul(ad.mul(qa, qc), Tensor(4.0)))
        neg = disc.data < 0.0
        if np.any(disc.data < -1e-9):
            raise ArithmeticError(
                "spline inversion found no real root; layer parameters are "
                "outside the monotone regime")
        if np.any(neg):
            disc = ad.where_mask(neg, Tensor(np.zeros_like(disc.data)), disc)
        xi = ad.div(ad.mul(qc, Tensor(2.0)),
                    ad.neg(ad.add(qb, ad.sqrt(disc))))
        if np.any((xi.data < -1e-9) | (xi.data > 1.0 + 1e-9)):
            raise ArithmeticError(
                "spline inversion produced a root outside [0, 1]")

        x_in = ad.add(x_lo, ad.mul(xi, w))
        _, logderiv = self._evaluate(xi, z_lo, h, phi, s_lo, s_hi)
        x2 = ad.where_mask(inside, x_in, z2)
        ld_el = ad.where_mask(inside, logderiv, zero)
        logdet = ad.neg(ad.reduce_sum(ld_el, axis=-1))
        return ad.concat([z1, x2], axis=-1), logdet


class ConditionalFlow:
    """Stack of coupling layers with fixed per-layer permutations.

    Spline layers leave their first half untouched, so each layer is
    preceded by a random (but fixed and serialized) reordering of the
    coordinates; over the stack every coordinate gets transformed and
    mixed.  Affine layers come first, splines last.
    """

    def __init__(self, store: ParameterStore, dim: int, cond_dim: int,
                 n_affine: int = 5, n_spline: int = 5,
                 hidden: tuple[int, ...] = (128, 128), bins: int = 16,
                 bound: float = 3.0, clamp: float = 2.0, dropout: float = 0.5,
                 init_seed: int = 0, perm_seed: int = 0, permute: bool = True,
                 prefix: str = "flow", permutations=None):
        self.dim = dim
        self.cond_dim = cond_dim
        self.config = dict(n_affine=n_affine, n_spline=n_spline,
                           hidden=tuple(hidden), bins=bins, bound=bound,
                           clamp=clamp, dropout=dropout, init_seed=init_seed,
                           perm_seed=perm_seed, permute=permute)
        n_layers = n_affine + n_spline
        if permutations is not None:
            self.perms = [np.asarray(p, dtype=np.int64) for p in permutations]
            if len(self.perms) != n_layers:
                raise ValueError("need one permutation per layer")
        elif permute:
            # distinct sub-stream so permutations never alias weight draws
            prng = RngState(perm_seed, stream=3)
            self.perms = [prng.permutation(dim).astype(np.int64)
                          for _ in range(n_layers)]
        else:
            self.perms = [np.arange(dim, dtype=np.int64)] * n_layers
        self._inv_perms = [np.argsort(p) for p in self.perms]

        rng = RngState(init_seed, stream=2)
        self.layers: list[AffineCouplingLayer | SplineCouplingLayer] = []
        for i in range(n_affine):
            self.layers.append(AffineCouplingLayer(
                store, f"{prefix}.{i}", dim, cond_dim, tuple(hidden), rng,
                dropout=dropout, clamp=clamp))
        for i in range(n_affine, n_layers):
            self.layers.append(SplineCouplingLayer(
                store, f"{prefix}.{i}", dim, cond_dim, tuple(hidden), rng,
                dropout=dropout, bins=bins, bound=bound))

    def forward(self, x: Tensor, cond: Tensor):
        """Map inputs to latents; returns ``(z, log |det J|)`` per row."""
        total = Tensor(np.zeros(x.shape[0]))
        for perm, layer in zip(self.perms, self.layers):
            x = ad.permute_cols(x, perm)
            x, ld = layer.forward(x, cond)
            total = ad.add(total, ld)
        return x, total

    def inverse(self, z: Tensor, cond: Tensor):
        """Exact inverse of :meth:`forward`; logdet is the negated total."""
        total = Tensor(np.zeros(z.shape[0]))
        for inv_perm, layer in zip(reversed(self._inv_perms),
                                   reversed(self.layers)):
            z, ld = layer.inverse(z, cond)
            z = ad.permute_cols(z, inv_perm)
            total = ad.add(total, ld)
        return z, total

    def descriptor(self) -> dict:
        """JSON-serializable architecture record, permutations included."""
        return {
            "dim": self.dim,
            "cond_dim": self.cond_dim,
            **{k: (list(v) if isinstance(v, tuple) else v)
               for k, v in self.config.items()},
            "permutations": [p.tolist() for p in self.perms],
        }

    @classmethod
    def from_descriptor(cls, store: ParameterStore, desc: dict,
                        prefix: str = "flow") -> "ConditionalFlow":
        return cls(store, desc["dim"], desc["cond_dim"],
                   n_affine=desc["n_affine"], n_spline=desc["n_spline"],
                   hidden=tuple(desc["hidden"]), bins=desc["bins"],
                   bound=desc["bound"], clamp=desc["clamp"],
                   dropout=desc["dropout"], init_seed=desc["init_seed"],
                   perm_seed=desc["perm_seed"], permute=desc["permute"],
                   prefix=prefix, permutations=desc["permutations"])


def latent_logprob(z: Tensor) -> Tensor:
    """Standard normal log-density of each latent row."""
    n = z.shape[-1]
    sq = ad.reduce_sum(ad.mul(z, z), axis=-1)
    return ad.sub(ad.mul(sq, Tensor(-0.5)), Tensor(0.5 * n * np.log(2.0 * np.pi)))


def sample_posterior(flow: ConditionalFlow, cond_row: np.ndarray, n: int,
                     rng: RngState) -> np.ndarray:
    """Draw ``n`` flow-space samples for one conditioning vector.

    Pulls standard normal latents back through the exact inverse.  The
    caller is responsible for undoing any input standardization.
    """
    z = Tensor(rng.normal((n, flow.dim)))
    cond = Tensor(np.broadcast_to(cond_row, (n, cond_row.size)).copy())
    x, _ = flow.inverse(z, cond)
    return x.data
