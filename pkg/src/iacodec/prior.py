"""Spike-and-slab prior over quantized decoder-parameter updates.

The density mixes a wide zero-mean normal (the slab, std ``sigma``) with a
narrow one (the spike, std ``t/6`` so that three spike standard deviations
span half a quantizer bin), the spike carrying ``alpha`` times the slab's
weight:

    p(x) = (N(x; 0, sigma) + alpha * N(x; 0, t/6)) / (1 + alpha)

Transmitted updates live on the uniform grid with step ``t``.  Their code
cost comes from the pushforward pmf of the density under that grid: the
mass of bin center ``c`` is ``CDF(c + t/2) - CDF(c - t/2)``.  The same
expression read as a function of a real-valued ``c`` is the continuous
interpolation of the discrete rate; its derivative is the closed-form
gradient used during finetuning:

    d/dc [-ln mass(c)] = -(pdf(c + t/2) - pdf(c - t/2)) / mass(c)

which is exactly zero at c = 0 by symmetry.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special

from . import autodiff as ad
from .quantizer import QuantGrid

LN2 = math.log(2.0)

# Mass below this is treated as numerically zero when taking logs; it only
# guards against -inf, real updates never get near the far tails.
_MASS_FLOOR = 1e-300


@dataclass(frozen=True)
class SpikeSlabPrior:
    t: float = 0.005
    sigma: float = 0.05
    alpha: float = 1000.0

    def __post_init__(self):
        if self.t <= 0 or self.sigma <= 0 or self.alpha < 0:
            raise ValueError(
                f"SpikeSlabPrior: need t>0, sigma>0, alpha>=0, got "
                f"t={self.t} sigma={self.sigma} alpha={self.alpha}"
            )

    @property
    def spike_std(self) -> float:
        return self.t / 6.0

    # ------------------------------------------------------------- density

    def density(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return np.exp(self.log_density(x))

    def log_density(self, x) -> np.ndarray:
        """Natural log of the mixture density, stable for any x."""
        x = np.asarray(x, dtype=np.float64)
        s1, s2, a = self.sigma, self.spike_std, self.alpha
        log_slab = -0.5 * (x / s1) ** 2 - math.log(s1 * math.sqrt(2 * math.pi))
        if a == 0.0:
            return log_slab
        log_spike = (
            math.log(a)
            - 0.5 * (x / s2) ** 2
            - math.log(s2 * math.sqrt(2 * math.pi))
        )
        return np.logaddexp(log_slab, log_spike) - math.log1p(a)

    def cdf(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        s1, s2, a = self.sigma, self.spike_std, self.alpha
        slab = 0.5 * (1.0 + special.erf(x / (s1 * math.sqrt(2.0))))
        if a == 0.0:
            return slab
        spike = 0.5 * (1.0 + special.erf(x / (s2 * math.sqrt(2.0))))
        return (slab + a * spike) / (1.0 + a)

    def bin_mass(self, center) -> np.ndarray:
        """Pushforward mass of the width-t bin around ``center``."""
        c = np.asarray(center, dtype=np.float64)
        return self.cdf(c + 0.5 * self.t) - self.cdf(c - 0.5 * self.t)

    # ---------------------------------------------------------------- rates

    def density_rate_bits(self, x) -> float:
        """-log2 density summed over all elements (can be negative)."""
        return float(-(self.log_density(x) / LN2).sum())

    def update_rate_bits(self, x) -> float:
        """Interpolated bin-mass rate in bits, defined for any real x.

        The arithmetic mirrors ``update_rate_op`` operation for
        operation, so both give bit-identical totals.
        """
        m = np.maximum(self.bin_mass(x), _MASS_FLOOR)
        return float(np.log(m).sum() * (-1.0 / LN2))

    def update_rate_grad(self, x) -> np.ndarray:
        """Closed-form gradient of -ln mass(x) per element (nats).

        The spike's pdf is numerically zero one bin away from the origin,
        so away from zero this reduces to the slab-only expression; at
        exactly zero the numerator cancels and the gradient is 0.
        """
        x = np.asarray(x, dtype=np.float64)
        hi = self.density(x + 0.5 * self.t)
        lo = self.density(x - 0.5 * self.t)
        m = np.maximum(self.bin_mass(x), _MASS_FLOOR)
        return -(hi - lo) / m

    def update_rate_op(self, delta: ad.Tensor) -> ad.Tensor:
        """Tape version of ``update_rate_bits``: differentiable bits.

        Reverse-mode differentiation of this expression reproduces the
        closed-form gradient above (times 1/ln 2) at every point,
        including through a straight-through quantizer feeding it.
        """
        t = self.t
        hi = self._cdf_op(ad.add(delta, 0.5 * t))
        lo = self._cdf_op(ad.sub(delta, 0.5 * t))
        mass = ad.maximum(ad.sub(hi, lo), _MASS_FLOOR)
        return ad.mul(ad.sum_all(ad.log(mass)), -1.0 / LN2)

    def _cdf_op(self, x: ad.Tensor) -> ad.Tensor:
        # structured like cdf() so both sides round identically
        s1, s2, a = self.sigma, self.spike_std, self.alpha
        slab = ad.mul(ad.add(ad.erf(ad.div(x, s1 * math.sqrt(2.0))), 1.0), 0.5)
        if a == 0.0:
            return slab
        spike = ad.mul(ad.add(ad.erf(ad.div(x, s2 * math.sqrt(2.0))), 1.0), 0.5)
        return ad.div(ad.add(slab, ad.mul(spike, a)), 1.0 + a)


def compute_bin_count(sigma: float, t: float, shortfall: float = 2.0 ** -8) -> int:
    """Smallest odd bin count whose clip interval the slab covers.

    The clip interval spans the outermost bin centers, +-(n-1)*t/2.  The
    slab alone must put at least ``1 - shortfall`` of its mass there.
    """
    if sigma <= 0 or t <= 0 or not 0 < shortfall < 1:
        raise ValueError(f"compute_bin_count: bad arguments sigma={sigma} t={t}")
    z = special.ndtri(1.0 - 0.5 * shortfall)
    n = int(math.ceil(2.0 * z * sigma / t + 1.0))
    if n % 2 == 0:
        n += 1
    n = max(n, 1)

    def coverage(k: int) -> float:
        half = 0.5 * (k - 1) * t
        return float(special.erf(half / (sigma * math.sqrt(2.0))))

    while coverage(n) < 1.0 - shortfall:
        n += 2
    return n


class PmfTable:
    """Renormalized pushforward pmf of a prior over its quantizer grid.

    Mass outside the grid's clip interval is cut and the remainder is
    rescaled to sum to one, so every grid point has a finite code length.
    """

    def __init__(self, prior: SpikeSlabPrior, n_bins: int | None = None):
        self.prior = prior
        if n_bins is None:
            n_bins = compute_bin_count(prior.sigma, prior.t)
        if n_bins < 1 or n_bins % 2 == 0:
            raise ValueError(f"PmfTable: n_bins must be odd and positive, got {n_bins}")
        self.grid = QuantGrid(prior.t, n_bins)
        self.centers = self.grid.centers()
        raw = prior.bin_mass(self.centers)
        self.kept_mass = float(raw.sum())
        self.cut_mass = 1.0 - self.kept_mass
        self.masses = raw / self.kept_mass
        self.bits = -np.log2(self.masses)

    @property
    def n_bins(self) -> int:
        return self.grid.n_bins

    @property
    def zero_update_bits(self) -> float:
        """Code length of a single all-zero update entry."""
        return float(self.bits[self.grid.n_bins // 2])

    def bits_for(self, delta_bar) -> np.ndarray:
        """Per-element code length; every value must sit on the grid."""
        idx = self.grid.index_for_value(delta_bar)
        return self.bits[idx]

    def rate_bits(self, delta_bar) -> float:
        return float(self.bits_for(delta_bar).sum())

    def csv_rows(self):
        for c, m, b in zip(self.centers, self.masses, self.bits):
            yield {"center": f"{c:.10g}", "mass": f"{m:.17g}", "bits": f"{b:.17g}"}
