"""Scan-data reduction: peak fits, conditional variances, the EPR product.

Coincidence scans (one detector fixed, the partner's slit stepped across the
detection plane) are fit with a four-parameter Gaussian A exp(-(x-c)^2 /
(2 s^2)) + o under Poissonian weights.  A scan whose count spread stays
under FLAT_RATIO_BOUND is classified flat and gets an offset-only fit, which
is what the conjugate-basis configurations produce.

The fitted widths convert to conditional variances of the collective
coordinates, and the entanglement witness is their product:

    var(x_A - x_B) * var(p_A + p_B) < 1/4     (hbar = 1)

Counting errors are Poissonian, sqrt(N) with a floor of 1 for empty bins.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.optimize import least_squares

from .detection import StationConfig
from .source import SourceModel

FLAT_RATIO_BOUND = 1.3
DUAN_BOUND = 0.25
_MIN_POINTS = 5


class FitError(RuntimeError):
    """Nonlinear fit failed to converge."""


@dataclass(frozen=True)
class ScanData:
    """One coincidence scan: partner-detector positions and counts per dwell."""

    positions: tuple[float, ...]
    counts: tuple[int, ...]
    fixed_detector: str
    basis_pair: tuple[str, str]

    def __post_init__(self):
        if len(self.positions) != len(self.counts):
            raise ValueError("positions and counts must have equal length")
        if len(self.positions) < _MIN_POINTS:
            raise ValueError(f"need at least {_MIN_POINTS} scan points")
        if any(c < 0 for c in self.counts):
            raise ValueError("counts must be non-negative")

    def max_min_ratio(self) -> float:
        return max(self.counts) / max(min(self.counts), 1)

    def is_flat(self) -> bool:
        return self.max_min_ratio() < FLAT_RATIO_BOUND

    def save_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["position_mm", "counts"])
            for pos, cnt in zip(self.positions, self.counts):
                writer.writerow([f"{pos:.6g}", int(cnt)])

    @classmethod
    def load_csv(cls, path, fixed_detector="", basis_pair=("x", "x")) -> "ScanData":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or [c.strip() for c in rows[0]] != ["position_mm", "counts"]:
            raise ValueError("scan CSV must start with header 'position_mm,counts'")
        positions, counts = [], []
        for i, row in enumerate(rows[1:], start=2):
            if not row:
                continue
            if len(row) != 2:
                raise ValueError(f"line {i}: expected 2 fields, got {len(row)}")
            positions.append(float(row[0]))
            counts.append(int(row[1]))
        return cls(tuple(positions), tuple(counts), fixed_detector, tuple(basis_pair))


@dataclass(frozen=True)
class GaussianFit:
    """Fit result; sigma is None for a degenerate flat scan."""

    amplitude: float | None
    center: float | None
    sigma: float | None
    offset: float
    covariance: tuple | None
    chi_square: float
    flat: bool

    @property
    def degenerate(self) -> bool:
        return self.sigma is None


@dataclass(frozen=True)
class EprCheckResult:
    var_x_list: tuple[float, ...]
    var_p_list: tuple[float, ...]
    product: float
    bound: float
    satisfied: bool
    sigma_distance: float | None
    product_uncertainty: float | None


def poisson_errors(counts: Sequence[float]) -> list[float]:
    """Counting error sqrt(N) per point, floored at 1 for empty bins."""
    return [math.sqrt(c) if c >= 1 else 1.0 for c in counts]


def _model(params: np.ndarray, x: np.ndarray) -> np.ndarray:
    amp, center, sigma, offset = params
    return amp * np.exp(-0.5 * ((x - center) / sigma) ** 2) + offset


def fit_gaussian(scan: ScanData) -> GaussianFit:
    """Weighted nonlinear least-squares peak fit.

    Residuals are weighted by Poissonian counting errors (variance
    max(count, 1)).  Start values: offset at the minimum count, amplitude the
    count span, center the excess-weighted centroid, width from the second
    moment.  Convergence requires relative parameter change below 1e-8 within
    200 iterations.  A scan with max/min count ratio under 1.3 (or no count
    spread at all) is degenerate: the result carries the mean as offset and
    no width.
    """
    x = np.asarray(scan.positions, dtype=float)
    y = np.asarray(scan.counts, dtype=float)

    if y.max() == y.min() or scan.is_flat():
        mean = float(y.mean())
        resid = (y - mean) / np.sqrt(np.maximum(y, 1.0))
        return GaussianFit(
            amplitude=None,
            center=None,
            sigma=None,
            offset=mean,
            covariance=None,
            chi_square=float(resid @ resid),
            flat=True,
        )

    offset0 = float(y.min())
    amp0 = float(y.max() - y.min())
    excess = np.maximum(y - offset0, 0.0)
    center0 = float((x * excess).sum() / excess.sum())
    var0 = float(((x - center0) ** 2 * excess).sum() / excess.sum())
    sigma0 = math.sqrt(var0) if var0 > 0 else (x.max() - x.min()) / 6.0

    weights = 1.0 / np.sqrt(np.maximum(y, 1.0))

    def residuals(params: np.ndarray) -> np.ndarray:
        return (_model(params, x) - y) * weights

    result = least_squares(
        residuals,
        x0=np.array([amp0, center0, sigma0, offset0]),
        xtol=1e-8,
        ftol=1e-14,
        gtol=1e-14,
        max_nfev=200 * 4,
        method="lm",
    )
    if not result.success:
        raise FitError(f"peak fit did not converge: {result.message}")

    amp, center, sigma, offset = result.x
    sigma = abs(float(sigma))
    chi_square = float(result.fun @ result.fun)

    # Covariance from the weighted Jacobian; guard the near-singular case.
    jtj = result.jac.T @ result.jac
    try:
        cov = np.linalg.inv(jtj)
        dof = max(len(x) - 4, 1)
        cov = cov * chi_square / dof
        covariance = tuple(map(tuple, cov))
    except np.linalg.LinAlgError:
        covariance = None

    return GaussianFit(
        amplitude=float(amp),
        center=float(center),
        sigma=sigma,
        offset=float(offset),
        covariance=covariance,
        chi_square=chi_square,
        flat=False,
    )


def conditional_variance(fit: GaussianFit, conversion_scale: float) -> float:
    """Variance of the collective coordinate from a fitted scan width.

    conversion_scale maps the detection-plane width into the coordinate's
    units: the imaging scale alpha for position scans, k/f for momentum
    scans, or 1 to stay in detection-plane mm.
    """
    if fit.degenerate:
        raise ValueError("conditional variance undefined for a degenerate flat fit")
    return (conversion_scale * fit.sigma) ** 2


def conversion_for(station: StationConfig, basis: str) -> float:
    """Default detection-plane-to-coordinate conversion for one basis."""
    if basis == "x":
        return station.alpha
    if basis == "p":
        return station.momentum_scale
    raise ValueError(f"basis must be 'x' or 'p', got {basis!r}")


def duan_check(
    var_x_list: Sequence[float],
    var_p_list: Sequence[float],
    unc_x_list: Sequence[float] | None = None,
    unc_p_list: Sequence[float] | None = None,
) -> EprCheckResult:
    """Evaluate the variance-product entanglement witness.

    The product uses the arithmetic mean of each axis' variances and is
    compared against 1/4 (hbar = 1) with strict inequality.  When
    uncertainties are supplied, first-order propagation yields the product
    uncertainty and the distance to the bound in standard deviations.
    """
    if not var_x_list or not var_p_list:
        raise ValueError("need at least one variance per axis")
    if any(v <= 0 for v in list(var_x_list) + list(var_p_list)):
        raise ValueError("variances must be positive")

    mean_x = sum(var_x_list) / len(var_x_list)
    mean_p = sum(var_p_list) / len(var_p_list)
    product = mean_x * mean_p

    sigma_distance = None
    product_unc = None
    if unc_x_list is not None and unc_p_list is not None:
        if len(unc_x_list) != len(var_x_list) or len(unc_p_list) != len(var_p_list):
            raise ValueError("uncertainty lists must match variance lists")
        unc_mean_x = math.sqrt(sum(u * u for u in unc_x_list)) / len(unc_x_list)
        unc_mean_p = math.sqrt(sum(u * u for u in unc_p_list)) / len(unc_p_list)
        product_unc = product * math.hypot(unc_mean_x / mean_x, unc_mean_p / mean_p)
        if product_unc > 0:
            sigma_distance = (DUAN_BOUND - product) / product_unc

    return EprCheckResult(
        var_x_list=tuple(float(v) for v in var_x_list),
        var_p_list=tuple(float(v) for v in var_p_list),
        product=product,
        bound=DUAN_BOUND,
        satisfied=product < DUAN_BOUND,
        sigma_distance=sigma_distance,
        product_uncertainty=product_unc,
    )


def scan_simulation(
    source: SourceModel,
    station_A: StationConfig,
    station_B: StationConfig,
    fixed_detector: str,
    basis_pair: tuple[str, str],
    grid: Sequence[float],
    pairs_per_point: int,
    rng: np.random.Generator,
) -> ScanData:
    """Monte Carlo coincidence scan: A's detector fixed, B's slit stepped.

    fixed_detector names one of A's slits ("Ax1", "Ax2", "Ap1", "Ap2"); the
    basis pair fixes both parties' measurement configuration for the whole
    scan (calibration runs bypass the random basis choice).  At each grid
    point B's slit is re-centered and fresh pairs are drawn; the count is the
    number of double transmissions.  Attenuation filters are left out: scans
    model the bare alignment measurements taken before filters are installed.
    """
    grid = list(grid)
    if len(grid) < _MIN_POINTS:
        raise ValueError(f"need at least {_MIN_POINTS} grid points")
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise ValueError("grid must be strictly increasing")
    basis_A, basis_B = basis_pair
    expected_prefix = "A" + basis_A
    if not fixed_detector.startswith(expected_prefix) or fixed_detector[-1] not in "12":
        raise ValueError(
            f"fixed detector {fixed_detector!r} does not match basis {basis_A!r}"
        )
    if pairs_per_point <= 0:
        raise ValueError("pairs_per_point must be positive")

    det_idx = int(fixed_detector[-1]) - 1
    slit_A = station_A.detectors(basis_A)[det_idx]
    a_lo, a_hi = station_A.latent_window(basis_A, slit_A)
    width_B = station_B.detectors(basis_B)[0].width
    scale_B = station_B.alpha if basis_B == "x" else station_B.momentum_scale

    counts = []
    for center in grid:
        lat_A, lat_B = _latent_pair(source, basis_A, basis_B, pairs_per_point, rng)
        b_lo = (center - width_B / 2.0 - station_B.origin) * scale_B
        b_hi = (center + width_B / 2.0 - station_B.origin) * scale_B
        if b_lo > b_hi:
            b_lo, b_hi = b_hi, b_lo
        hits = (
            (lat_A >= a_lo) & (lat_A <= a_hi) & (lat_B >= b_lo) & (lat_B <= b_hi)
        )
        counts.append(int(hits.sum()))

    return ScanData(
        positions=tuple(float(g) for g in grid),
        counts=tuple(counts),
        fixed_detector=fixed_detector,
        basis_pair=(basis_A, basis_B),
    )


def _latent_pair(
    source: SourceModel, basis_A: str, basis_B: str, n: int, rng: np.random.Generator
):
    """Draw only the two latent coordinates a forced-basis scan needs."""
    if basis_A == "x" and basis_B == "x":
        u = rng.standard_normal(n) * source.sigma_minus
        v = rng.standard_normal(n) * source.sigma_plus
        return (v + u) / 2.0, (v - u) / 2.0
    if basis_A == "p" and basis_B == "p":
        w = rng.standard_normal(n) * source.kappa_minus
        z = rng.standard_normal(n) * source.kappa_plus
        return (w + z) / 2.0, (w - z) / 2.0
    # Mixed bases: the two coordinates are independent marginals.
    from .source import marginal_std

    lat_A = rng.standard_normal(n) * marginal_std(source, basis_A)
    lat_B = rng.standard_normal(n) * marginal_std(source, basis_B)
    return lat_A, lat_B
