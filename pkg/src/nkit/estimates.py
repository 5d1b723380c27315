# Copyright (c) 2026 The nkit developers
#
# Permission is hereby granted, free of charge, to any person obtaining a copy
# of this software and associated documentation files (the "Software"), to deal
# in the Software without restriction, including without limitation the rights
# to use, copy, modify, merge, publish, distribute, sublicense, and/or sell
# copies of the Software, and to permit persons to whom the Software is
# furnished to do so, subject to the following conditions:
#
# The above copyright notice and this permission notice shall be included in
# all copies or substantial portions of the Software.
#
# THE SOFTWARE IS PROVIDED "AS IS", WITHOUT WARRANTY OF ANY KIND, EXPRESS OR
# IMPLIED, INCLUDING BUT NOT LIMITED TO THE WARRANTIES OF MERCHANTABILITY,
# FITNESS FOR A PARTICULAR PURPOSE AND NONINFRINGEMENT. IN NO EVENT SHALL THE
# AUTHORS OR COPYRIGHT HOLDERS BE LIABLE FOR ANY CLAIM, DAMAGES OR OTHER
# LIABILITY, WHETHER IN AN ACTION OF CONTRACT, TORT OR OTHERWISE, ARISING FROM,
# OUT OF OR IN CONNECTION WITH THE SOFTWARE OR THE USE OR OTHER DEALINGS IN THE
# SOFTWARE.

"""Numerical experiments for the decay, level set and Hölder estimates of
Neumann functions: radial shell sampling, log-log power law fits and the
PASS/FAIL verdicts built on them."""

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from scipy import stats
from scipy.spatial.distance import pdist

from .grid_core import (CoefficientField, Domain, ScalarField, Vector,
                        as_vector)
from .neumann_fn import NeumannColumn, derivative_magnitude, yukawa_kappa

logger = logging.getLogger(__name__)

SHELL_FACTOR = 2 ** 0.25
MIN_SHELL_NODES = 8
MIN_SHELLS = 4
DEFAULT_SHELLS = 6
MAX_PAIRS = 100_000
RANGE_SAFETY = 0.5
# Level sets are counted inside this fraction of the distance to the wall.
LEVEL_SET_REACH = 0.75

PASS = "PASS"
FAIL = "FAIL"
DEGENERATE = "DEGENERATE"


@dataclass(frozen=True, eq=False)
class RadialSamples:
    center: Vector
    radii: np.ndarray
    stats: np.ndarray
    counts: np.ndarray
    stat_kind: str = "max"
    dropped: Tuple[float, ...] = ()

    def rows(self) -> List[Tuple[float, float, int]]:
        return [(float(r), float(s), int(c)) for r, s, c in
                zip(self.radii, self.stats, self.counts)]


@dataclass(frozen=True)
class PowerLawFit:
    slope: float
    intercept: float
    r_range: Tuple[float, float]
    rsq: float
    slope_stderr: float = 0.0
    n_points: int = 0


@dataclass(frozen=True, eq=False)
class LevelSetCurve:
    thresholds: np.ndarray
    measures: np.ndarray

    def rows(self) -> List[Tuple[float, float]]:
        return [(float(t), float(m)) for t, m in
                zip(self.thresholds, self.measures)]


@dataclass(frozen=True, eq=False)
class Verdict:
    """Outcome of one gated experiment."""
    name: str
    status: str
    slope: Optional[float] = None
    expected: Optional[float] = None
    band: Optional[Tuple[float, float]] = None
    fit: Optional[PowerLawFit] = None
    samples: Optional[RadialSamples] = None
    curve: Optional[LevelSetCurve] = None
    details: Dict[str, Any] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.status == PASS

    def to_dict(self) -> Dict[str, Any]:
        band = None
        if self.band is not None:
            band = [None if math.isinf(b) else b for b in self.band]
        result = {"name": self.name, "status": self.status,
                  "pass": self.passed, "slope": self.slope,
                  "expected": self.expected, "band": band}
        if self.fit is not None:
            result["rsq"] = self.fit.rsq
            result["slope_stderr"] = self.fit.slope_stderr
            result["r_range"] = list(self.fit.r_range)
        result.update(self.details)
        return result


def _banded(name: str, fit: PowerLawFit, expected: float,
            band: Tuple[float, float], **kwargs) -> Verdict:
    status = PASS if band[0] <= fit.slope <= band[1] else FAIL
    logger.info("%s: slope %.4f (rsq %.4f), band [%s, %s] -> %s", name,
                fit.slope, fit.rsq, band[0], band[1], status)
    return Verdict(name, status, fit.slope, expected, band, fit, **kwargs)


def _as_field(field_like: Union[ScalarField, NeumannColumn]) -> ScalarField:
    return getattr(field_like, "field", field_like)


def sample_radial(field: Union[ScalarField, NeumannColumn],
                  center: Sequence[float], r_min: float, r_max: float,
                  n_shells: int = DEFAULT_SHELLS, stat_kind: str = "max", *,
                  eps_mol: float = 0.0,
                  magnitude: Optional[np.ndarray] = None) -> RadialSamples:
    """Shell statistics of |field| on geometric radii r_min..r_max.

    Shell ``r`` holds the nodes with r 2^-1/4 <= |x - center| <= r 2^1/4.
    ``magnitude`` replaces |field| by any nonnegative node array.
    """
    field = _as_field(field)
    domain = field.domain
    center = as_vector(center, "center")
    if stat_kind not in ("max", "mean"):
        raise ValueError("Shell statistic should be 'max' or 'mean'")
    floor = max(4 * max(domain.h), 2 * eps_mol)
    d_center = domain.distance_to_boundary(center)
    if r_min < floor * (1 - 1e-9):
        raise ValueError(
            "r_min={} is below max(4h, 2 eps_mol)={}".format(r_min, floor))
    if r_max > d_center / 2 * (1 + 1e-9):
        raise ValueError(
            "r_max={} exceeds half the distance to the boundary "
            "{}".format(r_max, d_center / 2))
    if not r_max > r_min or n_shells < 2:
        raise ValueError("Empty radial range [{}, {}]".format(r_min, r_max))
    if magnitude is None:
        magnitude = field.abs()
    radius = domain.radius_from(center)
    radii, values, counts, dropped = [], [], [], []
    for r in np.geomspace(r_min, r_max, n_shells):
        shell = (radius >= r / SHELL_FACTOR) & (radius <= r * SHELL_FACTOR)
        count = int(shell.sum())
        if count < MIN_SHELL_NODES:
            dropped.append(float(r))
            continue
        selected = magnitude[shell]
        radii.append(r)
        values.append(selected.max() if stat_kind == "max"
                      else selected.mean())
        counts.append(count)
    if dropped:
        logger.info("Dropped %d shells with fewer than %d nodes: %s",
                    len(dropped), MIN_SHELL_NODES, dropped)
    return RadialSamples(center, np.array(radii), np.array(values),
                         np.array(counts, dtype=int), stat_kind,
                         tuple(dropped))


def _fit_log_log(x: np.ndarray, y: np.ndarray) -> PowerLawFit:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(x) < MIN_SHELLS:
        raise ValueError("A power law fit needs at least {} points, "
                         "got {}".format(MIN_SHELLS, len(x)))
    if np.any(y <= 0) or not np.all(np.isfinite(y)):
        raise ValueError("Degenerate statistics: values should be positive")
    result = stats.linregress(np.log(x), np.log(y))
    rsq = float(min(max(result.rvalue ** 2, 0.0), 1.0))
    return PowerLawFit(float(result.slope), float(result.intercept),
                       (float(x.min()), float(x.max())), rsq,
                       float(result.stderr), len(x))


def fit_power_law(samples: RadialSamples) -> PowerLawFit:
    """Least squares line through (log r, log stat)."""
    return _fit_log_log(samples.radii, samples.stats)


def radial_weight(domain: Domain, center: Sequence[float], k: float,
                  gamma0: float, order: int = 0,
                  adjoint: bool = False) -> np.ndarray:
    """exp(Re(kappa) r) |p(0)| / |p(kappa r)| with p = 1, 1 + s, 2 + 2s + s^2.

    Multiplying the order-th derivative magnitude of the free space kernel
    exp(-kappa r) / (4 pi gamma0 r) by this weight leaves the pure power of r.
    """
    kappa = yukawa_kappa(k, gamma0, adjoint)
    r = domain.radius_from(center)
    s = kappa * r
    polynomial = {0: np.ones_like(s), 1: 1 + s, 2: (2 + 2 * s + s ** 2) / 2}
    return np.exp(kappa.real * r) / np.abs(polynomial[order])


def _column_magnitude(column: NeumannColumn, order: int,
                      compensate: bool) -> np.ndarray:
    magnitude = derivative_magnitude(column.values, column.domain, order)
    if compensate:
        magnitude = magnitude * radial_weight(
            column.domain, column.y, column.k, column.gamma_at_source, order,
            column.adjoint)
    return magnitude


def _default_range(column: NeumannColumn, r_min, r_max):
    domain = column.domain
    if r_min is None:
        r_min = max(4 * max(domain.h), 2 * column.eps_mol)
    if r_max is None:
        r_max = domain.distance_to_boundary(column.y) / 2
    return r_min, r_max


def verify_pointwise_decay(column: NeumannColumn,
                           r_min: Optional[float] = None,
                           r_max: Optional[float] = None,
                           n_shells: int = DEFAULT_SHELLS, *,
                           compensate: bool = True,
                           band: Tuple[float, float] = (-1.15, -0.85)
                           ) -> Verdict:
    """Fit of the shell max of |N^eps(., y)|; the expected slope is -1.

    With ``compensate`` the free space exponential factor is divided out,
    leaving the 1/r singularity.
    """
    r_min, r_max = _default_range(column, r_min, r_max)
    samples = sample_radial(column, column.y, r_min, r_max, n_shells,
                            eps_mol=column.eps_mol,
                            magnitude=_column_magnitude(column, 0,
                                                        compensate))
    return _banded("pointwise_decay", fit_power_law(samples), -1.0, band,
                   samples=samples)


def _check_pair(col_n: NeumannColumn, col_n0: NeumannColumn):
    if (col_n.domain != col_n0.domain or col_n.y != col_n0.y or
            col_n.k != col_n0.k or col_n.eps_mol != col_n0.eps_mol or
            col_n.adjoint != col_n0.adjoint):
        raise ValueError("Columns differ in domain, source, k or eps_mol")


def _difference_is_degenerate(col_n, col_n0, difference) -> bool:
    noise = max(col_n.report.residual, col_n0.report.residual) * float(
        np.max(np.abs(col_n0.values)))
    return float(np.max(np.abs(difference))) <= noise


def verify_difference_decay(col_n: NeumannColumn, col_n0: NeumannColumn,
                            lam: float, r_min: Optional[float] = None,
                            r_max: Optional[float] = None,
                            n_shells: int = DEFAULT_SHELLS, *,
                            compensate: bool = False,
                            tolerance: float = 0.2) -> Verdict:
    """Fit of the shell max of |N - N_0|; PASS iff slope >= -1 + lam - 0.2."""
    _check_pair(col_n, col_n0)
    expected = -1.0 + lam
    band = (expected - tolerance, math.inf)
    difference = col_n.values - col_n0.values
    if _difference_is_degenerate(col_n, col_n0, difference):
        logger.info("difference_decay: N - N0 below the noise floor")
        return Verdict("difference_decay", DEGENERATE, None, expected, band)
    magnitude = np.abs(difference)
    if compensate:
        magnitude = magnitude * radial_weight(
            col_n.domain, col_n.y, col_n.k, col_n0.gamma_at_source, 0,
            col_n.adjoint)
    r_min, r_max = _default_range(col_n, r_min, r_max)
    samples = sample_radial(col_n, col_n.y, r_min, r_max, n_shells,
                            eps_mol=col_n.eps_mol, magnitude=magnitude)
    return _banded("difference_decay", fit_power_law(samples), expected,
                   band, samples=samples)


def verify_gradient_decay(col_n: NeumannColumn, col_n0: NeumannColumn,
                          lam: float, k: Optional[float] = None,
                          order: int = 1, r_min: Optional[float] = None,
                          r_max: Optional[float] = None,
                          n_shells: int = DEFAULT_SHELLS, *,
                          restrict: bool = True,
                          tolerance: float = 0.25) -> Verdict:
    """Fit of the shell max of the order-th derivative of N - N_0.

    The k dependent terms of the estimates are kept small by restricting
    r_max to 0.5 / sqrt(k).
    """
    if order not in (1, 2):
        raise ValueError("Derivative order should be 1 or 2")
    _check_pair(col_n, col_n0)
    if k is None:
        k = col_n.k
    expected = (-2.0 if order == 1 else -3.0) + lam
    band = (expected - tolerance, math.inf)
    difference = col_n.values - col_n0.values
    name = "gradient_decay_order{}".format(order)
    if _difference_is_degenerate(col_n, col_n0, difference):
        logger.info("%s: N - N0 below the noise floor", name)
        return Verdict(name, DEGENERATE, None, expected, band)
    r_min, r_max = _default_range(col_n, r_min, r_max)
    cap = RANGE_SAFETY / math.sqrt(k)
    if restrict and r_max > cap:
        logger.info("%s: r_max lowered from %.4g to %.4g", name, r_max, cap)
        r_max = cap
    if k * r_max ** 2 > RANGE_SAFETY ** 2:
        message = ("k r^2 = {:.3g} on the fitted range: the k term of the "
                   "estimate is not negligible".format(k * r_max ** 2))
        logger.warning(message)
        warnings.warn(message, RuntimeWarning)
    magnitude = derivative_magnitude(difference, col_n.domain, order)
    samples = sample_radial(col_n, col_n.y, r_min, r_max, n_shells,
                            eps_mol=col_n.eps_mol, magnitude=magnitude)
    return _banded(name, fit_power_law(samples), expected, band,
                   samples=samples)


def level_set_curve(magnitude: np.ndarray, thresholds: Sequence[float],
                    cell_volume: float,
                    region: Optional[np.ndarray] = None) -> LevelSetCurve:
    """m(t) = h^3 #{nodes in region: magnitude > t}."""
    thresholds = np.sort(np.asarray(thresholds, dtype=np.float64))
    values = np.asarray(magnitude)
    if region is not None:
        values = values[region]
    values = np.sort(values.ravel())
    above = values.size - np.searchsorted(values, thresholds, side="right")
    return LevelSetCurve(thresholds, above * cell_volume)


def fit_level_set(curve: LevelSetCurve) -> PowerLawFit:
    if np.any(curve.measures <= 0):
        raise ValueError("Thresholds with empty level sets: {}".format(
            curve.thresholds[curve.measures <= 0]))
    return _fit_log_log(curve.thresholds, curve.measures)


def level_set_scaling(column: NeumannColumn,
                      t_range: Optional[Tuple[float, float]] = None, *,
                      order: int = 0, n_thresholds: int = 8,
                      compensate: bool = True, tolerance: float = 0.4,
                      r_min: Optional[float] = None,
                      r_max: Optional[float] = None) -> Verdict:
    """Slope of log m(t) against log t for |N| (order 0, expected -3) or
    |grad N| (order 1, expected -1.5).

    Without ``t_range`` the thresholds span the shell maxima between r_max
    and r_min. Nodes are counted within 3/4 of the distance to the wall.
    """
    if order not in (0, 1):
        raise ValueError("Level sets are defined for |N| and |grad N| only")
    expected = -3.0 if order == 0 else -1.5
    magnitude = _column_magnitude(column, order, compensate)
    domain = column.domain
    if t_range is None:
        r_min, r_max = _default_range(column, r_min, r_max)
        samples = sample_radial(column, column.y, r_min, r_max,
                                eps_mol=column.eps_mol, magnitude=magnitude)
        t_range = (float(samples.stats[-1]), float(samples.stats[0]))
    t_low, t_high = sorted(t_range)
    if not 0 < t_low < t_high:
        raise ValueError("Threshold range should be positive and "
                         "nonempty, got {}".format(t_range))
    region = domain.radius_from(column.y) < (
        LEVEL_SET_REACH * domain.distance_to_boundary(column.y))
    curve = level_set_curve(magnitude, np.geomspace(t_low, t_high,
                                                    n_thresholds),
                            domain.cell_volume, region)
    name = "level_set_value" if order == 0 else "level_set_gradient"
    return _banded(name, fit_level_set(curve), expected,
                   (expected - tolerance, expected + tolerance), curve=curve)


def annulus(domain: Domain, center: Sequence[float], r_in: float,
            r_out: float) -> np.ndarray:
    radius = domain.radius_from(center)
    return (radius >= r_in) & (radius <= r_out)


def _pair_differences(field: ScalarField, region: Optional[np.ndarray],
                      max_pairs: int, seed: int
                      ) -> Tuple[np.ndarray, np.ndarray]:
    """Distances and value differences of node pairs in ``region``.

    All pairs when there are at most ``max_pairs`` of them, otherwise a
    fixed pseudo random sample of pairs.
    """
    domain = field.domain
    if region is None:
        region = np.ones(domain.shape, dtype=bool)
    points = domain.coordinates[region]
    values = np.asarray(field.values)[region]
    count = len(points)
    if count < 2:
        raise ValueError("The region should contain at least 2 nodes")
    # Complex values as (re, im) pairs so euclidean distance is |f - g|.
    values = np.column_stack([np.real(values), np.imag(values)])
    if count * (count - 1) // 2 <= max_pairs:
        return pdist(points), pdist(values)
    rng = np.random.default_rng(seed)
    first = rng.integers(0, count, max_pairs)
    second = rng.integers(0, count - 1, max_pairs)
    second = second + (second >= first)
    return (np.linalg.norm(points[first] - points[second], axis=1),
            np.linalg.norm(values[first] - values[second], axis=1))


def hoelder_seminorm(field: Union[ScalarField, CoefficientField,
                                  NeumannColumn],
                     region: Optional[np.ndarray] = None, lam: float = 0.5,
                     *, max_pairs: int = MAX_PAIRS, seed: int = 0) -> float:
    """sup |f(x) - f(y)| / |x - y|^lam over node pairs in ``region``."""
    distances, differences = _pair_differences(_as_field(field), region,
                                               max_pairs, seed)
    return float(np.max(differences / distances ** lam))


def hoelder_profile(field: Union[ScalarField, NeumannColumn],
                    region: np.ndarray,
                    lams: Sequence[float] = (0.25, 0.5, 0.75), *,
                    seed: int = 0) -> List[Tuple[float, float]]:
    """Seminorms for several exponents on one region; reported only."""
    return [(float(lam), hoelder_seminorm(field, region, lam, seed=seed))
            for lam in lams]


def empirical_hoelder_exponent(field: Union[ScalarField, NeumannColumn],
                               region: np.ndarray, n_bins: int = 6, *,
                               max_pairs: int = MAX_PAIRS,
                               seed: int = 0) -> PowerLawFit:
    """Log-log slope of the largest |f(x) - f(y)| against |x - y| over
    log spaced distance bins. An observed local Hölder exponent, reported
    and not gated."""
    distances, differences = _pair_differences(_as_field(field), region,
                                               max_pairs, seed)
    edges = np.geomspace(distances.min(), distances.max() * (1 + 1e-12),
                         n_bins + 1)
    bins = np.digitize(distances, edges) - 1
    centers, peaks = [], []
    for index in range(n_bins):
        inside = bins == index
        if inside.any() and differences[inside].max() > 0:
            centers.append(math.sqrt(edges[index] * edges[index + 1]))
            peaks.append(differences[inside].max())
    return _fit_log_log(np.array(centers), np.array(peaks))
