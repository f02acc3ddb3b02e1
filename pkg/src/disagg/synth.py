"""Synthetic disaggregation problems with known truth, plus independent oracles.

The generator runs the aggregated-count model forward: smoothed-noise
covariates, a log-linear rate surface with chosen coefficients, uniform
population, rectangular regions, and Poisson-sampled observed counts. The
Newton solver and finite-difference gradient here deliberately share no
code with the network engine so they can certify it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import uniform_filter

from .data_prep import PaddedDataset
from .grid_io import Raster, RasterStack, Region, RegionMask, RegionSet
from .network import RngStream

__all__ = [
    "ConvergenceError",
    "OracleFit",
    "SynthDataset",
    "SynthSpec",
    "finite_diff_gradient",
    "generate_dataset",
    "oracle_newton_fit",
]


class ConvergenceError(RuntimeError):
    """The Newton solver failed to converge (cap hit or singular Hessian)."""


@dataclass(frozen=True)
class SynthSpec:
    """Recipe for a synthetic dataset.

    ``beta`` holds the intercept followed by one coefficient per covariate
    channel; the channels are smoothed seeded noise, renormalized so the
    coefficients stay interpretable on the scale the model sees.
    """

    nrows: int
    ncols: int
    n_regions: int
    beta: tuple[float, ...]
    spatial_amplitude: float = 0.0
    population_range: tuple[float, float] = (500.0, 1500.0)
    smoothness: int = 5
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "beta", tuple(float(b) for b in self.beta))
        if self.nrows < 1 or self.ncols < 1:
            raise ValueError("grid dimensions must be positive")
        if not 1 <= self.n_regions <= self.nrows * self.ncols:
            raise ValueError("n_regions must lie in [1, nrows*ncols]")
        if len(self.beta) < 2:
            raise ValueError("beta needs the intercept plus at least one covariate")
        lo, hi = self.population_range
        if lo < 0 or hi < lo:
            raise ValueError("population range must satisfy 0 <= lo <= hi")
        if self.smoothness < 1:
            raise ValueError("smoothness window must be >= 1")


@dataclass(frozen=True)
class SynthDataset:
    """A generated problem with its hidden truth retained."""

    stack: RasterStack
    population: Raster
    regions: RegionSet          # responses are the Poisson-sampled observed counts
    mask: RegionMask
    true_rate: Raster
    expected_counts: np.ndarray
    observed_counts: np.ndarray


def _tile_split(n_regions: int) -> tuple[int, int]:
    """Near-square factorization: the largest divisor pair (rows, cols)."""
    rows = int(np.floor(np.sqrt(n_regions)))
    while n_regions % rows:
        rows -= 1
    return rows, n_regions // rows


def _smooth_field(rng: RngStream, nrows: int, ncols: int, window: int) -> np.ndarray:
    field = uniform_filter(rng.normal((nrows, ncols)), size=window, mode="nearest")
    return (field - field.mean()) / field.std()


def generate_dataset(spec: SynthSpec) -> SynthDataset:
    """Run the generative model forward; identical seeds give identical datasets."""
    rng = RngStream(spec.seed)
    nrows, ncols = spec.nrows, spec.ncols
    n_channels = len(spec.beta) - 1

    channels = [_smooth_field(rng, nrows, ncols, spec.smoothness) for _ in range(n_channels)]
    eta = np.full((nrows, ncols), spec.beta[0])
    for coef, channel in zip(spec.beta[1:], channels):
        eta += coef * channel
    if spec.spatial_amplitude:
        eta += spec.spatial_amplitude * _smooth_field(rng, nrows, ncols, spec.smoothness)
    rate = np.exp(eta)

    lo, hi = spec.population_range
    population_values = rng.uniform(lo, hi, (nrows, ncols))

    tiles_r, tiles_c = _tile_split(spec.n_regions)
    row_bounds = [round(i * nrows / tiles_r) for i in range(tiles_r + 1)]
    col_bounds = [round(j * ncols / tiles_c) for j in range(tiles_c + 1)]
    assignment = np.empty((nrows, ncols), dtype=np.int32)
    row_tile = np.searchsorted(row_bounds, np.arange(nrows), side="right") - 1
    col_tile = np.searchsorted(col_bounds, np.arange(ncols), side="right") - 1
    assignment[:, :] = row_tile[:, None] * tiles_c + col_tile[None, :]
    mask = RegionMask(indices=assignment, n_regions=spec.n_regions)

    cellsize = 1.0
    xll = yll = 0.0
    nodata = -9999.0
    template = Raster(ncols=ncols, nrows=nrows, xll=xll, yll=yll,
                      cellsize=cellsize, nodata=nodata, values=np.zeros((nrows, ncols)))

    expected = np.zeros(spec.n_regions)
    per_pixel = rate * population_values
    for r in range(spec.n_regions):
        expected[r] = per_pixel[assignment == r].sum()
    observed = rng.poisson(expected).astype(np.float64)

    regions = []
    for r in range(spec.n_regions):
        tr, tc = divmod(r, tiles_c)
        # region tile spans rows [r0, r1) from the north; south edge maps to low y
        r0, r1 = row_bounds[tr], row_bounds[tr + 1]
        c0, c1 = col_bounds[tc], col_bounds[tc + 1]
        x0, x1 = xll + c0 * cellsize, xll + c1 * cellsize
        y_top = yll + (nrows - r0) * cellsize
        y_bot = yll + (nrows - r1) * cellsize
        ring = np.array([[x0, y_bot], [x1, y_bot], [x1, y_top], [x0, y_top], [x0, y_bot]])
        regions.append(Region(id=f"r{r:03d}", response=float(observed[r]), rings=(ring,)))

    stack = RasterStack(
        names=tuple(f"cov{i}" for i in range(n_channels)),
        layers=tuple(template.with_values(c) for c in channels),
    )
    return SynthDataset(
        stack=stack,
        population=template.with_values(population_values),
        regions=RegionSet(regions=tuple(regions)),
        mask=mask,
        true_rate=template.with_values(rate),
        expected_counts=expected,
        observed_counts=observed,
    )


@dataclass(frozen=True)
class OracleFit:
    """Newton-solver output: coefficients, mean Poisson loss, iterations used."""

    beta: np.ndarray
    loss: float
    iterations: int


def oracle_newton_fit(dataset: PaddedDataset, tol: float = 1e-10,
                      max_iter: int = 100) -> OracleFit:
    """Maximize the exact aggregated Poisson likelihood by Newton-Raphson.

    The model class is an intercept plus linear covariate terms under a log
    link; coordinates in the dataset are ignored. Gradients and Hessians
    are computed analytically from the per-region sums, independent of the
    network engine. Convergence means the max absolute step drops below
    ``tol``; otherwise a :class:`ConvergenceError` reports the cap.
    """
    lengths = dataset.true_lengths
    x_rows = [dataset.covariates[r, :l] for r, l in zip(range(dataset.n_regions), lengths)]
    design = np.concatenate([np.ones((sum(lengths), 1)), np.concatenate(x_rows)], axis=1)
    pop = np.concatenate([dataset.population[r, :l]
                          for r, l in zip(range(dataset.n_regions), lengths)])
    region = np.repeat(np.arange(dataset.n_regions), lengths)
    y = dataset.response
    n_regions = dataset.n_regions
    p = design.shape[1]

    beta = np.zeros(p)
    for iteration in range(1, max_iter + 1):
        with np.errstate(over="ignore"):
            w = np.exp(design @ beta) * pop
        if not np.isfinite(w).all():
            raise ConvergenceError(f"overflow in expected counts at iteration {iteration}")
        yhat = np.bincount(region, weights=w, minlength=n_regions)
        s = np.zeros((n_regions, p))
        for j in range(p):
            s[:, j] = np.bincount(region, weights=w * design[:, j], minlength=n_regions)
        resid = 1.0 - y / yhat
        gradient = s.T @ resid
        pixel_coef = resid[region] * w
        hessian = (design * pixel_coef[:, None]).T @ design
        hessian += (s * (y / yhat ** 2)[:, None]).T @ s
        cond = np.linalg.cond(hessian)
        if not np.isfinite(cond) or cond > 1e14:
            raise ConvergenceError(f"singular Hessian (condition estimate {cond:.3e})")
        step = np.linalg.solve(hessian, gradient)
        beta = beta - step
        if np.max(np.abs(step)) < tol:
            w = np.exp(design @ beta) * pop
            yhat = np.bincount(region, weights=w, minlength=n_regions)
            loss = float(np.mean(yhat - y * np.log(np.maximum(yhat, 1e-12))))
            return OracleFit(beta=beta, loss=loss, iterations=iteration)
    raise ConvergenceError(f"no convergence within {max_iter} iterations")


def finite_diff_gradient(loss_fn, params: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient with per-coordinate steps.

    Coordinate ``i`` is perturbed by ``step * max(1, |params[i]|)``; a
    non-finite loss at any probe point raises.
    """
    params = np.asarray(params, dtype=np.float64)
    gradient = np.empty_like(params)
    for i in range(params.size):
        h = step * max(1.0, abs(params[i]))
        probe = params.copy()
        probe[i] = params[i] + h
        upper = loss_fn(probe)
        probe[i] = params[i] - h
        lower = loss_fn(probe)
        if not (np.isfinite(upper) and np.isfinite(lower)):
            raise ValueError(f"non-finite loss at probe point for coordinate {i}")
        gradient[i] = (upper - lower) / (2.0 * h)
    return gradient
