"""Monte Carlo dropout sampling and per-pixel uncertainty summaries.

Dropout layers stay stochastic at inference (the ``mc_infer`` forward
mode); repeating the prediction with derived seeds yields a stack of rate
samples per pixel whose spread estimates the model's predictive
uncertainty.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np
from scipy.stats import kurtosis, skew

from .grid_io import Raster, RasterStack
from .model import DisaggRegressor
from .network import RngStream

__all__ = [
    "SampleStack",
    "UncertaintySummary",
    "mc_dropout_predict",
    "normality_report",
    "sample_rows",
    "scale_by_population",
    "summarize_samples",
]


@dataclass(frozen=True)
class SampleStack:
    """Sampled rates: one row per draw, one column per usable grid pixel."""

    samples: np.ndarray        # (S, n_pixels)
    linear_indices: np.ndarray  # row-major cell index per column
    template: Raster           # geometry/nodata carrier for rebuilding rasters
    seed: int

    @property
    def n_samples(self) -> int:
        return self.samples.shape[0]

    @property
    def n_pixels(self) -> int:
        return self.samples.shape[1]

    def pixel_rowcol(self) -> np.ndarray:
        """(row, col) per sampled pixel, shape (n_pixels, 2)."""
        rows, cols = np.divmod(self.linear_indices, self.template.ncols)
        return np.column_stack([rows, cols])

    def to_raster(self, values: np.ndarray) -> Raster:
        grid = np.full(self.template.shape[0] * self.template.shape[1],
                       self.template.nodata)
        grid[self.linear_indices] = values
        return self.template.with_values(grid.reshape(self.template.shape))


def mc_dropout_predict(model: DisaggRegressor, stack: RasterStack,
                       n_samples: int, seed: int) -> SampleStack:
    """Draw rate predictions with dropout active at inference.

    Sample ``s`` uses an rng seeded ``seed ^ s``, so the stack is
    deterministic given (model, seed, n_samples) and individual samples
    can be regenerated independently. Models without dropout layers are
    allowed and produce identical samples.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    draws = []
    indices = template = None
    for s in range(n_samples):
        rates, indices, template = model._rates_on_grid(
            stack, mode="mc_infer", rng=RngStream(seed ^ s))
        draws.append(rates)
    return SampleStack(samples=np.vstack(draws), linear_indices=indices,
                       template=template, seed=seed)


def scale_by_population(stack: SampleStack, population: Raster) -> SampleStack:
    """Rescale rate samples to count scale (rate * population per pixel)."""
    if population.shape != stack.template.shape:
        raise ValueError("population grid shape differs from the sampled grid")
    pop = population.values.ravel()[stack.linear_indices]
    return replace(stack, samples=stack.samples * pop)


@dataclass(frozen=True)
class UncertaintySummary:
    """Per-pixel sample statistics as rasters.

    ``sd`` and the 1.96-sd bounds need at least two samples; with a single
    sample they are flagged undefined (None).
    """

    mean: Raster
    median: Raster
    minimum: Raster
    maximum: Raster
    sd: Raster | None
    lower95: Raster | None
    upper95: Raster | None

    def rasters(self) -> dict[str, Raster]:
        out = {"mean": self.mean, "median": self.median,
               "min": self.minimum, "max": self.maximum}
        if self.sd is not None:
            out.update({"sd": self.sd, "lower95": self.lower95, "upper95": self.upper95})
        return out


def summarize_samples(stack: SampleStack) -> UncertaintySummary:
    """Per-pixel mean/median/min/max plus population-sd and mean +/- 1.96 sd."""
    samples = stack.samples
    mean = samples.mean(axis=0)
    summary = {
        "mean": mean,
        "median": np.median(samples, axis=0),
        "minimum": samples.min(axis=0),
        "maximum": samples.max(axis=0),
    }
    if stack.n_samples >= 2:
        sd = samples.std(axis=0)
        summary["sd"] = sd
        summary["lower95"] = mean - 1.96 * sd
        summary["upper95"] = mean + 1.96 * sd
    else:
        return UncertaintySummary(
            **{k: stack.to_raster(v) for k, v in summary.items()},
            sd=None, lower95=None, upper95=None,
        )
    return UncertaintySummary(**{k: stack.to_raster(v) for k, v in summary.items()})


def _pixel_subset(stack: SampleStack, n_pixels: int, seed: int) -> np.ndarray:
    rng = RngStream(seed)
    n = min(n_pixels, stack.n_pixels)
    return np.sort(rng.choice(stack.n_pixels, size=n, replace=False))


def normality_report(stack: SampleStack, n_pixels: int = 9,
                     seed: int = 0) -> list[tuple[int, int, float, float]]:
    """Skewness and excess kurtosis for a seeded random subset of pixels.

    Descriptive only; returns (row, col, skewness, excess_kurtosis) rows.
    Pixels with (near-)constant samples yield nan moments.
    """
    rowcol = stack.pixel_rowcol()
    rows = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for j in _pixel_subset(stack, n_pixels, seed):
            r, c = rowcol[j]
            rows.append((int(r), int(c),
                         float(skew(stack.samples[:, j])),
                         float(kurtosis(stack.samples[:, j]))))
    return rows


def sample_rows(stack: SampleStack, n_pixels: int = 9,
                seed: int = 0) -> list[tuple[int, int, int, float]]:
    """Raw draws for a seeded pixel subset: (row, col, sample_index, rate) rows."""
    rowcol = stack.pixel_rowcol()
    rows = []
    for j in _pixel_subset(stack, n_pixels, seed):
        r, c = rowcol[j]
        for s in range(stack.n_samples):
            rows.append((int(r), int(c), s, float(stack.samples[s, j])))
    return rows
