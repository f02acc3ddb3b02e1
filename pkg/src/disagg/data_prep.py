"""From aligned rasters to training tensors, and back out for prediction.

Each region's usable pixels (finite covariates, usable population) become a
row block in zero-padded ``(regions x max_pixels x channels)`` tensors; the
zero population on padded slots keeps them out of every aggregation.
Covariates and pixel coordinates are centered and scaled with statistics
computed from the training pixels only, and those statistics travel with
the dataset so prediction reuses them unchanged.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .grid_io import Raster, RasterStack, RegionMask, RegionSet, check_alignment, rasterize_regions

__all__ = [
    "NormalizationParams",
    "PaddedDataset",
    "PixelTable",
    "PredictionChunks",
    "build_pixel_tables",
    "chunk_full_grid",
    "fit_apply_normalization",
    "load_dataset",
    "pad_dataset",
    "pad_to",
    "prepare_dataset",
    "save_dataset",
    "subset_dataset",
    "usable_population_mask",
]

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PixelTable:
    """One region's usable pixels: covariates, population, and center coordinates."""

    region_index: int
    region_id: str
    pixel_indices: np.ndarray  # linear row-major indices into the reference grid
    covariates: np.ndarray     # (n_pixels, n_channels)
    population: np.ndarray     # (n_pixels,)
    xy: np.ndarray             # (n_pixels, 2)

    def __post_init__(self):
        idx = np.asarray(self.pixel_indices, dtype=np.int64)
        if idx.size and not (np.diff(idx) > 0).all():
            raise ValueError("pixel indices must be strictly increasing")
        object.__setattr__(self, "pixel_indices", idx)

    @property
    def n_pixels(self) -> int:
        return self.pixel_indices.size


@dataclass(frozen=True)
class NormalizationParams:
    """Per-channel center/scale for covariates and for the two coordinate axes.

    Channels whose spread is zero record ``sd = 0`` and are centered only
    (the divisor is forced to one).
    """

    cov_mean: np.ndarray
    cov_sd: np.ndarray
    xy_mean: np.ndarray
    xy_sd: np.ndarray

    def __post_init__(self):
        for name in ("cov_mean", "cov_sd", "xy_mean", "xy_sd"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))

    @property
    def cov_divisor(self) -> np.ndarray:
        return np.where(self.cov_sd > 0, self.cov_sd, 1.0)

    @property
    def xy_divisor(self) -> np.ndarray:
        return np.where(self.xy_sd > 0, self.xy_sd, 1.0)

    def to_jsonable(self) -> dict:
        return {
            "cov_mean": self.cov_mean.tolist(),
            "cov_sd": self.cov_sd.tolist(),
            "xy_mean": self.xy_mean.tolist(),
            "xy_sd": self.xy_sd.tolist(),
        }

    @classmethod
    def from_jsonable(cls, doc: dict) -> "NormalizationParams":
        return cls(
            cov_mean=doc["cov_mean"], cov_sd=doc["cov_sd"],
            xy_mean=doc["xy_mean"], xy_sd=doc["xy_sd"],
        )


@dataclass(frozen=True)
class PaddedDataset:
    """Zero-padded training tensors plus the per-region response vector.

    For every region, slots at positions >= its true length are exactly
    zero in all three tensors, and ``pmax`` is the largest true length.
    """

    covariates: np.ndarray       # (R, pmax, C)
    population: np.ndarray       # (R, pmax)
    xy: np.ndarray               # (R, pmax, 2)
    response: np.ndarray         # (R,)
    region_ids: tuple[str, ...]
    true_lengths: np.ndarray     # (R,)
    norm: NormalizationParams
    pmax: int
    covariate_names: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "covariates", np.asarray(self.covariates, dtype=np.float64))
        object.__setattr__(self, "population", np.asarray(self.population, dtype=np.float64))
        object.__setattr__(self, "xy", np.asarray(self.xy, dtype=np.float64))
        object.__setattr__(self, "response", np.asarray(self.response, dtype=np.float64))
        object.__setattr__(self, "true_lengths", np.asarray(self.true_lengths, dtype=np.int64))
        object.__setattr__(self, "region_ids", tuple(self.region_ids))
        object.__setattr__(self, "covariate_names", tuple(self.covariate_names))
        r, width, c = self.covariates.shape
        if width != self.pmax:
            raise ValueError("tensor slot count disagrees with pmax")
        if self.population.shape != (r, width) or self.xy.shape != (r, width, 2):
            raise ValueError("tensor shapes disagree")
        if self.response.shape != (r,) or self.true_lengths.shape != (r,):
            raise ValueError("response/true_lengths must have one entry per region")
        if len(self.region_ids) != r or len(self.covariate_names) != c:
            raise ValueError("region ids / covariate names have the wrong length")
        # pad_to may widen tensors beyond the largest region (padding contract)
        if r and self.pmax < int(self.true_lengths.max()):
            raise ValueError("pmax cannot be smaller than the largest true length")
        if (self.response < 0).any():
            raise ValueError("responses must be non-negative")
        pad = ~_valid_slots(self.true_lengths, self.pmax)
        if (self.covariates[pad] != 0).any() or (self.population[pad] != 0).any() \
                or (self.xy[pad] != 0).any():
            raise ValueError("padded slots must be exactly zero")

    @property
    def n_regions(self) -> int:
        return self.covariates.shape[0]

    @property
    def n_channels(self) -> int:
        return self.covariates.shape[2]


def _valid_slots(true_lengths: np.ndarray, pmax: int) -> np.ndarray:
    """(R, pmax) mask of real (non-padding) slots."""
    return np.arange(pmax)[None, :] < np.asarray(true_lengths)[:, None]


def usable_population_mask(population: Raster) -> np.ndarray:
    """Cells with a finite, non-negative, non-nodata population value."""
    return ~population.missing_mask() & (population.values >= 0)


def covariate_usable_mask(stack: RasterStack) -> np.ndarray:
    """Cells where every covariate layer has a finite, non-nodata value."""
    usable = ~stack.layers[0].missing_mask()
    for layer in stack.layers[1:]:
        usable &= ~layer.missing_mask()
    return usable


def build_pixel_tables(stack: RasterStack, population: Raster,
                       mask: RegionMask) -> list[PixelTable]:
    """Extract one :class:`PixelTable` per region with at least one usable pixel.

    Pixels with nodata in any covariate layer or an unusable population are
    dropped; regions left with zero pixels are logged and excluded.
    """
    report = check_alignment(stack, population)
    if not report:
        raise ValueError(f"rasters are not aligned: {', '.join(report.mismatches)}")
    if mask.shape != stack.reference.shape:
        raise ValueError("region mask shape differs from the raster grid")

    usable = covariate_usable_mask(stack) & usable_population_mask(population)
    flat_idx = mask.indices.ravel()
    flat_usable = usable.ravel()
    cov = np.stack([layer.values.ravel() for layer in stack.layers], axis=1)
    pop = population.values.ravel()
    xy = stack.reference.center_xy()

    tables = []
    for region_index in range(mask.n_regions):
        pixels = np.nonzero((flat_idx == region_index) & flat_usable)[0]
        region_id = f"region{region_index}"
        if pixels.size == 0:
            n_assigned = int((flat_idx == region_index).sum())
            logger.warning(
                "region index %d excluded: no usable pixels (%d assigned)",
                region_index, n_assigned,
            )
            continue
        tables.append(PixelTable(
            region_index=region_index,
            region_id=region_id,
            pixel_indices=pixels,
            covariates=cov[pixels],
            population=pop[pixels],
            xy=xy[pixels],
        ))
    if not tables:
        raise ValueError("no usable pixels in any region")
    return tables


def fit_apply_normalization(tables, existing: NormalizationParams | None = None):
    """Center and scale covariate and coordinate channels.

    Without ``existing``, means and population standard deviations are
    computed over all pixels pooled across regions and then applied; with
    ``existing`` (the prediction path) the given parameters are applied
    unchanged.

    Returns the transformed tables and the parameters used.
    """
    tables = list(tables)
    if not tables:
        raise ValueError("no pixel tables to normalize")
    if existing is None:
        cov = np.concatenate([t.covariates for t in tables], axis=0)
        xy = np.concatenate([t.xy for t in tables], axis=0)
        params = NormalizationParams(
            cov_mean=cov.mean(axis=0), cov_sd=cov.std(axis=0),
            xy_mean=xy.mean(axis=0), xy_sd=xy.std(axis=0),
        )
    else:
        params = existing
    transformed = [
        replace(
            t,
            covariates=(t.covariates - params.cov_mean) / params.cov_divisor,
            xy=(t.xy - params.xy_mean) / params.xy_divisor,
        )
        for t in tables
    ]
    return transformed, params


def pad_dataset(tables, responses, norm: NormalizationParams,
                covariate_names=None, region_ids=None) -> PaddedDataset:
    """Stack per-region tables into zero-padded tensors.

    ``responses`` must align with ``tables`` by position. Padded slots stay
    exactly zero, which (with zero population) keeps them out of every
    region aggregation.
    """
    tables = list(tables)
    responses = np.asarray(responses, dtype=np.float64)
    if responses.shape != (len(tables),):
        raise ValueError(
            f"length mismatch: {len(tables)} tables vs {responses.shape} responses"
        )
    n_channels = tables[0].covariates.shape[1] if tables else 0
    lengths = np.array([t.n_pixels for t in tables], dtype=np.int64)
    pmax = int(lengths.max()) if len(tables) else 0
    r = len(tables)
    cov = np.zeros((r, pmax, n_channels))
    pop = np.zeros((r, pmax))
    xy = np.zeros((r, pmax, 2))
    for i, t in enumerate(tables):
        cov[i, : t.n_pixels] = t.covariates
        pop[i, : t.n_pixels] = t.population
        xy[i, : t.n_pixels] = t.xy
    if covariate_names is None:
        covariate_names = tuple(f"c{j}" for j in range(n_channels))
    if region_ids is None:
        region_ids = tuple(t.region_id for t in tables)
    return PaddedDataset(
        covariates=cov, population=pop, xy=xy, response=responses,
        region_ids=region_ids, true_lengths=lengths, norm=norm, pmax=pmax,
        covariate_names=tuple(covariate_names),
    )


def prepare_dataset(stack: RasterStack, population: Raster, regions: RegionSet,
                    mask: RegionMask | None = None):
    """Full preparation pipeline: align-check, rasterize, extract, normalize, pad.

    Returns the padded dataset and the region mask used to build it.
    """
    report = check_alignment(stack, population)
    if not report:
        raise ValueError(f"rasters are not aligned: {', '.join(report.mismatches)}")
    if mask is None:
        mask = rasterize_regions(regions, stack.reference)
    tables = build_pixel_tables(stack, population, mask)
    tables = [replace(t, region_id=regions.regions[t.region_index].id) for t in tables]
    tables, norm = fit_apply_normalization(tables)
    responses = np.array([regions.regions[t.region_index].response for t in tables])
    dataset = pad_dataset(tables, responses, norm, covariate_names=stack.names)
    return dataset, mask


def subset_dataset(dataset: PaddedDataset, indices,
                   norm: NormalizationParams | None = None) -> PaddedDataset:
    """Select regions and renormalize their channels.

    The stored normalization is inverted, then fresh statistics are fitted
    on the selected regions' pixels (or ``norm`` is applied when given, the
    held-out-fold path). Tensors are trimmed to the new largest region.
    """
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size == 0:
        raise ValueError("cannot subset to zero regions")
    lengths = dataset.true_lengths[indices]
    pmax = int(lengths.max())
    valid = _valid_slots(lengths, pmax)

    old = dataset.norm
    cov = dataset.covariates[indices][:, :pmax].copy()
    xy = dataset.xy[indices][:, :pmax].copy()
    cov = np.where(valid[:, :, None], cov * old.cov_divisor + old.cov_mean, 0.0)
    xy = np.where(valid[:, :, None], xy * old.xy_divisor + old.xy_mean, 0.0)

    if norm is None:
        cov_flat = cov[valid]
        xy_flat = xy[valid]
        norm = NormalizationParams(
            cov_mean=cov_flat.mean(axis=0), cov_sd=cov_flat.std(axis=0),
            xy_mean=xy_flat.mean(axis=0), xy_sd=xy_flat.std(axis=0),
        )
    cov = np.where(valid[:, :, None], (cov - norm.cov_mean) / norm.cov_divisor, 0.0)
    xy = np.where(valid[:, :, None], (xy - norm.xy_mean) / norm.xy_divisor, 0.0)

    return PaddedDataset(
        covariates=cov,
        population=dataset.population[indices][:, :pmax],
        xy=xy,
        response=dataset.response[indices],
        region_ids=tuple(dataset.region_ids[i] for i in indices),
        true_lengths=lengths,
        norm=norm,
        pmax=pmax,
        covariate_names=dataset.covariate_names,
    )


def pad_to(dataset: PaddedDataset, new_pmax: int) -> PaddedDataset:
    """Append all-zero slots so every region tensor spans ``new_pmax`` slots.

    True lengths are unchanged; by the padding contract this must not
    change any aggregated quantity.
    """
    if new_pmax < dataset.pmax:
        raise ValueError("new_pmax must not shrink the tensors")
    extra = new_pmax - dataset.pmax
    return replace(
        dataset,
        covariates=np.pad(dataset.covariates, ((0, 0), (0, extra), (0, 0))),
        population=np.pad(dataset.population, ((0, 0), (0, extra))),
        xy=np.pad(dataset.xy, ((0, 0), (0, extra), (0, 0))),
        pmax=new_pmax,
    )


@dataclass(frozen=True)
class PredictionChunks:
    """Full-grid pixels regrouped into fixed-size blocks for prediction.

    ``placement`` maps every chunk slot back to its row-major cell index,
    with -1 marking the zero-padded tail of the final chunk.
    """

    covariates: np.ndarray   # (n_chunks, pmax, C), normalized
    xy: np.ndarray           # (n_chunks, pmax, 2), normalized
    placement: np.ndarray    # (n_chunks, pmax) linear cell index or -1
    grid_shape: tuple[int, int]
    population: np.ndarray | None = None  # (n_chunks, pmax) when supplied

    @property
    def n_chunks(self) -> int:
        return self.covariates.shape[0]

    def linear_indices(self) -> np.ndarray:
        """Row-major cell indices of all non-padding slots, in slot order."""
        flat = self.placement.ravel()
        return flat[flat >= 0]


def chunk_full_grid(stack: RasterStack, population: Raster | None,
                    norm: NormalizationParams, pmax: int) -> PredictionChunks:
    """List every pixel with finite covariates, normalized, in blocks of ``pmax``.

    Population does not influence which pixels are included (rates are
    per-pixel quantities); when a population raster is supplied its values
    ride along in matching blocks. Only the last block is zero-padded.
    """
    if pmax < 1:
        raise ValueError("pmax must be positive")
    usable = covariate_usable_mask(stack)
    idx = np.nonzero(usable.ravel())[0]
    cov = np.stack([layer.values.ravel()[idx] for layer in stack.layers], axis=1)
    xy = stack.reference.center_xy()[idx]
    cov = (cov - norm.cov_mean) / norm.cov_divisor
    xy = (xy - norm.xy_mean) / norm.xy_divisor

    n = idx.size
    n_chunks = max(1, -(-n // pmax))
    padded = n_chunks * pmax
    cov_chunks = np.zeros((padded, cov.shape[1]))
    xy_chunks = np.zeros((padded, 2))
    placement = np.full(padded, -1, dtype=np.int64)
    cov_chunks[:n] = cov
    xy_chunks[:n] = xy
    placement[:n] = idx

    pop_chunks = None
    if population is not None:
        pop_flat = np.zeros(padded)
        pop_flat[:n] = population.values.ravel()[idx]
        pop_chunks = pop_flat.reshape(n_chunks, pmax)

    return PredictionChunks(
        covariates=cov_chunks.reshape(n_chunks, pmax, -1),
        xy=xy_chunks.reshape(n_chunks, pmax, 2),
        placement=placement.reshape(n_chunks, pmax),
        grid_shape=stack.reference.shape,
        population=pop_chunks,
    )


_TENSOR_FILES = ("covariates", "population", "xy", "response")


def save_dataset(dataset: PaddedDataset, directory) -> None:
    """Write tensors as flat little-endian float64 binaries plus a JSON sidecar."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name in _TENSOR_FILES:
        arr = getattr(dataset, name)
        (directory / f"{name}.bin").write_bytes(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    sidecar = {
        "shapes": {name: list(getattr(dataset, name).shape) for name in _TENSOR_FILES},
        "region_ids": list(dataset.region_ids),
        "true_lengths": dataset.true_lengths.tolist(),
        "pmax": dataset.pmax,
        "covariate_names": list(dataset.covariate_names),
        "normalization": dataset.norm.to_jsonable(),
    }
    (directory / "dataset.json").write_text(json.dumps(sidecar, indent=2))


def load_dataset(directory) -> PaddedDataset:
    directory = Path(directory)
    sidecar = json.loads((directory / "dataset.json").read_text())
    tensors = {}
    for name in _TENSOR_FILES:
        raw = np.frombuffer((directory / f"{name}.bin").read_bytes(), dtype="<f8")
        tensors[name] = raw.reshape(sidecar["shapes"][name]).astype(np.float64)
    return PaddedDataset(
        covariates=tensors["covariates"],
        population=tensors["population"],
        xy=tensors["xy"],
        response=tensors["response"],
        region_ids=tuple(sidecar["region_ids"]),
        true_lengths=np.array(sidecar["true_lengths"], dtype=np.int64),
        norm=NormalizationParams.from_jsonable(sidecar["normalization"]),
        pmax=int(sidecar["pmax"]),
        covariate_names=tuple(sidecar["covariate_names"]),
    )
