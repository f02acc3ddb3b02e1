"""Two-branch disaggregation network: estimator, training loop, prediction.

The covariate branch (and optionally a coordinate branch) produce a linear
predictor per pixel; the inverse link turns it into a rate, and the dot
product with population aggregates rates to one predicted count per region.
Training minimizes the Poisson loss between those aggregated counts and
the observed region totals, so each region is one training observation.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator

from .data_prep import (
    NormalizationParams,
    PaddedDataset,
    chunk_full_grid,
    usable_population_mask,
)
from .grid_io import Raster, RasterStack, RegionMask, UNASSIGNED
from .network import (
    Dense,
    Dropout,
    NetworkSpec,
    Params,
    RngStream,
    backward_gradients,
    forward_network,
    init_params,
    make_optimizer,
    poisson_loss,
    poisson_loss_grad,
)

__all__ = [
    "DisaggRegressor",
    "EarlyStopping",
    "FitHistory",
    "LINKS",
    "ReaggregationResult",
    "TrainingError",
    "extract_weights",
    "load_model",
    "reaggregate",
    "save_model",
]

#: link -> (inverse link, derivative of the inverse link w.r.t. the predictor)
LINKS = {
    "log": (np.exp, lambda eta, rate: rate),
    "identity": (lambda eta: eta, lambda eta, rate: np.ones_like(eta)),
}


class TrainingError(RuntimeError):
    """Training aborted (typically a non-finite loss from an exploding predictor)."""


@dataclass
class EarlyStopping:
    """Halt training once the monitored value stops improving.

    An epoch counts as an improvement when the monitored value drops below
    the best seen so far by more than ``min_delta``; training stops after
    ``patience`` consecutive non-improving epochs.
    """

    monitor: str = "loss"
    min_delta: float = 0.0
    patience: int = 10
    best: float = field(default=math.inf, repr=False)
    wait: int = field(default=0, repr=False)

    def __post_init__(self):
        if self.monitor not in ("loss", "val_loss"):
            raise ValueError("monitor must be 'loss' or 'val_loss'")
        if self.patience < 1:
            raise ValueError("patience must be a positive integer")

    def fresh(self) -> "EarlyStopping":
        return EarlyStopping(monitor=self.monitor, min_delta=self.min_delta,
                             patience=self.patience)

    def update(self, value: float) -> bool:
        """Record one epoch's monitored value; True means stop now."""
        if value < self.best - self.min_delta:
            self.best = value
            self.wait = 0
            return False
        self.wait += 1
        return self.wait >= self.patience


@dataclass
class FitHistory:
    """Per-epoch training record: losses and cumulative wall-clock seconds."""

    loss: list[float] = field(default_factory=list)
    val_loss: list[float] | None = None
    elapsed_s: list[float] = field(default_factory=list)
    stop_epoch: int = 0
    stop_reason: str = "no_epochs"

    def __len__(self) -> int:
        return len(self.loss)

    def to_csv(self, path) -> None:
        lines = ["epoch,loss,val_loss,elapsed_s"]
        for i, loss in enumerate(self.loss):
            val = "" if self.val_loss is None else repr(self.val_loss[i])
            lines.append(f"{i + 1},{loss!r},{val},{self.elapsed_s[i]!r}")
        Path(path).write_text("\n".join(lines) + "\n")


@dataclass(frozen=True)
class _Flattened:
    """A dataset's real pixels, concatenated region by region."""

    features: np.ndarray      # (N, C) or (N, C+2) when coordinates join the covariates
    xy: np.ndarray            # (N, 2)
    population: np.ndarray    # (N,)
    offsets: np.ndarray       # (R,) start of each region's block
    region_index: np.ndarray  # (N,) owning region per pixel
    response: np.ndarray      # (R,)


def _segment_sums(values: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    return np.add.reduceat(values, offsets)


class DisaggRegressor(BaseEstimator):
    """Learns per-pixel rates from region-aggregated counts.

    The model applies a dense feed-forward network to each pixel's
    covariates (plus, optionally, a second network to its coordinates),
    links the summed output to a rate, and multiplies by population so the
    per-region sums can be trained against observed totals with a Poisson
    loss. Every branch ends in an implicit one-unit linear layer.

    Parameters
    ----------
    layers_cov : sequence of Dense/Dropout
        Hidden layers for the covariate branch.
    layers_xy : sequence of Dense/Dropout, or None
        Hidden layers for a separate coordinate branch; None disables it.
    xy_as_covariates : bool
        Feed coordinates as two extra covariate channels instead of a
        separate branch. Mutually exclusive with ``layers_xy``.
    link : {"log", "identity"}
        Inverse-link applied to the linear predictor ("log" means rates
        are ``exp(eta)``).
    optimizer : {"adam", "sgd"}
    learning_rate : float
    epochs : int
        Upper bound on full-batch training epochs.
    validation_split : float in [0, 1)
        Fraction of regions held out (seeded shuffle, last ceil(v*R)
        regions) and scored after each epoch without contributing
        gradients.
    early_stopping : EarlyStopping or None
    seed : int
        Drives parameter initialization, the validation shuffle, and
        dropout, making training fully reproducible.
    """

    def __init__(self, layers_cov=(), layers_xy=None, xy_as_covariates=False,
                 link="log", optimizer="adam", learning_rate=0.001, epochs=1000,
                 validation_split=0.0, early_stopping=None, seed=0):
        self.layers_cov = layers_cov
        self.layers_xy = layers_xy
        self.xy_as_covariates = xy_as_covariates
        self.link = link
        self.optimizer = optimizer
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.validation_split = validation_split
        self.early_stopping = early_stopping
        self.seed = seed

    # ------------------------------------------------------------------
    # validation / assembly helpers

    def _check_config(self):
        if self.layers_xy is not None and self.xy_as_covariates:
            raise ValueError(
                "layers_xy and xy_as_covariates are mutually exclusive; enable only one"
            )
        if self.link not in LINKS:
            raise ValueError(f"unknown link {self.link!r}")
        if not 0.0 <= self.validation_split < 1.0:
            raise ValueError("validation_split must lie in [0, 1)")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.early_stopping is not None:
            if self.early_stopping.monitor == "val_loss" and self.validation_split == 0:
                raise ValueError("monitoring val_loss requires validation_split > 0")

    def _build_specs(self, n_channels: int):
        head = (Dense(1, "linear"),)
        cov_width = n_channels + (2 if self.xy_as_covariates else 0)
        cov_spec = NetworkSpec(cov_width, tuple(self.layers_cov) + head)
        xy_spec = None
        if self.layers_xy is not None:
            xy_spec = NetworkSpec(2, tuple(self.layers_xy) + head)
        return cov_spec, xy_spec

    @staticmethod
    def _flatten(dataset: PaddedDataset, region_subset=None, xy_as_covariates=False) -> _Flattened:
        idx = np.arange(dataset.n_regions) if region_subset is None else np.asarray(region_subset)
        lengths = dataset.true_lengths[idx]
        cov = np.concatenate([dataset.covariates[r, :l] for r, l in zip(idx, lengths)])
        xy = np.concatenate([dataset.xy[r, :l] for r, l in zip(idx, lengths)])
        pop = np.concatenate([dataset.population[r, :l] for r, l in zip(idx, lengths)])
        offsets = np.concatenate([[0], np.cumsum(lengths)[:-1]]).astype(np.int64)
        features = np.hstack([cov, xy]) if xy_as_covariates else cov
        return _Flattened(
            features=features, xy=xy, population=pop, offsets=offsets,
            region_index=np.repeat(np.arange(idx.size), lengths),
            response=dataset.response[idx],
        )

    def _forward_flat(self, flat: _Flattened, mode: str, rng: RngStream | None,
                      params_cov: Params | None = None, params_xy: Params | None = None):
        """Linear predictor, rate, and aggregated count for flattened pixels."""
        params_cov = self.params_cov_ if params_cov is None else params_cov
        params_xy = self.params_xy_ if params_xy is None else params_xy
        eta_cov, trace_cov = forward_network(
            self.cov_spec_, params_cov, flat.features, mode, rng)
        eta = eta_cov[:, 0]
        trace_xy = None
        if self.xy_spec_ is not None:
            eta_xy, trace_xy = forward_network(
                self.xy_spec_, params_xy, flat.xy, mode, rng)
            eta = eta + eta_xy[:, 0]
        inverse, _ = LINKS[self.link]
        with np.errstate(over="ignore", invalid="ignore"):
            rate = inverse(eta)
            agg = _segment_sums(rate * flat.population, flat.offsets)
        return eta, rate, agg, trace_cov, trace_xy

    def _loss_and_grads_flat(self, flat: _Flattened, mode: str, rng: RngStream | None,
                             params_cov: Params, params_xy: Params | None,
                             context: str = ""):
        """Aggregated-Poisson loss and exact flat-parameter gradients."""
        eta, rate, agg, trace_cov, trace_xy = self._forward_flat(
            flat, mode, rng, params_cov, params_xy)
        self._check_finite(agg, context)
        loss = poisson_loss(flat.response, agg)
        d_agg = poisson_loss_grad(flat.response, agg)
        d_rate = d_agg[flat.region_index] * flat.population
        _, dlink = LINKS[self.link]
        d_eta = (d_rate * dlink(eta, rate))[:, None]
        grads = backward_gradients(self.cov_spec_, params_cov, trace_cov, d_eta)
        if self.xy_spec_ is not None:
            grads = np.concatenate([
                grads,
                backward_gradients(self.xy_spec_, params_xy, trace_xy, d_eta),
            ])
        return loss, grads, agg

    def flat_params(self) -> np.ndarray:
        """All parameters (covariate branch, then coordinate branch) as one vector."""
        self._require_fitted()
        if self.params_xy_ is None:
            return self.params_cov_.flat.copy()
        return np.concatenate([self.params_cov_.flat, self.params_xy_.flat])

    def _split_flat(self, theta: np.ndarray):
        theta = np.asarray(theta, dtype=np.float64)
        n_cov = self.cov_spec_.n_params
        params_cov = Params(self.cov_spec_, theta[:n_cov])
        params_xy = None
        if self.xy_spec_ is not None:
            params_xy = Params(self.xy_spec_, theta[n_cov:])
        return params_cov, params_xy

    def loss_and_gradients(self, dataset: PaddedDataset, flat_params=None,
                           mode: str = "infer", rng_seed: int | None = None):
        """Loss and exact parameter gradients on a dataset.

        Evaluates at the fitted parameters, or at ``flat_params`` when
        given (the layout of :meth:`flat_params`). With ``mode="train"``
        and an ``rng_seed``, dropout masks are drawn deterministically so
        the same loss is a fixed function of the parameters.
        """
        self._require_fitted()
        if flat_params is None:
            params_cov, params_xy = self.params_cov_, self.params_xy_
        else:
            params_cov, params_xy = self._split_flat(flat_params)
        rng = RngStream(rng_seed) if rng_seed is not None else None
        flat = self._flatten(dataset, None, self.xy_as_covariates)
        loss, grads, _ = self._loss_and_grads_flat(flat, mode, rng, params_cov, params_xy)
        return loss, grads

    @staticmethod
    def _check_finite(agg: np.ndarray, context: str):
        bad = np.nonzero(~np.isfinite(agg))[0]
        if bad.size:
            raise TrainingError(
                f"non-finite aggregated prediction for region index {bad[0]} {context}"
            )

    # ------------------------------------------------------------------
    # estimator API

    def fit(self, dataset: PaddedDataset) -> "DisaggRegressor":
        """Train on a padded dataset with full-batch gradient steps."""
        self._check_config()
        if self.validation_split > 0 and dataset.n_regions < 2:
            raise ValueError("validation_split > 0 needs at least two regions")

        cov_spec, xy_spec = self._build_specs(dataset.n_channels)
        rng = RngStream(self.seed)
        self.cov_spec_ = cov_spec
        self.xy_spec_ = xy_spec
        self.params_cov_ = init_params(cov_spec, rng)
        self.params_xy_ = init_params(xy_spec, rng) if xy_spec is not None else None
        self.norm_ = dataset.norm
        self.pmax_ = dataset.pmax
        self.covariate_names_ = dataset.covariate_names

        r = dataset.n_regions
        n_val = math.ceil(self.validation_split * r)
        order = rng.permutation(r)
        train_idx, val_idx = np.sort(order[: r - n_val]), np.sort(order[r - n_val:])
        self.train_regions_ = train_idx
        self.validation_regions_ = val_idx
        train = self._flatten(dataset, train_idx, self.xy_as_covariates)
        val = self._flatten(dataset, val_idx, self.xy_as_covariates) if n_val else None

        n_cov = cov_spec.n_params
        theta = self.params_cov_.flat.copy()
        if self.params_xy_ is not None:
            theta = np.concatenate([theta, self.params_xy_.flat])
        opt = make_optimizer(self.optimizer, self.learning_rate)
        stopper = self.early_stopping.fresh() if self.early_stopping is not None else None

        history = FitHistory(val_loss=[] if val is not None else None)
        started = time.perf_counter()
        for epoch in range(1, self.epochs + 1):
            params_cov, params_xy = self._split_flat(theta)
            loss, grads, agg = self._loss_and_grads_flat(
                train, "train", rng, params_cov, params_xy, context=f"at epoch {epoch}")
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}")
            theta = opt.step(theta, grads)

            history.loss.append(loss)
            if val is not None:
                _, _, val_agg, _, _ = self._forward_flat(
                    val, "infer", None, params_cov, params_xy)
                self._check_finite(val_agg, f"in validation at epoch {epoch}")
                history.val_loss.append(poisson_loss(val.response, val_agg))
            history.elapsed_s.append(time.perf_counter() - started)
            history.stop_epoch = epoch
            history.stop_reason = "completed"

            if stopper is not None:
                monitored = history.loss[-1] if stopper.monitor == "loss" else history.val_loss[-1]
                if stopper.update(monitored):
                    history.stop_reason = "early_stopping"
                    break

        self.params_cov_, self.params_xy_ = self._split_flat(theta)
        self.history_ = history
        self.epochs_run_ = len(history)
        return self

    def aggregate_forward(self, dataset: PaddedDataset, mode: str = "infer",
                          rng: RngStream | None = None):
        """Per-pixel predictor and rate plus the per-region aggregated count.

        Returns ``(eta, rate, agg)`` where eta and rate are (R x pmax)
        grids (zero on padded slots) and agg is the length-R vector of
        predicted counts. Padded slots contribute nothing: their
        population is zero and they are excluded from the sums.
        """
        self._require_fitted()
        if dataset.n_channels != len(self.covariate_names_):
            raise ValueError(
                f"channel count mismatch: model has {len(self.covariate_names_)}, "
                f"dataset has {dataset.n_channels}"
            )
        flat = self._flatten(dataset, None, self.xy_as_covariates)
        eta_flat, rate_flat, agg, _, _ = self._forward_flat(flat, mode, rng)
        self._check_finite(agg, "in aggregate_forward")
        eta = np.zeros((dataset.n_regions, dataset.pmax))
        rate = np.zeros_like(eta)
        ends = np.append(flat.offsets[1:], flat.population.size)
        for r in range(dataset.n_regions):
            n = dataset.true_lengths[r]
            eta[r, :n] = eta_flat[flat.offsets[r]: ends[r]]
            rate[r, :n] = rate_flat[flat.offsets[r]: ends[r]]
        return eta, rate, agg

    def _rates_on_grid(self, stack: RasterStack, mode: str = "infer",
                       rng: RngStream | None = None):
        """Rates for every usable grid pixel via fixed-size chunks.

        Returns ``(rates, linear_indices, template)`` where rates align
        with the row-major linear indices of usable cells.
        """
        self._require_fitted()
        missing = [n for n in self.covariate_names_ if n not in stack.names]
        if missing:
            raise ValueError(f"stack lacks trained covariates: {missing}")
        stack = stack.select(self.covariate_names_)
        chunks = chunk_full_grid(stack, None, self.norm_, self.pmax_)
        inverse, _ = LINKS[self.link]
        rates = []
        for i in range(chunks.n_chunks):
            feats = chunks.covariates[i]
            if self.xy_as_covariates:
                feats = np.hstack([feats, chunks.xy[i]])
            eta, _ = forward_network(self.cov_spec_, self.params_cov_, feats, mode, rng)
            eta = eta[:, 0]
            if self.xy_spec_ is not None:
                eta_xy, _ = forward_network(self.xy_spec_, self.params_xy_,
                                            chunks.xy[i], mode, rng)
                eta = eta + eta_xy[:, 0]
            keep = chunks.placement[i] >= 0
            rates.append(inverse(eta)[keep])
        return np.concatenate(rates), chunks.linear_indices(), stack.reference

    def predict(self, stack: RasterStack, population: Raster | None = None):
        """Predict the per-pixel rate raster (and counts when population is given).

        Pixels with missing covariates come back as nodata; all other
        pixels carry the linked model output. With a population raster the
        count raster ``rate * population`` is returned as well.
        """
        rates, idx, template = self._rates_on_grid(stack, "infer", None)
        grid = np.full(template.shape[0] * template.shape[1], template.nodata)
        grid[idx] = rates
        rate_raster = template.with_values(grid.reshape(template.shape))
        if population is None:
            return rate_raster
        if population.geometry != template.geometry:
            raise ValueError("population raster is not aligned with the covariate stack")
        usable_pop = usable_population_mask(population).ravel()
        counts = np.full(grid.size, template.nodata)
        defined = np.zeros(grid.size, dtype=bool)
        defined[idx] = True
        both = defined & usable_pop
        counts[both] = grid[both] * population.values.ravel()[both]
        return rate_raster, template.with_values(counts.reshape(template.shape))

    def spatial_surface(self, stack: RasterStack) -> Raster:
        """Pre-link output of the coordinate branch on every usable pixel."""
        self._require_fitted()
        if self.xy_spec_ is None:
            raise ValueError("this model has no coordinate branch")
        stack = stack.select(self.covariate_names_)
        chunks = chunk_full_grid(stack, None, self.norm_, self.pmax_)
        values = []
        for i in range(chunks.n_chunks):
            eta_xy, _ = forward_network(self.xy_spec_, self.params_xy_,
                                        chunks.xy[i], "infer", None)
            values.append(eta_xy[:, 0][chunks.placement[i] >= 0])
        template = stack.reference
        grid = np.full(template.shape[0] * template.shape[1], template.nodata)
        grid[chunks.linear_indices()] = np.concatenate(values)
        return template.with_values(grid.reshape(template.shape))

    def _require_fitted(self):
        if not hasattr(self, "params_cov_"):
            raise ValueError("model is not fitted")


@dataclass(frozen=True)
class ReaggregationResult:
    """Per-region totals recovered from a prediction raster."""

    region_counts: np.ndarray       # predicted count per region
    region_population: np.ndarray   # total usable population per region
    rates: np.ndarray               # count / population, nan where undefined
    defined: np.ndarray             # False where a region has no usable population


def reaggregate(rate: Raster, population: Raster, mask: RegionMask) -> ReaggregationResult:
    """Sum ``rate * population`` over each region and derive incidence rates.

    Cells missing in either raster are skipped; regions whose usable
    population sums to zero get an undefined (nan) rate.
    """
    if rate.shape != population.shape or rate.shape != mask.shape:
        raise ValueError("rate, population, and mask grids must share one shape")
    usable = ~rate.missing_mask() & usable_population_mask(population)
    flat_mask = mask.indices.ravel()
    flat_usable = usable.ravel()
    rate_flat = rate.values.ravel()
    pop_flat = population.values.ravel()

    counts = np.zeros(mask.n_regions)
    pops = np.zeros(mask.n_regions)
    pixel_lists = []
    offsets = [0]
    present = []
    for r in range(mask.n_regions):
        pixels = np.nonzero((flat_mask == r) & flat_usable)[0]
        if pixels.size:
            pixel_lists.append(pixels)
            present.append(r)
            offsets.append(offsets[-1] + pixels.size)
    if present:
        all_pixels = np.concatenate(pixel_lists)
        starts = np.array(offsets[:-1], dtype=np.int64)
        counts[present] = _segment_sums(rate_flat[all_pixels] * pop_flat[all_pixels], starts)
        pops[present] = _segment_sums(pop_flat[all_pixels], starts)

    defined = pops > 0
    rates = np.full(mask.n_regions, np.nan)
    rates[defined] = counts[defined] / pops[defined]
    return ReaggregationResult(region_counts=counts, region_population=pops,
                               rates=rates, defined=defined)


def extract_weights(model: DisaggRegressor) -> list[tuple[str, float]]:
    """Named coefficients of a model with no hidden layers.

    Returns ``(name, value)`` rows starting with the intercept (the sum of
    the branch biases when a coordinate branch exists), then one weight per
    input channel. Raises for models with hidden layers.
    """
    model._require_fitted()
    if tuple(model.layers_cov) or (model.layers_xy is not None and tuple(model.layers_xy)):
        raise ValueError("weights are only extractable from models with no hidden layers")
    names = list(model.covariate_names_)
    if model.xy_as_covariates:
        names += ["x", "y"]
    weights = model.params_cov_.weights(0)[:, 0]
    intercept = float(model.params_cov_.bias(0)[0])
    rows = [("intercept", intercept)]
    rows += [(name, float(w)) for name, w in zip(names, weights)]
    if model.xy_spec_ is not None:
        rows[0] = ("intercept", intercept + float(model.params_xy_.bias(0)[0]))
        xy_w = model.params_xy_.weights(0)[:, 0]
        rows += [("x", float(xy_w[0])), ("y", float(xy_w[1]))]
    return rows


def _layer_to_jsonable(layer) -> dict:
    if isinstance(layer, Dense):
        return {"type": "dense", "units": layer.units, "activation": layer.activation}
    return {"type": "dropout", "rate": layer.rate}


def layer_from_jsonable(doc: dict):
    """Build a Dense/Dropout layer from its JSON form."""
    kind = doc.get("type")
    if kind == "dense":
        return Dense(units=int(doc["units"]), activation=doc.get("activation", "linear"))
    if kind == "dropout":
        return Dropout(rate=float(doc["rate"]))
    raise ValueError(f"unknown layer type {kind!r}")


def save_model(model: DisaggRegressor, path) -> None:
    """Write a fitted model as JSON (architecture, parameters, normalization)."""
    model._require_fitted()
    doc = {
        "spec": {
            "layers_cov": [_layer_to_jsonable(l) for l in model.layers_cov],
            "layers_xy": None if model.layers_xy is None
            else [_layer_to_jsonable(l) for l in model.layers_xy],
            "xy_as_covariates": model.xy_as_covariates,
            "link": model.link,
            "covariate_names": list(model.covariate_names_),
            "pmax": model.pmax_,
        },
        "params_cov": model.params_cov_.to_jsonable(),
        "params_xy": None if model.params_xy_ is None else model.params_xy_.to_jsonable(),
        "normalization": model.norm_.to_jsonable(),
        "training": {
            "optimizer": model.optimizer,
            "learning_rate": model.learning_rate,
            "epochs": model.epochs,
            "epochs_run": getattr(model, "epochs_run_", 0),
            "stop_reason": getattr(model, "history_", FitHistory()).stop_reason,
            "seed": model.seed,
        },
    }
    Path(path).write_text(json.dumps(doc, indent=2))


def load_model(path) -> DisaggRegressor:
    """Rebuild a fitted model saved by :func:`save_model`."""
    doc = json.loads(Path(path).read_text())
    spec = doc["spec"]
    layers_cov = tuple(layer_from_jsonable(l) for l in spec["layers_cov"])
    layers_xy = None
    if spec["layers_xy"] is not None:
        layers_xy = tuple(layer_from_jsonable(l) for l in spec["layers_xy"])
    model = DisaggRegressor(
        layers_cov=layers_cov,
        layers_xy=layers_xy,
        xy_as_covariates=spec["xy_as_covariates"],
        link=spec["link"],
        optimizer=doc["training"]["optimizer"],
        learning_rate=doc["training"]["learning_rate"],
        epochs=doc["training"]["epochs"],
        seed=doc["training"]["seed"],
    )
    n_channels = len(spec["covariate_names"])
    cov_spec, xy_spec = model._build_specs(n_channels)
    model.cov_spec_ = cov_spec
    model.xy_spec_ = xy_spec
    model.params_cov_ = Params.from_jsonable(cov_spec, doc["params_cov"])
    model.params_xy_ = None
    if xy_spec is not None:
        model.params_xy_ = Params.from_jsonable(xy_spec, doc["params_xy"])
    model.norm_ = NormalizationParams.from_jsonable(doc["normalization"])
    model.pmax_ = int(spec["pmax"])
    model.covariate_names_ = tuple(spec["covariate_names"])
    model.epochs_run_ = int(doc["training"]["epochs_run"])
    history = FitHistory()
    history.stop_reason = doc["training"]["stop_reason"]
    model.history_ = history
    return model
