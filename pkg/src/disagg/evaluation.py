"""Stratified repeated k-fold CV, nested CV hyperparameter search, metrics, timing.

Folds are stratified on the response by sorting regions and permuting each
consecutive block of size k across the folds, so every fold's response
distribution tracks the whole dataset. Normalization is refit inside every
training fold to keep held-out regions out of the statistics. Cells are
independent jobs with derived seeds, so reports are invariant to
scheduling and reproducible bit-for-bit from one seed.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import clone

from .data_prep import PaddedDataset, subset_dataset
from .model import DisaggRegressor, layer_from_jsonable, _layer_to_jsonable
from .network import NetworkSpec, Dense, Dropout, RngStream, poisson_loss

__all__ = [
    "CVReport",
    "FoldAssignment",
    "HyperGrid",
    "Metrics",
    "NCVReport",
    "NCVRow",
    "TimingReport",
    "compute_metrics",
    "nested_cross_validate",
    "repeated_cross_validate",
    "sample_hypergrid",
    "stratified_folds",
    "timing_benchmark",
]


@dataclass(frozen=True)
class FoldAssignment:
    """A fold label in 1..k for every region."""

    labels: np.ndarray
    k: int
    seed: int

    def __post_init__(self):
        object.__setattr__(self, "labels", np.asarray(self.labels, dtype=np.int64))

    def test_regions(self, fold: int) -> np.ndarray:
        return np.nonzero(self.labels == fold)[0]

    def train_regions(self, fold: int) -> np.ndarray:
        return np.nonzero(self.labels != fold)[0]


def stratified_folds(responses, k: int, seed: int) -> FoldAssignment:
    """Assign regions to k folds, balancing the response distribution.

    Regions are sorted by response; each consecutive block of k gets a
    seeded random permutation of the distinct fold labels (a short final
    block uses the first labels of one more permutation). Deterministic
    given the seed.
    """
    responses = np.asarray(responses, dtype=np.float64)
    n = responses.size
    if k < 2:
        raise ValueError("k must be at least 2")
    if k > n:
        raise ValueError(f"k={k} exceeds the number of regions ({n})")
    rng = RngStream(seed)
    order = np.argsort(responses, kind="stable")
    labels = np.empty(n, dtype=np.int64)
    for start in range(0, n, k):
        block = order[start: start + k]
        labels[block] = rng.permutation(k)[: block.size] + 1
    return FoldAssignment(labels=labels, k=k, seed=seed)


@dataclass(frozen=True)
class CVReport:
    """Out-of-sample losses for every (repeat, fold) cell plus summary stats."""

    rows: tuple[tuple[int, int, float], ...]   # (repeat, fold, loss)
    folds: tuple[FoldAssignment, ...]          # the split used in each repeat
    k: int
    repeats: int
    seed: int

    @property
    def losses(self) -> np.ndarray:
        return np.array([loss for _, _, loss in self.rows])

    @property
    def n(self) -> int:
        return len(self.rows)

    @property
    def mean(self) -> float:
        return float(self.losses.mean())

    @property
    def sd(self) -> float:
        return float(self.losses.std(ddof=1))

    @property
    def ci95(self) -> tuple[float, float]:
        half = 1.96 * self.sd / np.sqrt(self.n)
        return (self.mean - half, self.mean + half)

    def to_csv(self, path) -> None:
        lines = ["repeat,fold,loss"]
        lines += [f"{r},{f},{loss!r}" for r, f, loss in self.rows]
        Path(path).write_text("\n".join(lines) + "\n")

    def summary_csv(self, path) -> None:
        lo, hi = self.ci95
        Path(path).write_text(
            "n,mean,sd,ci_low,ci_high\n"
            f"{self.n},{self.mean!r},{self.sd!r},{lo!r},{hi!r}\n"
        )


def _loss_of_cell(dataset: PaddedDataset, estimator: DisaggRegressor,
                  train_idx: np.ndarray, test_idx: np.ndarray) -> float:
    """Train on one region subset (normalization refit there) and score another."""
    train = subset_dataset(dataset, train_idx)
    test = subset_dataset(dataset, test_idx, norm=train.norm)
    fitted = clone(estimator).fit(train)
    _, _, agg = fitted.aggregate_forward(test)
    return poisson_loss(test.response, agg)


def _run_cell(args):
    tag, dataset, estimator, train_idx, test_idx = args
    try:
        return _loss_of_cell(dataset, estimator, train_idx, test_idx)
    except Exception as exc:
        raise RuntimeError(f"{tag} failed: {exc}") from exc


def _map_cells(cells, jobs: int):
    if jobs <= 1:
        return [_run_cell(cell) for cell in cells]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_cell, cells))


def repeated_cross_validate(dataset: PaddedDataset, estimator: DisaggRegressor,
                            k: int, repeats: int, seed: int, jobs: int = 1) -> CVReport:
    """Repeated stratified k-fold cross-validation of one model configuration.

    Repeat ``r`` uses fold seed ``seed + r``, so different model
    configurations evaluated with the same seed see identical splits.
    Returns one out-of-sample Poisson loss per (repeat, fold) cell.
    """
    if repeats < 1:
        raise ValueError("repeats must be positive")
    folds = tuple(stratified_folds(dataset.response, k, seed + r) for r in range(repeats))
    cells = []
    keys = []
    for r, assignment in enumerate(folds):
        for fold in range(1, k + 1):
            tag = f"cross-validation cell (repeat={r}, fold={fold})"
            cells.append((tag, dataset, estimator,
                          assignment.train_regions(fold), assignment.test_regions(fold)))
            keys.append((r, fold))
    losses = _map_cells(cells, jobs)
    rows = tuple((r, f, loss) for (r, f), loss in zip(keys, losses))
    return CVReport(rows=rows, folds=folds, k=k, repeats=repeats, seed=seed)


@dataclass(frozen=True)
class HyperGrid:
    """An indexed, persistable sequence of candidate covariate-branch stacks.

    Indices are stable for the lifetime of the grid and are what reports
    reference, so a selected candidate can always be reconstructed.
    """

    candidates: tuple[tuple, ...]

    def __post_init__(self):
        object.__setattr__(
            self, "candidates", tuple(tuple(c) for c in self.candidates))

    def __len__(self) -> int:
        return len(self.candidates)

    def n_params(self, index: int, input_width: int) -> int:
        spec = NetworkSpec(input_width, self.candidates[index] + (Dense(1, "linear"),))
        return spec.n_params

    def save(self, path) -> None:
        doc = {
            "candidates": [
                {"index": i, "layers": [_layer_to_jsonable(l) for l in cand]}
                for i, cand in enumerate(self.candidates)
            ]
        }
        Path(path).write_text(json.dumps(doc, indent=2))

    @classmethod
    def load(cls, path) -> "HyperGrid":
        doc = json.loads(Path(path).read_text())
        entries = sorted(doc["candidates"], key=lambda e: e["index"])
        return cls(candidates=tuple(
            tuple(layer_from_jsonable(l) for l in entry["layers"]) for entry in entries
        ))


def sample_hypergrid(seed: int, depth_counts: dict[int, int | None] | None = None,
                     nodes: tuple[int, int] = (2, 20),
                     rates: tuple[float, ...] = (0.0, 0.1, 0.2)) -> HyperGrid:
    """Seeded random search over stacks of dense+dropout blocks.

    Each candidate of depth d is d blocks of ``Dense(n_i, relu)`` followed
    by ``Dropout(rate)`` with the same rate in every block and each
    ``n_i`` drawn from ``nodes``. ``depth_counts`` maps depth to how many
    distinct candidates to draw (None means exhaustive at that depth); the
    default keeps depth 1 exhaustive and samples 50 each at depths 2-4.
    """
    if depth_counts is None:
        depth_counts = {1: None, 2: 50, 3: 50, 4: 50}
    lo, hi = nodes
    node_values = list(range(lo, hi + 1))
    n_nodes = len(node_values)
    rng = RngStream(seed)

    candidates = []
    for depth in sorted(depth_counts):
        count = depth_counts[depth]
        total = (n_nodes ** depth) * len(rates)
        if count is None or count >= total:
            chosen = np.arange(total)
        else:
            chosen = np.sort(rng.choice(total, size=count, replace=False))
        for code in chosen:
            code = int(code)
            rate = rates[code % len(rates)]
            code //= len(rates)
            layers = []
            for _ in range(depth):
                layers.append(Dense(node_values[code % n_nodes], "relu"))
                layers.append(Dropout(rate))
                code //= n_nodes
            candidates.append(tuple(layers))
    return HyperGrid(candidates=tuple(candidates))


@dataclass(frozen=True)
class NCVRow:
    """One outer fold's outcome in a nested cross-validation."""

    outer_fold: int
    best_index: int
    inner_loss: float        # mean inner validation loss of the winning candidate
    outer_loss: float
    test_region_ids: tuple[str, ...]
    inner_region_ids: tuple[str, ...]


@dataclass(frozen=True)
class NCVReport:
    rows: tuple[NCVRow, ...]

    @property
    def mean_inner_loss(self) -> float:
        return float(np.mean([row.inner_loss for row in self.rows]))

    @property
    def mean_outer_loss(self) -> float:
        return float(np.mean([row.outer_loss for row in self.rows]))

    def to_csv(self, path) -> None:
        lines = ["outer_fold,best_hyper_index,inner_loss,outer_loss"]
        for row in self.rows:
            lines.append(
                f"{row.outer_fold},{row.best_index},{row.inner_loss!r},{row.outer_loss!r}"
            )
        lines.append(f"mean,,{self.mean_inner_loss!r},{self.mean_outer_loss!r}")
        Path(path).write_text("\n".join(lines) + "\n")


def nested_cross_validate(dataset: PaddedDataset, estimator: DisaggRegressor,
                          grid: HyperGrid, k_outer: int, k_inner: int,
                          seed: int, jobs: int = 1) -> NCVReport:
    """Nested cross-validation over a hyperparameter grid.

    Per outer fold: every candidate's covariate stack is scored by k-inner
    cross-validation over the outer-train regions only (inner fold seed =
    ``seed + outer_fold``); the candidate with the lowest mean inner loss
    wins (ties prefer fewer parameters, then the lower index), is refit on
    the full outer-train set, and is scored once on the outer test fold.
    """
    if len(grid) == 0:
        raise ValueError("hyperparameter grid is empty")
    outer = stratified_folds(dataset.response, k_outer, seed)
    input_width = dataset.n_channels + (2 if estimator.xy_as_covariates else 0)
    rows = []
    for fold in range(1, k_outer + 1):
        test_idx = outer.test_regions(fold)
        train_idx = outer.train_regions(fold)
        inner = stratified_folds(dataset.response[train_idx], k_inner, seed + fold)

        cells = []
        for c, layers in enumerate(grid.candidates):
            candidate = clone(estimator).set_params(layers_cov=layers)
            for in_fold in range(1, k_inner + 1):
                tag = (f"nested-cv cell (outer={fold}, candidate={c}, "
                       f"inner={in_fold})")
                cells.append((tag, dataset, candidate,
                              train_idx[inner.train_regions(in_fold)],
                              train_idx[inner.test_regions(in_fold)]))
        losses = np.array(_map_cells(cells, jobs)).reshape(len(grid), k_inner)
        mean_inner = losses.mean(axis=1)
        best = min(
            range(len(grid)),
            key=lambda c: (mean_inner[c], grid.n_params(c, input_width), c),
        )

        winner = clone(estimator).set_params(layers_cov=grid.candidates[best])
        outer_loss = _run_cell((
            f"nested-cv refit (outer={fold}, candidate={best})",
            dataset, winner, train_idx, test_idx,
        ))
        rows.append(NCVRow(
            outer_fold=fold,
            best_index=best,
            inner_loss=float(mean_inner[best]),
            outer_loss=outer_loss,
            test_region_ids=tuple(dataset.region_ids[i] for i in test_idx),
            inner_region_ids=tuple(dataset.region_ids[i] for i in train_idx),
        ))
    return NCVReport(rows=tuple(rows))


@dataclass(frozen=True)
class Metrics:
    """Standard agreement metrics between observed and predicted vectors."""

    poisson_loss: float
    mae: float
    rmse: float
    pearson_r: float | None   # None when either vector is constant


def compute_metrics(y, yhat) -> Metrics:
    y = np.asarray(y, dtype=np.float64)
    yhat = np.asarray(yhat, dtype=np.float64)
    if y.shape != yhat.shape:
        raise ValueError("length mismatch between observed and predicted vectors")
    if y.size < 2:
        raise ValueError("metrics need at least two observations")
    diff = yhat - y
    dy = y - y.mean()
    dyhat = yhat - yhat.mean()
    denom = np.sqrt((dy ** 2).sum() * (dyhat ** 2).sum())
    pearson = float((dy * dyhat).sum() / denom) if denom > 0 else None
    return Metrics(
        poisson_loss=poisson_loss(y, yhat),
        mae=float(np.abs(diff).mean()),
        rmse=float(np.sqrt((diff ** 2).mean())),
        pearson_r=pearson,
    )


@dataclass(frozen=True)
class TimingSummary:
    task: str
    n: int
    mean: float
    sd: float
    ci_low: float
    ci_high: float


@dataclass(frozen=True)
class TimingReport:
    """Wall-clock samples per task plus per-task summary statistics."""

    rows: tuple[tuple[str, int, float], ...]   # (task, run, seconds)
    summaries: tuple[TimingSummary, ...]

    def to_csv(self, path) -> None:
        lines = ["task,run,seconds"]
        lines += [f"{task},{run},{sec!r}" for task, run, sec in self.rows]
        Path(path).write_text("\n".join(lines) + "\n")

    def summary_csv(self, path) -> None:
        lines = ["task,n,mean,sd,ci_low,ci_high"]
        for s in self.summaries:
            lines.append(f"{s.task},{s.n},{s.mean!r},{s.sd!r},{s.ci_low!r},{s.ci_high!r}")
        Path(path).write_text("\n".join(lines) + "\n")


def timing_benchmark(tasks, repeats: int) -> TimingReport:
    """Time each named task ``repeats`` times with a wall clock.

    ``tasks`` maps task name to a zero-argument callable. Summary rows
    carry n, mean, sample sd, and a normal 95% interval for the mean.
    """
    if repeats < 2:
        raise ValueError("repeats must be at least 2")
    rows = []
    summaries = []
    for name, task in dict(tasks).items():
        seconds = []
        for run in range(repeats):
            start = time.perf_counter()
            task()
            seconds.append(time.perf_counter() - start)
            rows.append((name, run, seconds[-1]))
        arr = np.array(seconds)
        mean = float(arr.mean())
        sd = float(arr.std(ddof=1))
        half = 1.96 * sd / np.sqrt(repeats)
        summaries.append(TimingSummary(task=name, n=repeats, mean=mean, sd=sd,
                                       ci_low=mean - half, ci_high=mean + half))
    return TimingReport(rows=tuple(rows), summaries=tuple(summaries))
