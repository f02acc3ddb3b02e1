"""Batch command-line surface for the disaggregation pipeline.

One JSON config document drives every subcommand; any scalar field can be
overridden on the command line with ``--set dotted.path=value``. All
outputs land under the configured output directory together with a run
manifest recording the config hash, seed, library versions, and per-stage
wall-clock times (data preparation and model fitting are timed
separately).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from importlib import metadata
from pathlib import Path

import numpy as np

from . import data_prep, evaluation, grid_io, uncertainty
from .grid_io import GridFormatError, RegionFormatError
from .model import (
    DisaggRegressor,
    EarlyStopping,
    extract_weights,
    layer_from_jsonable,
    load_model,
    reaggregate,
    save_model,
)

__all__ = ["ConfigError", "main", "run_command"]

COMMANDS = ("prepare", "fit", "predict", "cv", "ncv", "mc-dropout", "synth", "bench")


class ConfigError(ValueError):
    """Invalid or missing configuration, reported with its field path."""


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on bad usage by default; flag errors are validation errors here
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _parse_scalar(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_override(config: dict, assignment: str) -> None:
    """Apply one ``dotted.path=value`` override in place."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form path=value")
    path, raw = assignment.split("=", 1)
    keys = path.split(".")
    node = config
    for key in keys[:-1]:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override path {path!r} crosses a non-object field")
    node[keys[-1]] = _parse_scalar(raw)


def load_config(path, overrides=()) -> dict:
    try:
        config = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    if not isinstance(config, dict):
        raise ConfigError("config root must be a JSON object")
    for assignment in overrides:
        apply_override(config, assignment)
    env_seed = os.environ.get("DISAGG_SEED")
    if env_seed is not None:
        try:
            config["seed"] = int(env_seed)
        except ValueError:
            raise ConfigError(f"DISAGG_SEED is not an integer: {env_seed!r}") from None
    return config


def config_hash(config: dict) -> str:
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


def _get(config: dict, path: str, default=None, required=False):
    node = config
    for key in path.split("."):
        if not isinstance(node, dict) or key not in node:
            if required:
                raise ConfigError(f"missing config field {path!r}")
            return default
        node = node[key]
    return node


def _seed(config: dict) -> int:
    seed = _get(config, "seed", 0)
    if not isinstance(seed, int):
        raise ConfigError("config field 'seed' must be an integer")
    return seed


def build_estimator(config: dict) -> DisaggRegressor:
    model_cfg = _get(config, "model", {})
    layers_cov = tuple(layer_from_jsonable(l) for l in model_cfg.get("layers_cov", []))
    layers_xy = model_cfg.get("layers_xy")
    if layers_xy is not None:
        layers_xy = tuple(layer_from_jsonable(l) for l in layers_xy)
    xy_as_covariates = bool(model_cfg.get("xy_as_covariates", False))
    if layers_xy is not None and xy_as_covariates:
        raise ConfigError(
            "model.layers_xy and model.xy_as_covariates are mutually exclusive; "
            "enable at most one"
        )
    train_cfg = _get(config, "train", {})
    es_cfg = train_cfg.get("early_stopping")
    early_stopping = None
    if es_cfg is not None:
        early_stopping = EarlyStopping(
            monitor=es_cfg.get("monitor", "loss"),
            min_delta=float(es_cfg.get("min_delta", 0.0)),
            patience=int(es_cfg.get("patience", 10)),
        )
    return DisaggRegressor(
        layers_cov=layers_cov,
        layers_xy=layers_xy,
        xy_as_covariates=xy_as_covariates,
        link=model_cfg.get("link", "log"),
        optimizer=train_cfg.get("optimizer", "adam"),
        learning_rate=float(train_cfg.get("learning_rate", 0.001)),
        epochs=int(train_cfg.get("epochs", 1000)),
        validation_split=float(train_cfg.get("validation_split", 0.0)),
        early_stopping=early_stopping,
        seed=_seed(config),
    )


class _Run:
    """Collects stage timings and artifact paths for the run manifest."""

    def __init__(self, command: str, config: dict, out_dir: Path):
        self.command = command
        self.config = config
        self.out_dir = out_dir
        self.stages: dict[str, float] = {}
        self.artifacts: list[str] = []
        out_dir.mkdir(parents=True, exist_ok=True)

    def stage(self, name: str):
        run = self

        class _Timer:
            def __enter__(self):
                self.start = time.perf_counter()

            def __exit__(self, *exc):
                run.stages[name] = run.stages.get(name, 0.0) + time.perf_counter() - self.start
                return False

        return _Timer()

    def artifact(self, name: str) -> Path:
        self.artifacts.append(name)
        return self.out_dir / name

    def write_manifest(self) -> None:
        manifest = {
            "command": self.command,
            "config_hash": config_hash(self.config),
            "seed": _seed(self.config),
            "versions": {
                "disagg": _package_version(),
                "numpy": np.__version__,
                "python": sys.version.split()[0],
            },
            "stages_seconds": self.stages,
            "artifacts": self.artifacts,
        }
        (self.out_dir / "run_manifest.json").write_text(json.dumps(manifest, indent=2))


def _package_version() -> str:
    try:
        return metadata.version("disagg")
    except metadata.PackageNotFoundError:
        return "unknown"


def _out_dir(config: dict) -> Path:
    return Path(_get(config, "paths.output", required=True))


def _load_inputs(config: dict):
    regions = grid_io.read_region_file(
        _get(config, "paths.regions", required=True),
        id_field=_get(config, "id_field", "id"),
        response_field=_get(config, "response_field", "response"),
    )
    cov_dir = Path(_get(config, "paths.covariates_dir", required=True))
    paths = sorted(cov_dir.glob("*.asc"))
    if not paths:
        raise ConfigError(f"no .asc covariate rasters found in {cov_dir}")
    stack = grid_io.RasterStack(
        names=tuple(p.stem for p in paths),
        layers=tuple(grid_io.read_ascii_grid(p) for p in paths),
    )
    population = grid_io.read_ascii_grid(_get(config, "paths.population", required=True))
    return stack, population, regions


def _mask_raster(mask: grid_io.RegionMask, template: grid_io.Raster) -> grid_io.Raster:
    return template.with_values(mask.indices.astype(np.float64),
                                nodata=float(grid_io.UNASSIGNED))


def _prepare_into(run: _Run, config: dict):
    """Prepare (or reload) the padded dataset; returns (dataset, stack, population, mask)."""
    stack, population, regions = _load_inputs(config)
    dataset_dir = run.out_dir / "dataset"
    mask_path = run.out_dir / "region_mask.asc"
    if dataset_dir.exists() and mask_path.exists():
        dataset = data_prep.load_dataset(dataset_dir)
        mask_values = grid_io.read_ascii_grid(mask_path)
        mask = grid_io.RegionMask(indices=mask_values.values.astype(np.int32),
                                  n_regions=len(regions))
    else:
        dataset, mask = data_prep.prepare_dataset(stack, population, regions)
        data_prep.save_dataset(dataset, dataset_dir)
        run.artifacts.append("dataset")
        grid_io.write_ascii_grid(_mask_raster(mask, stack.reference),
                                 run.artifact("region_mask.asc"))
    return dataset, stack, population, mask


def cmd_prepare(config: dict) -> _Run:
    run = _Run("prepare", config, _out_dir(config))
    with run.stage("prepare"):
        _prepare_into(run, config)
    return run


def cmd_fit(config: dict) -> _Run:
    run = _Run("fit", config, _out_dir(config))
    with run.stage("prepare"):
        dataset, stack, population, mask = _prepare_into(run, config)
        regions = _load_inputs(config)[2]
    estimator = build_estimator(config)
    with run.stage("fit"):
        estimator.fit(dataset)
    with run.stage("predict"):
        save_model(estimator, run.artifact("model.json"))
        estimator.history_.to_csv(run.artifact("history.csv"))
        rate, counts = estimator.predict(stack, population)
        grid_io.write_ascii_grid(rate, run.artifact("rate.asc"))
        grid_io.write_ascii_grid(counts, run.artifact("counts.asc"))
        _write_reaggregation(run, dataset, regions, rate, population, mask)
        if not tuple(estimator.layers_cov) and (
                estimator.layers_xy is None or not tuple(estimator.layers_xy)):
            rows = extract_weights(estimator)
            lines = ["variable,value"] + [f"{name},{value!r}" for name, value in rows]
            run.artifact("weights.csv").write_text("\n".join(lines) + "\n")
    return run


def _write_reaggregation(run: _Run, dataset, regions, rate, population, mask) -> None:
    """Per-region observed vs predicted counts and incidence rates."""
    result = reaggregate(rate, population, mask)
    mask_index = {rid: i for i, rid in enumerate(regions.ids)}
    lines = ["region_id,observed_count,predicted_count,observed_rate,predicted_rate"]
    for row, rid in enumerate(dataset.region_ids):
        i = mask_index[rid]
        observed = dataset.response[row]
        pop_total = result.region_population[i]
        observed_rate = observed / pop_total if pop_total > 0 else float("nan")
        lines.append(
            f"{rid},{observed!r},{result.region_counts[i]!r},"
            f"{observed_rate!r},{result.rates[i]!r}"
        )
    run.artifact("reaggregation.csv").write_text("\n".join(lines) + "\n")


def cmd_predict(config: dict) -> _Run:
    run = _Run("predict", config, _out_dir(config))
    model_path = _get(config, "paths.model", str(run.out_dir / "model.json"))
    estimator = load_model(model_path)
    stack, population, _ = _load_inputs(config)
    with run.stage("predict"):
        rate, counts = estimator.predict(stack, population)
        grid_io.write_ascii_grid(rate, run.artifact("rate.asc"))
        grid_io.write_ascii_grid(counts, run.artifact("counts.asc"))
    return run


def cmd_cv(config: dict, jobs: int) -> _Run:
    run = _Run("cv", config, _out_dir(config))
    with run.stage("prepare"):
        dataset, *_ = _prepare_into(run, config)
    estimator = build_estimator(config)
    with run.stage("cv"):
        report = evaluation.repeated_cross_validate(
            dataset, estimator,
            k=int(_get(config, "evaluation.k", 5)),
            repeats=int(_get(config, "evaluation.repeats", 20)),
            seed=_seed(config),
            jobs=jobs,
        )
    report.to_csv(run.artifact("cv_losses.csv"))
    report.summary_csv(run.artifact("cv_summary.csv"))
    return run


def _load_hypergrid(config: dict, run: _Run) -> evaluation.HyperGrid:
    spec = _get(config, "evaluation.hypergrid", required=True)
    if isinstance(spec, str):
        grid = evaluation.HyperGrid.load(spec)
    elif isinstance(spec, dict):
        counts = spec.get("depth_counts")
        if counts is not None:
            counts = {int(depth): count for depth, count in counts.items()}
        grid = evaluation.sample_hypergrid(
            seed=int(spec.get("seed", _seed(config))),
            depth_counts=counts,
            nodes=tuple(spec.get("nodes", (2, 20))),
            rates=tuple(spec.get("rates", (0.0, 0.1, 0.2))),
        )
    else:
        raise ConfigError("evaluation.hypergrid must be a path or a sampler object")
    grid.save(run.artifact("hypergrid.json"))
    return grid


def cmd_ncv(config: dict, jobs: int) -> _Run:
    run = _Run("ncv", config, _out_dir(config))
    with run.stage("prepare"):
        dataset, *_ = _prepare_into(run, config)
    estimator = build_estimator(config)
    grid = _load_hypergrid(config, run)
    with run.stage("ncv"):
        report = evaluation.nested_cross_validate(
            dataset, estimator, grid,
            k_outer=int(_get(config, "evaluation.k_outer", 5)),
            k_inner=int(_get(config, "evaluation.k_inner", 5)),
            seed=_seed(config),
            jobs=jobs,
        )
    report.to_csv(run.artifact("ncv_report.csv"))
    return run


def cmd_mc_dropout(config: dict) -> _Run:
    run = _Run("mc-dropout", config, _out_dir(config))
    model_path = _get(config, "paths.model", str(run.out_dir / "model.json"))
    estimator = load_model(model_path)
    stack, population, _ = _load_inputs(config)
    n_samples = int(_get(config, "uncertainty.samples", 100))
    seed = int(_get(config, "uncertainty.seed", _seed(config)))
    with run.stage("mc_dropout"):
        samples = uncertainty.mc_dropout_predict(estimator, stack, n_samples, seed)
        if bool(_get(config, "uncertainty.counts", False)):
            samples = uncertainty.scale_by_population(samples, population)
        summary = uncertainty.summarize_samples(samples)
    for name, raster in summary.rasters().items():
        grid_io.write_ascii_grid(raster, run.artifact(f"{name}.asc"))
    lines = ["pixel_row,pixel_col,sample_index,rate"]
    lines += [f"{r},{c},{s},{v!r}" for r, c, s, v in uncertainty.sample_rows(samples, seed=seed)]
    run.artifact("samples.csv").write_text("\n".join(lines) + "\n")
    lines = ["pixel_row,pixel_col,skewness,excess_kurtosis"]
    lines += [f"{r},{c},{s!r},{k!r}"
              for r, c, s, k in uncertainty.normality_report(samples, seed=seed)]
    run.artifact("normality.csv").write_text("\n".join(lines) + "\n")
    return run


def cmd_synth(config: dict) -> _Run:
    from .synth import SynthSpec, generate_dataset

    run = _Run("synth", config, _out_dir(config))
    synth_cfg = _get(config, "synth", required=True)
    spec = SynthSpec(
        nrows=int(_get(config, "synth.nrows", required=True)),
        ncols=int(_get(config, "synth.ncols", required=True)),
        n_regions=int(_get(config, "synth.n_regions", required=True)),
        beta=tuple(_get(config, "synth.beta", required=True)),
        spatial_amplitude=float(synth_cfg.get("spatial_amplitude", 0.0)),
        population_range=tuple(synth_cfg.get("population_range", (500.0, 1500.0))),
        smoothness=int(synth_cfg.get("smoothness", 5)),
        seed=_seed(config),
    )
    with run.stage("synth"):
        data = generate_dataset(spec)
    cov_dir = Path(_get(config, "paths.covariates_dir", required=True))
    cov_dir.mkdir(parents=True, exist_ok=True)
    for name in data.stack.names:
        grid_io.write_ascii_grid(data.stack.layer(name), cov_dir / f"{name}.asc")
    pop_path = Path(_get(config, "paths.population", required=True))
    pop_path.parent.mkdir(parents=True, exist_ok=True)
    grid_io.write_ascii_grid(data.population, pop_path)
    regions_path = Path(_get(config, "paths.regions", required=True))
    regions_path.parent.mkdir(parents=True, exist_ok=True)
    grid_io.write_region_file(
        data.regions, regions_path,
        id_field=_get(config, "id_field", "id"),
        response_field=_get(config, "response_field", "response"),
    )
    grid_io.write_ascii_grid(data.true_rate, run.artifact("true_rate.asc"))
    grid_io.write_ascii_grid(_mask_raster(data.mask, data.population),
                             run.artifact("region_mask.asc"))
    lines = ["region_id,expected_count,observed_count"]
    for region, expected, observed in zip(data.regions, data.expected_counts,
                                          data.observed_counts):
        lines.append(f"{region.id},{expected!r},{observed!r}")
    run.artifact("truth.csv").write_text("\n".join(lines) + "\n")
    return run


def cmd_bench(config: dict) -> _Run:
    run = _Run("bench", config, _out_dir(config))
    stack, population, regions = _load_inputs(config)
    estimator = build_estimator(config)

    def prepare_task():
        data_prep.prepare_dataset(stack, population, regions)

    dataset, _ = data_prep.prepare_dataset(stack, population, regions)

    def fit_task():
        from sklearn.base import clone
        clone(estimator).fit(dataset)

    repeats = int(_get(config, "bench.repeats", 50))
    with run.stage("bench"):
        report = evaluation.timing_benchmark(
            {"prepare": prepare_task, "fit": fit_task}, repeats=repeats)
    report.to_csv(run.artifact("timing.csv"))
    report.summary_csv(run.artifact("timing_summary.csv"))
    return run


def run_command(argv) -> int:
    parser = _Parser(prog="disagg", description=__doc__)
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True, help="path to the JSON run config")
    parser.add_argument("--set", action="append", default=[], metavar="PATH=VALUE",
                        dest="overrides", help="override a scalar config field")
    parser.add_argument("--jobs", type=int, default=None,
                        help="parallel workers for cv/ncv cells (default 1)")
    args = parser.parse_args(argv)

    config = load_config(args.config, args.overrides)
    jobs = args.jobs if args.jobs is not None else int(_get(config, "jobs", 1))

    if args.command == "prepare":
        run = cmd_prepare(config)
    elif args.command == "fit":
        run = cmd_fit(config)
    elif args.command == "predict":
        run = cmd_predict(config)
    elif args.command == "cv":
        run = cmd_cv(config, jobs)
    elif args.command == "ncv":
        run = cmd_ncv(config, jobs)
    elif args.command == "mc-dropout":
        run = cmd_mc_dropout(config)
    elif args.command == "synth":
        run = cmd_synth(config)
    else:
        run = cmd_bench(config)
    run.write_manifest()
    return 0


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        return run_command(argv)
    except (ConfigError, GridFormatError, RegionFormatError, FileNotFoundError,
            ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failures (training aborts, convergence, ...)
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
