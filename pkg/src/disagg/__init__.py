"""Disaggregation regression with feed-forward networks.

Learns per-pixel rates from region-aggregated counts, covariate rasters,
and a population raster, with cross-validation, nested hyperparameter
search, and Monte Carlo dropout uncertainty.
"""

from .data_prep import (
    NormalizationParams,
    PaddedDataset,
    PixelTable,
    build_pixel_tables,
    chunk_full_grid,
    fit_apply_normalization,
    load_dataset,
    pad_dataset,
    prepare_dataset,
    save_dataset,
    subset_dataset,
)
from .evaluation import (
    CVReport,
    FoldAssignment,
    HyperGrid,
    Metrics,
    NCVReport,
    compute_metrics,
    nested_cross_validate,
    repeated_cross_validate,
    sample_hypergrid,
    stratified_folds,
    timing_benchmark,
)
from .grid_io import (
    AlignmentReport,
    Raster,
    RasterStack,
    Region,
    RegionMask,
    RegionSet,
    check_alignment,
    parse_ascii_grid,
    parse_region_file,
    rasterize_regions,
    read_ascii_grid,
    read_region_file,
    write_ascii_grid,
    write_region_file,
)
from .model import (
    DisaggRegressor,
    EarlyStopping,
    FitHistory,
    TrainingError,
    extract_weights,
    load_model,
    reaggregate,
    save_model,
)
from .network import (
    Adam,
    Dense,
    Dropout,
    NetworkSpec,
    Params,
    RngStream,
    SGD,
    backward_gradients,
    forward_network,
    init_params,
    poisson_loss,
)
from .synth import (
    ConvergenceError,
    SynthDataset,
    SynthSpec,
    finite_diff_gradient,
    generate_dataset,
    oracle_newton_fit,
)
from .uncertainty import (
    SampleStack,
    UncertaintySummary,
    mc_dropout_predict,
    summarize_samples,
)

__version__ = "0.1.0"
