"""netuq: calibrated prediction-interval maps for network-quality measurements.

The pipeline: ingest point-sampled tile measurements (`geodata`), fit a
self-tuning-bandwidth kernel regressor (`kernel`), wrap it with conformal
interval methods (`conformal`), and evaluate coverage/width or rasterize an
uncertainty map (`evalharness`, `cli`).
"""

from .geodata import (
    ColumnMapping,
    Dataset,
    EmptyDatasetError,
    GeoPoint,
    Measurement,
    ParseError,
    PlanarPoint,
    SchemaError,
    knn,
    load_tiles,
    project,
    quadkey_centroid,
    remove_outliers,
    train_test_split,
    unproject,
    write_tiles_csv,
)
from .kernel import (
    KernelModel,
    StbkrParams,
    cross_validate,
    gaussian_kernel,
    kr_predict,
    stbkr_bandwidth,
    stbkr_predict,
    stbkr_predict_batch,
)
from .conformal import (
    CalibrationError,
    EscpConfig,
    EscpPredictor,
    PredictionInterval,
    ResidualSet,
    default_neighborhood_size,
    enbpi_interval,
    escp_interval,
    escp_intervals,
    fit_split_cp,
    qrf_calibrate,
    split_cp,
)
from .qrf import QrfModel, qrf_fit, qrf_quantile
from .evalharness import (
    EvalReport,
    SyntheticSpec,
    compare_methods,
    coverage,
    generate,
    mean_width,
)

__version__ = "0.1.0"
