"""Training-free anomaly segmentation with patch-feature memory banks."""

__version__ = "0.1.0"

from .errors import (  # noqa: F401
    ConfigError,
    CorruptionError,
    DataError,
    DegenerateDataError,
    FormatError,
    SuperADError,
    UndefinedMetricError,
    ValidationError,
)
from .features import (  # noqa: F401
    CategoryConfig,
    ImageFeatures,
    PatchFeatureGrid,
    preprocess_dims,
    read_feature_file,
    write_feature_file,
)
