"""Few-shot action recognition over patch features.

The model aligns each query frame's patches against every support patch of
a candidate class through cross-attention, builds per-patch prototypes, and
classifies by frame-averaged patch distance. A temporal mixing stage halves
the frame count while letting frames exchange information; a depthwise
convolution provides content-conditioned positional encoding. Everything
runs on a small reverse-mode tape over numpy buffers.
"""

from .autodiff import (
    NumericalError,
    Parameter,
    ShapeError,
    Tape,
    Tensor,
    tensor,
)
from .episodes import (
    ClassRecord,
    Episode,
    FeatureDataset,
    derive_seed,
    episode_stream,
    sample_episode,
    splitmix64,
)
from .errors import ConfigError, DataError, PackFormatError, SactError
from .features import (
    PACK_MAGIC,
    PACK_VERSION,
    SynthSpec,
    generate_synthetic,
    max_order_classes,
    read_feature_pack,
    write_feature_pack,
)
from .model import (
    ForwardResult,
    ModelConfig,
    SactParams,
    apply_cpe,
    apply_tmixer,
    class_distance,
    pn_fsar_forward,
    query_prototype,
    sact_forward,
    sca_attention,
)
from .training import (
    CostReport,
    EvalReport,
    GradCheckReport,
    TrainConfig,
    TrainResult,
    count_multiadds,
    episode_loss,
    evaluate,
    grad_check,
    reconcile_reference_costs,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "ClassRecord",
    "ConfigError",
    "CostReport",
    "DataError",
    "Episode",
    "EvalReport",
    "FeatureDataset",
    "ForwardResult",
    "GradCheckReport",
    "ModelConfig",
    "NumericalError",
    "PACK_MAGIC",
    "PACK_VERSION",
    "PackFormatError",
    "Parameter",
    "SactError",
    "SactParams",
    "ShapeError",
    "SynthSpec",
    "Tape",
    "Tensor",
    "TrainConfig",
    "TrainResult",
    "apply_cpe",
    "apply_tmixer",
    "class_distance",
    "count_multiadds",
    "derive_seed",
    "episode_loss",
    "episode_stream",
    "evaluate",
    "generate_synthetic",
    "max_order_classes",
    "grad_check",
    "pn_fsar_forward",
    "query_prototype",
    "read_feature_pack",
    "reconcile_reference_costs",
    "sact_forward",
    "sample_episode",
    "sca_attention",
    "splitmix64",
    "tensor",
    "train",
    "write_feature_pack",
    "__version__",
]
