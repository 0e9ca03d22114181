"""ckmerge: checkpoint merging with activation-guided layer coefficients."""

from ._version import __version__
from .activation import (
    ActivationTrace,
    CalibrationSet,
    ToyModelSpec,
    read_calibration,
    read_trace,
    toy_forward,
    write_calibration,
    write_trace,
)
from .calib import (
    EmbeddingSet,
    KMeansResult,
    SamplePlan,
    even_sample,
    kmeans,
    read_embeddings,
    sample_calibration,
    write_embeddings,
)
from .errors import (
    CkmergeError,
    CompatibilityError,
    ConfigurationError,
    FormatError,
    InsufficientDataError,
    IntegrityError,
    ProvenanceError,
)
from .methods import (
    MergeRecipe,
    SignElection,
    dare_transform,
    disjoint_merge,
    elect_signs,
    run_merge,
    trim,
)
from .mi import (
    LayerCoefficients,
    MIEstimate,
    compute_coefficients,
    estimate_mi,
    layer_mi,
    mi_from_joint,
    read_coefficients,
    write_coefficients,
)
from .taskvector import (
    SalienceReport,
    TaskVector,
    apply_task_vectors,
    compute_task_vector,
    load_task_vector,
    salience_report,
    save_task_vector,
)
from .tensorstore import (
    Checkpoint,
    assert_compatible,
    load_checkpoint,
    save_checkpoint,
)

__all__ = [
    "__version__",
    "ActivationTrace", "CalibrationSet", "ToyModelSpec",
    "read_calibration", "read_trace", "toy_forward", "write_calibration", "write_trace",
    "EmbeddingSet", "KMeansResult", "SamplePlan",
    "even_sample", "kmeans", "read_embeddings", "sample_calibration", "write_embeddings",
    "CkmergeError", "CompatibilityError", "ConfigurationError", "FormatError",
    "InsufficientDataError", "IntegrityError", "ProvenanceError",
    "MergeRecipe", "SignElection",
    "dare_transform", "disjoint_merge", "elect_signs", "run_merge", "trim",
    "LayerCoefficients", "MIEstimate",
    "compute_coefficients", "estimate_mi", "layer_mi", "mi_from_joint",
    "read_coefficients", "write_coefficients",
    "SalienceReport", "TaskVector",
    "apply_task_vectors", "compute_task_vector", "load_task_vector",
    "salience_report", "save_task_vector",
    "Checkpoint", "assert_compatible", "load_checkpoint", "save_checkpoint",
]
