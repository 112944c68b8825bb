"""Point cloud completion from partial scans and posed depth views.

A partial scan is encoded into patch tokens, a stack of (possibly
inconsistent) depth views is encoded per view, and a cross-attention
fuser predicts a coarse completion. A confidence scorer filters
unreliable coarse points before a consolidation head upsamples the
merged cloud to the dense output.
"""

from .tensor import Tensor, ParamStore, CheckpointError, ShapeError, GraphError
from .geometry import (
    farthest_point_sample, patchify, knn, nearest_neighbors, HashGrid,
    chamfer_l1, chamfer_l2, hyper_cd, density_aware_cd, f_score, all_metrics,
    EmptyCloudError,
)
from .views import (
    CameraPose, DepthView, ViewRig, canonical_rig, render_depth, back_project,
    sinusoidal_encoding, write_pgm16, read_pgm16, RenderError, SidecarError,
)
from .oracle import (
    Sample, InconsistencyProfile, PROFILES, FAMILIES, generate_sample,
    synth_dataset, load_split, load_sample, export_sample,
    write_xyzb, read_xyzb, DatasetError,
)
from .network import (
    ModelConfig, CompletionModel, ForwardResult, ConfigError,
    full_config, small_config, tiny_config,
)
from .training import (
    TrainConfig, Adam, train, evaluate, MetricReport, metrics_row,
    total_loss, confidence_loss, NumericAbort,
    baseline_merge, baseline_passthrough,
)
from .estimator import CloudCompleter

__version__ = "0.1.0"
