"""viewsift: distractor-view scoring and rejection for feed-forward
multi-view reconstruction, with the matching evaluation protocol.

The toolkit is backbone-agnostic: it consumes internal representations
(feature maps, query/key projections, attention rows) exported to a small
binary container, scores context views against an anchor, thresholds the
scores into a kept-view set, and measures the effect with standard pose and
depth metrics under a seeded noise-injection protocol.
"""

from .errors import DegenerateInputError, FormatError, ManifestError, ViewsiftError
from .evalmetrics import (
    DepthPair,
    Sim3,
    Trajectory,
    align_depth,
    aligned_depth_errors,
    ate,
    depth_metrics,
    evaluate_predictions,
    rpe,
    umeyama_sim3,
)
from .probe import LayerGapCurve, aggregate_curves, best_layer, layer_gap_curve
from .protocol import (
    NoiseLevel,
    RunConfig,
    SeededSampler,
    Trial,
    TrialReport,
    aggregate_reports,
    noise_level,
    run_trials,
    sample_trial,
    success_rate,
)
from .scoring import (
    AttentionScores,
    ScoreMatrix,
    attention_matrix_from_qk,
    attention_view_scores,
    feature_correlation_map,
    feature_view_score,
    score_matrix,
)
from .selection import (
    FusionConfig,
    Selection,
    fuse_scores,
    multi_anchor_select,
    normalize_for_fusion,
    select_views,
    selection_report,
)
from .synth import SynthSpec, gen_depth_pair, gen_feature_set, gen_qk_set, gen_trajectory
from .tensorstore import (
    TensorBlob,
    TokenGrid,
    ViewManifest,
    ViewRecord,
    load_manifest,
    make_blob,
    read_tensor,
    save_set,
    validate_set,
    write_tensor,
)

__version__ = "0.1.0"
