"""Alignment-ranked view selection for 3D captioning.

Candidate rendered views of an object are ranked by how well their
captions help a frozen conditional denoiser reconstruct the object's
latent from noised inputs; the top views drive a holistic captioner.
The package also carries the statement-selection variant for image
pairs, caption-audit tooling, retrieval metrics, and an all-mock
end-to-end pipeline.
"""

from .schedule import (
    DEFAULT_SCHEDULE,
    NoiseSchedule,
    ScheduleError,
    cosine_alpha_bar_schedule,
    linear_alpha_bar_schedule,
    validate_schedule,
)
from .scoring import (
    AlignmentScore,
    ConditionalDenoiser,
    LossMode,
    NoiseDraw,
    NoiseSharing,
    ObjectLatent,
    ScoringConfig,
    ScoringError,
    ScoringOutcome,
    Source,
    accumulate_scores,
    forward_noise,
    generate_draws,
    single_loss,
)
from .ranking import (
    CaptionCandidate,
    RankingError,
    RankingResult,
    RenderedView,
    bottom_views,
    rank_views,
    ranking_record,
)
from .render import CameraMeta, RenderJob, ViewStrategy, build_job, detect_all_grey, mock_render

__version__ = "0.1.0"

__all__ = [
    "AlignmentScore",
    "CameraMeta",
    "CaptionCandidate",
    "ConditionalDenoiser",
    "DEFAULT_SCHEDULE",
    "LossMode",
    "NoiseDraw",
    "NoiseSchedule",
    "NoiseSharing",
    "ObjectLatent",
    "RankingError",
    "RankingResult",
    "RenderJob",
    "RenderedView",
    "ScheduleError",
    "ScoringConfig",
    "ScoringError",
    "ScoringOutcome",
    "Source",
    "ViewStrategy",
    "accumulate_scores",
    "bottom_views",
    "build_job",
    "cosine_alpha_bar_schedule",
    "detect_all_grey",
    "forward_noise",
    "generate_draws",
    "linear_alpha_bar_schedule",
    "mock_render",
    "rank_views",
    "ranking_record",
    "single_loss",
    "validate_schedule",
    "__version__",
]
