"""Teacher attention reconstruction from mobile eye-tracker sessions."""

__version__ = "0.1.0"

from .model import (AttentionConfig, AttentionReport, BBox, ConfigError, Detection,
                    Dendrogram, FixationConfig, FixationEvent, FlowSummary, GazeSample,
                    GenderAttention, IdentityAttention, IdentityCluster, LinkingConfig,
                    Merge, MotionConfig, ParseError, PipelineError, SessionConfig,
                    TimelineRow, Tracklet, ValidationError)

__all__ = [
    "AttentionConfig", "AttentionReport", "BBox", "ConfigError", "Detection",
    "Dendrogram", "FixationConfig", "FixationEvent", "FlowSummary", "GazeSample",
    "GenderAttention", "IdentityAttention", "IdentityCluster", "LinkingConfig",
    "Merge", "MotionConfig", "ParseError", "PipelineError", "SessionConfig",
    "TimelineRow", "Tracklet", "ValidationError", "__version__",
]
