"""Talk2Care: LLM-driven health check-in conversations for older adults,
with a review pipeline that turns finished transcripts into clinical
summaries, quoted highlights, and a risk level for the care team.
"""

from .domain import (
    ClinicalSummary,
    ConversationProtocol,
    HighlightResult,
    HighlightSpan,
    Initiator,
    KeySlot,
    PatientProfile,
    PendingLoopback,
    ProviderAction,
    RiskAssessment,
    RiskLevel,
    Session,
    SessionStatus,
    Speaker,
    Turn,
    TurnKind,
    ValueKind,
    render_transcript,
    risk_color,
    validate_session,
)
from .engine import ConversationEngine, EngineConfig
from .errors import (
    ConfigurationError,
    ConflictError,
    InvariantViolation,
    LifecycleError,
    NotFoundError,
    PreconditionError,
    Talk2CareError,
    ValidationError,
)
from .gateway import (
    CompletionRequest,
    GatewayError,
    HttpBackend,
    ScriptedBackend,
    ScriptedMiss,
)
from .pipeline import Notifier, ProviderPipeline
from .prompts import PromptBundle, PromptEngine
from .store import EncryptedStore

__version__ = "0.1.0"

__all__ = [
    "ClinicalSummary",
    "CompletionRequest",
    "ConfigurationError",
    "ConflictError",
    "ConversationEngine",
    "ConversationProtocol",
    "EncryptedStore",
    "EngineConfig",
    "GatewayError",
    "HighlightResult",
    "HighlightSpan",
    "HttpBackend",
    "Initiator",
    "InvariantViolation",
    "KeySlot",
    "LifecycleError",
    "NotFoundError",
    "Notifier",
    "PatientProfile",
    "PendingLoopback",
    "PreconditionError",
    "PromptBundle",
    "PromptEngine",
    "ProviderAction",
    "ProviderPipeline",
    "RiskAssessment",
    "RiskLevel",
    "ScriptedBackend",
    "ScriptedMiss",
    "Session",
    "SessionStatus",
    "Speaker",
    "Talk2CareError",
    "Turn",
    "TurnKind",
    "ValidationError",
    "ValueKind",
    "render_transcript",
    "risk_color",
    "validate_session",
    "__version__",
]
