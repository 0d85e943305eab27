"""Multi-agent policy deliberation with social-choice metrics and a nonparametric statistics engine."""

from councilsim.core import (
    AgentRole,
    AnalysisConfig,
    DeliberationRecord,
    EvaluationRecord,
    MetricsBundle,
    ModelAssignment,
    ModelSpec,
    Ranking,
    Scenario,
    State,
    ValuePerspective,
)
from councilsim.errors import CouncilError

__version__ = "0.1.0"

__all__ = [
    "AgentRole",
    "AnalysisConfig",
    "CouncilError",
    "DeliberationRecord",
    "EvaluationRecord",
    "MetricsBundle",
    "ModelAssignment",
    "ModelSpec",
    "Ranking",
    "Scenario",
    "State",
    "ValuePerspective",
    "__version__",
]
