"""Evaluation toolkit for image copy detection: exact descriptor search,
micro-AP / mAP metrics, score normalization, penalty attribution and
breakdown reports, plus a synthetic data generator to test them on."""

__version__ = "0.1.0"

from .errors import ComputationError, CopydetError, InputError  # noqa: E402
from .model import CandidateList, DescriptorSet, GroundTruth, PenaltyModel, QueryMetadata  # noqa: E402

__all__ = [
    "__version__",
    "CandidateList",
    "ComputationError",
    "CopydetError",
    "DescriptorSet",
    "GroundTruth",
    "InputError",
    "PenaltyModel",
    "QueryMetadata",
]
