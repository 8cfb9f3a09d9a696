"""Exception types raised across the package."""


class SmpcError(Exception):
    """Base class for all package errors."""


class InvalidInput(SmpcError, ValueError):
    """Non-finite data, inconsistent dimensions or an indefinite cost matrix."""


class RangeError(SmpcError, ValueError):
    """A feature vector lies outside the range reachable by causal gains."""


class PipelineAbort(SmpcError):
    """Offline pipeline cannot produce a usable artifact."""

    stage = "unknown"

    def __init__(self, message, stage=None):
        super().__init__(message)
        if stage is not None:
            self.stage = stage


class EmptyCandidateSet(PipelineAbort):
    stage = "candidate_set"


class BoundaryCenter(PipelineAbort):
    stage = "candidate_set"


class NonpositiveScaling(PipelineAbort):
    stage = "gamma_scaling"


class InsufficientSamples(PipelineAbort):
    stage = "gamma_scaling"


class ArtifactVersionError(SmpcError):
    """Artifact file has a foreign magic number or an unsupported version."""
