"""Exception types shared across the package."""


class ImprintLabError(Exception):
    """Base class; carries a short machine-parsable tag for the CLI."""

    tag = "error"


class ConfigurationError(ImprintLabError):
    tag = "config"


class EmptyDatasetError(ImprintLabError):
    tag = "empty-dataset"


class PreconditionError(ImprintLabError):
    tag = "precondition"


class TrainingFailure(ImprintLabError):
    tag = "training-failure"

    def __init__(self, message, final_loss=None):
        super().__init__(message)
        self.final_loss = final_loss


class CapabilityError(ImprintLabError):
    tag = "capability"


class AlignmentError(ImprintLabError):
    tag = "alignment"


class PolicyError(ImprintLabError):
    tag = "policy"


class ArtifactError(ImprintLabError):
    tag = "artifact"
