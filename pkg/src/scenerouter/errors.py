"""Exception hierarchy.

Every error carries the CLI exit code it maps to: 2 for bad data, 3 for
missing or inconsistent artifacts.
"""


class SceneRouterError(Exception):
    exit_code = 2
    stage = None

    def with_stage(self, stage):
        """Tag the error with the pipeline stage it escaped from."""
        self.stage = stage
        return self

    def __str__(self):
        msg = super().__str__()
        return f"[{self.stage}] {msg}" if self.stage else msg


class DataError(SceneRouterError):
    exit_code = 2


class ParseError(DataError):
    def __init__(self, line, reason):
        super().__init__(f"line {line}: {reason}")
        self.line = line
        self.reason = reason


class EmptyDataset(DataError):
    pass


class InvalidWindowParams(DataError):
    pass


class DegenerateSegment(DataError):
    pass


class TooFewSamples(DataError):
    pass


class EmptyHoldout(DataError):
    pass


class LengthMismatch(DataError):
    pass


class EmptyBank(DataError):
    pass


class AllZeroWeights(DataError):
    pass


class NoEvidence(DataError):
    pass


class UnknownVariant(SceneRouterError):
    exit_code = 1


class DuplicateExpertName(SceneRouterError):
    exit_code = 1


class ArtifactError(SceneRouterError):
    exit_code = 3


class VersionMismatch(ArtifactError):
    pass


class ArtifactNotFound(ArtifactError):
    pass


class HashMismatch(ArtifactError):
    pass
