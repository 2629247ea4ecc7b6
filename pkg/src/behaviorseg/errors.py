"""Exception hierarchy.

Every error raised on bad data or bad configuration derives from
:class:`SegmentationError`. ``exit_code`` follows the CLI convention: 1 for
runtime/data problems, 2 for usage/configuration problems.
"""


class SegmentationError(Exception):
    exit_code = 1


class ConfigError(SegmentationError, ValueError):
    exit_code = 2


# ingest
class MalformedLine(SegmentationError):
    def __init__(self, line_no, reason):
        super().__init__(f"line {line_no}: {reason}")
        self.line_no = line_no
        self.reason = reason


class UnknownEvent(MalformedLine):
    pass


class TooManyMalformed(SegmentationError):
    def __init__(self, bad, total, threshold, errors=()):
        super().__init__(
            f"TooManyMalformed: {bad} of {total} lines malformed "
            f"(threshold {threshold:.2%})"
        )
        self.bad = bad
        self.total = total
        self.errors = list(errors)


class EmptyPeriod(SegmentationError):
    # empty inputs are treated as a usage problem by the CLI
    exit_code = 2

    def __init__(self, message="EmptyPeriod: no events in period"):
        super().__init__(message)


class ArmConflict(SegmentationError):
    def __init__(self, user_id):
        super().__init__(f"ArmConflict: user {user_id!r} appears in both arms")
        self.user_id = user_id


class MissingArm(SegmentationError):
    def __init__(self, user_id):
        super().__init__(f"MissingArm: user {user_id!r} has no control/test arm")
        self.user_id = user_id


# features
class MissingColumn(SegmentationError):
    pass


class NegativeValue(SegmentationError):
    pass


class ConstantColumn(SegmentationError):
    def __init__(self, columns):
        cols = ", ".join(columns)
        super().__init__(f"ConstantColumn: zero variance in {cols}")
        self.columns = list(columns)


class AllRemoved(SegmentationError):
    pass


class ColumnMismatch(SegmentationError):
    pass


class StageError(SegmentationError):
    pass


class InsufficientData(SegmentationError):
    pass


# cluster
class TooFewPoints(SegmentationError):
    pass


class DimensionMismatch(SegmentationError):
    pass


class DegenerateVariance(SegmentationError):
    pass


class EmptyCluster(SegmentationError):
    pass


class KTooSmall(SegmentationError):
    pass


# experiment
class OneArmOnly(SegmentationError):
    pass


class ZeroGrandTotal(SegmentationError):
    pass


class NoOverallEffect(SegmentationError):
    pass


# synth
class InvalidSpec(ConfigError):
    pass


class UnknownArchetype(ConfigError):
    pass


# persistence
class ModelVersionError(SegmentationError):
    exit_code = 2
