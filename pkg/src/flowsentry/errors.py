"""Exception hierarchy shared across the pipeline.

Each error carries the CLI exit code it maps to, so command handlers can
translate failures without a lookup table.
"""


class FlowSentryError(Exception):
    exit_code = 1


class DataError(FlowSentryError):
    exit_code = 3


class ConfigError(FlowSentryError):
    exit_code = 4


# capture decoding
class BadMagic(DataError):
    pass


class TruncatedRecord(DataError):
    pass


class UnsupportedLinkType(DataError):
    pass


class MalformedHeader(DataError):
    pass


class NegativeRelativeTime(DataError):
    pass


class UnsortedPackets(DataError):
    pass


# samples / datasets
class NoRealRows(DataError):
    pass


class TooManyRows(DataError):
    pass


class UnlabeledFlow(DataError):
    def __init__(self, keys):
        self.keys = list(keys)
        shown = ", ".join(str(k) for k in self.keys[:10])
        more = f" (+{len(self.keys) - 10} more)" if len(self.keys) > 10 else ""
        super().__init__(f"{len(self.keys)} flow(s) match no label rule: {shown}{more}")


class SingleClassDataset(DataError):
    pass


class TooFewSamples(DataError):
    pass


class EmptySplit(DataError):
    pass


class SingleClassTrainSplit(SingleClassDataset):
    pass


class CorruptManifest(DataError):
    pass


class VersionMismatch(DataError):
    pass


class ShapeMismatch(DataError):
    pass


class LengthMismatch(DataError):
    pass


class EmptyMatrix(DataError):
    pass


# model
class InputTooSmall(DataError):
    pass


class InvalidRate(ValueError, FlowSentryError):
    exit_code = 2


class StaleCache(FlowSentryError):
    pass


class ConfigMismatch(ConfigError):
    pass


class InvalidSpec(ValueError, FlowSentryError):
    exit_code = 2
