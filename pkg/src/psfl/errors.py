"""Exception hierarchy shared across the package."""


class PSFLError(Exception):
    """Base class for every error raised by psfl."""


class ContractError(PSFLError, ValueError):
    """An operation was called with arguments that break its contract."""


class ConfigError(PSFLError, ValueError):
    """Invalid experiment or model configuration.

    ``key`` holds the dotted config path when the problem is tied to one key.
    """

    def __init__(self, message, key=None):
        super().__init__(f"{key}: {message}" if key else message)
        self.key = key


class ProtocolError(PSFLError, RuntimeError):
    """The federated protocol cannot proceed (empty shard, shape mismatch...)."""


class NonFiniteLossError(ProtocolError):
    """A training loss became NaN or infinite; ``dump`` describes the step."""

    def __init__(self, message, dump=None):
        super().__init__(message)
        self.dump = dump or {}


class UndefinedLinkError(PSFLError, ValueError):
    """A link with zero rate cannot carry a payload."""


class UndefinedMetricError(PSFLError, ValueError):
    """A metric was asked for on empty input."""


class GradCheckError(PSFLError, RuntimeError):
    """A finite-difference check could not run (e.g. the loss is not deterministic)."""


class AlignmentError(PSFLError, ValueError):
    """Run directories being compared do not line up round by round."""


class IDXError(PSFLError, ValueError):
    """Base class for IDX parsing errors."""


class IDXMagicError(IDXError):
    pass


class IDXTruncatedError(IDXError):
    pass


class IDXCountMismatchError(IDXError):
    pass


class RoundAbort(ProtocolError):
    """A federated round failed; ``round`` is its index and ``records`` the completed rounds."""

    def __init__(self, round_index, cause, records=()):
        super().__init__(f"round {round_index} aborted: {cause}")
        self.round = round_index
        self.cause = cause
        self.records = list(records)
