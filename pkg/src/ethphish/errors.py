"""Exception hierarchy. Every error carries a stable ``code`` used by the CLI."""


class EthPhishError(Exception):
    code = "E_GENERIC"
    exit_code = 1


class SchemaError(EthPhishError):
    code = "E_SCHEMA"

    def __init__(self, line, field, detail=""):
        self.line = line
        self.field = field
        msg = f"line {line}: bad or missing field {field!r}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class EmptyInput(EthPhishError):
    code = "E_EMPTY_INPUT"


class UnsortedInput(EthPhishError):
    code = "E_UNSORTED"


class TimeRegression(EthPhishError):
    code = "E_TIME_REGRESSION"


class NodeOutOfRange(EthPhishError):
    code = "E_NODE_RANGE"


class TooFewNodes(EthPhishError):
    code = "E_TOO_FEW_NODES"


class ShapeMismatch(EthPhishError):
    code = "E_SHAPE"


# numeric core
class ShapeError(ShapeMismatch):
    code = "E_SHAPE"


class NumericalError(EthPhishError):
    code = "E_NUMERICAL"


class GraphError(EthPhishError):
    code = "E_AUTODIFF_GRAPH"


class EmptyBuffer(EthPhishError):
    code = "E_EMPTY_BUFFER"


# classifier / pipeline
class SingleClassError(EthPhishError):
    code = "E_SINGLE_CLASS"


class EmptyClass(EthPhishError):
    code = "E_EMPTY_CLASS"


class InsufficientData(EthPhishError):
    code = "E_INSUFFICIENT_DATA"


class UnknownTarget(EthPhishError):
    code = "E_UNKNOWN_TARGET"


# fund flow
class UnknownRoot(EthPhishError):
    code = "E_UNKNOWN_ROOT"


class ConservationViolation(EthPhishError):
    code = "E_CONSERVATION"

    def __init__(self, msg, address=None):
        self.address = address
        super().__init__(msg)


class ConfigError(EthPhishError):
    code = "E_CONFIG"
    exit_code = 2
