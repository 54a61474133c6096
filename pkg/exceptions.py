"""
Error hierarchy for the lab. Each family maps onto a CLI exit code in main.py.
"""


class LabError(Exception):
    """Base class for every error raised by the lab."""

    exit_code: int = 1


class ShapeError(LabError, ValueError):
    """Operand shapes do not conform to an operation's algebraic rule."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        rendered = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {rendered}")


class GradientError(LabError):
    """Backward called on a non-scalar root, or an optimizer saw missing gradients."""


class CorpusFormatError(LabError, ValueError):
    """A corpus or pair file record is malformed."""

    def __init__(self, message: str, line: int = None):
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(f"{prefix}{message}")


class ConfigError(LabError, ValueError):
    """Invalid configuration value or config/manifest mismatch."""


class CheckpointError(LabError):
    """Checkpoint could not be loaded for the requested role or config."""


class AttackError(LabError):
    """The attack cannot be run against the given model or example."""


class ContractError(LabError):
    """A pipeline contract was violated (white-box sweep, front-end mismatch)."""


class DegenerateSignalError(LabError):
    """LNSR reference activation has zero norm."""

    def __init__(self, pair_index: int, layer: int):
        self.pair_index = pair_index
        self.layer = layer
        super().__init__(f"pair {pair_index}, layer {layer}: clean activation has zero L2 norm")


class MissingUpstreamError(LabError):
    """A stage was requested before the stage that produces its inputs."""

    exit_code = 2

    def __init__(self, command: str, detail: str = ""):
        self.command = command
        suffix = f" ({detail})" if detail else ""
        super().__init__(f"missing upstream artifacts; run `lab {command}` first{suffix}")


class NumericalError(LabError):
    """NaN or Inf detected in a computation."""

    exit_code = 3
