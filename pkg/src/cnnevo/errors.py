class StructuralError(ValueError):
    """A layer or genome cannot be wired to the shapes it is given."""


class FormatError(ValueError):
    """A data or checkpoint file does not match its binary format."""


class ConfigError(ValueError):
    """Invalid run configuration or arguments."""


class TrainingDiverged(FloatingPointError):
    """Training produced a non-finite loss."""
