"""Exception types shared across the package."""


class StereoAdaptError(Exception):
    """Base class for all package errors."""


class InvalidShape(StereoAdaptError, ValueError):
    pass


class InvalidConfig(StereoAdaptError, ValueError):
    pass


class InvalidInput(StereoAdaptError, ValueError):
    pass


class ShapeConflict(StereoAdaptError, ValueError):
    """A checkpoint tensor does not match the shape of the model parameter it names."""

    def __init__(self, name, expected, found):
        self.name = name
        self.expected = tuple(expected)
        self.found = tuple(found)
        super().__init__(f"shape conflict for {name!r}: model has {self.expected}, checkpoint has {self.found}")


class MissingWeights(StereoAdaptError, KeyError):
    def __init__(self, names):
        self.names = list(names)
        preview = ", ".join(self.names[:5])
        more = f" (+{len(self.names) - 5} more)" if len(self.names) > 5 else ""
        super().__init__(f"checkpoint is missing {len(self.names)} backbone tensors: {preview}{more}")

    def __str__(self):
        return self.args[0]


class EmptyDataset(StereoAdaptError, ValueError):
    pass


class DecodeError(StereoAdaptError, OSError):
    pass


class PatchTooLarge(StereoAdaptError, ValueError):
    pass


class DivergenceError(StereoAdaptError, FloatingPointError):
    def __init__(self, iteration, loss):
        self.iteration = iteration
        self.loss = loss
        super().__init__(f"non-finite loss {loss} at iteration {iteration}")


class CheckpointError(StereoAdaptError, OSError):
    """Reading or writing a checkpoint archive failed; the message names the path."""
