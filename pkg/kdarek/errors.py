"""Exception hierarchy shared by the library and the command line."""


class KdarekError(Exception):
    """Base class; `category` selects the CLI exit code."""

    category = "numerical"


# ------------------------------- interp ---------------------------------- #

class DuplicateKnots(KdarekError, ValueError):
    pass


class LengthMismatch(KdarekError, ValueError):
    pass


class EmptyKnots(KdarekError, ValueError):
    pass


class TooFewKnots(KdarekError, ValueError):
    pass


# ------------------------------- netcore --------------------------------- #

class NonFiniteLoss(KdarekError):
    def __init__(self, epoch, loss):
        super().__init__(f"Non-finite loss {loss} at epoch {epoch}")
        self.epoch = epoch
        self.loss = loss


class DimensionMismatch(KdarekError, ValueError):
    pass


# ------------------------------- bounds ---------------------------------- #

class TooFewSamples(KdarekError, ValueError):
    pass


class DegenerateColumn(KdarekError):
    def __init__(self, columns):
        super().__init__(f"Near-duplicate knots in feature column(s) {list(columns)}")
        self.columns = list(columns)


# ------------------------------ baselines -------------------------------- #

class NotPositiveDefinite(KdarekError):
    pass


# --------------------------------- qp ------------------------------------ #

class QpInfeasible(KdarekError):
    pass


class MaxIterations(KdarekError):
    pass


# --------------------------------- cli ----------------------------------- #

class ConfigError(KdarekError):
    category = "config"


class ModelFileError(KdarekError):
    category = "model-file"


class OutputError(KdarekError):
    category = "io"


EXIT_CODES = {
    "config": 2,
    "model-file": 3,
    "numerical": 4,
    "io": 5,
}
