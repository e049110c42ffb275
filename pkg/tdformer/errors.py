"""Exception hierarchy shared by the engine, the model and the command line."""


class TDFormerError(Exception):
    pass


class ConfigurationError(TDFormerError, ValueError):
    """A setting is missing, unknown or outside its valid range.

    ``field`` names the offending key when there is one, so the command line
    can print a field-level message.
    """

    def __init__(self, message, field=None):
        self.field = field
        if field is not None:
            message = "{}: {}".format(field, message)
        super().__init__(message)


class DimensionError(TDFormerError, ValueError):
    pass


class NumericError(TDFormerError, ArithmeticError):
    pass


class TrainingDivergedError(NumericError):

    def __init__(self, message, diagnostic=None):
        self.diagnostic = diagnostic or {}
        super().__init__(message)


class UninitializedStatisticsError(TDFormerError, RuntimeError):
    pass
