"""Exception types shared across the package."""


class ContractError(ValueError):
    """An input violated a documented precondition."""


class ConfigError(ValueError):
    """Invalid configuration (bad value, unknown key, infeasible model fit)."""


class UndefinedQBERError(ZeroDivisionError):
    """QBER requested for a basis with no sifted detections."""


class CalibrationError(RuntimeError):
    """Calibration did not reach its target.

    The best settings seen are attached so callers can still inspect or use them.
    """

    def __init__(self, message, best_settings=None, best_error=None, trajectory=None):
        super().__init__(message)
        self.best_settings = best_settings
        self.best_error = best_error
        self.trajectory = trajectory or []
