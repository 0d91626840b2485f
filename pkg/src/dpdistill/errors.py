"""Exception taxonomy shared across the package.

The CLI maps these onto stable exit codes: configuration problems exit 2,
privacy budget exhaustion exits 3, numerical divergence exits 4.
"""


class ConfigError(ValueError):
    """Invalid configuration; message names the offending field or file."""


class BudgetExhaustedError(RuntimeError):
    """Privacy budget ran out before the training schedule completed."""

    def __init__(self, step: int, spent: float, target: float):
        self.step = step
        self.spent = spent
        self.target = target
        super().__init__(
            f"privacy budget exhausted at step {step}: "
            f"spent epsilon {spent:.6g} exceeds target {target:.6g}"
        )


class NumericalError(RuntimeError):
    """Non-finite loss or gradient surfaced during training."""


class CalibrationError(RuntimeError):
    """Noise calibration could not reach the target budget within its bracket."""


class PhaseError(RuntimeError):
    """An experiment phase failed; wraps the original error with the phase name."""

    def __init__(self, phase: str, original: BaseException):
        self.phase = phase
        self.original = original
        super().__init__(f"phase '{phase}' failed: {original}")
