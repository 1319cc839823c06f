"""Exception types raised across the package."""


class DglabError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(DglabError, ValueError):
    pass


class SingularKernelError(DglabError, ValueError):
    """Perturbation kernel has zero variance (t too close to 0)."""


class DivergedSamplerError(DglabError, RuntimeError):
    def __init__(self, step: int, message: str = ""):
        self.step = step
        super().__init__(message or f"non-finite score at sampler step {step}")


class DivergedLossError(DglabError, RuntimeError):
    pass


class ConstructionViolatedError(DglabError, ValueError):
    """Oscillatory discriminator evaluated where r_opt + h <= 0."""


class ConstructionInfeasibleError(DglabError, ValueError):
    def __init__(self, point, value: float, epsilon: float):
        self.point = point
        self.value = value
        super().__init__(
            f"inf r_opt <= epsilon: r_opt={value:.3e} <= {epsilon:.3e} at x={point}"
        )


class UnsupportedArchitectureError(DglabError, ValueError):
    pass


class InsufficientCoverageError(DglabError, ValueError):
    pass


class TrainingDivergedError(DglabError, RuntimeError):
    def __init__(self, step: int, last_good_params):
        self.step = step
        self.last_good_params = last_good_params
        super().__init__(f"non-finite training loss at step {step}")


class ConfigError(DglabError, ValueError):
    pass
