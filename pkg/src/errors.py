from typing import Optional


class LdpToolkitError(Exception):
    exit_code = 1


class ConfigError(LdpToolkitError, ValueError):
    exit_code = 2

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class UnknownSystemError(LdpToolkitError, ValueError):
    exit_code = 2

    def __init__(self, name: str, valid_names):
        self.name = name
        self.valid_names = sorted(valid_names)
        super().__init__(f"Unknown system '{name}'. Valid names: {', '.join(self.valid_names)}")


class SimulationBlowupError(LdpToolkitError, RuntimeError):
    exit_code = 3

    def __init__(self, step: int, where: str = 'simulation'):
        self.step = step
        super().__init__(f"Nonfinite state in {where} at step {step}")


class ConvergenceError(LdpToolkitError, RuntimeError):
    exit_code = 4

    def __init__(self, message: str, residual: Optional[float] = None):
        self.residual = residual
        if residual is not None:
            message = f"{message} (residual {residual:.3e})"
        super().__init__(message)


class SurfaceBuildError(LdpToolkitError, RuntimeError):
    exit_code = 4

    def __init__(self, beta, cause: Exception):
        self.beta = tuple(float(b) for b in beta)
        self.cause = cause
        super().__init__(f"Eigen-solve failed at beta={self.beta}: {cause}")


class InfeasiblePathError(LdpToolkitError, ValueError):
    exit_code = 5

    def __init__(self, segment: int, slope):
        self.segment = segment
        self.slope = slope
        super().__init__(f"Segment {segment} has slope {slope} outside the finite-rate domain")


class RateInvariantError(LdpToolkitError, RuntimeError):
    exit_code = 6
