import asyncio
from typing import Optional


class CircuitSEError(Exception):
    """Base class for every error raised by circuitse."""


# Input errors


class ParseError(CircuitSEError):
    def __init__(self, line: int, reason: str):
        self.line = line
        self.reason = reason
        super().__init__(f"line {line}: {reason}")


class ValidationError(CircuitSEError):
    pass


class SchemaError(CircuitSEError):
    """A measurement-set or results document violates its schema.

    `path` is a JSON path like `$.devices[3].rtu.gamma`.
    """

    def __init__(self, path: str, reason: str):
        self.path = path
        self.reason = reason
        super().__init__(f"{path}: {reason}")


class IndexMismatch(CircuitSEError):
    pass


class LengthMismatch(CircuitSEError):
    pass


# Numerical errors


class NumericalError(CircuitSEError):
    pass


class DegenerateBranch(NumericalError):
    def __init__(self, branch: int):
        self.branch = branch
        super().__init__(f"branch {branch} has r = x = 0")


class Diverged(NumericalError):
    def __init__(self, iterations: int, residual: float):
        self.iterations = iterations
        self.residual = residual
        super().__init__(f"power flow diverged after {iterations} iterations (residual {residual:.3e})")


class SingularJacobian(NumericalError):
    pass


class SingularSystem(NumericalError):
    def __init__(self, pivot: Optional[int], reason: str = "singular matrix"):
        self.pivot = pivot
        super().__init__(f"{reason} {pivot}" if pivot is not None else reason)


class NotConverged(NumericalError):
    def __init__(self, iterations: int, residual: float):
        self.iterations = iterations
        self.residual = residual
        super().__init__(f"estimator not converged after {iterations} iterations (residual {residual:.3e})")


class ObjectiveIncreased(NumericalError):
    """The nonlinear estimator settled on a stationary point worse than the linear estimate it started from."""

    def __init__(self, objective: float, reference: float):
        self.objective = objective
        self.reference = reference
        super().__init__(f"delta-y objective {objective:.6e} exceeds its linear starting point {reference:.6e}")


class ZeroVoltage(NumericalError):
    pass


class ZeroVoltageTruth(NumericalError):
    def __init__(self, bus: int):
        self.bus = bus
        super().__init__(f"true voltage at bus {bus} is zero")


class SampleFailed(NumericalError):
    def __init__(self, k: int, cause: BaseException):
        self.k = k
        self.cause = cause
        super().__init__(f"sample {k} failed: {cause}")


class McAborted(NumericalError):
    def __init__(self, failed: int, samples: int):
        self.failed = failed
        self.samples = samples
        super().__init__(f"{failed} of {samples} Monte Carlo samples failed")


# Crossing the worker boundary


class WorkerException(Exception):
    """Wraps an exception raised on a worker so the pool's own frames can be dropped from the traceback."""

    def __init__(self, exc):
        self.exc = exc


def wrap_worker_exception(coro):
    async def coro_wrapped():
        try:
            return await coro
        except asyncio.CancelledError:
            # cancellations must stay visible to the loop during shutdown
            raise
        except WorkerException:
            raise
        except BaseException as exc:
            if exc.__traceback__ is not None:
                exc = exc.with_traceback(exc.__traceback__.tb_next)
            raise WorkerException(exc)

    return coro_wrapped()


async def unwrap_worker_exception(coro):
    try:
        return await coro
    except WorkerException as w_exc:
        w_exc.exc.__suppress_context__ = True
        raise w_exc.exc
