import logging
import os
import traceback
from functools import wraps
from typing import Callable, Optional

from .exceptions import PdetValidationError

LOGGER = logging.getLogger('pdet')

DEFAULT_LAYERNORM_EPS = 1e-6
DEFAULT_RMSNORM_EPS = 1e-6
THREADS_ENV_VAR = 'PDET_THREADS'

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2


class Singleton(type):
    _instances = {}

    def __call__(cls, *args, **kwargs):
        if cls not in cls._instances:
            cls._instances[cls] = super(Singleton, cls).__call__(*args, **kwargs)
        return cls._instances[cls]


class PdetGlobalSettings(metaclass=Singleton):
    """
    Process-wide knobs read by the compute code. Tests and the CLI flip these, library code only reads them.
    """

    def __init__(self):
        self.check_finite = False
        self.layernorm_eps = DEFAULT_LAYERNORM_EPS
        self.rmsnorm_eps = DEFAULT_RMSNORM_EPS
        self.threads = None
        self.exception_callback = None  # type: Optional[Callable[[Exception], None]]


def worker_cap(requested: Optional[int] = None) -> int:
    """
    Number of worker processes to use, capped by the PDET_THREADS environment variable when set.
    """
    cap = os.environ.get(THREADS_ENV_VAR)
    workers = requested if requested is not None else (os.cpu_count() or 1)
    if cap:
        try:
            workers = min(workers, max(1, int(cap)))
        except ValueError:
            LOGGER.warning(f'Ignoring {THREADS_ENV_VAR}={cap!r}, expected a positive integer')
    return max(1, workers)


def exit_code_handler(func):
    @wraps(func)
    def wrapper(*args, **kwargs):
        try:
            func(*args, **kwargs)
        except Exception as exc:
            return handle_exception_gracefully(exc)
        return EXIT_OK

    return wrapper


def handle_exception_gracefully(exception: Exception) -> int:
    if LOGGER.isEnabledFor(logging.DEBUG):
        traceback.print_exc()

    settings = PdetGlobalSettings()
    if settings.exception_callback:
        settings.exception_callback(exception)

    if isinstance(exception, PdetValidationError):
        LOGGER.error(f'Validation failed: {exception}')
        return EXIT_VALIDATION

    LOGGER.error(f'{type(exception).__name__}: {exception}')
    return EXIT_RUNTIME
