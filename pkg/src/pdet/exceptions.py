from typing import Any, Dict, Optional, Sequence, Tuple


class PdetError(Exception):
    pass


class PdetValidationError(PdetError):
    """Bad input: the caller can fix it. The CLI exits with status 1."""


class PdetRuntimeError(PdetError):
    """Something failed while computing. The CLI exits with status 2."""


# tensorcore

class DimensionError(PdetValidationError):
    pass


class ContractError(PdetValidationError):
    pass


class NonFiniteError(PdetRuntimeError):
    pass


# fields

class ContainerParseError(PdetValidationError):
    pass


class MagicMismatchError(ContainerParseError):
    pass


class TruncatedPayloadError(ContainerParseError):
    pass


class ManifestMismatchError(ContainerParseError):
    pass


class FieldStatsMismatchError(PdetValidationError):
    pass


class EmptyDatasetError(PdetValidationError):
    pass


# spectral

class SolverSpecError(PdetValidationError):
    pass


class InitialConditionRangeError(ContractError):
    pass


class StabilityError(PdetRuntimeError):

    def __init__(self, pde_kind: str, dt: float, detail: str = ''):
        self.pde_kind = pde_kind
        self.dt = dt
        super().__init__(f'Non-finite state while integrating {pde_kind} with dt={dt!r}{detail}')


class SimulationBlowUpError(PdetRuntimeError):

    def __init__(self, pde_kind: str, step: int, max_abs: float, threshold: float):
        self.pde_kind = pde_kind
        self.step = step
        self.max_abs = max_abs
        super().__init__(f'{pde_kind} blew up at stored step {step}: max|u|={max_abs:.3e} > {threshold:.1e}')


# tokens / attention / model

class ResolutionError(PdetValidationError):
    pass


class ChannelCountError(PdetValidationError):
    pass


class ModeMismatchError(PdetValidationError):
    pass


class ConfigError(PdetValidationError):
    pass


class UnknownLabelError(PdetValidationError):
    pass


class LoraTargetNotFoundError(PdetValidationError):
    pass


# training

class TrainConfigError(PdetValidationError):
    pass


class NonFiniteLossError(PdetRuntimeError):

    def __init__(self, step: int, loss: float, diagnostics: Optional[Dict[str, Any]] = None):
        self.step = step
        self.loss = loss
        self.diagnostics = diagnostics or {}
        details = ', '.join(f'{key}={value}' for key, value in self.diagnostics.items())
        super().__init__(f'Non-finite loss {loss} at step {step}' + (f' ({details})' if details else ''))


# inference

class ZeroReferenceError(PdetValidationError):

    def __init__(self, index: int):
        self.index = index
        super().__init__(f'Reference item {index} is identically zero, nRMSE is undefined for it')


# cli

class ConfigValidationError(PdetValidationError):

    def __init__(self, problems: Sequence[Tuple[str, str]]):
        self.problems = list(problems)
        lines = '\n'.join(f'  {key}: {message}' for key, message in self.problems)
        super().__init__(f'{len(self.problems)} invalid config value(s):\n{lines}')


class CheckpointMismatchError(PdetValidationError):

    def __init__(self, diff: Dict[str, Tuple[Any, Any]]):
        self.diff = diff
        lines = '\n'.join(f'  {key}: checkpoint={ckpt!r} config={cfg!r}' for key, (ckpt, cfg) in diff.items())
        super().__init__(f'Checkpoint and config disagree on {len(diff)} field(s):\n{lines}')


__all__ = [name for name, value in list(globals().items())
           if isinstance(value, type) and issubclass(value, Exception)]
