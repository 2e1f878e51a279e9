"""
Right-hand sides of the supported PDEs, split into a diagonal linear operator and a pseudo-spectral nonlinearity.

All nonlinear products are formed from 2/3-truncated inputs and truncated again afterwards.
"""
from typing import Dict, Optional, Sequence

import numpy as np

from .. import channel_types, pde_kinds
from ..exceptions import SolverSpecError
from .etdrk import SpectralGrid
from .namespace import register_equation


class Equation:
    REQUIRED_PARAMS = ()  # type: Sequence[str]
    FIELD_TYPES = ()  # type: Sequence[str]

    def __init__(self, params: Dict[str, float], grid: SpectralGrid, pde_kind: str):
        missing = [name for name in self.REQUIRED_PARAMS if name not in params]
        if missing:
            raise SolverSpecError(f'{pde_kind} is missing parameters {missing}')
        self.params = params
        self.grid = grid
        self.pde_kind = pde_kind

    @property
    def n_fields(self) -> int:
        return len(self.FIELD_TYPES)

    def linear(self) -> np.ndarray:
        raise NotImplementedError

    @property
    def has_nonlinear(self) -> bool:
        return True

    def nonlinear(self, u_hat: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _real(self, u_hat: np.ndarray) -> np.ndarray:
        return self.grid.to_real(u_hat * self.grid.dealias)

    def _fourier(self, u: np.ndarray) -> np.ndarray:
        return self.grid.to_fourier(u) * self.grid.dealias

    def _per_field(self, operator: np.ndarray) -> np.ndarray:
        return np.broadcast_to(operator, (self.n_fields,) + self.grid.spectral_shape)


@register_equation(pde_kinds.DIFF)
class Diffusion(Equation):
    REQUIRED_PARAMS = ('nu_x', 'nu_y')
    FIELD_TYPES = (channel_types.DENSITY,)

    def linear(self) -> np.ndarray:
        return self._per_field(-(self.params['nu_x'] * self.grid.kx ** 2 + self.params['nu_y'] * self.grid.ky ** 2))

    @property
    def has_nonlinear(self) -> bool:
        return False


@register_equation(pde_kinds.FISHER)
class FisherKPP(Equation):
    REQUIRED_PARAMS = ('diffusivity', 'reactivity')
    FIELD_TYPES = (channel_types.CONCENTRATION,)

    def linear(self) -> np.ndarray:
        return self._per_field(-self.params['diffusivity'] * self.grid.k_squared + self.params['reactivity'])

    def nonlinear(self, u_hat: np.ndarray) -> np.ndarray:
        u = self._real(u_hat)
        return self._fourier(-self.params['reactivity'] * u ** 2)


@register_equation(pde_kinds.SH)
class SwiftHohenberg(Equation):
    REQUIRED_PARAMS = ('reactivity', 'critical_number')
    FIELD_TYPES = (channel_types.CONCENTRATION,)

    def linear(self) -> np.ndarray:
        critical = self.params['critical_number'] ** 2
        return self._per_field(self.params['reactivity'] - (critical - self.grid.k_squared) ** 2)

    def nonlinear(self, u_hat: np.ndarray) -> np.ndarray:
        u = self._real(u_hat)
        return self._fourier(u ** 2 - u ** 3)


@register_equation(*pde_kinds.GRAY_SCOTT)
class GrayScott(Equation):
    REQUIRED_PARAMS = ('feed_rate', 'kill_rate', 'diffusivity_a', 'diffusivity_b')
    FIELD_TYPES = (channel_types.CONCENTRATION_A, channel_types.CONCENTRATION_B)

    def linear(self) -> np.ndarray:
        feed, kill = self.params['feed_rate'], self.params['kill_rate']
        shape = self.grid.spectral_shape
        return np.stack([
            np.broadcast_to(-self.params['diffusivity_a'] * self.grid.k_squared - feed, shape),
            np.broadcast_to(-self.params['diffusivity_b'] * self.grid.k_squared - (feed + kill), shape),
        ])

    def nonlinear(self, u_hat: np.ndarray) -> np.ndarray:
        a, b = self._real(u_hat)
        reaction = a * b ** 2
        return self._fourier(np.stack([-reaction + self.params['feed_rate'], reaction]))


class _ConservativeConvection(Equation):
    FIELD_TYPES = (channel_types.VELOCITY_X, channel_types.VELOCITY_Y)

    def _divergence_of_outer(self, u_hat: np.ndarray) -> np.ndarray:
        u, v = self._real(u_hat)
        uu, uv, vv = self._fourier(u * u), self._fourier(u * v), self._fourier(v * v)
        return np.stack([self.grid.dx(uu) + self.grid.dy(uv), self.grid.dx(uv) + self.grid.dy(vv)])


@register_equation(pde_kinds.BURGERS)
class Burgers(_ConservativeConvection):
    REQUIRED_PARAMS = ('viscosity',)

    def linear(self) -> np.ndarray:
        return self._per_field(-self.params['viscosity'] * self.grid.k_squared)

    def nonlinear(self, u_hat: np.ndarray) -> np.ndarray:
        return -0.5 * self._divergence_of_outer(u_hat)


@register_equation(pde_kinds.KDV)
class KortewegDeVries(_ConservativeConvection):
    REQUIRED_PARAMS = ('viscosity', 'convection', 'dispersivity')

    def linear(self) -> np.ndarray:
        dispersion = 1j * self.params['dispersivity'] * (self.grid.kx_odd ** 3 + self.grid.ky_odd ** 3)
        return self._per_field(dispersion - self.params['viscosity'] * self.grid.k_squared)

    def nonlinear(self, u_hat: np.ndarray) -> np.ndarray:
        return 0.5 * self.params['convection'] * self._divergence_of_outer(u_hat)


@register_equation(pde_kinds.KS)
class KuramotoSivashinsky(Equation):
    FIELD_TYPES = (channel_types.DENSITY,)

    def linear(self) -> np.ndarray:
        k_squared = self.grid.k_squared
        return self._per_field(k_squared - k_squared ** 2)

    def nonlinear(self, u_hat: np.ndarray) -> np.ndarray:
        u_x = self.grid.to_real(self.grid.dx(u_hat * self.grid.dealias))
        u_y = self.grid.to_real(self.grid.dy(u_hat * self.grid.dealias))
        return self._fourier(-0.5 * (u_x ** 2 + u_y ** 2))


@register_equation(*pde_kinds.VORTICITY)
class Vorticity(Equation):
    """
    Incompressible Navier-Stokes in streamfunction-vorticity form, with psi solved from lap(psi) = -omega.
    """
    REQUIRED_PARAMS = ('viscosity',)
    FIELD_TYPES = (channel_types.VORTICITY,)

    def __init__(self, params: Dict[str, float], grid: SpectralGrid, pde_kind: str,
                 forcing: Optional[np.ndarray] = None):
        super().__init__(params, grid, pde_kind)
        if forcing is None and self.params.get('forcing_amplitude', 0.0):
            y = np.arange(grid.resolution[1]) * grid.extent[1] / grid.resolution[1]
            wave = np.sin(self.params['forcing_wavenumber'] * 2 * np.pi * y / grid.extent[1])
            forcing = self.params['forcing_amplitude'] * np.broadcast_to(wave[None, :], grid.resolution)
        self.forcing_hat = None if forcing is None else grid.to_fourier(np.asarray(forcing, dtype=np.float64))
        k_squared = grid.k_squared
        self.inverse_laplacian = np.divide(1.0, k_squared, out=np.zeros_like(k_squared), where=k_squared > 0)

    def linear(self) -> np.ndarray:
        return self._per_field(-self.params['viscosity'] * self.grid.k_squared - self.params.get('drag', 0.0))

    def nonlinear(self, u_hat: np.ndarray) -> np.ndarray:
        omega_hat = u_hat[0] * self.grid.dealias
        psi_hat = omega_hat * self.inverse_laplacian
        velocity_x = self.grid.to_real(self.grid.dy(psi_hat))
        velocity_y = self.grid.to_real(-self.grid.dx(psi_hat))
        omega_x = self.grid.to_real(self.grid.dx(omega_hat))
        omega_y = self.grid.to_real(self.grid.dy(omega_hat))
        advection = self._fourier(-(velocity_x * omega_x + velocity_y * omega_y))
        if self.forcing_hat is not None:
            advection = advection + self.forcing_hat
        return advection[None]
