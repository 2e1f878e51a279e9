"""
Exponential time differencing Runge-Kutta integrators for semi-linear PDEs u_t = L u + N(u) on periodic grids.

L is diagonal in Fourier space and is integrated exactly. The phi-function coefficients are evaluated as means over
points on a unit circle around L*dt in the complex plane, which stays accurate where L*dt is close to zero.
"""
from dataclasses import dataclass, field
from typing import Callable, Optional, Tuple

import numpy as np

from ..exceptions import ContractError, StabilityError

N_CONTOUR_POINTS = 16
ETDRK_ORDERS = (2, 4)

Nonlinear = Callable[[np.ndarray], np.ndarray]


@dataclass
class SpectralGrid:
    resolution: Tuple[int, int]
    extent: Tuple[float, float]
    kx: np.ndarray = field(init=False, repr=False)
    ky: np.ndarray = field(init=False, repr=False)
    kx_odd: np.ndarray = field(init=False, repr=False)
    ky_odd: np.ndarray = field(init=False, repr=False)
    dealias: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        nx, ny = self.resolution
        lx, ly = self.extent
        index_x = np.fft.fftfreq(nx, d=1.0 / nx)
        index_y = np.fft.rfftfreq(ny, d=1.0 / ny)
        self.kx = (2 * np.pi * index_x / lx)[:, None]
        self.ky = (2 * np.pi * index_y / ly)[None, :]
        # odd derivatives drop the Nyquist mode so real fields stay real
        self.kx_odd = np.where(np.abs(index_x) == nx // 2, 0.0, self.kx[:, 0])[:, None]
        self.ky_odd = np.where(index_y == ny // 2, 0.0, self.ky[0])[None, :]
        self.dealias = (np.abs(index_x)[:, None] < nx / 3) & (index_y[None, :] < ny / 3)

    @property
    def k_squared(self) -> np.ndarray:
        return self.kx ** 2 + self.ky ** 2

    @property
    def spectral_shape(self) -> Tuple[int, int]:
        return self.resolution[0], self.resolution[1] // 2 + 1

    def to_fourier(self, u: np.ndarray) -> np.ndarray:
        return np.fft.rfft2(u, axes=(-2, -1))

    def to_real(self, u_hat: np.ndarray) -> np.ndarray:
        return np.fft.irfft2(u_hat, s=self.resolution, axes=(-2, -1))

    def dx(self, u_hat: np.ndarray) -> np.ndarray:
        return 1j * self.kx_odd * u_hat

    def dy(self, u_hat: np.ndarray) -> np.ndarray:
        return 1j * self.ky_odd * u_hat


@dataclass
class SpectralState:
    coeffs: np.ndarray
    grid: SpectralGrid

    def __post_init__(self):
        if self.coeffs.shape[-2:] != self.grid.spectral_shape:
            raise ContractError(f'Fourier coefficients {self.coeffs.shape} do not match grid '
                                f'{self.grid.spectral_shape}')

    @property
    def kx(self) -> np.ndarray:
        return self.grid.kx

    @property
    def ky(self) -> np.ndarray:
        return self.grid.ky

    @staticmethod
    def from_real(u: np.ndarray, extent: Tuple[float, float]) -> 'SpectralState':
        grid = SpectralGrid(resolution=tuple(u.shape[-2:]), extent=tuple(extent))
        return SpectralState(coeffs=grid.to_fourier(np.asarray(u, dtype=np.float64)), grid=grid)

    def to_real(self) -> np.ndarray:
        return self.grid.to_real(self.coeffs)


def _contour_mean(z: np.ndarray, fn: Callable[[np.ndarray], np.ndarray], n_points: int) -> np.ndarray:
    roots = np.exp(2j * np.pi * (np.arange(n_points) + 0.5) / n_points)
    return fn(z[..., None] + roots).mean(axis=-1)


class ETDRKIntegrator:
    """
    Precomputed ETDRK2 (Cox-Matthews) or ETDRK4 (Kassam-Trefethen) stepper for a fixed operator and step size.
    """

    def __init__(self, linear: np.ndarray, nonlinear: Optional[Nonlinear], dt: float, order: int = 2,
                 pde_kind: str = 'custom', n_contour: int = N_CONTOUR_POINTS):
        if dt <= 0:
            raise ContractError(f'ETDRK step size must be positive, got {dt}')
        if order not in ETDRK_ORDERS:
            raise ContractError(f'ETDRK order must be one of {ETDRK_ORDERS}, got {order}')

        self.nonlinear = nonlinear
        self.dt = dt
        self.order = order
        self.pde_kind = pde_kind

        z = np.asarray(linear) * dt
        real_operator = np.isrealobj(z)
        z = z.astype(np.complex128)

        def coefficient(fn):
            value = dt * _contour_mean(z, fn, n_contour)
            return value.real if real_operator else value

        self.exp_full = np.exp(z.real) if real_operator else np.exp(z)
        if order == 2:
            self.phi1 = coefficient(lambda lr: (np.exp(lr) - 1) / lr)
            self.phi2 = coefficient(lambda lr: (np.exp(lr) - 1 - lr) / lr ** 2)
        else:
            self.exp_half = np.exp(z.real / 2) if real_operator else np.exp(z / 2)
            self.f0 = coefficient(lambda lr: (np.exp(lr / 2) - 1) / lr)
            self.alpha = coefficient(lambda lr: (-4 - lr + np.exp(lr) * (4 - 3 * lr + lr ** 2)) / lr ** 3)
            self.beta = coefficient(lambda lr: (2 + lr + np.exp(lr) * (-2 + lr)) / lr ** 3)
            self.gamma = coefficient(lambda lr: (-4 - 3 * lr - lr ** 2 + np.exp(lr) * (4 - lr)) / lr ** 3)

    def step(self, u_hat: np.ndarray) -> np.ndarray:
        if self.nonlinear is None:
            result = self.exp_full * u_hat
        elif self.order == 2:
            n_u = self.nonlinear(u_hat)
            a = self.exp_full * u_hat + self.phi1 * n_u
            result = a + self.phi2 * (self.nonlinear(a) - n_u)
        else:
            n_u = self.nonlinear(u_hat)
            a = self.exp_half * u_hat + self.f0 * n_u
            n_a = self.nonlinear(a)
            b = self.exp_half * u_hat + self.f0 * n_a
            n_b = self.nonlinear(b)
            c = self.exp_half * a + self.f0 * (2 * n_b - n_u)
            n_c = self.nonlinear(c)
            result = self.exp_full * u_hat + self.alpha * n_u + 2 * self.beta * (n_a + n_b) + self.gamma * n_c

        if not np.all(np.isfinite(result)):
            raise StabilityError(self.pde_kind, self.dt)
        return result

    def advance(self, u_hat: np.ndarray, n_steps: int) -> np.ndarray:
        for _ in range(n_steps):
            u_hat = self.step(u_hat)
        return u_hat


def etdrk_step(state: SpectralState, linear: np.ndarray, nonlinear: Optional[Nonlinear], dt: float,
               order: int = 2, pde_kind: str = 'custom') -> SpectralState:
    integrator = ETDRKIntegrator(linear, nonlinear, dt, order=order, pde_kind=pde_kind)
    return SpectralState(coeffs=integrator.step(state.coeffs), grid=state.grid)
