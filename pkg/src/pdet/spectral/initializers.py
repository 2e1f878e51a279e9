from typing import Tuple, Union

import numpy as np

from ..exceptions import InitialConditionRangeError

CUTOFF_RANGE = (2, 11)
EXPONENT_RANGE = (2.3, 3.6)
INTENSITY_RANGE = (0.00005, 0.01)
BLOB_SIGMA_RANGE = (0.05, 0.1)

Resolution = Union[int, Tuple[int, int]]
Seed = Union[int, np.random.Generator]


def _resolution(res: Resolution) -> Tuple[int, int]:
    return (res, res) if isinstance(res, (int, np.integer)) else (int(res[0]), int(res[1]))


def _check_range(name: str, value: float, bounds: Tuple[float, float]):
    low, high = bounds
    if not low <= value < high:
        raise InitialConditionRangeError(f'{name}={value} outside of [{low}, {high})')


def _mode_indices(nx: int, ny: int) -> Tuple[np.ndarray, np.ndarray]:
    return np.fft.fftfreq(nx, d=1.0 / nx)[:, None], np.fft.rfftfreq(ny, d=1.0 / ny)[None, :]


def _unit_max(u: np.ndarray) -> np.ndarray:
    return u / np.max(np.abs(u))


def _complex_normal(rng: np.random.Generator, shape: Tuple[int, ...]) -> np.ndarray:
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def ic_truncated_fourier(res: Resolution, cutoff: int, seed: Seed) -> np.ndarray:
    """
    Random Fourier series with integer modes strictly below `cutoff` on both axes, zero mean, max|u| = 1.
    """
    _check_range('cutoff', cutoff, CUTOFF_RANGE)
    nx, ny = _resolution(res)
    rng = np.random.default_rng(seed)
    index_x, index_y = _mode_indices(nx, ny)
    keep = (np.abs(index_x) < cutoff) & (index_y < cutoff) & (np.abs(index_x) < nx // 2) & (index_y < ny // 2)
    keep[0, 0] = False
    coeffs = np.where(keep, _complex_normal(rng, keep.shape), 0.0)
    return _unit_max(np.fft.irfft2(coeffs, s=(nx, ny)))


def ic_grf(res: Resolution, exponent: float, seed: Seed) -> np.ndarray:
    """
    Gaussian random field whose power spectrum decays as |k|^-exponent.
    """
    _check_range('exponent', exponent, EXPONENT_RANGE)
    nx, ny = _resolution(res)
    rng = np.random.default_rng(seed)
    index_x, index_y = _mode_indices(nx, ny)
    magnitude = np.sqrt(index_x ** 2 + index_y ** 2)
    amplitude = np.power(magnitude, -exponent / 2, out=np.zeros_like(magnitude), where=magnitude > 0)
    coeffs = amplitude * _complex_normal(rng, amplitude.shape)
    return _unit_max(np.fft.irfft2(coeffs, s=(nx, ny)))


def ic_diffused_noise(res: Resolution, intensity: float, seed: Seed) -> np.ndarray:
    """
    White noise smoothed by a heat kernel: the spectrum decays like exp(-intensity * |2 pi n|^2).
    """
    _check_range('intensity', intensity, INTENSITY_RANGE)
    nx, ny = _resolution(res)
    rng = np.random.default_rng(seed)
    index_x, index_y = _mode_indices(nx, ny)
    coeffs = np.fft.rfft2(rng.standard_normal((nx, ny)))
    coeffs *= np.exp(-intensity * (2 * np.pi) ** 2 * (index_x ** 2 + index_y ** 2))
    coeffs[0, 0] = 0.0
    return _unit_max(np.fft.irfft2(coeffs, s=(nx, ny)))


def sample_blob_centers(rng: np.random.Generator, n_blobs: int, region_fraction: float) -> np.ndarray:
    low = 0.5 - region_fraction / 2
    return rng.uniform(low, low + region_fraction, size=(n_blobs, 2))


def ic_gaussian_blobs(res: Resolution, n_blobs: int = 4, region_fraction: float = 0.6,
                      seed: Seed = 0) -> Tuple[np.ndarray, np.ndarray]:
    """
    Gray-Scott start state: `n_blobs` Gaussian bumps of species b centered in the middle `region_fraction` of the
    domain, species a filling the rest.

    Returns: (c_a, c_b) with c_a = 1 - c_b

    """
    if not 0 < region_fraction <= 1:
        raise InitialConditionRangeError(f'region_fraction={region_fraction} outside of (0, 1]')
    if n_blobs < 0:
        raise InitialConditionRangeError(f'n_blobs={n_blobs} must be non-negative')
    nx, ny = _resolution(res)
    rng = np.random.default_rng(seed)
    centers = sample_blob_centers(rng, n_blobs, region_fraction)
    sigmas = rng.uniform(*BLOB_SIGMA_RANGE, size=n_blobs)

    x = (np.arange(nx) / nx)[:, None]
    y = (np.arange(ny) / ny)[None, :]
    c_b = np.zeros((nx, ny))
    for (center_x, center_y), sigma in zip(centers, sigmas):
        c_b += np.exp(-((x - center_x) ** 2 + (y - center_y) ** 2) / (2 * sigma ** 2))
    c_b = np.clip(c_b, 0.0, 1.0)
    return 1.0 - c_b, c_b
