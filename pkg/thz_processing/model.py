"""
Physics Model
Sinc-envelope reflection model of an FMCW THz depth profile:

    f(z) = e * sinc(sigma * (z - mu)) * exp(-i * (omega * z - phi))

Complex samples are stored as planar (real, imag) pairs along a trailing axis
of length 2, so one pixel's signal is an (n_z, 2) float64 array. Every function
here broadcasts over leading axes: parameters of shape (..., 4) produce
signals of shape (..., n_z, 2).
"""

from dataclasses import dataclass, field
from typing import Tuple, Union

import numpy as np

from .errors import DimensionMismatchError

# Parameter layout used by every array in the package
AMPLITUDE, WIDTH, DEPTH, PHASE = 0, 1, 2, 3
PARAM_NAMES = ("amplitude", "sigma", "mu", "phi")

SINC_SERIES_SWITCH = 1e-6
SIGMA_FLOOR = 1e-3
TWO_PI = 2.0 * np.pi


def wrap_phase(phi):
    """Reduce phase to the canonical interval [-pi, pi)"""
    phi = np.asarray(phi, dtype=np.float64)
    wrapped = np.mod(phi + np.pi, TWO_PI) - np.pi
    # mod can round up to exactly 2*pi for tiny negative inputs
    wrapped = np.where(wrapped >= np.pi, wrapped - TWO_PI, wrapped)
    # values already in range pass through untouched, so wrapping is idempotent
    wrapped = np.where((phi >= -np.pi) & (phi < np.pi), phi, wrapped)
    return wrapped if wrapped.ndim else float(wrapped)


@dataclass(frozen=True)
class PixelParams:
    """The four unknowns of one pixel"""

    amplitude: float
    sigma: float
    mu: float
    phi: float

    def __post_init__(self):
        if not np.isfinite([self.amplitude, self.sigma, self.mu, self.phi]).all():
            raise ValueError(f"non-finite parameters: {self}")
        if self.amplitude < 0:
            raise ValueError(f"amplitude must be >= 0, got {self.amplitude}")
        if self.sigma <= 0:
            raise ValueError(f"sigma must be > 0, got {self.sigma}")
        object.__setattr__(self, "amplitude", float(self.amplitude))
        object.__setattr__(self, "sigma", float(self.sigma))
        object.__setattr__(self, "mu", float(self.mu))
        object.__setattr__(self, "phi", wrap_phase(self.phi))

    def as_array(self) -> np.ndarray:
        return np.array([self.amplitude, self.sigma, self.mu, self.phi], dtype=np.float64)

    @classmethod
    def from_array(cls, values) -> "PixelParams":
        values = np.asarray(values, dtype=np.float64)
        return cls(*(float(v) for v in values[:4]))


@dataclass(frozen=True, eq=False)
class AcquisitionConfig:
    """Depth sampling grid and carrier frequency of the acquisition"""

    z_grid: np.ndarray
    omega: float = 2.0
    n_z: int = field(init=False)

    def __post_init__(self):
        z_grid = np.asarray(self.z_grid, dtype=np.float64)
        if z_grid.ndim != 1 or z_grid.size == 0:
            raise ValueError("z_grid must be a nonempty 1-D vector")
        if z_grid.size > 1 and not np.all(np.diff(z_grid) > 0):
            raise ValueError("z_grid must be strictly increasing")
        if not np.isfinite(z_grid).all():
            raise ValueError("z_grid must be finite")
        if not (self.omega > 0 and np.isfinite(self.omega)):
            raise ValueError(f"omega must be positive, got {self.omega}")
        z_grid.setflags(write=False)
        object.__setattr__(self, "z_grid", z_grid)
        object.__setattr__(self, "omega", float(self.omega))
        object.__setattr__(self, "n_z", int(z_grid.size))

    @classmethod
    def default(cls, n_z: int = 91, omega: float = 2.0) -> "AcquisitionConfig":
        return cls(z_grid=np.arange(n_z, dtype=np.float64), omega=omega)

    @property
    def extent(self) -> Tuple[float, float]:
        return float(self.z_grid[0]), float(self.z_grid[-1])

    @property
    def midpoint(self) -> float:
        lo, hi = self.extent
        return 0.5 * (lo + hi)

    def __eq__(self, other):
        if not isinstance(other, AcquisitionConfig):
            return NotImplemented
        return self.omega == other.omega and np.array_equal(self.z_grid, other.z_grid)

    def to_dict(self) -> dict:
        return {"n_z": self.n_z, "omega": self.omega, "z_grid": self.z_grid.tolist()}


ParamsLike = Union[PixelParams, np.ndarray]


def as_param_array(p: ParamsLike) -> np.ndarray:
    if isinstance(p, PixelParams):
        return p.as_array()
    arr = np.asarray(p, dtype=np.float64)
    if arr.shape[-1:] != (4,):
        raise DimensionMismatchError(f"parameters need a trailing axis of 4, got shape {arr.shape}")
    return arr


def as_signal(samples, cfg: AcquisitionConfig = None) -> np.ndarray:
    """Convert complex or planar samples into an (..., n_z, 2) float64 signal"""
    arr = np.asarray(samples)
    if np.iscomplexobj(arr):
        arr = np.stack([arr.real, arr.imag], axis=-1)
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim < 2 or arr.shape[-1] != 2:
        raise DimensionMismatchError(f"signal needs a trailing (real, imag) axis, got shape {arr.shape}")
    if cfg is not None and arr.shape[-2] != cfg.n_z:
        raise DimensionMismatchError(f"signal has {arr.shape[-2]} samples, grid has {cfg.n_z}")
    if not np.isfinite(arr).all():
        raise ValueError("signal contains non-finite samples")
    return arr


def sinc(t):
    """Normalised sinc, exactly 1 at t = 0"""
    return np.sinc(t)


def sinc_deriv(t):
    """Derivative of sinc; Taylor series near zero to avoid cancellation"""
    t = np.asarray(t, dtype=np.float64)
    small = np.abs(t) <= SINC_SERIES_SWITCH
    safe_t = np.where(small, 1.0, t)
    closed = (np.cos(np.pi * safe_t) - np.sinc(safe_t)) / safe_t
    series = -(np.pi ** 2) * t / 3.0 + (np.pi ** 4) * t ** 3 / 30.0
    result = np.where(small, series, closed)
    return result if result.ndim else float(result)


def _phasor(params: np.ndarray, cfg: AcquisitionConfig) -> Tuple[np.ndarray, np.ndarray]:
    theta = params[..., PHASE, None] - cfg.omega * cfg.z_grid
    return np.cos(theta), np.sin(theta)


def forward(p: ParamsLike, cfg: AcquisitionConfig) -> np.ndarray:
    """Model signal for parameters p on the acquisition grid, shape (..., n_z, 2)"""
    params = as_param_array(p)
    envelope = params[..., AMPLITUDE, None] * np.sinc(
        params[..., WIDTH, None] * (cfg.z_grid - params[..., DEPTH, None])
    )
    cos_t, sin_t = _phasor(params, cfg)
    return np.stack([envelope * cos_t, envelope * sin_t], axis=-1)


def jacobian(p: ParamsLike, cfg: AcquisitionConfig) -> np.ndarray:
    """
    Derivatives of the flattened model signal, shape (..., 2 n_z, 4).

    Row 2i is the real part and row 2i+1 the imaginary part of sample i;
    columns follow the (amplitude, sigma, mu, phi) layout.
    """
    params = as_param_array(p)
    amp = params[..., AMPLITUDE, None]
    width = params[..., WIDTH, None]
    offset = cfg.z_grid - params[..., DEPTH, None]
    t = width * offset
    s = np.sinc(t)
    ds = sinc_deriv(t)
    cos_t, sin_t = _phasor(params, cfg)

    d_amp = s
    d_width = amp * ds * offset
    d_depth = -amp * ds * width
    envelope = amp * s

    real = np.stack([d_amp * cos_t, d_width * cos_t, d_depth * cos_t, -envelope * sin_t], axis=-1)
    imag = np.stack([d_amp * sin_t, d_width * sin_t, d_depth * sin_t, envelope * cos_t], axis=-1)
    # interleave (..., n_z, 2, 4) -> (..., 2 n_z, 4)
    jac = np.stack([real, imag], axis=-2)
    return jac.reshape(jac.shape[:-3] + (2 * cfg.n_z, 4))


def residual(p: ParamsLike, g: np.ndarray, cfg: AcquisitionConfig) -> np.ndarray:
    """Flattened model-minus-measurement residual, shape (..., 2 n_z)"""
    diff = forward(p, cfg) - g
    return diff.reshape(diff.shape[:-2] + (2 * cfg.n_z,))


def pixel_loss(p: ParamsLike, g: np.ndarray, cfg: AcquisitionConfig):
    """Squared norm of the residual over all real components"""
    g = np.asarray(g, dtype=np.float64)
    if g.shape[-2:] != (cfg.n_z, 2):
        raise DimensionMismatchError(f"signal shape {g.shape} does not match n_z={cfg.n_z}")
    r = residual(p, g, cfg)
    loss = np.einsum("...i,...i->...", r, r)
    return loss if loss.ndim else float(loss)


def loss_gradient(p: ParamsLike, g: np.ndarray, cfg: AcquisitionConfig) -> np.ndarray:
    """Gradient 2 J^T r of pixel_loss with respect to the four parameters"""
    g = np.asarray(g, dtype=np.float64)
    r = residual(p, g, cfg)
    jac = jacobian(p, cfg)
    return 2.0 * np.einsum("...ij,...i->...j", jac, r)


def intensity(p: ParamsLike):
    """Intensity e^2, the squared amplitude"""
    params = as_param_array(p)
    value = params[..., AMPLITUDE] ** 2
    return value if np.ndim(value) else float(value)


def canonicalize(p: ParamsLike, cfg: AcquisitionConfig = None) -> np.ndarray:
    """
    Map raw parameters onto their canonical representative.

    A negative amplitude becomes its magnitude with phase shifted by pi, and
    sigma becomes |sigma| (sinc is even); neither changes the signal. Sigma is
    then floored at SIGMA_FLOOR, phase wrapped, and mu clipped to the grid
    extent when cfg is given.
    """
    params = np.array(as_param_array(p), dtype=np.float64, copy=True)
    negative = params[..., AMPLITUDE] < 0
    params[..., PHASE] = np.where(negative, params[..., PHASE] + np.pi, params[..., PHASE])
    params[..., AMPLITUDE] = np.abs(params[..., AMPLITUDE])
    params[..., WIDTH] = np.maximum(np.abs(params[..., WIDTH]), SIGMA_FLOOR)
    params[..., PHASE] = wrap_phase(params[..., PHASE])
    if cfg is not None:
        lo, hi = cfg.extent
        params[..., DEPTH] = np.clip(params[..., DEPTH], lo, hi)
    return params
