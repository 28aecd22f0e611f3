"""
Trust-Region Fitting
Bounded per-pixel nonlinear least squares with a dogleg step on the
Gauss-Newton model, the sequential initialisation heuristic, and volume-scale
fitting over a process pool.
"""

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from .data import ParamMap, ParamRanges, THzVolume
from .errors import DimensionMismatchError, SolverError
from .model import (
    PHASE,
    SIGMA_FLOOR,
    TWO_PI,
    WIDTH,
    AcquisitionConfig,
    PixelParams,
    as_param_array,
    jacobian,
    pixel_loss,
    residual,
    wrap_phase,
)

logger = logging.getLogger(__name__)

STATUS_GRADIENT = "converged-gradient"
STATUS_STEP = "converged-step"
STATUS_MAX_ITERS = "max-iters"
STATUSES = (STATUS_GRADIENT, STATUS_STEP, STATUS_MAX_ITERS)

# Acceptance and radius schedule
ACCEPT_RATIO = 0.05
SHRINK_RATIO = 0.25
EXPAND_RATIO = 0.75
SHRINK_FACTOR = 0.25
EXPAND_FACTOR = 2.0
SINGULAR_CONDITION = 1e12

# sinc(t)^2 = 1/2 at t = HALF_POWER_T
HALF_POWER_T = 0.4429446918
SIGMA_DEFAULT = 0.5


@dataclass(frozen=True)
class FitOptions:
    bounds: ParamRanges
    max_iters: int = 400
    gradient_tol: float = 1e-8
    step_tol: float = 1e-10
    initial_radius: float = 1.0

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError(f"max_iters must be >= 1, got {self.max_iters}")
        if not (self.gradient_tol > 0 and self.step_tol > 0 and self.initial_radius > 0):
            raise ValueError("tolerances and initial radius must be positive")

    @property
    def periodic_phase(self) -> bool:
        """Phase moves freely (and is wrapped) when its bounds span a full period"""
        lo, hi = self.bounds.phi
        return hi - lo >= TWO_PI - 1e-12

    @property
    def lower(self) -> np.ndarray:
        lower = self.bounds.lower
        lower[WIDTH] = max(lower[WIDTH], SIGMA_FLOOR)
        if self.periodic_phase:
            lower[PHASE] = -np.inf
        return lower

    @property
    def upper(self) -> np.ndarray:
        upper = self.bounds.upper
        if self.periodic_phase:
            upper[PHASE] = np.inf
        return upper


def default_fit_options(cfg: AcquisitionConfig, **overrides) -> FitOptions:
    """Physical bounds: amplitude >= 0, sigma >= 1e-3, mu on the grid, phase periodic"""
    bounds = ParamRanges(
        amplitude=(0.0, np.inf),
        sigma=(SIGMA_FLOOR, np.inf),
        mu=cfg.extent,
        phi=(-np.pi, np.pi),
    )
    return FitOptions(bounds=bounds, **overrides)


@dataclass
class FitReport:
    final_loss: float
    initial_loss: float
    iterations: int
    status: str
    wall_time: float


@dataclass
class FitReports:
    """Per-pixel fit reports laid out on the image grid"""

    final_loss: np.ndarray
    initial_loss: np.ndarray
    iterations: np.ndarray
    status: np.ndarray
    wall_time: np.ndarray
    total_wall_time: float = 0.0
    workers: int = 1

    def summary(self) -> pd.DataFrame:
        counts = pd.Series(self.status.ravel()).value_counts().reindex(STATUSES, fill_value=0)
        return pd.DataFrame({
            "pixels": [self.final_loss.size],
            "mean_initial_loss": [float(self.initial_loss.mean())],
            "mean_final_loss": [float(self.final_loss.mean())],
            "mean_iterations": [float(self.iterations.mean())],
            **{status: [int(counts[status])] for status in STATUSES},
            "wall_time": [self.total_wall_time],
            "workers": [self.workers],
        })


# ---------------------------------------------------------------------------
# Initialisation
# ---------------------------------------------------------------------------


def _half_power_crossing(z: np.ndarray, power: np.ndarray, peak: int, step: int) -> Optional[float]:
    half = 0.5 * power[peak]
    i = peak
    while 0 <= i + step < power.size:
        j = i + step
        if power[j] <= half:
            # linear interpolation between i (above) and j (at or below)
            frac = (power[i] - half) / (power[i] - power[j])
            return z[i] + frac * (z[j] - z[i])
        i = j
    return None


def init_heuristic(g: np.ndarray, cfg: AcquisitionConfig,
                   sigma_default: float = SIGMA_DEFAULT) -> PixelParams:
    """
    Sequential estimate: depth and amplitude from the peak magnitude, phase
    from the peak sample, pulse width from the half-power main-lobe width.
    """
    g = np.asarray(g, dtype=np.float64)
    if g.shape != (cfg.n_z, 2):
        raise DimensionMismatchError(f"signal shape {g.shape} does not match n_z={cfg.n_z}")
    power = g[:, 0] ** 2 + g[:, 1] ** 2
    peak = int(np.argmax(power))
    if power[peak] == 0:
        return PixelParams(0.0, sigma_default, cfg.midpoint, 0.0)

    z = cfg.z_grid
    mu0 = z[peak]
    amplitude0 = np.sqrt(power[peak])
    phi0 = wrap_phase(np.arctan2(g[peak, 1], g[peak, 0]) + cfg.omega * mu0)

    left = _half_power_crossing(z, power, peak, -1)
    right = _half_power_crossing(z, power, peak, +1)
    if left is not None and right is not None:
        half_width = 0.5 * (right - left)
    elif left is not None:
        half_width = mu0 - left
    elif right is not None:
        half_width = right - mu0
    else:
        half_width = None
    sigma0 = HALF_POWER_T / half_width if half_width else sigma_default

    return PixelParams(amplitude0, max(sigma0, SIGMA_FLOOR), mu0, phi0)


# ---------------------------------------------------------------------------
# Trust-region subproblem
# ---------------------------------------------------------------------------


def _levenberg_marquardt_step(hess: np.ndarray, grad: np.ndarray, radius: float) -> np.ndarray:
    """Smallest damping whose step fits in the radius, by bisection on log(lambda)"""
    eigvals, eigvecs = np.linalg.eigh(hess)
    eigvals = np.maximum(eigvals, 0.0)
    coeffs = eigvecs.T @ grad

    def step(lam):
        return -eigvecs @ (coeffs / (eigvals + lam))

    scale = max(float(eigvals.max()), 1.0)
    lo, hi = 1e-12 * scale, 1e-12 * scale
    while np.linalg.norm(step(hi)) > radius and hi < 1e30:
        lo, hi = hi, hi * 10.0
    if hi == lo:
        return step(hi)
    for _ in range(60):
        mid = np.sqrt(lo * hi)
        if np.linalg.norm(step(mid)) > radius:
            lo = mid
        else:
            hi = mid
    return step(hi)


def dogleg_step(jac: np.ndarray, res: np.ndarray, radius: float) -> np.ndarray:
    """
    Approximate minimiser of ||res + jac s||^2 subject to ||s|| <= radius.

    Falls back to a damped (Levenberg-Marquardt) step when jac^T jac is
    near-singular.
    """
    grad = jac.T @ res
    grad_norm = np.linalg.norm(grad)
    if grad_norm == 0:
        return np.zeros_like(grad)
    hess = jac.T @ jac

    with np.errstate(divide="ignore", invalid="ignore"):
        condition = np.linalg.cond(hess)
    if not np.isfinite(condition) or condition > SINGULAR_CONDITION:
        return _levenberg_marquardt_step(hess, grad, radius)

    gauss_newton = np.linalg.solve(hess, -grad)
    if np.linalg.norm(gauss_newton) <= radius:
        return gauss_newton

    jg = jac @ grad
    cauchy = -(grad_norm ** 2 / (jg @ jg)) * grad
    cauchy_norm = np.linalg.norm(cauchy)
    if cauchy_norm >= radius:
        return -(radius / grad_norm) * grad

    # ||cauchy + tau (gauss_newton - cauchy)|| = radius, tau in [0, 1]
    leg = gauss_newton - cauchy
    a = leg @ leg
    b = 2.0 * (cauchy @ leg)
    c = cauchy_norm ** 2 - radius ** 2
    tau = (-b + np.sqrt(b * b - 4.0 * a * c)) / (2.0 * a)
    return cauchy + tau * leg


# ---------------------------------------------------------------------------
# Per-pixel fit
# ---------------------------------------------------------------------------


def _projected_gradient(x: np.ndarray, grad: np.ndarray, lower: np.ndarray, upper: np.ndarray) -> np.ndarray:
    return x - np.clip(x - grad, lower, upper)


def fit_pixel(g: np.ndarray, init: Union[PixelParams, np.ndarray], opts: FitOptions,
              cfg: AcquisitionConfig) -> Tuple[PixelParams, FitReport]:
    """
    Bounded trust-region fit of one pixel.

    Steps are taken in coordinates scaled by the running Jacobian column norms,
    projected onto the bounds, and accepted only when they reduce the loss, so
    the loss never increases over the iterations.
    """
    started = time.perf_counter()
    g = np.asarray(g, dtype=np.float64)
    lower, upper = opts.lower, opts.upper
    x = np.clip(np.array(as_param_array(init), dtype=np.float64), lower, upper)

    loss = pixel_loss(x, g, cfg)
    if not np.isfinite(loss):
        raise SolverError("invalid start")
    initial_loss = loss

    radius = opts.initial_radius
    scale = np.ones(4)
    iterations = 0
    status = None

    while iterations < opts.max_iters:
        res = residual(x, g, cfg)
        jac = jacobian(x, cfg)
        grad = 2.0 * jac.T @ res
        if np.max(np.abs(_projected_gradient(x, grad, lower, upper))) <= opts.gradient_tol:
            status = STATUS_GRADIENT
            break

        iterations += 1
        col_norms = np.linalg.norm(jac, axis=0)
        scale = np.maximum(scale, np.where(col_norms > 0, col_norms, 1.0))

        scaled_step = dogleg_step(jac / scale, res, radius)
        trial = np.clip(x + scaled_step / scale, lower, upper)
        step = trial - x
        step_norm = np.linalg.norm(scale * step)

        predicted = res @ res - np.sum((res + jac @ step) ** 2)
        trial_loss = pixel_loss(trial, g, cfg)
        actual = loss - trial_loss
        ratio = actual / predicted if predicted > 0 else -np.inf

        if ratio > ACCEPT_RATIO and actual > 0:
            x, loss = trial, trial_loss
            if np.linalg.norm(step) <= opts.step_tol * (np.linalg.norm(x) + opts.step_tol):
                status = STATUS_STEP
                break

        if ratio < SHRINK_RATIO:
            radius *= SHRINK_FACTOR
        elif ratio > EXPAND_RATIO and np.linalg.norm(scaled_step) >= 0.99 * radius:
            radius *= EXPAND_FACTOR
        if step_norm < 0.5 * np.linalg.norm(scaled_step):
            # projection cut the step short
            radius = min(radius, max(step_norm, 0.5 * radius))

        if radius <= opts.step_tol * (np.linalg.norm(scale * x) + opts.step_tol):
            status = STATUS_STEP
            break

    if status is None:
        grad = 2.0 * jacobian(x, cfg).T @ residual(x, g, cfg)
        converged = np.max(np.abs(_projected_gradient(x, grad, lower, upper))) <= opts.gradient_tol
        status = STATUS_GRADIENT if converged else STATUS_MAX_ITERS

    if opts.periodic_phase:
        x[PHASE] = wrap_phase(x[PHASE])
    report = FitReport(
        final_loss=float(loss),
        initial_loss=float(initial_loss),
        iterations=iterations,
        status=status,
        wall_time=time.perf_counter() - started,
    )
    return PixelParams.from_array(x), report


# ---------------------------------------------------------------------------
# Volume fit
# ---------------------------------------------------------------------------


def _fit_chunk(signals: np.ndarray, inits: Optional[np.ndarray], opts: FitOptions,
               cfg: AcquisitionConfig) -> List[Tuple[np.ndarray, FitReport]]:
    results = []
    for k, g in enumerate(signals):
        start = init_heuristic(g, cfg) if inits is None else inits[k]
        params, report = fit_pixel(g, start, opts, cfg)
        results.append((params.as_array(), report))
    return results


def fit_volume(v: THzVolume, opts: FitOptions, init_source: Union[str, ParamMap] = "heuristic",
               workers: int = 1, chunk_rows: int = 1) -> Tuple[ParamMap, FitReports]:
    """
    Fit every pixel independently.

    Rows are dispatched in chunks to a process pool when workers > 1; results
    are gathered in row order, so the output equals a sequential run.
    """
    if isinstance(init_source, ParamMap):
        if init_source.shape != (v.n_x, v.n_y):
            raise DimensionMismatchError(
                f"initial map {init_source.shape} does not match volume ({v.n_x}, {v.n_y})"
            )
        inits = init_source.params.reshape(v.n_x, v.n_y, 4)
    elif init_source == "heuristic":
        inits = None
    else:
        raise ValueError(f"unknown init source {init_source!r}")

    signals = np.asarray(v.data, dtype=np.float64)
    row_chunks = [range(i, min(i + chunk_rows, v.n_x)) for i in range(0, v.n_x, chunk_rows)]
    tasks = [
        (signals[r.start:r.stop].reshape(-1, v.cfg.n_z, 2),
         None if inits is None else inits[r.start:r.stop].reshape(-1, 4))
        for r in row_chunks
    ]

    started = time.perf_counter()
    results = []
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_fit_chunk, s, i, opts, v.cfg) for s, i in tasks]
            for n, future in enumerate(futures, 1):
                results.extend(future.result())
                if n % max(1, len(futures) // 10) == 0:
                    logger.info("Fitted rows %d/%d", n * chunk_rows, v.n_x)
    else:
        for n, (s, i) in enumerate(tasks, 1):
            results.extend(_fit_chunk(s, i, opts, v.cfg))
            if n % max(1, len(tasks) // 10) == 0:
                logger.info("Fitted rows %d/%d", min(n * chunk_rows, v.n_x), v.n_x)
    total = time.perf_counter() - started

    shape = (v.n_x, v.n_y)
    params = np.stack([p for p, _ in results]).reshape(shape + (4,))
    reports = [r for _, r in results]
    fit_reports = FitReports(
        final_loss=np.array([r.final_loss for r in reports]).reshape(shape),
        initial_loss=np.array([r.initial_loss for r in reports]).reshape(shape),
        iterations=np.array([r.iterations for r in reports], dtype=np.int64).reshape(shape),
        status=np.array([r.status for r in reports]).reshape(shape),
        wall_time=np.array([r.wall_time for r in reports]).reshape(shape),
        total_wall_time=total,
        workers=workers,
    )
    logger.info("Fitted %d pixels in %.2fs with %d worker(s)", v.n_pixels, total, workers)
    return ParamMap(params), fit_reports
