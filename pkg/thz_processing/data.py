"""
THz Volume Data
Volume container, binary file format, main-lobe cropping, synthetic ground
truth, pixel splits and parameter-map export.
"""

import contextlib
import hashlib
import logging
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, Optional, Tuple

import numpy as np
import pandas as pd
from PIL import Image

from .errors import (
    BadMagicError,
    DimensionMismatchError,
    ExportError,
    HeaderMismatchError,
    TruncatedPayloadError,
    WindowError,
)
from .model import (
    AMPLITUDE,
    DEPTH,
    PARAM_NAMES,
    PHASE,
    WIDTH,
    AcquisitionConfig,
    as_signal,
    forward,
    wrap_phase,
)

logger = logging.getLogger(__name__)

VOLUME_MAGIC = b"THZVOL\x00\x01"
VOLUME_VERSION = 1
# version, n_x, n_y, n_z, bytes per sample, omega, provenance length
VOLUME_HEADER = struct.Struct("<IIIIIdI")
SAMPLE_DTYPES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}

DEFAULT_WINDOW = 91


# ---------------------------------------------------------------------------
# Containers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ParamRanges:
    """Closed interval (lo, hi) per parameter"""

    amplitude: Tuple[float, float] = (0.1, 5.0)
    sigma: Tuple[float, float] = (0.05, 1.0)
    mu: Tuple[float, float] = (10.0, 80.0)
    phi: Tuple[float, float] = (-np.pi, np.pi)

    def __post_init__(self):
        for name in PARAM_NAMES:
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise ValueError(f"{name} range has lo > hi: ({lo}, {hi})")
        if self.amplitude[0] < 0:
            raise ValueError("amplitude lower bound must be >= 0")
        if self.sigma[0] <= 0:
            raise ValueError("sigma lower bound must be > 0")

    @property
    def lower(self) -> np.ndarray:
        return np.array([getattr(self, n)[0] for n in PARAM_NAMES], dtype=np.float64)

    @property
    def upper(self) -> np.ndarray:
        return np.array([getattr(self, n)[1] for n in PARAM_NAMES], dtype=np.float64)

    @property
    def midpoints(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    def check_grid(self, cfg: AcquisitionConfig):
        lo, hi = cfg.extent
        if self.mu[0] < lo or self.mu[1] > hi:
            raise ValueError(f"mu range {self.mu} leaves the grid extent ({lo}, {hi})")

    @classmethod
    def parse(cls, text: str) -> "ParamRanges":
        """Parse 'amplitude=0.1:5,mu=10:80' style overrides onto the defaults"""
        values = {}
        for item in filter(None, (part.strip() for part in text.split(","))):
            name, _, interval = item.partition("=")
            lo, _, hi = interval.partition(":")
            if name not in PARAM_NAMES or not hi:
                raise ValueError(f"bad range specification: {item!r}")
            values[name] = (float(lo), float(hi))
        return cls(**values)

    def to_dict(self) -> Dict:
        return {name: list(getattr(self, name)) for name in PARAM_NAMES}


@dataclass(frozen=True)
class NoiseSpec:
    """Additive complex Gaussian noise, i.i.d. per real channel"""

    sigma_noise: float = 0.0
    seed: int = 0
    model: str = "gaussian"

    def __post_init__(self):
        if self.sigma_noise < 0:
            raise ValueError(f"sigma_noise must be >= 0, got {self.sigma_noise}")


@dataclass(eq=False)
class THzVolume:
    """n_x x n_y x n_z x 2 real data tensor with its acquisition metadata"""

    data: np.ndarray
    cfg: AcquisitionConfig
    provenance: str = "measured"

    def __post_init__(self):
        data = np.array(self.data)
        if data.dtype not in (np.float32, np.float64):
            data = data.astype(np.float64)
        if data.ndim != 4 or data.shape[2:] != (self.cfg.n_z, 2):
            raise DimensionMismatchError(
                f"volume shape {data.shape} does not match (n_x, n_y, {self.cfg.n_z}, 2)"
            )
        if not np.isfinite(data).all():
            raise ValueError("volume contains non-finite samples")
        data.setflags(write=False)
        self.data = data

    @property
    def n_x(self) -> int:
        return self.data.shape[0]

    @property
    def n_y(self) -> int:
        return self.data.shape[1]

    @property
    def n_pixels(self) -> int:
        return self.n_x * self.n_y

    def pixel(self, x: int, y: int) -> np.ndarray:
        return np.asarray(self.data[x, y], dtype=np.float64)

    def flat_signals(self) -> np.ndarray:
        """All pixel signals as a (n_x * n_y, n_z, 2) float64 array, x-major"""
        return np.asarray(self.data, dtype=np.float64).reshape(-1, self.cfg.n_z, 2)

    def checksum(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.data).tobytes()).hexdigest()

    def __eq__(self, other):
        if not isinstance(other, THzVolume):
            return NotImplemented
        return (
            self.cfg == other.cfg
            and self.provenance == other.provenance
            and self.data.dtype == other.data.dtype
            and np.array_equal(self.data, other.data)
        )


@dataclass(eq=False)
class ParamMap:
    """n_x x n_y x 4 parameter tensor, layout [amplitude, sigma, mu, phi]"""

    params: np.ndarray

    def __post_init__(self):
        params = np.array(self.params, dtype=np.float64, copy=True)
        if params.ndim != 3 or params.shape[2] != 4:
            raise DimensionMismatchError(f"parameter map needs shape (n_x, n_y, 4), got {params.shape}")
        if not np.isfinite(params).all():
            raise ValueError("parameter map contains non-finite values")
        if (params[..., AMPLITUDE] < 0).any():
            raise ValueError("parameter map has negative amplitudes")
        if (params[..., WIDTH] <= 0).any():
            raise ValueError("parameter map has non-positive sigma")
        params[..., PHASE] = wrap_phase(params[..., PHASE])
        self.params = params

    @property
    def shape(self) -> Tuple[int, int]:
        return self.params.shape[0], self.params.shape[1]

    @property
    def amplitude(self) -> np.ndarray:
        return self.params[..., AMPLITUDE]

    @property
    def sigma(self) -> np.ndarray:
        return self.params[..., WIDTH]

    @property
    def mu(self) -> np.ndarray:
        return self.params[..., DEPTH]

    @property
    def phi(self) -> np.ndarray:
        return self.params[..., PHASE]

    def intensity(self) -> np.ndarray:
        return self.amplitude ** 2

    def grids(self) -> Dict[str, np.ndarray]:
        """Named 2-D grids for export, intensity included"""
        named = {name: self.params[..., i] for i, name in enumerate(PARAM_NAMES)}
        named["intensity"] = self.intensity()
        return named


@dataclass(eq=False)
class RegionMask:
    """Named boolean pixel selection used for region averages"""

    name: str
    mask: np.ndarray = field(repr=False)

    def __post_init__(self):
        mask = np.asarray(self.mask, dtype=bool)
        if mask.ndim != 2:
            raise DimensionMismatchError(f"mask {self.name!r} must be 2-D, got shape {mask.shape}")
        if not mask.any():
            raise ValueError(f"mask {self.name!r} selects no pixels")
        self.mask = mask

    @property
    def count(self) -> int:
        return int(self.mask.sum())


# ---------------------------------------------------------------------------
# Atomic writes
# ---------------------------------------------------------------------------


@contextlib.contextmanager
def atomic_path(path) -> Iterator[Path]:
    """Yield a temporary sibling of path; move it into place on success"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    os.close(fd)
    tmp = Path(tmp_name)
    try:
        yield tmp
        os.replace(tmp, path)
    except OSError as e:
        tmp.unlink(missing_ok=True)
        raise ExportError(f"could not write {path}: {e}") from e
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------


def crop_window(raw_trace, window: int = DEFAULT_WINDOW) -> Tuple[np.ndarray, int]:
    """
    Crop `window` samples centred on the main lobe of a long trace.

    The main lobe is the sample of largest complex magnitude (smallest index on
    ties). Windows that would run past either end are clamped to the trace, so
    the returned offset is the start index of the crop within the trace.
    """
    trace = np.asarray(raw_trace)
    if trace.size == 0:
        raise WindowError("empty trace")
    trace = as_signal(trace)
    if trace.ndim != 2:
        raise WindowError(f"expected one trace of shape (L, 2), got {trace.shape}")
    length = trace.shape[0]
    if window < 1 or window % 2 == 0:
        raise WindowError(f"window must be a positive odd count, got {window}")
    if window > length:
        raise WindowError(f"window too large: {window} > trace length {length}")

    center = int(np.argmax(np.hypot(trace[:, 0], trace[:, 1])))
    offset = min(max(center - window // 2, 0), length - window)
    return trace[offset:offset + window].copy(), offset


def crop_traces(raw: np.ndarray, window: int = DEFAULT_WINDOW, omega: float = 2.0,
                provenance: str = "measured") -> Tuple[THzVolume, np.ndarray]:
    """Crop every trace of an (n_x, n_y, L, 2) stack; returns the volume and offsets"""
    raw = np.asarray(raw)
    if raw.ndim != 4 or raw.shape[-1] != 2:
        raise DimensionMismatchError(f"raw stack needs shape (n_x, n_y, L, 2), got {raw.shape}")
    n_x, n_y = raw.shape[:2]
    cropped = np.empty((n_x, n_y, window, 2), dtype=np.float64)
    offsets = np.empty((n_x, n_y), dtype=np.int64)
    for x in range(n_x):
        for y in range(n_y):
            cropped[x, y], offsets[x, y] = crop_window(raw[x, y], window)
    cfg = AcquisitionConfig.default(n_z=window, omega=omega)
    logger.info("Cropped %d traces to %d samples", n_x * n_y, window)
    return THzVolume(cropped, cfg, provenance), offsets


def raw_intensity(volume: THzVolume) -> np.ndarray:
    """Intensity read straight from the data: peak |g|^2 over depth per pixel"""
    data = np.asarray(volume.data, dtype=np.float64)
    return np.max(data[..., 0] ** 2 + data[..., 1] ** 2, axis=2)


# ---------------------------------------------------------------------------
# Synthetic ground truth
# ---------------------------------------------------------------------------


def sample_truth(rng_seed: int, ranges: ParamRanges, n_x: int, n_y: int) -> ParamMap:
    """Uniform i.i.d. parameters per pixel within ranges"""
    rng = np.random.default_rng(rng_seed)
    params = np.empty((n_x, n_y, 4), dtype=np.float64)
    for i, name in enumerate(PARAM_NAMES):
        lo, hi = getattr(ranges, name)
        params[..., i] = rng.uniform(lo, hi, size=(n_x, n_y))
    return ParamMap(params)


def synthesize_volume(truth: ParamMap, cfg: AcquisitionConfig, noise: NoiseSpec) -> THzVolume:
    """Evaluate the model at every pixel and add seeded Gaussian noise"""
    data = forward(truth.params, cfg)
    if noise.sigma_noise > 0:
        rng = np.random.default_rng(noise.seed)
        data = data + rng.normal(0.0, noise.sigma_noise, size=data.shape)
    provenance = f"synthetic seed={noise.seed} noise={noise.model} sigma_noise={noise.sigma_noise!r}"
    return THzVolume(data, cfg, provenance)


def material_layout(n_x: int, n_y: int, cfg: AcquisitionConfig, seed: int = 0,
                    tilt: float = 6.0) -> Tuple[ParamMap, Dict[str, RegionMask]]:
    """
    Two-material target: a bright "metal" block on a dim "pcb" background.

    The surface is a slightly tilted plane around the grid midpoint, so depth
    varies smoothly and mostly falls between grid samples. Amplitudes carry a
    seeded 2% roughness.
    """
    rng = np.random.default_rng(seed)
    xs, ys = np.meshgrid(np.linspace(-0.5, 0.5, n_x), np.linspace(-0.5, 0.5, n_y), indexing="ij")

    metal = (np.abs(xs) < 0.3) & (np.abs(ys) < 0.3)
    amplitude = np.where(metal, 3.0, 0.8) * (1.0 + 0.02 * rng.standard_normal((n_x, n_y)))
    sigma = np.where(metal, 0.3, 0.25)
    mu = cfg.midpoint + tilt * (0.8 * xs + 0.2 * ys)
    phi = wrap_phase(0.4 + 0.5 * xs - 0.3 * ys)

    truth = ParamMap(np.stack([np.abs(amplitude), sigma, mu, phi], axis=-1))
    masks = {"all": RegionMask("all", np.ones((n_x, n_y), dtype=bool))}
    if metal.any():
        masks["metal"] = RegionMask("metal", metal)
    if (~metal).any():
        masks["pcb"] = RegionMask("pcb", ~metal)
    return truth, masks


def step_layout(n_x: int, n_y: int, cfg: AcquisitionConfig, n_steps: int = 5,
                seed: int = 0) -> Tuple[ParamMap, Dict[str, RegionMask]]:
    """
    Staircase target: bands along x, each at its own flat depth.

    Depths are evenly spaced over the middle half of the grid with a
    quarter-sample offset so no step sits on a sample. Neighbouring bands
    differ by a sharp jump, and pixels on either side of a jump form the
    "edges" mask.
    """
    if n_steps < 1 or n_steps > n_x:
        raise ValueError(f"n_steps must lie in [1, {n_x}], got {n_steps}")
    rng = np.random.default_rng(seed)
    lo, hi = cfg.extent
    spacing = (hi - lo) / max(cfg.n_z - 1, 1)
    depths = np.linspace(lo + 0.25 * (hi - lo), hi - 0.25 * (hi - lo), n_steps) + 0.25 * spacing

    band = np.minimum(np.arange(n_x) * n_steps // n_x, n_steps - 1)
    band_map = np.repeat(band[:, None], n_y, axis=1)
    amplitude = 2.0 * (1.0 + 0.02 * rng.standard_normal((n_x, n_y)))
    sigma = np.full((n_x, n_y), 0.3)
    mu = depths[band_map]
    phi = np.full((n_x, n_y), 0.4)

    truth = ParamMap(np.stack([np.abs(amplitude), sigma, mu, phi], axis=-1))
    masks = {"all": RegionMask("all", np.ones((n_x, n_y), dtype=bool))}
    for k in range(n_steps):
        masks[f"step{k}"] = RegionMask(f"step{k}", band_map == k)
    jump = np.zeros(n_x, dtype=bool)
    jump[:-1] |= band[1:] != band[:-1]
    jump[1:] |= band[1:] != band[:-1]
    if jump.any():
        masks["edges"] = RegionMask("edges", np.repeat(jump[:, None], n_y, axis=1))
    return truth, masks


def split_pixels(n_pixels: int, train_fraction: float, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """Seeded shuffled split; train size rounds half up"""
    if not 0 < train_fraction < 1:
        raise ValueError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    n_train = int(np.floor(train_fraction * n_pixels + 0.5))
    order = np.random.default_rng(seed).permutation(n_pixels)
    return order[:n_train], order[n_train:]


# ---------------------------------------------------------------------------
# Volume file format
# ---------------------------------------------------------------------------


def save_volume(volume: THzVolume, path) -> Path:
    """Write a volume; samples keep their in-memory precision (float32 or float64)"""
    path = Path(path)
    width = volume.data.dtype.itemsize
    provenance = volume.provenance.encode("utf-8")
    header = VOLUME_HEADER.pack(
        VOLUME_VERSION, volume.n_x, volume.n_y, volume.cfg.n_z, width, volume.cfg.omega, len(provenance)
    )
    with atomic_path(path) as tmp:
        with open(tmp, "wb") as f:
            f.write(VOLUME_MAGIC)
            f.write(header)
            f.write(np.asarray(volume.cfg.z_grid, dtype="<f8").tobytes())
            f.write(provenance)
            f.write(np.ascontiguousarray(volume.data, dtype=SAMPLE_DTYPES[width]).tobytes())
    logger.info("Saved volume %s (%dx%dx%d, %d-byte samples)", path, volume.n_x, volume.n_y,
                volume.cfg.n_z, width)
    return path


def _take(blob: bytes, start: int, count: int, what: str) -> bytes:
    if start + count > len(blob):
        raise TruncatedPayloadError(f"truncated {what}: need {start + count} bytes, file has {len(blob)}")
    return blob[start:start + count]


def load_volume(path) -> THzVolume:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise ExportError(f"could not read {path}: {e}") from e

    if blob[:len(VOLUME_MAGIC)] != VOLUME_MAGIC:
        raise BadMagicError(f"bad magic in {path}")
    pos = len(VOLUME_MAGIC)
    version, n_x, n_y, n_z, width, omega, prov_len = VOLUME_HEADER.unpack(
        _take(blob, pos, VOLUME_HEADER.size, "header")
    )
    pos += VOLUME_HEADER.size
    if version != VOLUME_VERSION:
        raise HeaderMismatchError(f"unsupported volume version {version} in {path}")
    if width not in SAMPLE_DTYPES or n_z == 0:
        raise HeaderMismatchError(f"inconsistent header in {path}: n_z={n_z}, sample width={width}")

    z_grid = np.frombuffer(_take(blob, pos, 8 * n_z, "z grid"), dtype="<f8")
    pos += 8 * n_z
    provenance = _take(blob, pos, prov_len, "provenance").decode("utf-8")
    pos += prov_len

    expected = n_x * n_y * n_z * 2 * width
    remaining = len(blob) - pos
    if remaining < expected:
        raise TruncatedPayloadError(f"truncated payload in {path}: {remaining} of {expected} bytes")
    if remaining > expected:
        raise HeaderMismatchError(
            f"header of {path} declares {expected} payload bytes but file carries {remaining}"
        )
    data = np.frombuffer(blob, dtype=SAMPLE_DTYPES[width], count=n_x * n_y * n_z * 2, offset=pos)
    data = data.reshape(n_x, n_y, n_z, 2).astype(np.float32 if width == 4 else np.float64)

    try:
        cfg = AcquisitionConfig(z_grid=z_grid.copy(), omega=omega)
    except ValueError as e:
        raise HeaderMismatchError(f"invalid acquisition header in {path}: {e}") from e
    return THzVolume(data, cfg, provenance)


# ---------------------------------------------------------------------------
# Parameter maps and masks
# ---------------------------------------------------------------------------


def save_param_map(pm: ParamMap, path) -> Path:
    path = Path(path)
    with atomic_path(path) as tmp:
        with open(tmp, "wb") as f:
            np.save(f, pm.params)
    return path


def load_param_map(path) -> ParamMap:
    try:
        return ParamMap(np.load(Path(path)))
    except OSError as e:
        raise ExportError(f"could not read parameter map {path}: {e}") from e


def save_grid_csv(grid: np.ndarray, path) -> Path:
    """One CSV row per grid row, full round-trip precision"""
    path = Path(path)
    with atomic_path(path) as tmp:
        pd.DataFrame(np.asarray(grid)).to_csv(
            tmp, header=False, index=False, float_format="%.17g", lineterminator="\n"
        )
    return path


def load_grid_csv(path) -> np.ndarray:
    try:
        return pd.read_csv(Path(path), header=None).to_numpy()
    except (OSError, pd.errors.ParserError) as e:
        raise ExportError(f"could not read grid {path}: {e}") from e


def to_gray8(grid: np.ndarray) -> np.ndarray:
    """Min/max normalise a grid to 8-bit; a constant grid maps to mid gray"""
    grid = np.asarray(grid, dtype=np.float64)
    lo, hi = float(grid.min()), float(grid.max())
    if hi - lo <= 0:
        return np.full(grid.shape, 128, dtype=np.uint8)
    return np.rint((grid - lo) / (hi - lo) * 255.0).astype(np.uint8)


def save_pgm(grid: np.ndarray, path) -> Path:
    path = Path(path)
    with atomic_path(path) as tmp:
        Image.fromarray(to_gray8(grid)).save(tmp, format="PPM")
    return path


def save_mask(mask: RegionMask, path) -> Path:
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        with atomic_path(path) as tmp:
            Image.fromarray(mask.mask.astype(np.uint8) * 255).save(tmp, format="PPM")
        return path
    return save_grid_csv(mask.mask.astype(np.int64), path)


def load_mask(path, name: Optional[str] = None) -> RegionMask:
    """Read a boolean grid from PGM (nonzero = in region) or CSV"""
    path = Path(path)
    name = name or path.stem
    if path.suffix.lower() == ".pgm":
        try:
            with Image.open(path) as img:
                grid = np.asarray(img)
        except OSError as e:
            raise ExportError(f"could not read mask {path}: {e}") from e
    else:
        grid = load_grid_csv(path)
    return RegionMask(name, grid != 0)


def export_param_maps(pm: ParamMap, directory) -> Dict[str, Path]:
    """Write a CSV grid and an 8-bit PGM image for each parameter and the intensity"""
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ExportError(f"could not create {directory}: {e}") from e

    written = {}
    for name, grid in pm.grids().items():
        written[f"{name}.csv"] = save_grid_csv(grid, directory / f"{name}.csv")
        written[f"{name}.pgm"] = save_pgm(grid, directory / f"{name}.pgm")
    logger.info("Exported %d files to %s", len(written), directory)
    return written
