"""
Model-Based Encoder
Per-pixel network predicting (amplitude, sigma, mu, phi) from one depth
profile, trained without ground truth by pushing its prediction through the
fixed physics model and minimising the reconstruction loss.

Layout: the real and imaginary channels each pass a dense + batch-norm +
leaky-ReLU branch, the two activations are concatenated, three more such
layers follow, and a dense head maps to four outputs. The absolute value of
the first output is the amplitude. A 1x1 convolution over an n_z-channel
image is exactly this dense layer applied to every pixel.

With canonical_pose set, each signal is first brought into a canonical pose
(unit peak magnitude, carrier and peak phase removed, peak on the centre
sample) and the network predicts parameters relative to that pose; the
offsets are added back before the physics model sees the prediction.
"""

import hashlib
import json
import logging
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from .data import ParamMap, THzVolume, atomic_path, split_pixels
from .errors import (
    ArchitectureMismatchError,
    BadMagicError,
    DimensionMismatchError,
    EncoderError,
    ExportError,
    HeaderMismatchError,
    TruncatedPayloadError,
)
from .model import (
    AMPLITUDE,
    DEPTH,
    PHASE,
    AcquisitionConfig,
    canonicalize,
    loss_gradient,
    pixel_loss,
    wrap_phase,
)

logger = logging.getLogger(__name__)

WEIGHTS_MAGIC = b"THZENC\x00\x01"
WEIGHTS_VERSION = 1
TRAIN, INFER = "train", "infer"

# amplitude over peak magnitude: 1 on grid, up to 1/sinc(sigma / 2) off grid
POSE_AMPLITUDE_RATIO = 1.1


@dataclass(frozen=True)
class EncoderArchitecture:
    n_z: int = 91
    branch_width: int = 64
    trunk_widths: Tuple[int, ...] = (128, 128, 64)
    leaky_slope: float = 0.01
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    dtype: str = "float32"
    canonical_pose: bool = True

    def layers(self) -> List[Tuple[str, int, int, bool]]:
        """(name, fan_in, fan_out, batch-normalised) in evaluation order"""
        specs = [
            ("branch_re", self.n_z, self.branch_width, True),
            ("branch_im", self.n_z, self.branch_width, True),
        ]
        width = 2 * self.branch_width
        for i, out in enumerate(self.trunk_widths):
            specs.append((f"trunk{i}", width, out, True))
            width = out
        specs.append(("head", width, 4, False))
        return specs

    def arch_hash(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(payload).hexdigest()

    def to_dict(self) -> Dict:
        d = asdict(self)
        d["trunk_widths"] = list(self.trunk_widths)
        return d

    @classmethod
    def from_dict(cls, d: Dict) -> "EncoderArchitecture":
        d = dict(d)
        d["trunk_widths"] = tuple(d["trunk_widths"])
        return cls(**d)


@dataclass
class EncoderWeights:
    """Learnable tensors plus batch-norm running statistics"""

    arch: EncoderArchitecture
    params: Dict[str, np.ndarray]
    stats: Dict[str, np.ndarray] = field(default_factory=dict)

    def tensor_names(self) -> List[str]:
        names = []
        for name, _, _, bn in self.arch.layers():
            names += [f"{name}.W", f"{name}.b"]
            if bn:
                names += [f"{name}.gamma", f"{name}.beta", f"{name}.running_mean", f"{name}.running_var"]
        return names

    def tensor(self, name: str) -> np.ndarray:
        return self.params[name] if name in self.params else self.stats[name]

    def copy(self) -> "EncoderWeights":
        return EncoderWeights(
            self.arch,
            {k: v.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.stats.items()},
        )

    def n_learnable(self) -> int:
        return int(sum(v.size for v in self.params.values()))


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 1200
    batch_size: int = 4096
    lr: float = 0.005
    lr_decay_factor: float = 0.99
    lr_decay_every: int = 20
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    leaky_slope: float = 0.01
    train_fraction: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.lr_decay_factor <= 1:
            raise ValueError(f"lr_decay_factor must lie in (0, 1], got {self.lr_decay_factor}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1 or self.lr_decay_every < 1:
            raise ValueError("epochs and lr_decay_every must be >= 1")

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.lr_decay_factor ** (epoch // self.lr_decay_every)


@dataclass
class TrainHistory:
    train_loss: List[float] = field(default_factory=list)
    val_loss: List[float] = field(default_factory=list)
    lr: List[float] = field(default_factory=list)

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame({
            "epoch": np.arange(len(self.train_loss)),
            "train_loss": self.train_loss,
            "val_loss": self.val_loss,
            "lr": self.lr,
        })
        with np.errstate(divide="ignore", invalid="ignore"):
            frame["train_loss_db"] = 10.0 * np.log10(frame["train_loss"])
            frame["val_loss_db"] = 10.0 * np.log10(frame["val_loss"])
        return frame

    def save_csv(self, path) -> Path:
        path = Path(path)
        with atomic_path(path) as tmp:
            self.to_frame().to_csv(tmp, index=False, float_format="%.17g", lineterminator="\n")
        return path


@dataclass
class AdamState:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros(cls, w: EncoderWeights) -> "AdamState":
        return cls(
            {k: np.zeros_like(p) for k, p in w.params.items()},
            {k: np.zeros_like(p) for k, p in w.params.items()},
        )


# ---------------------------------------------------------------------------
# Initialisation
# ---------------------------------------------------------------------------


def default_output_bias(cfg: AcquisitionConfig, canonical_pose: bool = True) -> np.ndarray:
    """
    Head bias centred on typical parameters. In the canonical pose that is a
    peak slightly below the amplitude, mid width and no depth or phase offset;
    otherwise mid amplitude, mid width and the grid centre.
    """
    if canonical_pose:
        return np.array([POSE_AMPLITUDE_RATIO, 0.525, 0.0, 0.0])
    return np.array([2.55, 0.525, cfg.midpoint, 0.0])


def init_weights(arch: EncoderArchitecture, seed: int = 0,
                 output_bias: Optional[np.ndarray] = None) -> EncoderWeights:
    """Uniform +-sqrt(6 / (fan_in + fan_out)) weights, zero biases, identity batch norm"""
    rng = np.random.default_rng(seed)
    dtype = np.dtype(arch.dtype)
    params, stats = {}, {}
    for name, fan_in, fan_out, bn in arch.layers():
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        params[f"{name}.W"] = rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)
        params[f"{name}.b"] = np.zeros(fan_out, dtype=dtype)
        if bn:
            params[f"{name}.gamma"] = np.ones(fan_out, dtype=dtype)
            params[f"{name}.beta"] = np.zeros(fan_out, dtype=dtype)
            stats[f"{name}.running_mean"] = np.zeros(fan_out, dtype=dtype)
            stats[f"{name}.running_var"] = np.ones(fan_out, dtype=dtype)
    if output_bias is not None:
        params["head.b"] = np.asarray(output_bias, dtype=dtype).copy()
    return EncoderWeights(arch, params, stats)


# ---------------------------------------------------------------------------
# Canonical pose
# ---------------------------------------------------------------------------


@dataclass
class SignalPose:
    """
    Per-signal gauge taken from the strongest sample.

    Scaling a signal scales the amplitude, rotating it shifts the phase, and
    moving the pulse along the grid moves mu; the pose records those three
    offsets so they can be divided out before the network and restored after.
    """

    scale: np.ndarray
    phase: np.ndarray
    depth: np.ndarray
    spacing: np.ndarray
    shift: np.ndarray

    def output_scale(self) -> np.ndarray:
        """d(parameters) / d(network outputs), one row per signal"""
        ones = np.ones_like(self.scale)
        return np.stack([self.scale, ones, self.spacing, ones], axis=1)


def signal_pose(signals: np.ndarray, cfg: AcquisitionConfig) -> SignalPose:
    g = np.asarray(signals, dtype=np.float64)
    power = g[..., 0] ** 2 + g[..., 1] ** 2
    peak = np.argmax(power, axis=1)
    rows = np.arange(g.shape[0])
    scale = np.sqrt(power[rows, peak])
    phase = np.arctan2(g[rows, peak, 1], g[rows, peak, 0]) + cfg.omega * cfg.z_grid[peak]
    # an all-zero signal keeps the identity pose
    empty = scale == 0
    spacing = np.gradient(cfg.z_grid) if cfg.n_z > 1 else np.ones(1)
    return SignalPose(
        scale=np.where(empty, 1.0, scale),
        phase=np.where(empty, 0.0, wrap_phase(phase)),
        depth=cfg.z_grid[peak],
        spacing=spacing[peak],
        shift=peak - cfg.n_z // 2,
    )


def to_canonical_pose(signals: np.ndarray, pose: SignalPose, cfg: AcquisitionConfig) -> np.ndarray:
    """Normalise, demodulate and centre signals; samples shifted in from outside the grid are zero"""
    g = np.asarray(signals, dtype=np.float64)
    samples = g[..., 0] + 1j * g[..., 1]
    rotation = np.exp(1j * (cfg.omega * cfg.z_grid[None, :] - pose.phase[:, None]))
    demodulated = samples * rotation / pose.scale[:, None]

    index = np.arange(cfg.n_z)[None, :] + pose.shift[:, None]
    inside = (index >= 0) & (index < cfg.n_z)
    centred = np.take_along_axis(demodulated, np.clip(index, 0, cfg.n_z - 1), axis=1) * inside
    return np.stack([centred.real, centred.imag], axis=-1)


def restore_pose(pred: np.ndarray, pose: SignalPose) -> np.ndarray:
    params = np.array(pred, dtype=np.float64, copy=True)
    params[:, AMPLITUDE] *= pose.scale
    params[:, DEPTH] = pose.depth + pose.spacing * params[:, DEPTH]
    params[:, PHASE] += pose.phase
    return params


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------


def _check_finite(values: np.ndarray, index: int, name: str):
    if not np.isfinite(values).all():
        raise EncoderError(f"non-finite activations at layer {index} ({name})")


def _dense_bn_forward(w: EncoderWeights, name: str, index: int, h: np.ndarray, mode: str) -> Tuple[np.ndarray, Dict]:
    arch = w.arch
    z = h @ w.params[f"{name}.W"] + w.params[f"{name}.b"]
    if mode == TRAIN:
        mean = z.mean(axis=0)
        var = z.var(axis=0)
        n = z.shape[0]
        unbiased = var * n / (n - 1) if n > 1 else var
        m = arch.bn_momentum
        w.stats[f"{name}.running_mean"] = ((1 - m) * w.stats[f"{name}.running_mean"] + m * mean).astype(z.dtype)
        w.stats[f"{name}.running_var"] = ((1 - m) * w.stats[f"{name}.running_var"] + m * unbiased).astype(z.dtype)
    else:
        mean = w.stats[f"{name}.running_mean"]
        var = w.stats[f"{name}.running_var"]
    inv_std = 1.0 / np.sqrt(var + arch.bn_eps)
    xhat = (z - mean) * inv_std
    y = w.params[f"{name}.gamma"] * xhat + w.params[f"{name}.beta"]
    a = np.where(y > 0, y, arch.leaky_slope * y)
    _check_finite(a, index, name)
    return a, {"input": h, "xhat": xhat, "inv_std": inv_std, "pre_act": y}


def _dense_bn_backward(w: EncoderWeights, name: str, cache: Dict, da: np.ndarray, mode: str,
                       grads: Dict[str, np.ndarray]) -> np.ndarray:
    dy = np.where(cache["pre_act"] > 0, da, w.arch.leaky_slope * da)
    xhat = cache["xhat"]
    grads[f"{name}.gamma"] = np.sum(dy * xhat, axis=0)
    grads[f"{name}.beta"] = np.sum(dy, axis=0)
    dxhat = dy * w.params[f"{name}.gamma"]
    if mode == TRAIN:
        n = dxhat.shape[0]
        dz = cache["inv_std"] / n * (
            n * dxhat - dxhat.sum(axis=0) - xhat * np.sum(dxhat * xhat, axis=0)
        )
    else:
        dz = dxhat * cache["inv_std"]
    grads[f"{name}.W"] = cache["input"].T @ dz
    grads[f"{name}.b"] = dz.sum(axis=0)
    return dz @ w.params[f"{name}.W"].T


def encoder_forward(w: EncoderWeights, batch: np.ndarray, mode: str = INFER) -> Tuple[np.ndarray, Dict]:
    """
    Predict parameters for a (B, n_z, 2) batch of signals.

    Returns the (B, 4) prediction with the amplitude already passed through
    |.|, and a cache for the backward pass. Train mode normalises with batch
    statistics and updates the running statistics stored in w; infer mode
    uses the running statistics, so every pixel is computed independently.
    """
    if mode not in (TRAIN, INFER):
        raise ValueError(f"mode must be {TRAIN!r} or {INFER!r}, got {mode!r}")
    arch = w.arch
    batch = np.asarray(batch)
    if batch.ndim != 3 or batch.shape[1:] != (arch.n_z, 2):
        raise DimensionMismatchError(f"encoder expects (B, {arch.n_z}, 2) signals, got {batch.shape}")
    batch = batch.astype(arch.dtype, copy=False)

    layers = arch.layers()
    caches = {}
    h_re, caches["branch_re"] = _dense_bn_forward(w, "branch_re", 0, batch[..., 0], mode)
    h_im, caches["branch_im"] = _dense_bn_forward(w, "branch_im", 1, batch[..., 1], mode)
    h = np.concatenate([h_re, h_im], axis=1)
    for index, (name, _, _, _) in enumerate(layers[2:-1], start=2):
        h, caches[name] = _dense_bn_forward(w, name, index, h, mode)

    raw = h @ w.params["head.W"] + w.params["head.b"]
    _check_finite(raw, len(layers) - 1, "head")
    caches["head"] = {"input": h, "raw": raw}
    out = raw.copy()
    out[:, AMPLITUDE] = np.abs(out[:, AMPLITUDE])
    return out, {"layers": caches, "mode": mode}


def encoder_backward(w: EncoderWeights, cache: Dict, d_out: np.ndarray) -> Dict[str, np.ndarray]:
    """Gradients of all learnable tensors given dLoss/d(prediction)"""
    mode = cache["mode"]
    layers = cache["layers"]
    grads = {}

    d_raw = np.array(d_out, dtype=w.arch.dtype, copy=True)
    # subgradient of |.| is 0 at exactly 0
    d_raw[:, AMPLITUDE] *= np.sign(layers["head"]["raw"][:, AMPLITUDE])
    grads["head.W"] = layers["head"]["input"].T @ d_raw
    grads["head.b"] = d_raw.sum(axis=0)
    dh = d_raw @ w.params["head.W"].T

    for name, _, _, _ in reversed(w.arch.layers()[2:-1]):
        dh = _dense_bn_backward(w, name, layers[name], dh, mode, grads)

    width = w.arch.branch_width
    _dense_bn_backward(w, "branch_re", layers["branch_re"], dh[:, :width], mode, grads)
    _dense_bn_backward(w, "branch_im", layers["branch_im"], dh[:, width:], mode, grads)
    return grads


def encode(w: EncoderWeights, signals: np.ndarray, cfg: AcquisitionConfig,
           mode: str = INFER) -> Tuple[np.ndarray, Dict, Optional[SignalPose]]:
    """Model parameters in float64 for (B, n_z, 2) signals, with the cache and pose used"""
    signals = np.asarray(signals)
    if signals.ndim != 3 or signals.shape[1:] != (w.arch.n_z, 2):
        raise DimensionMismatchError(f"encoder expects (B, {w.arch.n_z}, 2) signals, got {signals.shape}")
    if not w.arch.canonical_pose:
        pred, cache = encoder_forward(w, signals, mode)
        return pred.astype(np.float64), cache, None
    pose = signal_pose(signals, cfg)
    pred, cache = encoder_forward(w, to_canonical_pose(signals, pose, cfg), mode)
    return restore_pose(pred, pose), cache, pose


def ae_loss_and_grad(w: EncoderWeights, batch: np.ndarray, cfg: AcquisitionConfig,
                     mode: str = TRAIN) -> Tuple[float, Dict[str, np.ndarray]]:
    """
    Mean reconstruction loss of a batch through the physics model and its
    gradient with respect to every learnable tensor.

    The decoder loss and its gradient are evaluated in float64 whatever the
    network precision.
    """
    batch = np.asarray(batch)
    if batch.shape[0] == 0:
        raise ValueError("empty batch")
    params, cache, pose = encode(w, batch, cfg, mode)
    signals64 = batch.astype(np.float64)
    n = batch.shape[0]

    loss = float(np.mean(pixel_loss(params, signals64, cfg)))
    d_params = loss_gradient(params, signals64, cfg) / n
    if not np.isfinite(d_params).all():
        raise EncoderError("non-finite gradient at the physics decoder")
    d_pred = d_params if pose is None else d_params * pose.output_scale()
    return loss, encoder_backward(w, cache, d_pred)


def adam_step(w: EncoderWeights, grads: Dict[str, np.ndarray], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> Tuple[EncoderWeights, AdamState]:
    """Bias-corrected Adam update, applied in place and returned"""
    state.t += 1
    correction1 = 1.0 - beta1 ** state.t
    correction2 = 1.0 - beta2 ** state.t
    for name in sorted(w.params):
        g = grads[name]
        if g.shape != w.params[name].shape:
            raise DimensionMismatchError(f"gradient {name} has shape {g.shape}, weight {w.params[name].shape}")
        m = state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        v = state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * g * g
        update = lr * (m / correction1) / (np.sqrt(v / correction2) + eps)
        w.params[name] = (w.params[name] - update).astype(w.params[name].dtype)
    return w, state


# ---------------------------------------------------------------------------
# Training and inference
# ---------------------------------------------------------------------------


def predict(w: EncoderWeights, signals: np.ndarray, cfg: AcquisitionConfig, batch_size: int = 4096) -> np.ndarray:
    """Infer-mode model parameters for (N, n_z, 2) signals, in float64"""
    out = np.empty((signals.shape[0], 4), dtype=np.float64)
    for start in range(0, signals.shape[0], batch_size):
        out[start:start + batch_size], _, _ = encode(w, signals[start:start + batch_size], cfg, INFER)
    return out


def mean_loss(w: EncoderWeights, signals: np.ndarray, cfg: AcquisitionConfig, batch_size: int = 4096) -> float:
    if signals.shape[0] == 0:
        return float("nan")
    pred = predict(w, signals, cfg, batch_size)
    return float(np.mean(pixel_loss(pred, np.asarray(signals, dtype=np.float64), cfg)))


def train(v: THzVolume, tc: TrainConfig, arch: Optional[EncoderArchitecture] = None,
          checkpoint_path=None, checkpoint_every: int = 50,
          log_every: int = 10) -> Tuple[EncoderWeights, TrainHistory]:
    """Unsupervised training on the volume's pixels with a seeded train/validation split"""
    cfg = v.cfg
    arch = arch or EncoderArchitecture(n_z=cfg.n_z, leaky_slope=tc.leaky_slope)
    if arch.n_z != cfg.n_z:
        raise DimensionMismatchError(f"architecture expects n_z={arch.n_z}, volume has {cfg.n_z}")

    signals = v.flat_signals().astype(arch.dtype)
    train_idx, val_idx = split_pixels(signals.shape[0], tc.train_fraction, tc.seed)
    w = init_weights(arch, seed=tc.seed, output_bias=default_output_bias(cfg, arch.canonical_pose))
    state = AdamState.zeros(w)
    rng = np.random.default_rng(tc.seed)
    history = TrainHistory()

    logger.info("Training on %d pixels, validating on %d (%d learnable weights)",
                train_idx.size, val_idx.size, w.n_learnable())
    started = time.perf_counter()
    for epoch in range(tc.epochs):
        lr = tc.lr_at(epoch)
        order = rng.permutation(train_idx)
        total = 0.0
        for start in range(0, order.size, tc.batch_size):
            batch = signals[order[start:start + tc.batch_size]]
            loss, grads = ae_loss_and_grad(w, batch, cfg, TRAIN)
            adam_step(w, grads, state, lr, tc.beta1, tc.beta2, tc.adam_eps)
            total += loss * batch.shape[0]

        history.train_loss.append(total / order.size)
        history.val_loss.append(mean_loss(w, signals[val_idx], cfg, tc.batch_size))
        history.lr.append(lr)

        if (epoch + 1) % log_every == 0 or epoch == 0:
            logger.info("Epoch %d/%d: train %.4f, val %.4f, lr %.6g", epoch + 1, tc.epochs,
                        history.train_loss[-1], history.val_loss[-1], lr)
        if checkpoint_path is not None and (epoch + 1) % checkpoint_every == 0:
            save_weights(w, checkpoint_path)

    if checkpoint_path is not None:
        save_weights(w, checkpoint_path)
    logger.info("Training finished in %.1fs", time.perf_counter() - started)
    return w, history


def infer_volume(w: EncoderWeights, v: THzVolume, batch_size: int = 4096) -> Tuple[ParamMap, float]:
    """
    Infer-mode prediction for every pixel; returns the map and the wall time.

    Predictions are canonicalised (sigma = |sigma| floored, phase wrapped, mu
    clipped to the grid) so the map is a feasible start for trust-region
    refinement.
    """
    if w.arch.n_z != v.cfg.n_z:
        raise DimensionMismatchError(f"encoder expects n_z={w.arch.n_z}, volume has {v.cfg.n_z}")
    started = time.perf_counter()
    signals = v.flat_signals().astype(w.arch.dtype)
    raw = predict(w, signals, v.cfg, batch_size)
    params = canonicalize(raw, v.cfg).reshape(v.n_x, v.n_y, 4)
    elapsed = time.perf_counter() - started
    logger.info("Inferred %d pixels in %.3fs", v.n_pixels, elapsed)
    return ParamMap(params), elapsed


# ---------------------------------------------------------------------------
# Weight files
# ---------------------------------------------------------------------------


def save_weights(w: EncoderWeights, path) -> Path:
    path = Path(path)
    arch_json = json.dumps(w.arch.to_dict(), sort_keys=True).encode("utf-8")
    dtype = np.dtype(w.arch.dtype).newbyteorder("<")
    names = w.tensor_names()
    with atomic_path(path) as tmp:
        with open(tmp, "wb") as f:
            f.write(WEIGHTS_MAGIC)
            f.write(struct.pack("<I", WEIGHTS_VERSION))
            f.write(w.arch.arch_hash().encode("ascii"))
            f.write(struct.pack("<I", len(arch_json)))
            f.write(arch_json)
            f.write(struct.pack("<I", len(names)))
            for name in names:
                f.write(np.ascontiguousarray(w.tensor(name), dtype=dtype).tobytes())
    return path


def load_weights(path, expected: Optional[EncoderArchitecture] = None) -> EncoderWeights:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise ExportError(f"could not read {path}: {e}") from e

    def take(pos, count, what):
        if pos + count > len(blob):
            raise TruncatedPayloadError(f"truncated {what} in {path}")
        return blob[pos:pos + count]

    if blob[:len(WEIGHTS_MAGIC)] != WEIGHTS_MAGIC:
        raise BadMagicError(f"bad magic in {path}")
    pos = len(WEIGHTS_MAGIC)
    (version,) = struct.unpack("<I", take(pos, 4, "version"))
    if version != WEIGHTS_VERSION:
        raise HeaderMismatchError(f"unsupported weight file version {version}")
    stored_hash = take(pos + 4, 64, "architecture hash").decode("ascii", errors="replace")
    pos += 68
    (arch_len,) = struct.unpack("<I", take(pos, 4, "header"))
    try:
        arch = EncoderArchitecture.from_dict(json.loads(take(pos + 4, arch_len, "architecture")))
    except (ValueError, TypeError, KeyError) as e:
        raise HeaderMismatchError(f"unreadable architecture in {path}: {e}") from e
    pos += 4 + arch_len

    if stored_hash != arch.arch_hash():
        raise ArchitectureMismatchError("architecture mismatch: stored hash does not match header")
    if expected is not None and expected.arch_hash() != stored_hash:
        raise ArchitectureMismatchError("architecture mismatch: file was written for another network")

    template = init_weights(arch)
    names = template.tensor_names()
    (count,) = struct.unpack("<I", take(pos, 4, "tensor count"))
    pos += 4
    if count != len(names):
        raise HeaderMismatchError(f"{path} holds {count} tensors, architecture needs {len(names)}")

    dtype = np.dtype(arch.dtype).newbyteorder("<")
    for name in names:
        shape = template.tensor(name).shape
        nbytes = int(np.prod(shape)) * dtype.itemsize
        values = np.frombuffer(take(pos, nbytes, name), dtype=dtype).reshape(shape).astype(arch.dtype)
        pos += nbytes
        target = template.params if name in template.params else template.stats
        target[name] = values
    if pos != len(blob):
        raise HeaderMismatchError(f"{path} has {len(blob) - pos} trailing bytes")
    return template
