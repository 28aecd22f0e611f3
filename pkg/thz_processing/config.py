"""
Configuration
Settings come from THZ_* environment variables or a .env file; command-line
flags override both (see cli.resolve).
"""

import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Dict, Optional

from dotenv import dotenv_values

from .errors import ConfigError

ENV_PREFIX = "THZ_"


@dataclass(frozen=True)
class Settings:
    omega: float = 2.0
    nz: int = 91
    threads: int = os.cpu_count() or 1
    seed: int = 0
    noise_sigma: float = 0.05
    epochs: int = 1200
    batch_size: int = 4096
    lr: float = 0.005
    lr_decay: float = 0.99
    lr_decay_every: int = 20
    max_iters: int = 400
    gradient_tol: float = 1e-8
    step_tol: float = 1e-10
    log_level: str = "INFO"

    def as_dict(self) -> Dict:
        return asdict(self)


def _read_sources(env_file: Optional[str]) -> Dict[str, str]:
    values = {k: v for k, v in os.environ.items() if k.startswith(ENV_PREFIX)}

    if env_file is not None:
        path = Path(env_file)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
    else:
        path = Path(".env")

    if path.exists():
        for key, value in dotenv_values(path).items():
            if key.startswith(ENV_PREFIX) and value is not None:
                values[key] = value
    return values


def load_settings(env_file: Optional[str] = None) -> Settings:
    """Build Settings from defaults, the environment and an optional .env file"""
    raw = _read_sources(env_file)
    kwargs = {}
    for field in fields(Settings):
        key = ENV_PREFIX + field.name.upper()
        if key not in raw:
            continue
        value = raw[key].strip()
        try:
            if field.type in (int, "int"):
                kwargs[field.name] = int(value)
            elif field.type in (float, "float"):
                kwargs[field.name] = float(value)
            else:
                kwargs[field.name] = value
        except ValueError:
            raise ConfigError(f"{key}: cannot parse {value!r} as {field.type}") from None

    settings = Settings(**kwargs)
    if settings.omega <= 0:
        raise ConfigError(f"{ENV_PREFIX}OMEGA must be positive, got {settings.omega}")
    if settings.nz < 1:
        raise ConfigError(f"{ENV_PREFIX}NZ must be at least 1, got {settings.nz}")
    if settings.threads < 1:
        raise ConfigError(f"{ENV_PREFIX}THREADS must be at least 1, got {settings.threads}")
    return settings
