"""Plain-text ``key = value`` configuration shared by the gateway, the
simulated sensors and the scenario harness."""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field, fields, replace
from importlib import resources
from pathlib import Path
from typing import Optional

from fridgesim.cloud import DEFAULT_QUOTA_LIMIT, DEFAULT_QUOTA_PERIOD_MS, ChoreoCredentials
from fridgesim.inventory import DEFAULT_PRESENCE_THRESHOLD_G, DEFAULT_WEIGHT_DEADBAND_G
from fridgesim.sensors import DEFAULT_NOISE_SPAN, EggMode

STORE_ENV_VAR = "FRIDGESIM_STORE"


@dataclass(frozen=True)
class Backoff:
    initial_ms: int = 1000
    multiplier: float = 2.0
    cap_ms: int = 60_000

    def __post_init__(self):
        if self.initial_ms <= 0 or self.cap_ms < self.initial_ms:
            raise ValueError("backoff needs 0 < initial <= cap")
        if not self.multiplier > 1:
            raise ValueError("backoff multiplier must exceed 1")

    def delay(self, attempt: int) -> int:
        """Wait before retry number ``attempt`` (0-based)."""
        return int(min(self.initial_ms * self.multiplier**attempt, self.cap_ms))


@dataclass(frozen=True)
class GatewayConfig:
    poll_interval_ms: int = 1000
    weight_deadband_g: float = DEFAULT_WEIGHT_DEADBAND_G
    presence_threshold_g: float = DEFAULT_PRESENCE_THRESHOLD_G
    backoff: Backoff = field(default_factory=Backoff)
    image_every_n: int = 1
    calibration_file: Optional[str] = None
    credentials: ChoreoCredentials = field(
        default_factory=lambda: ChoreoCredentials(
            "fridgesim-app", "fridgesim-app-secret", "fridgesim-token", "fridgesim-token-secret"
        )
    )
    # per-channel tare, counts added to the calibration offsets
    sensor_offsets: tuple[float, ...] = (0.0,) * 6
    # re-send an unchanged snapshot after this long without an upload; 0 = off
    heartbeat_ms: int = 0

    def __post_init__(self):
        if self.poll_interval_ms <= 0:
            raise ValueError("poll_interval_ms must be positive")
        if self.image_every_n < 0:
            raise ValueError("image_every_n must be >= 0 (0 disables images)")
        if self.heartbeat_ms < 0:
            raise ValueError("heartbeat_ms must be >= 0 (0 disables the heartbeat)")


@dataclass(frozen=True)
class SimConfig:
    gateway: GatewayConfig = field(default_factory=GatewayConfig)
    noise_span: int = DEFAULT_NOISE_SPAN
    egg_mode: EggMode = EggMode.DETERMINISTIC
    quota_limit: int = DEFAULT_QUOTA_LIMIT
    quota_period_ms: int = DEFAULT_QUOTA_PERIOD_MS
    duration_ms: Optional[int] = None
    tail_ms: int = 10_000
    bus_bit_flips: tuple[tuple[int, int], ...] = ()
    store: Optional[str] = None


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.replace(",", " ").split())


def _flips(text: str) -> tuple[tuple[int, int], ...]:
    out = []
    for item in text.replace(",", " ").split():
        index, bit = item.split(":")
        out.append((int(index), int(bit)))
    return tuple(out)


def parse_config(text: str, base_dir: Path | None = None) -> SimConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",), strict=False)
    parser.optionxform = str
    parser.read_string("[fridgesim]\n" + text)
    kv = dict(parser["fridgesim"])
    gw = {}
    sim = {}
    backoff = {}
    creds = {}
    conv = {
        "poll_interval_ms": ("gw", int),
        "weight_deadband_g": ("gw", float),
        "presence_threshold_g": ("gw", float),
        "image_every_n": ("gw", int),
        "calibration_file": ("gw", str),
        "sensor_offsets": ("gw", _floats),
        "heartbeat_ms": ("gw", int),
        "backoff_initial_ms": ("backoff", int),
        "backoff_multiplier": ("backoff", float),
        "backoff_cap_ms": ("backoff", int),
        "app_key": ("creds", str),
        "app_secret": ("creds", str),
        "token_key": ("creds", str),
        "token_secret": ("creds", str),
        "noise_span": ("sim", int),
        "egg_mode": ("sim", EggMode),
        "quota_limit": ("sim", int),
        "quota_period_ms": ("sim", int),
        "duration_ms": ("sim", int),
        "tail_ms": ("sim", int),
        "bus_bit_flips": ("sim", _flips),
        "store": ("sim", str),
    }
    targets = {"gw": gw, "sim": sim, "backoff": backoff, "creds": creds}
    for key, raw in kv.items():
        if key not in conv:
            raise ValueError(f"unknown config key {key!r}")
        where, fn = conv[key]
        targets[where][key] = fn(raw.strip())
    if "calibration_file" in gw and base_dir is not None:
        gw["calibration_file"] = str((base_dir / gw["calibration_file"]).resolve())
    if "sensor_offsets" in gw and len(gw["sensor_offsets"]) != 6:
        raise ValueError("sensor_offsets needs 6 values")
    if backoff:
        gw["backoff"] = Backoff(**{k.removeprefix("backoff_"): v for k, v in backoff.items()})
    if creds:
        base = GatewayConfig().credentials
        gw["credentials"] = ChoreoCredentials(
            **{f.name: creds.get(f.name, getattr(base, f.name)) for f in fields(ChoreoCredentials)}
        )
    return SimConfig(gateway=GatewayConfig(**gw), **sim)


def default_config() -> SimConfig:
    text = resources.files("fridgesim.data").joinpath("default.cfg").read_text(encoding="utf-8")
    return parse_config(text)


def load_config(path: str | Path | None = None) -> SimConfig:
    """Bundled defaults when ``path`` is None. The ``FRIDGESIM_STORE``
    environment variable overrides the store endpoint either way."""
    if path is None:
        cfg = default_config()
    else:
        path = Path(path)
        defaults = resources.files("fridgesim.data").joinpath("default.cfg").read_text(encoding="utf-8")
        cfg = parse_config(defaults + "\n" + path.read_text(encoding="utf-8"), path.parent)
    env = os.environ.get(STORE_ENV_VAR)
    if env:
        cfg = replace(cfg, store=env)
    return cfg
