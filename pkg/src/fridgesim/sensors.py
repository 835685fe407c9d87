"""Seedable transducer models: load cells, egg-tray limit switches, bottle
push buttons and the body camera.

Everything here is a pure function of its arguments plus an explicit
``numpy.random.Generator``; nothing holds hidden state.
"""

from __future__ import annotations

import enum
import hashlib
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Mapping, Optional

import numpy as np

from fridgesim import tables

COUNTS_MIN = -(1 << 23)
COUNTS_MAX = (1 << 23) - 1

# Table 1 replicate spread is ~206 counts at worst; half of it either side.
DEFAULT_NOISE_SPAN = 103


class TempLevel(str, enum.Enum):
    """Symbolic fridge temperature level. The source data has no degree values."""

    OFF = "Off"
    T1 = "T1"
    T2 = "T2"
    T3 = "T3"
    T4 = "T4"
    T5 = "T5"

    @property
    def index(self) -> int:
        return _LEVEL_ORDER.index(self)

    @classmethod
    def from_index(cls, index: int) -> "TempLevel":
        return _LEVEL_ORDER[index]


_LEVEL_ORDER = tuple(TempLevel)


class SizeClass(str, enum.Enum):
    SMALL = "Small"
    NORMAL = "Normal"
    BIG = "Big"


class EggSwitch(str, enum.Enum):
    TRIGGERED = "Triggered"
    LOOSE = "Loose"
    OPEN = "Open"


class EggMode(str, enum.Enum):
    DETERMINISTIC = "deterministic"
    SEEDED = "seeded"


class SaturationError(ValueError):
    """Reading does not fit in the 24-bit signed converter range."""


@dataclass(frozen=True)
class SensorLayout:
    weight_slots: int = 6
    egg_trays: int = 2
    slots_per_tray: int = 8
    bottle_slots: int = 4
    cameras: int = 1

    @property
    def egg_slots(self) -> int:
        return self.egg_trays * self.slots_per_tray


LAYOUT = SensorLayout()


@dataclass(frozen=True)
class RawWeightReading:
    sensor_id: int
    counts: int
    temp_level: TempLevel

    def __post_init__(self):
        if not COUNTS_MIN <= self.counts <= COUNTS_MAX:
            raise SaturationError(f"counts {self.counts} outside 24-bit range")


@dataclass(frozen=True)
class WeightChannelModel:
    sensor_id: int
    offset_counts: Mapping[TempLevel, float]
    gain_counts_per_gram: float
    noise_span_counts: int = DEFAULT_NOISE_SPAN

    def __post_init__(self):
        if set(self.offset_counts) != set(TempLevel):
            raise ValueError("offset table needs exactly one entry per temperature level")
        if not self.gain_counts_per_gram > 0:
            raise ValueError("gain must be positive")
        if self.noise_span_counts < 0:
            raise ValueError("noise span must be non-negative")


@dataclass(frozen=True)
class EggTriggerStats:
    size_class: SizeClass
    good_count_of_16: int

    @property
    def trigger_probability(self) -> float:
        return self.good_count_of_16 / LAYOUT.egg_slots


@dataclass(frozen=True)
class BottleSlotModel:
    trigger_threshold_ml: float = 300.0

    def __post_init__(self):
        if not self.trigger_threshold_ml > 0:
            raise ValueError("trigger threshold must be positive")


@lru_cache(maxsize=None)
def _sensor1_parameters() -> tuple[dict[TempLevel, float], float]:
    off = tables.off_state_cells()
    gain = float(np.polyfit([c.mass_g for c in off], [c.counts for c in off], 1)[0])
    # the first replicate at 0 g is the offset for each level
    offsets = {TempLevel.OFF: float(off[0].counts)}
    for cell in tables.on_state_cells():
        if cell.mass_g == 0:
            offsets.setdefault(TempLevel(cell.level), float(cell.counts))
    return offsets, gain


def default_weight_model(
    sensor_id: int = 0,
    offset_shift: float = 0.0,
    noise_span: int = DEFAULT_NOISE_SPAN,
) -> WeightChannelModel:
    """Sensor #1 parameters (gain fitted to the off-state table), shifted by
    ``offset_shift`` counts for the other channels."""
    offsets, gain = _sensor1_parameters()
    return WeightChannelModel(
        sensor_id=sensor_id,
        offset_counts={level: value + offset_shift for level, value in offsets.items()},
        gain_counts_per_gram=gain,
        noise_span_counts=noise_span,
    )


def read_weight(
    model: WeightChannelModel,
    mass: float,
    temp: TempLevel,
    rng: Optional[np.random.Generator] = None,
) -> RawWeightReading:
    if mass < 0:
        raise ValueError("mass must be non-negative")
    temp = TempLevel(temp)
    counts = round(model.offset_counts[temp] + model.gain_counts_per_gram * mass)
    if model.noise_span_counts:
        if rng is None:
            raise ValueError("a random generator is required when noise_span > 0")
        span = model.noise_span_counts
        counts += int(rng.integers(-span, span + 1))
    if not COUNTS_MIN <= counts <= COUNTS_MAX:
        raise SaturationError(f"{mass} g saturates sensor {model.sensor_id} ({counts} counts)")
    return RawWeightReading(model.sensor_id, counts, temp)


@lru_cache(maxsize=None)
def _egg_grid() -> dict[tuple[SizeClass, int, int], bool]:
    return {
        (SizeClass(c.size_class), c.tray, c.slot): c.good for c in tables.egg_trigger_cells()
    }


def egg_trigger_stats(size: SizeClass) -> EggTriggerStats:
    size = SizeClass(size)
    good = sum(ok for (s, _, _), ok in _egg_grid().items() if s is size)
    return EggTriggerStats(size, good)


def egg_switch_state(
    tray: int,
    slot: int,
    occupied: bool,
    size: SizeClass = SizeClass.NORMAL,
    mode: EggMode = EggMode.DETERMINISTIC,
    rng: Optional[np.random.Generator] = None,
    settled: bool = False,
) -> EggSwitch:
    """Switch reading for one egg cup.

    A Loose egg stays untriggered until it is re-seated (``settled=True``).
    In seeded mode each placement triggers with the size class's Good ratio.
    """
    if not 0 <= tray < LAYOUT.egg_trays:
        raise IndexError(f"tray {tray} out of range")
    if not 0 <= slot < LAYOUT.slots_per_tray:
        raise IndexError(f"slot {slot} out of range")
    if not occupied:
        return EggSwitch.OPEN
    if settled:
        return EggSwitch.TRIGGERED
    size = SizeClass(size)
    if EggMode(mode) is EggMode.DETERMINISTIC:
        good = _egg_grid()[(size, tray, slot)]
    else:
        if rng is None:
            raise ValueError("seeded mode needs a random generator")
        good = bool(rng.random() < egg_trigger_stats(size).trigger_probability)
    return EggSwitch.TRIGGERED if good else EggSwitch.LOOSE


def bottle_switch_state(model: BottleSlotModel, volume: float) -> bool:
    if volume < 0:
        raise ValueError("volume must be non-negative")
    return volume >= model.trigger_threshold_ml


def camera_capture(scene_id: str) -> bytes:
    """Synthetic JPEG-framed blob whose content depends only on ``scene_id``."""
    seed = hashlib.sha256(scene_id.encode("utf-8")).digest()
    payload = seed + hashlib.sha256(seed).digest()
    app0 = b"JFIF\x00\x01\x01\x00\x00\x01\x00\x01\x00\x00"
    comment = b"fridgesim scene:" + scene_id.encode("utf-8") + b"\x00" + payload
    return (
        b"\xff\xd8"
        + b"\xff\xe0" + struct.pack(">H", len(app0) + 2) + app0
        + b"\xff\xfe" + struct.pack(">H", len(comment) + 2) + comment
        + b"\xff\xd9"
    )


@dataclass
class SensorStreams:
    """Independent per-channel generators derived from one master seed.

    Stream ``(kind, index)`` depends only on the seed and its own key, so
    adding a channel never perturbs the others.
    """

    seed: int
    _cache: dict = field(default_factory=dict, repr=False)

    def get(self, kind: str, index: int) -> np.random.Generator:
        key = (kind, index)
        if key not in self._cache:
            tag = int.from_bytes(hashlib.sha256(kind.encode()).digest()[:4], "big")
            self._cache[key] = np.random.default_rng([self.seed, tag, index])
        return self._cache[key]
