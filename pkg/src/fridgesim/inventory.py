"""Inventory snapshots, change detection, stock rules and the JSON document
that travels to the cloud store."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence

from fridgesim.bus import SensorFrame
from fridgesim.calibration import CalibrationCurve, counts_to_grams
from fridgesim.sensors import LAYOUT, TempLevel

DEFAULT_PRESENCE_THRESHOLD_G = 50.0
DEFAULT_WEIGHT_DEADBAND_G = 20.0
SNAPSHOT_VERSION = 1

INVENTORY_RE = re.compile(r"^inventory_(\d+)\.json$")


def inventory_name(seq: int) -> str:
    return f"inventory_{seq}.json"


def image_name(seq: int) -> str:
    return f"body_{seq}.jpg"


def _tenth(x: float) -> float:
    return round(float(x), 1) + 0.0  # + 0.0 folds -0.0


@dataclass(frozen=True)
class WeightSlot:
    grams: float
    uncertainty: float
    present: bool

    def __post_init__(self):
        if self.grams < 0:
            raise ValueError("grams must be non-negative")
        # the document carries one decimal; keep values identical to what parses back
        object.__setattr__(self, "grams", _tenth(self.grams))
        object.__setattr__(self, "uncertainty", _tenth(self.uncertainty))


@dataclass(frozen=True)
class InventorySnapshot:
    timestamp: int
    seq: int
    weights: tuple[WeightSlot, ...]
    eggs: tuple[bool, ...]
    bottles: tuple[bool, ...]
    temp_level: TempLevel
    image_ref: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "weights", tuple(self.weights))
        object.__setattr__(self, "eggs", tuple(bool(e) for e in self.eggs))
        object.__setattr__(self, "bottles", tuple(bool(b) for b in self.bottles))
        object.__setattr__(self, "temp_level", TempLevel(self.temp_level))
        if len(self.weights) != LAYOUT.weight_slots:
            raise ValueError("snapshot needs 6 weight slots")
        if len(self.eggs) != LAYOUT.egg_slots or len(self.bottles) != LAYOUT.bottle_slots:
            raise ValueError("snapshot needs 16 egg and 4 bottle states")
        if self.seq < 0 or self.timestamp < 0:
            raise ValueError("seq and timestamp are non-negative")

    @property
    def egg_count(self) -> int:
        return sum(self.eggs)

    @property
    def bottle_count(self) -> int:
        return sum(self.bottles)

    @property
    def present_count(self) -> int:
        return sum(w.present for w in self.weights)


def build_snapshot(
    frame: SensorFrame,
    curves: CalibrationCurve | Sequence[CalibrationCurve],
    timestamp: int,
    prev: Optional[InventorySnapshot] = None,
    presence_threshold: float = DEFAULT_PRESENCE_THRESHOLD_G,
    image_ref: Optional[str] = None,
) -> InventorySnapshot:
    """Calibrate one bus read into a snapshot. ``curves`` is either one curve
    for every channel or one per channel."""
    if isinstance(curves, CalibrationCurve):
        curves = [curves] * LAYOUT.weight_slots
    weights = []
    for curve, reading in zip(curves, frame.readings(), strict=True):
        est = counts_to_grams(curve, reading)
        weights.append(WeightSlot(est.grams, est.uncertainty, est.grams >= presence_threshold))
    return InventorySnapshot(
        timestamp=int(timestamp),
        seq=0 if prev is None else prev.seq + 1,
        weights=tuple(weights),
        eggs=frame.eggs,
        bottles=frame.bottles,
        temp_level=frame.temp_level,
        image_ref=image_ref,
    )


# -- change detection -------------------------------------------------------

def egg_field(index: int) -> str:
    tray, slot = divmod(index, LAYOUT.slots_per_tray)
    return f"eggs[tray{tray}.slot{slot}]"


@dataclass(frozen=True)
class ChangeSet:
    changed_fields: frozenset[str]
    prev_seq: Optional[int]
    next_seq: int

    def __bool__(self) -> bool:
        return bool(self.changed_fields)


def changed_fields(
    a: InventorySnapshot,
    b: InventorySnapshot,
    weight_deadband: float = DEFAULT_WEIGHT_DEADBAND_G,
) -> frozenset[str]:
    """Field-level difference; symmetric in its two arguments."""
    out = set()
    for i, (wa, wb) in enumerate(zip(a.weights, b.weights)):
        if wa.present != wb.present or abs(wa.grams - wb.grams) > weight_deadband:
            out.add(f"weights[{i}]")
    out.update(egg_field(i) for i, (x, y) in enumerate(zip(a.eggs, b.eggs)) if x != y)
    out.update(f"bottles[{i}]" for i, (x, y) in enumerate(zip(a.bottles, b.bottles)) if x != y)
    return frozenset(out)


class SequenceError(ValueError):
    pass


def diff(
    prev: Optional[InventorySnapshot],
    next: InventorySnapshot,
    weight_deadband: float = DEFAULT_WEIGHT_DEADBAND_G,
) -> ChangeSet:
    """Changes from ``prev`` to ``next``. With no ``prev`` every field counts
    as changed. This is the only predicate the gateway uses to decide whether
    to upload."""
    if prev is None:
        blank = replace(
            next,
            weights=tuple(WeightSlot(0.0, 0.0, False) for _ in next.weights),
            eggs=(False,) * LAYOUT.egg_slots,
            bottles=(False,) * LAYOUT.bottle_slots,
        )
        fields = changed_fields(blank, next, -1.0)
        return ChangeSet(fields, None, next.seq)
    if next.seq <= prev.seq:
        raise SequenceError(f"seq went from {prev.seq} to {next.seq}")
    return ChangeSet(changed_fields(prev, next, weight_deadband), prev.seq, next.seq)


# -- stock rules ------------------------------------------------------------

_RULE_RE = re.compile(r"^\s*(eggs|bottles|weights|weight\[(\d+)\])\s*>=\s*(\d+(?:\.\d+)?)\s*$")


@dataclass(frozen=True)
class DeficiencyRule:
    """``eggs``/``bottles``/``weights`` compare a present-item count; ``weight``
    with a slot index compares that slot's grams."""

    target: str
    minimum: float
    slot: Optional[int] = None

    def __str__(self) -> str:
        name = f"weight[{self.slot}]" if self.target == "weight" else self.target
        return f"{name} >= {self.minimum:g}"

    def current(self, snapshot: InventorySnapshot) -> float:
        if self.target == "eggs":
            return snapshot.egg_count
        if self.target == "bottles":
            return snapshot.bottle_count
        if self.target == "weights":
            return snapshot.present_count
        return snapshot.weights[self.slot].grams


@dataclass(frozen=True)
class Alert:
    rule: DeficiencyRule
    value: float

    def __str__(self) -> str:
        name = f"weight[{self.rule.slot}]" if self.rule.target == "weight" else self.rule.target
        unit = " g" if self.rule.target == "weight" else ""
        return f"{name} {self.value:g}{unit} < {self.rule.minimum:g}{unit}"


@dataclass(frozen=True)
class AlertReport:
    alerts: tuple[Alert, ...] = field(default_factory=tuple)

    def __bool__(self) -> bool:
        return bool(self.alerts)


def parse_rule(text: str) -> DeficiencyRule:
    m = _RULE_RE.match(text)
    if not m:
        raise ValueError(f"cannot parse rule {text!r}")
    name, slot, minimum = m.groups()
    if slot is not None:
        slot = int(slot)
        if not 0 <= slot < LAYOUT.weight_slots:
            raise ValueError(f"weight slot {slot} out of range")
        return DeficiencyRule("weight", float(minimum), slot)
    return DeficiencyRule(name, float(minimum))


def parse_rules(text: str) -> list[DeficiencyRule]:
    rules = []
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            rules.append(parse_rule(line))
    return rules


def evaluate_deficiencies(
    snapshot: InventorySnapshot, rules: Iterable[DeficiencyRule]
) -> AlertReport:
    alerts = []
    for rule in rules:
        value = rule.current(snapshot)
        if value < rule.minimum:
            alerts.append(Alert(rule, value))
    return AlertReport(tuple(alerts))


# -- JSON document ----------------------------------------------------------

class SnapshotParseError(ValueError):
    pass


class MalformedDocument(SnapshotParseError):
    pass


class MissingField(SnapshotParseError):
    pass


class WrongType(SnapshotParseError):
    pass


def snapshot_to_dict(snapshot: InventorySnapshot) -> dict:
    return {
        "version": SNAPSHOT_VERSION,
        "timestamp": snapshot.timestamp,
        "seq": snapshot.seq,
        "temp_level": snapshot.temp_level.value,
        "weights": [
            {"grams": w.grams, "uncertainty": w.uncertainty, "present": w.present}
            for w in snapshot.weights
        ],
        "eggs": list(snapshot.eggs),
        "bottles": list(snapshot.bottles),
        "image_ref": snapshot.image_ref,
    }


def serialize_snapshot(snapshot: InventorySnapshot) -> bytes:
    return json.dumps(
        snapshot_to_dict(snapshot), sort_keys=True, separators=(",", ":"), ensure_ascii=True
    ).encode("ascii")


def _take(doc: dict, key: str, kind, where: str = ""):
    if key not in doc:
        raise MissingField(f"missing field {where}{key}")
    value = doc[key]
    ok = (
        isinstance(value, bool)
        if kind is bool
        else isinstance(value, kind) and not isinstance(value, bool)
    )
    if not ok:
        raise WrongType(f"field {where}{key} should be {getattr(kind, '__name__', kind)}")
    return value


def _flags(doc: dict, key: str, size: int) -> tuple[bool, ...]:
    values = _take(doc, key, list)
    if len(values) != size or not all(isinstance(v, bool) for v in values):
        raise WrongType(f"field {key} should be {size} booleans")
    return tuple(values)


def parse_snapshot(octets: bytes) -> InventorySnapshot:
    try:
        doc = json.loads(octets)
    except (ValueError, UnicodeDecodeError) as exc:
        raise MalformedDocument(str(exc)) from None
    if not isinstance(doc, dict):
        raise MalformedDocument("snapshot document must be a JSON object")
    version = _take(doc, "version", int)
    if version != SNAPSHOT_VERSION:
        raise MalformedDocument(f"unsupported snapshot version {version}")
    raw_weights = _take(doc, "weights", list)
    if len(raw_weights) != LAYOUT.weight_slots:
        raise WrongType("field weights should hold 6 entries")
    weights = []
    for i, w in enumerate(raw_weights):
        if not isinstance(w, dict):
            raise WrongType(f"weights[{i}] should be an object")
        where = f"weights[{i}]."
        grams = _take(w, "grams", (int, float), where)
        unc = _take(w, "uncertainty", (int, float), where)
        present = _take(w, "present", bool, where)
        if grams < 0:
            raise WrongType(f"{where}grams is negative")
        weights.append(WeightSlot(grams, unc, present))
    if "image_ref" not in doc:
        raise MissingField("missing field image_ref")
    image_ref = doc["image_ref"]
    if image_ref is not None and not isinstance(image_ref, str):
        raise WrongType("field image_ref should be a string or null")
    level = _take(doc, "temp_level", str)
    try:
        level = TempLevel(level)
    except ValueError:
        raise WrongType(f"unknown temp_level {level!r}") from None
    timestamp = _take(doc, "timestamp", int)
    seq = _take(doc, "seq", int)
    if timestamp < 0 or seq < 0:
        raise WrongType("timestamp and seq must be non-negative")
    return InventorySnapshot(
        timestamp=timestamp,
        seq=seq,
        weights=tuple(weights),
        eggs=_flags(doc, "eggs", LAYOUT.egg_slots),
        bottles=_flags(doc, "bottles", LAYOUT.bottle_slots),
        temp_level=level,
        image_ref=image_ref,
    )
