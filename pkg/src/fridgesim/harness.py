"""Deterministic end-to-end driver on a virtual millisecond clock.

A scenario is a JSON array of timed fridge events, e.g.::

    [{"at": 0,    "action": "PlaceWeight", "slot": 0, "grams": 500},
     {"at": 2000, "action": "PlaceEgg", "tray": 0, "slot": 1, "size": "Small"},
     {"at": 4000, "action": "QuotaSet", "n": 3}]

Each poll tick applies the events due, scans the simulated sensors into the
slave's register file, and runs one gateway cycle against the store.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence

from fridgesim.bus import BusLink, SlaveNode
from fridgesim.calibration import CalibrationCurve, default_curve, read_curve
from fridgesim.client import build_report, render_text
from fridgesim.cloud import (
    ChoreoClient,
    ChoreoEndpoint,
    EmptyStore,
    HttpChoreoClient,
    MockStore,
    QuotaLedger,
    inventory_seq,
    is_inventory_path,
)
from fridgesim.config import SimConfig, default_config
from fridgesim.gateway import Action, Gateway
from fridgesim.inventory import DeficiencyRule, changed_fields, parse_snapshot
from fridgesim.sensors import (
    LAYOUT,
    BottleSlotModel,
    EggSwitch,
    SensorStreams,
    SizeClass,
    TempLevel,
    bottle_switch_state,
    default_weight_model,
    egg_switch_state,
    read_weight,
)


class ScenarioError(ValueError):
    pass


class UnknownAction(ScenarioError):
    pass


class BadIndex(ScenarioError):
    pass


class UnsortedEvents(ScenarioError):
    pass


class InvariantViolation(AssertionError):
    def __init__(self, violations: Sequence[str]):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


# action -> required fields and their validators
_ACTIONS: dict[str, dict[str, str]] = {
    "PlaceWeight": {"slot": "weight_slot", "grams": "nonneg"},
    "RemoveWeight": {"slot": "weight_slot"},
    "PlaceEgg": {"tray": "tray", "slot": "egg_slot", "size": "size"},
    "RemoveEgg": {"tray": "tray", "slot": "egg_slot"},
    "SettleEgg": {"tray": "tray", "slot": "egg_slot"},
    "PlaceBottle": {"slot": "bottle_slot", "ml": "nonneg"},
    "RemoveBottle": {"slot": "bottle_slot"},
    "SetTempLevel": {"level": "level"},
    "QuotaSet": {"n": "count"},
}

_BOUNDS = {
    "weight_slot": LAYOUT.weight_slots,
    "tray": LAYOUT.egg_trays,
    "egg_slot": LAYOUT.slots_per_tray,
    "bottle_slot": LAYOUT.bottle_slots,
}


@dataclass(frozen=True)
class ScenarioEvent:
    at: int
    action: str
    args: tuple[tuple[str, Any], ...] = ()

    def get(self, key: str) -> Any:
        return dict(self.args)[key]


def _validate_arg(kind: str, key: str, value: Any, where: str) -> Any:
    if kind in _BOUNDS:
        if not isinstance(value, int) or isinstance(value, bool):
            raise BadIndex(f"{where}: {key} must be an integer")
        if not 0 <= value < _BOUNDS[kind]:
            raise BadIndex(f"{where}: {key}={value} out of range 0..{_BOUNDS[kind] - 1}")
        return value
    if kind == "nonneg":
        if not isinstance(value, (int, float)) or isinstance(value, bool) or value < 0:
            raise ScenarioError(f"{where}: {key} must be a non-negative number")
        return value
    if kind == "count":
        if not isinstance(value, int) or isinstance(value, bool) or value < 0:
            raise ScenarioError(f"{where}: {key} must be a non-negative integer")
        return value
    if kind == "size":
        try:
            return SizeClass(value).value
        except ValueError:
            raise ScenarioError(f"{where}: unknown egg size {value!r}") from None
    if kind == "level":
        try:
            return TempLevel(value).value
        except ValueError:
            raise ScenarioError(f"{where}: unknown temperature level {value!r}") from None
    raise AssertionError(kind)


def parse_scenario(octets: bytes | str) -> list[ScenarioEvent]:
    try:
        doc = json.loads(octets)
    except ValueError as exc:
        raise ScenarioError(f"scenario is not valid JSON: {exc}") from None
    if not isinstance(doc, list):
        raise ScenarioError("scenario must be a JSON array")
    events = []
    last_at = None
    for i, item in enumerate(doc):
        where = f"event {i}"
        if not isinstance(item, dict):
            raise ScenarioError(f"{where}: must be an object")
        action = item.get("action")
        if action not in _ACTIONS:
            raise UnknownAction(f"{where}: unknown action {action!r}")
        at = item.get("at")
        if not isinstance(at, int) or isinstance(at, bool) or at < 0:
            raise ScenarioError(f"{where}: 'at' must be a non-negative integer (ms)")
        if last_at is not None and at < last_at:
            raise UnsortedEvents(f"{where}: at={at} comes before previous at={last_at}")
        last_at = at
        args = []
        for key, kind in _ACTIONS[action].items():
            if key not in item:
                raise ScenarioError(f"{where}: {action} needs {key!r}")
            args.append((key, _validate_arg(kind, key, item[key], where)))
        extra = set(item) - set(_ACTIONS[action]) - {"at", "action"}
        if extra:
            raise ScenarioError(f"{where}: unexpected fields {sorted(extra)}")
        events.append(ScenarioEvent(at, action, tuple(args)))
    return events


def load_scenario(path: str | Path) -> list[ScenarioEvent]:
    return parse_scenario(Path(path).read_bytes())


@dataclass
class EggCup:
    occupied: bool = False
    size: SizeClass = SizeClass.NORMAL
    switch: EggSwitch = EggSwitch.OPEN


@dataclass
class FridgeContents:
    masses: list[float] = field(default_factory=lambda: [0.0] * LAYOUT.weight_slots)
    eggs: list[EggCup] = field(default_factory=lambda: [EggCup() for _ in range(LAYOUT.egg_slots)])
    bottles: list[float] = field(default_factory=lambda: [0.0] * LAYOUT.bottle_slots)
    temp_level: TempLevel = TempLevel.OFF


@dataclass(frozen=True)
class RunTrace:
    gateway_log: str
    manifest: str
    report: str
    bus_log: str = ""

    def to_bytes(self) -> bytes:
        return (
            "== gateway ==\n" + self.gateway_log
            + "== MANIFEST ==\n" + self.manifest
            + "== report ==\n" + self.report
        ).encode("utf-8")


class Simulation:
    """One fridge, one slave, one gateway and one store, stepped by hand or
    via ``run_until``."""

    def __init__(
        self,
        scenario: Sequence[ScenarioEvent] = (),
        seed: int = 0,
        config: Optional[SimConfig] = None,
        curve: Optional[CalibrationCurve] = None,
        store_dir: str | Path | None = None,
        rules: Sequence[DeficiencyRule] = (),
        bus_log: bool = False,
    ):
        self.config = config or default_config()
        gw_cfg = self.config.gateway
        self.events = list(scenario)
        self._next_event = 0
        self.seed = seed
        self.rules = list(rules)
        self.streams = SensorStreams(seed)
        self.contents = FridgeContents()
        self.models = [
            default_weight_model(i, gw_cfg.sensor_offsets[i], self.config.noise_span)
            for i in range(LAYOUT.weight_slots)
        ]
        self.bottle_model = BottleSlotModel()
        if curve is None:
            curve = read_curve(gw_cfg.calibration_file) if gw_cfg.calibration_file else default_curve()
        self.curve = curve
        self.slave = SlaveNode()
        self._bus_lines: list[str] = []
        self.bus = BusLink(
            self.slave, self.config.bus_bit_flips, self._bus_lines.append if bus_log else None
        )
        self.remote = self.config.store if self.config.store and self.config.store.startswith(("http://", "https://")) else None
        if self.remote:
            self.store = None
            self.endpoint = None
            uploader = HttpChoreoClient(self.remote, gw_cfg.credentials)
            self._reader = uploader
        else:
            self.store = MockStore(store_dir)
            ledger = QuotaLedger(limit=self.config.quota_limit, period=self.config.quota_period_ms)
            self.endpoint = ChoreoEndpoint(self.store, gw_cfg.credentials, ledger)
            uploader = ChoreoClient(self.endpoint, gw_cfg.credentials)
            self._reader = self.store
        self.gateway = Gateway(gw_cfg, self.bus, curve, uploader)
        self.now = 0
        self.cycle = 0
        self.violations: list[str] = []
        self._last_seq: Optional[int] = None
        self._last_revision = 0

    # -- events -----------------------------------------------------------

    def apply(self, event: ScenarioEvent) -> None:
        c = self.contents
        a = event.action
        if a == "PlaceWeight":
            c.masses[event.get("slot")] = float(event.get("grams"))
        elif a == "RemoveWeight":
            c.masses[event.get("slot")] = 0.0
        elif a in ("PlaceEgg", "RemoveEgg", "SettleEgg"):
            tray, slot = event.get("tray"), event.get("slot")
            index = tray * LAYOUT.slots_per_tray + slot
            cup = c.eggs[index]
            if a == "PlaceEgg":
                size = SizeClass(event.get("size"))
                state = egg_switch_state(
                    tray, slot, True, size, self.config.egg_mode, self.streams.get("egg", index)
                )
                c.eggs[index] = EggCup(True, size, state)
            elif a == "RemoveEgg":
                c.eggs[index] = EggCup()
            elif cup.occupied:
                cup.switch = egg_switch_state(tray, slot, True, cup.size, settled=True)
        elif a == "PlaceBottle":
            c.bottles[event.get("slot")] = float(event.get("ml"))
        elif a == "RemoveBottle":
            c.bottles[event.get("slot")] = 0.0
        elif a == "SetTempLevel":
            c.temp_level = TempLevel(event.get("level"))
        elif a == "QuotaSet":
            if self.endpoint is None:
                raise ScenarioError("QuotaSet needs the in-process store")
            self.endpoint.ledger.limit = event.get("n")

    def scan(self) -> None:
        c = self.contents
        readings = [
            read_weight(model, c.masses[i], c.temp_level, self.streams.get("weight", i))
            for i, model in enumerate(self.models)
        ]
        eggs = [cup.switch is EggSwitch.TRIGGERED for cup in c.eggs]
        bottles = [bottle_switch_state(self.bottle_model, v) for v in c.bottles]
        self.slave.update(readings, eggs, bottles)

    # -- stepping ---------------------------------------------------------

    def step(self) -> None:
        """Apply due events, scan, and run one gateway cycle at ``now``."""
        while self._next_event < len(self.events) and self.events[self._next_event].at <= self.now:
            self.apply(self.events[self._next_event])
            self._next_event += 1
        self.scan()
        rec = self.gateway.poll_cycle(self.now)
        self._check_cycle(rec)
        self.cycle += 1
        self.now += self.config.gateway.poll_interval_ms

    def end_time(self) -> int:
        if self.config.duration_ms is not None:
            return self.config.duration_ms
        last = self.events[-1].at if self.events else 0
        return last + self.config.tail_ms

    def run_until(self, end_ms: Optional[int] = None) -> None:
        end_ms = self.end_time() if end_ms is None else end_ms
        while self.now < end_ms:
            self.step()

    # -- invariants -------------------------------------------------------

    def _violate(self, what: str) -> None:
        self.violations.append(f"cycle {self.cycle} (t={self.now} ms): {what}")

    def _check_cycle(self, rec) -> None:
        st = self.gateway.state
        if rec.seq is not None:
            if self._last_seq is not None and rec.seq <= self._last_seq:
                self._violate(f"snapshot seq {rec.seq} not above {self._last_seq}")
            self._last_seq = rec.seq
        if st.upload_count - st.heartbeat_count > st.nonempty_changes:
            self._violate("more uploads than observed changes")
        if st.pending is not None and rec.action is Action.UPLOAD:
            self._violate("pending left set after a successful upload")
        if self.store is not None:
            revision = self.store.revision
            if revision < self._last_revision:
                self._violate("store revision went backwards")
            self._last_revision = revision

    def manifest(self) -> str:
        if self.store is not None:
            return self.store.manifest()
        return self._reader.manifest()

    def inventory_paths(self) -> list[str]:
        return [
            line.split(" ")[1]
            for line in self.manifest().splitlines()
            if is_inventory_path(line.split(" ")[1])
        ]

    def final_checks(self) -> list[str]:
        out = list(self.violations)
        st = self.gateway.state
        paths = self.inventory_paths()
        if len(paths) != st.upload_count:
            out.append(f"end: {len(paths)} inventory objects but {st.upload_count} uploads")
        if paths:
            latest_octets, _ = self._reader.fetch_latest()
            latest = parse_snapshot(latest_octets)
            max_seq = max(inventory_seq(p) for p in paths)
            if latest.seq != max_seq:
                out.append(f"end: latest document seq {latest.seq} but max stored seq {max_seq}")
            if st.pending is None and st.current is not None:
                drift = changed_fields(latest, st.current, self.config.gateway.weight_deadband_g)
                if drift:
                    out.append(f"end: store differs from gateway state in {sorted(drift)}")
        return out

    def final_report(self) -> str:
        try:
            octets, revision = self._reader.fetch_latest()
        except EmptyStore:
            return "store empty\n"
        snap = parse_snapshot(octets)
        digest = None
        if snap.image_ref:
            try:
                digest = hashlib.sha256(self._reader.get_object(snap.image_ref)).hexdigest()
            except EmptyStore:
                digest = None
        return render_text(build_report(snap, revision, self.rules, self.now, digest))

    def trace(self) -> RunTrace:
        return RunTrace(
            gateway_log=self.gateway.log_text(),
            manifest=self.manifest(),
            report=self.final_report(),
            bus_log="".join(line + "\n" for line in self._bus_lines),
        )


def run(
    scenario: Sequence[ScenarioEvent],
    seed: int = 0,
    config: Optional[SimConfig] = None,
    out: str | Path | None = None,
    rules: Sequence[DeficiencyRule] = (),
    check: bool = False,
    curve: Optional[CalibrationCurve] = None,
) -> RunTrace:
    """Run a scenario to completion. With ``out`` the store persists there
    and ``trace.log``, ``report.txt`` and ``bus.log`` are written alongside
    its MANIFEST. With ``check`` any broken invariant raises."""
    sim = Simulation(scenario, seed, config, curve=curve, store_dir=out, rules=rules, bus_log=out is not None)
    sim.run_until()
    trace = sim.trace()
    if out is not None:
        out = Path(out)
        (out / "trace.log").write_text(trace.gateway_log, encoding="utf-8")
        (out / "report.txt").write_text(trace.report, encoding="utf-8")
        (out / "bus.log").write_text(trace.bus_log, encoding="utf-8")
        if sim.store is None:
            (out / "MANIFEST").write_text(trace.manifest, encoding="utf-8")
    if check:
        problems = sim.final_checks()
        if problems:
            raise InvariantViolation(problems)
    return trace
