"""Read-only viewer: fetch the newest inventory document and report on it."""

from __future__ import annotations

import hashlib
import json
import logging
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence, TextIO

from fridgesim.cloud import EmptyStore, HttpChoreoClient, MockStore, StoreError
from fridgesim.inventory import (
    AlertReport,
    DeficiencyRule,
    InventorySnapshot,
    SnapshotParseError,
    evaluate_deficiencies,
    parse_rules,
    parse_snapshot,
    snapshot_to_dict,
)
from fridgesim.sensors import LAYOUT

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ALERTS = 1
EXIT_NO_DATA = 2


@dataclass(frozen=True)
class StatusReport:
    revision: int
    snapshot: InventorySnapshot
    alerts: AlertReport
    staleness_s: float
    image_digest: Optional[str] = None


def build_report(
    snapshot: InventorySnapshot,
    revision: int,
    rules: Sequence[DeficiencyRule],
    now_ms: int,
    image_digest: Optional[str] = None,
) -> StatusReport:
    return StatusReport(
        revision=revision,
        snapshot=snapshot,
        alerts=evaluate_deficiencies(snapshot, rules),
        staleness_s=max(now_ms - snapshot.timestamp, 0) / 1000.0,
        image_digest=image_digest,
    )


def render_text(report: StatusReport) -> str:
    s = report.snapshot
    lines = [
        f"FRIDGE STATUS  revision {report.revision}  seq {s.seq}  age {report.staleness_s:.1f} s",
        f"temperature level  {s.temp_level.value}",
        f"weight slots       {s.present_count}/{LAYOUT.weight_slots} present",
    ]
    for i, w in enumerate(s.weights):
        state = "present" if w.present else "empty"
        lines.append(f"  slot {i}  {w.grams:7.1f} g  +/-{w.uncertainty:.1f} g  {state}")
    lines.append(f"eggs               {s.egg_count}/{LAYOUT.egg_slots}")
    for tray in range(LAYOUT.egg_trays):
        cups = s.eggs[tray * LAYOUT.slots_per_tray:(tray + 1) * LAYOUT.slots_per_tray]
        lines.append(f"  tray {tray}  " + "".join("o" if e else "." for e in cups))
    lines.append(
        f"bottles            {s.bottle_count}/{LAYOUT.bottle_slots}  "
        + "".join("B" if b else "." for b in s.bottles)
    )
    if s.image_ref is None:
        lines.append("image              none")
    else:
        digest = f"  sha256:{report.image_digest}" if report.image_digest else ""
        lines.append(f"image              {s.image_ref}{digest}")
    if report.alerts:
        lines.append(f"alerts             {len(report.alerts.alerts)}")
        lines.extend(f"  ! {a}" for a in report.alerts.alerts)
    else:
        lines.append("alerts             none")
    return "\n".join(lines) + "\n"


def render_json(report: StatusReport) -> str:
    doc = {
        "revision": report.revision,
        "staleness_s": report.staleness_s,
        "snapshot": snapshot_to_dict(report.snapshot),
        "image_digest": report.image_digest,
        "alerts": [str(a) for a in report.alerts.alerts],
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n"


def exit_code(report: Optional[StatusReport]) -> int:
    if report is None:
        return EXIT_NO_DATA
    return EXIT_ALERTS if report.alerts else EXIT_OK


class StoreView:
    """Uniform read access to a store directory or an HTTP endpoint."""

    def __init__(self, spec: str | Path | MockStore | HttpChoreoClient):
        self.spec = spec

    def _open(self):
        if isinstance(self.spec, (MockStore, HttpChoreoClient)):
            return self.spec
        text = str(self.spec)
        if text.startswith(("http://", "https://")):
            return HttpChoreoClient(text)
        path = Path(text)
        if not path.is_dir():
            raise StoreError(f"store directory {text!r} does not exist")
        return MockStore(path)

    def latest(self) -> tuple[bytes, int, Optional[str]]:
        """Newest inventory octets, their revision and the image digest, if any."""
        store = self._open()
        octets, revision = store.fetch_latest()
        digest = None
        try:
            ref = json.loads(octets).get("image_ref")
        except (ValueError, AttributeError):
            ref = None
        if ref:
            try:
                digest = hashlib.sha256(store.get_object(ref)).hexdigest()
            except (StoreError, OSError):
                digest = None
        return octets, revision, digest


def fetch_report(view: StoreView, rules: Sequence[DeficiencyRule], now_ms: int) -> StatusReport:
    octets, revision, digest = view.latest()
    return build_report(parse_snapshot(octets), revision, rules, now_ms, digest)


def load_rules(path: str | Path | None) -> list[DeficiencyRule]:
    if path is None:
        return []
    return parse_rules(Path(path).read_text(encoding="utf-8"))


def _wall_ms() -> int:
    return int(time.time() * 1000)


def cmd_status(
    store: str | Path | MockStore | HttpChoreoClient,
    rules: Sequence[DeficiencyRule] = (),
    now_ms: Optional[int] = None,
    fmt: str = "text",
    out: TextIO | None = None,
    err: TextIO | None = None,
) -> int:
    out = out or sys.stdout
    err = err or sys.stderr
    now_ms = _wall_ms() if now_ms is None else now_ms
    try:
        report = fetch_report(StoreView(store), rules, now_ms)
    except EmptyStore as exc:
        print(f"fridgesim: store is empty: {exc}", file=err)
        return EXIT_NO_DATA
    except (StoreError, OSError, SnapshotParseError) as exc:
        print(f"fridgesim: cannot read store: {exc}", file=err)
        return EXIT_NO_DATA
    out.write(render_json(report) if fmt == "json" else render_text(report))
    return exit_code(report)


def cmd_watch(
    store: str | Path | MockStore | HttpChoreoClient,
    interval_s: float,
    rules: Sequence[DeficiencyRule] = (),
    fmt: str = "text",
    out: TextIO | None = None,
    max_polls: Optional[int] = None,
    sleep: Callable[[float], None] = time.sleep,
    now_ms: Callable[[], int] = _wall_ms,
) -> int:
    """Print a report whenever the store's revision changes. Returns the exit
    code of the last report printed (2 if none)."""
    if not interval_s > 0:
        raise ValueError("interval must be positive")
    out = out or sys.stdout
    view = StoreView(store)
    last_revision = None
    last_code = EXIT_NO_DATA
    polls = 0
    while max_polls is None or polls < max_polls:
        if polls:
            sleep(interval_s)
        polls += 1
        try:
            report = fetch_report(view, rules, now_ms())
        except (StoreError, OSError, SnapshotParseError) as exc:
            log.warning("fetch failed: %s", exc)
            continue
        if report.revision == last_revision:
            continue
        last_revision = report.revision
        out.write(render_json(report) if fmt == "json" else render_text(report))
        out.flush()
        last_code = exit_code(report)
    return last_code
