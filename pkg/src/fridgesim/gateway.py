"""Master node: polls the slave, calibrates, snapshots and uploads on change.

Upload failures caused by the choreo quota (or transport) park the newest
snapshot as ``pending``; later changes overwrite it, so only the most recent
state is ever retried.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Protocol, Sequence

from fridgesim.bus import BusLink, FrameError, RegisterFile, SlaveError, unpack_registers
from fridgesim.calibration import CalibrationCurve
from fridgesim.cloud import AuthError, QuotaExceeded, StoreError
from fridgesim.config import GatewayConfig
from fridgesim.inventory import (
    InventorySnapshot,
    build_snapshot,
    diff,
    image_name,
    inventory_name,
    serialize_snapshot,
)
from fridgesim.sensors import camera_capture

log = logging.getLogger(__name__)


class Uploader(Protocol):
    def upload(self, path: str, octets: bytes, now: int) -> int: ...


class Action(str, enum.Enum):
    SKIP = "skip"
    UPLOAD = "upload"
    HEARTBEAT = "heartbeat"
    QUOTA_DEFER = "quota-defer"
    BUS_ERROR = "bus-error"


@dataclass(frozen=True)
class CycleRecord:
    ts: int
    seq: Optional[int]
    action: Action
    revision: Optional[int] = None
    changed: tuple[str, ...] = ()
    retry_at: Optional[int] = None

    def line(self) -> str:
        parts = [f"ts={self.ts}", f"seq={'-' if self.seq is None else self.seq}", f"action={self.action.value}"]
        if self.revision is not None:
            parts.append(f"rev={self.revision}")
        if self.retry_at is not None:
            parts.append(f"retry_at={self.retry_at}")
        if self.changed:
            parts.append("changed=" + ",".join(self.changed))
        return " ".join(parts)


@dataclass
class GatewayState:
    last_uploaded: Optional[InventorySnapshot] = None
    current: Optional[InventorySnapshot] = None
    pending: Optional[InventorySnapshot] = None
    pending_image_done: bool = False
    retry_attempt: int = 0
    next_retry_at: Optional[int] = None
    upload_count: int = 0
    heartbeat_count: int = 0
    last_upload_at: Optional[int] = None
    heartbeat_after: Optional[int] = None
    skip_count: int = 0
    error_count: int = 0
    nonempty_changes: int = 0
    uploaded_seqs: list[int] = field(default_factory=list)


def scene_id(snapshot: InventorySnapshot) -> str:
    """What the body camera would see: depends on contents, not on time."""
    eggs = "".join("1" if e else "0" for e in snapshot.eggs)
    bottles = "".join("1" if b else "0" for b in snapshot.bottles)
    present = "".join("1" if w.present else "0" for w in snapshot.weights)
    return f"w{present}-e{eggs}-b{bottles}"


class Gateway:
    def __init__(
        self,
        config: GatewayConfig,
        bus: BusLink,
        curves: CalibrationCurve | Sequence[CalibrationCurve],
        uploader: Uploader,
        camera: Callable[[str], bytes] = camera_capture,
    ):
        if isinstance(curves, CalibrationCurve):
            curves = [curves.shifted(off) for off in config.sensor_offsets]
        self.config = config
        self.bus = bus
        self.curves = list(curves)
        self.uploader = uploader
        self.camera = camera
        self.state = GatewayState()
        self.records: list[CycleRecord] = []

    def _record(self, rec: CycleRecord) -> CycleRecord:
        self.records.append(rec)
        log.debug(rec.line())
        return rec

    def _read_registers(self) -> Optional[RegisterFile]:
        for attempt in range(2):
            try:
                return RegisterFile.from_bytes(self.bus.read_window())
            except (FrameError, SlaveError) as exc:
                log.info("bus read failed (attempt %d): %s", attempt + 1, exc)
        return None

    def _image_due(self) -> bool:
        n = self.config.image_every_n
        return n > 0 and self.state.upload_count % n == 0

    def poll_cycle(self, now: int) -> CycleRecord:
        st = self.state
        regs = self._read_registers()
        if regs is None:
            st.error_count += 1
            return self._record(CycleRecord(now, None, Action.BUS_ERROR))

        snap = build_snapshot(
            unpack_registers(regs),
            self.curves,
            now,
            prev=st.current,
            presence_threshold=self.config.presence_threshold_g,
        )
        changes = diff(st.last_uploaded, snap, self.config.weight_deadband_g)
        if not changes:
            st.current = snap
            st.skip_count += 1
            if st.pending is not None:
                # contents fell back to what the store already has
                st.pending = None
                st.pending_image_done = False
                st.retry_attempt = 0
                st.next_retry_at = None
            if self._heartbeat_due(now):
                # same contents, so the stored image still applies
                st.pending = replace(snap, image_ref=st.last_uploaded.image_ref)
                st.pending_image_done = True
                return self._attempt(now, (), heartbeat=True)
            return self._record(CycleRecord(now, snap.seq, Action.SKIP))

        st.nonempty_changes += 1
        if self._image_due():
            snap = replace(snap, image_ref=image_name(snap.seq))
        st.current = snap
        changed = tuple(sorted(changes.changed_fields))
        if st.pending is not None:
            prev = st.pending
            if (
                snap.image_ref is not None
                and st.pending_image_done
                and scene_id(prev) == scene_id(snap)
            ):
                # same scene already stored: reuse it instead of spending quota again
                snap = replace(snap, image_ref=prev.image_ref)
                st.current = snap
            else:
                st.pending_image_done = False
            st.pending = snap
            if now < st.next_retry_at:
                return self._record(CycleRecord(now, snap.seq, Action.QUOTA_DEFER, changed=changed))
        else:
            st.pending = snap
            st.pending_image_done = False
        return self._attempt(now, changed)

    def _heartbeat_due(self, now: int) -> bool:
        hb = self.config.heartbeat_ms
        st = self.state
        if hb <= 0 or st.last_upload_at is None or now - st.last_upload_at < hb:
            return False
        return st.heartbeat_after is None or now >= st.heartbeat_after

    def recover(self, now: int) -> Optional[CycleRecord]:
        """Retry the parked snapshot now. No-op without one."""
        if self.state.pending is None:
            return None
        return self._attempt(now, ())

    def due_for_retry(self, now: int) -> bool:
        st = self.state
        return st.pending is not None and st.next_retry_at is not None and now >= st.next_retry_at

    def _attempt(self, now: int, changed: tuple[str, ...], heartbeat: bool = False) -> CycleRecord:
        st = self.state
        snap = st.pending
        try:
            if snap.image_ref is not None and not st.pending_image_done:
                self.uploader.upload(snap.image_ref, self.camera(scene_id(snap)), now)
                st.pending_image_done = True
            revision = self.uploader.upload(inventory_name(snap.seq), serialize_snapshot(snap), now)
        except AuthError:
            raise
        except (QuotaExceeded, StoreError, OSError) as exc:
            delay = self.config.backoff.delay(st.retry_attempt)
            st.retry_attempt += 1
            st.next_retry_at = now + delay
            if heartbeat:
                # best effort: nothing to keep, just hold off the next one
                st.pending = None
                st.heartbeat_after = st.next_retry_at
            log.info("upload of seq %d deferred %d ms: %s", snap.seq, delay, exc)
            return self._record(
                CycleRecord(now, snap.seq, Action.QUOTA_DEFER, changed=changed, retry_at=st.next_retry_at)
            )
        st.last_uploaded = snap
        st.pending = None
        st.pending_image_done = False
        st.retry_attempt = 0
        st.next_retry_at = None
        st.upload_count += 1
        st.heartbeat_count += heartbeat
        st.last_upload_at = now
        st.heartbeat_after = None
        st.uploaded_seqs.append(snap.seq)
        action = Action.HEARTBEAT if heartbeat else Action.UPLOAD
        return self._record(CycleRecord(now, snap.seq, action, revision, changed))

    def log_text(self) -> str:
        return "".join(r.line() + "\n" for r in self.records)
