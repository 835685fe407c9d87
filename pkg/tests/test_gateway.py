import json
from dataclasses import replace

import pytest

from fridgesim.bus import BusLink, SlaveNode
from fridgesim.calibration import default_curve
from fridgesim.cloud import AuthError, QuotaExceeded
from fridgesim.config import Backoff, default_config
from fridgesim.gateway import Action, CycleRecord, Gateway, scene_id
from fridgesim.inventory import parse_snapshot
from fridgesim.sensors import TempLevel, default_weight_model, read_weight


class FakeUploader:
    """Records uploads; raises ``QuotaExceeded`` while ``failing`` is set."""

    def __init__(self):
        self.failing = False
        self.calls = []
        self.stored = []

    def upload(self, path, octets, now):
        self.calls.append((now, path))
        if self.failing:
            raise QuotaExceeded("quota")
        self.stored.append((path, octets))
        return len(self.stored)


class Rig:
    def __init__(self, image_every_n=0, flips=()):
        cfg = default_config().gateway
        self.config = replace(cfg, image_every_n=image_every_n)
        self.models = [default_weight_model(i, self.config.sensor_offsets[i], 0) for i in range(6)]
        self.masses = [0.0] * 6
        self.eggs = [False] * 16
        self.slave = SlaveNode()
        self.uploader = FakeUploader()
        self.gateway = Gateway(self.config, BusLink(self.slave, flips), default_curve(), self.uploader)

    def poll(self, now):
        readings = [read_weight(m, g, TempLevel.OFF) for m, g in zip(self.models, self.masses)]
        self.slave.update(readings, self.eggs, [False] * 4)
        return self.gateway.poll_cycle(now)


def test_first_cycle_uploads_then_skips():
    rig = Rig()
    assert rig.poll(0).action is Action.UPLOAD
    assert [rig.poll(t).action for t in (1000, 2000)] == [Action.SKIP, Action.SKIP]
    assert rig.uploader.stored[0][0] == "inventory_0.json"


def test_upload_on_change_only():
    rig = Rig()
    rig.poll(0)
    rig.eggs[5] = True
    rec = rig.poll(1000)
    assert rec.action is Action.UPLOAD and rec.changed == ("eggs[tray0.slot5]",)
    assert rig.poll(2000).action is Action.SKIP
    rig.masses[2] = 10.0  # inside the deadband
    assert rig.poll(3000).action is Action.SKIP
    assert len(rig.uploader.stored) == 2


def test_backoff_schedule_under_quota():
    rig = Rig()
    rig.poll(0)
    rig.uploader.failing = True
    rig.eggs[0] = True
    attempts = []
    for t in range(1000, 400_000, 1000):
        rec = rig.poll(t)
        if rec.retry_at is not None:
            attempts.append((t, rec.retry_at))
    delays = [r - t for t, r in attempts[:8]]
    assert delays == [1000, 2000, 4000, 8000, 16000, 32000, 60000, 60000]
    # attempts happen exactly when due
    for (_, due), (t_next, _) in zip(attempts, attempts[1:]):
        assert t_next == due


def test_backoff_values():
    b = Backoff(1000, 2.0, 60000)
    assert [b.delay(i) for i in range(8)] == [1000, 2000, 4000, 8000, 16000, 32000, 60000, 60000]


def test_pending_coalesces_to_newest():
    rig = Rig()
    rig.poll(0)
    rig.uploader.failing = True
    rig.eggs[0] = True
    assert rig.poll(1000).action is Action.QUOTA_DEFER
    rig.eggs[1] = True
    rec = rig.poll(1500)  # before retry_at
    assert rec.action is Action.QUOTA_DEFER and rec.retry_at is None
    assert rig.gateway.state.pending.egg_count == 2
    rig.uploader.failing = False
    rec = rig.poll(2000)
    assert rec.action is Action.UPLOAD
    doc = parse_snapshot(rig.uploader.stored[-1][1])
    assert doc.egg_count == 2 and doc.seq == rec.seq
    assert len(rig.uploader.stored) == 2


def test_pending_dropped_when_contents_revert():
    rig = Rig()
    rig.poll(0)
    rig.uploader.failing = True
    rig.eggs[0] = True
    rig.poll(1000)
    rig.eggs[0] = False
    assert rig.poll(1500).action is Action.SKIP
    assert rig.gateway.state.pending is None


def test_recover_retries_immediately():
    rig = Rig()
    assert rig.gateway.recover(0) is None
    rig.poll(0)
    rig.uploader.failing = True
    rig.eggs[3] = True
    rig.poll(1000)
    rig.uploader.failing = False
    rec = rig.gateway.recover(1100)
    assert rec.action is Action.UPLOAD and rig.gateway.state.pending is None
    assert not rig.gateway.due_for_retry(5000)


def test_auth_error_propagates():
    rig = Rig()

    def deny(path, octets, now):
        raise AuthError("bad signature")

    rig.uploader.upload = deny
    with pytest.raises(AuthError):
        rig.poll(0)


def test_single_corrupt_read_is_retried():
    rig = Rig(flips=[(0, 3)])
    rec = rig.poll(0)
    assert rec.action is Action.UPLOAD and rig.gateway.state.error_count == 0


def test_double_corrupt_read_is_bus_error():
    rig = Rig(flips=[(0, 3), (1, 9)])
    rec = rig.poll(0)
    assert rec.action is Action.BUS_ERROR and rec.seq is None
    assert rig.gateway.state.error_count == 1
    assert rig.poll(1000).action is Action.UPLOAD


def test_images_follow_schedule():
    rig = Rig(image_every_n=2)
    rig.poll(0)
    for i, t in enumerate((1000, 2000, 3000)):
        rig.eggs[i] = True
        rig.poll(t)
    paths = [p for p, _ in rig.uploader.stored]
    assert paths == ["body_0.jpg", "inventory_0.json", "inventory_1.json",
                     "body_2.jpg", "inventory_2.json", "inventory_3.json"]
    assert json.loads(rig.uploader.stored[1][1])["image_ref"] == "body_0.jpg"
    assert rig.uploader.stored[0][1][:2] == b"\xff\xd8"


def test_image_not_reuploaded_on_inventory_retry():
    rig = Rig(image_every_n=1)
    calls = {"n": 0}
    orig = rig.uploader.upload

    def flaky(path, octets, now):
        calls["n"] += 1
        if calls["n"] == 2:  # image lands, inventory bounces
            raise QuotaExceeded("quota")
        return orig(path, octets, now)

    rig.uploader.upload = flaky
    assert rig.poll(0).action is Action.QUOTA_DEFER
    assert rig.poll(1000).action is Action.UPLOAD
    assert [p for p, _ in rig.uploader.stored] == ["body_0.jpg", "inventory_1.json"]
    assert json.loads(rig.uploader.stored[1][1])["image_ref"] == "body_0.jpg"


def test_cycle_record_line():
    rec = CycleRecord(3000, 4, Action.QUOTA_DEFER, None, ("bottles[1]", "eggs[tray0.slot2]"), 5000)
    assert rec.line() == "ts=3000 seq=4 action=quota-defer retry_at=5000 changed=bottles[1],eggs[tray0.slot2]"
    assert CycleRecord(0, None, Action.BUS_ERROR).line() == "ts=0 seq=- action=bus-error"


def test_scene_id_ignores_time():
    rig = Rig()
    rig.poll(0)
    a = rig.gateway.state.current
    rig.poll(1000)
    assert scene_id(a) == scene_id(rig.gateway.state.current)


def _heartbeat_rig(ms):
    rig = Rig()
    rig.config = replace(rig.config, heartbeat_ms=ms)
    rig.gateway.config = rig.config
    return rig


def test_heartbeat_off_by_default():
    assert default_config().gateway.heartbeat_ms == 0
    rig = Rig()
    actions = [rig.poll(t).action for t in range(0, 120_000, 1000)]
    assert actions.count(Action.UPLOAD) == 1 and Action.HEARTBEAT not in actions


def test_heartbeat_resends_unchanged_snapshot():
    rig = _heartbeat_rig(5000)
    recs = [rig.poll(t) for t in range(0, 12_000, 1000)]
    beats = [r.ts for r in recs if r.action is Action.HEARTBEAT]
    assert beats == [5000, 10000]
    st = rig.gateway.state
    assert st.upload_count == 3 and st.heartbeat_count == 2 and st.nonempty_changes == 1
    assert parse_snapshot(rig.uploader.stored[-1][1]).seq == recs[-2].seq


def test_heartbeat_backs_off_under_quota():
    rig = _heartbeat_rig(2000)
    rig.poll(0)
    rig.uploader.failing = True
    recs = [rig.poll(t) for t in range(1000, 20_000, 1000)]
    tries = [r.ts for r in recs if r.action is Action.QUOTA_DEFER]
    assert tries == [2000, 3000, 5000, 9000, 17000]
    assert rig.gateway.state.pending is None
