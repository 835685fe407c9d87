import hashlib

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fridgesim import tables
from fridgesim.sensors import (
    LAYOUT,
    BottleSlotModel,
    EggMode,
    EggSwitch,
    SaturationError,
    SensorStreams,
    SizeClass,
    TempLevel,
    bottle_switch_state,
    camera_capture,
    default_weight_model,
    egg_switch_state,
    egg_trigger_stats,
    read_weight,
)

# least-squares slope of the 30 off-state cells, from closed-form normal
# equations evaluated in plain Python (see test_calibration)
TABLE1_GAIN = 653.3033142857142

# sha256 of camera_capture("empty"), frozen on first generation
D_EMPTY = "87cc0d699af3573df4d7484dd135d70db15ae3432f0a1b3bc6c8588af2c6ebec"


def quiet(sensor_id=0):
    return default_weight_model(sensor_id, noise_span=0)


def test_layout_counts():
    assert (LAYOUT.weight_slots, LAYOUT.egg_trays, LAYOUT.slots_per_tray) == (6, 2, 8)
    assert LAYOUT.bottle_slots == 4 and LAYOUT.cameras == 1
    assert LAYOUT.egg_slots == 16


def test_zero_mass_off_is_first_replicate():
    assert read_weight(quiet(), 0, TempLevel.OFF).counts == 183515


def test_zero_mass_t1_returns_level_offset():
    assert read_weight(quiet(), 0, TempLevel.T1).counts == 168423


def test_300g_off_uses_fitted_gain():
    reading = read_weight(quiet(), 300, TempLevel.OFF)
    assert reading.counts == 183515 + round(300 * TABLE1_GAIN)
    # within desk-scale tolerance (5 g worth of counts) of the published cell
    assert abs(reading.counts - 377682) <= 5 * TABLE1_GAIN


def test_default_gain_matches_oracle():
    assert quiet().gain_counts_per_gram == pytest.approx(TABLE1_GAIN, abs=1e-6)


def test_noise_bounded_and_seeded():
    model = default_weight_model(0)
    a = [read_weight(model, 100, TempLevel.OFF, np.random.default_rng(5)).counts for _ in range(3)]
    assert len(set(a)) == 1
    base = read_weight(quiet(), 100, TempLevel.OFF).counts
    rng = np.random.default_rng(9)
    draws = [read_weight(model, 100, TempLevel.OFF, rng).counts - base for _ in range(2000)]
    assert min(draws) >= -103 and max(draws) <= 103
    assert min(draws) == -103 and max(draws) == 103


def test_saturation():
    with pytest.raises(SaturationError):
        read_weight(quiet(), 20_000, TempLevel.OFF)
    with pytest.raises(ValueError):
        read_weight(quiet(), -1, TempLevel.OFF)


def test_noise_requires_rng():
    with pytest.raises(ValueError):
        read_weight(default_weight_model(0), 10, TempLevel.OFF)


@given(
    st.floats(0, 5000, allow_nan=False),
    st.floats(0, 5000, allow_nan=False),
    st.sampled_from(list(TempLevel)),
    st.integers(0, 5),
)
def test_reading_is_affine_in_mass(m1, m2, temp, sensor):
    model = default_weight_model(sensor, offset_shift=sensor * 700.0, noise_span=0)
    lhs = read_weight(model, m1, temp).counts + read_weight(model, m2, temp).counts
    lhs -= read_weight(model, 0, temp).counts
    assert abs(lhs - read_weight(model, m1 + m2, temp).counts) <= 1


def test_on_state_below_off_state_every_cell():
    off = {}
    for c in tables.off_state_cells():
        off.setdefault(c.mass_g, []).append(c.counts)
    on = list(tables.on_state_cells())
    assert len(on) == 30
    for cell in on:
        # row-wise: every on-state count sits below every off-state replicate
        assert cell.counts < min(off[cell.mass_g])


def test_table4_deterministic_totals():
    cells = tables.egg_trigger_cells()
    assert len(cells) == 48
    for size, good in ((SizeClass.SMALL, 11), (SizeClass.NORMAL, 13), (SizeClass.BIG, 15)):
        states = [
            egg_switch_state(t, s, True, size, EggMode.DETERMINISTIC)
            for t in range(2)
            for s in range(8)
        ]
        assert states.count(EggSwitch.TRIGGERED) == good
        assert states.count(EggSwitch.LOOSE) == 16 - good
        assert egg_trigger_stats(size).good_count_of_16 == good


def test_table4_cell_small_tray1_switch4_is_loose():
    assert egg_switch_state(0, 3, True, SizeClass.SMALL, EggMode.DETERMINISTIC) is EggSwitch.LOOSE


def test_table4_grid_reproduced_cell_by_cell():
    for cell in tables.egg_trigger_cells():
        got = egg_switch_state(cell.tray, cell.slot, True, SizeClass(cell.size_class))
        assert (got is EggSwitch.TRIGGERED) == cell.good


@pytest.mark.parametrize("mode", list(EggMode))
def test_empty_egg_slot_is_open(mode):
    assert egg_switch_state(1, 0, False, SizeClass.BIG, mode, np.random.default_rng(0)) is EggSwitch.OPEN


def test_settled_egg_triggers():
    assert egg_switch_state(0, 3, True, SizeClass.SMALL, settled=True) is EggSwitch.TRIGGERED


@pytest.mark.parametrize("tray,slot", [(2, 0), (-1, 0), (0, 8), (0, -1)])
def test_egg_index_errors(tray, slot):
    with pytest.raises(IndexError):
        egg_switch_state(tray, slot, True)


@pytest.mark.parametrize("size,good", [(SizeClass.SMALL, 11), (SizeClass.NORMAL, 13), (SizeClass.BIG, 15)])
def test_seeded_egg_ratio(size, good):
    rng = np.random.default_rng(1234)
    hits = sum(
        egg_switch_state(0, 0, True, size, EggMode.SEEDED, rng) is EggSwitch.TRIGGERED
        for _ in range(10_000)
    )
    assert abs(hits / 10_000 - good / 16) <= 0.02


def test_table3_rows():
    model = BottleSlotModel()
    rows = tables.bottle_trigger_rows()
    assert len(rows) == 11
    for volume, on in rows:
        assert bottle_switch_state(model, volume) is on
    assert bottle_switch_state(model, 200) is False
    assert bottle_switch_state(model, 300) is True
    assert bottle_switch_state(model, 0) is False


@given(st.floats(0, 2000), st.floats(0, 2000))
def test_bottle_monotone(a, b):
    lo, hi = sorted((a, b))
    model = BottleSlotModel()
    assert bottle_switch_state(model, lo) <= bottle_switch_state(model, hi)


def test_bottle_threshold_positive():
    with pytest.raises(ValueError):
        BottleSlotModel(0)


def test_camera_golden_and_framing():
    blob = camera_capture("empty")
    assert blob[:2] == b"\xff\xd8" and blob[-2:] == b"\xff\xd9"
    assert blob[2:4] == b"\xff\xe0" and blob[6:11] == b"JFIF\x00"
    assert hashlib.sha256(blob).hexdigest() == D_EMPTY
    assert camera_capture("empty") == blob


def test_camera_distinct_scenes():
    scenes = ["empty", "full", "eggs-only", "w100000-e0-b0", "w000000-e1-b0", ""]
    digests = {hashlib.sha256(camera_capture(s)).digest() for s in scenes}
    assert len(digests) == len(scenes)


def test_streams_independent_of_other_channels():
    a = SensorStreams(42)
    first = a.get("weight", 3).integers(0, 1 << 30, 5)
    b = SensorStreams(42)
    b.get("weight", 0).integers(0, 10, 100)
    b.get("egg", 7).random(50)
    assert np.array_equal(b.get("weight", 3).integers(0, 1 << 30, 5), first)
    assert not np.array_equal(SensorStreams(43).get("weight", 3).integers(0, 1 << 30, 5), first)
