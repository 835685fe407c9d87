"""Readers for the bundled measurement tables (CSV fixtures).

table1.csv  load cell #1, fridge off: mass_g, replicate, counts
table2.csv  load cell #1, fridge on:  mass_g, temp (T1..T5), counts
table3.csv  bottle push button:       volume_ml, state (ON/OFF)
table4.csv  egg limit switches:       size_class, tray, slot, quality (1-based tray/slot)
"""

from __future__ import annotations

import csv
import io
from functools import lru_cache
from importlib import resources
from typing import NamedTuple


class WeightCell(NamedTuple):
    mass_g: float
    level: str
    counts: int


class EggCell(NamedTuple):
    size_class: str
    tray: int
    slot: int
    good: bool


def _rows(name: str) -> list[dict[str, str]]:
    text = resources.files("fridgesim.data").joinpath(name).read_text(encoding="utf-8")
    return list(csv.DictReader(io.StringIO(text)))


@lru_cache(maxsize=None)
def off_state_cells() -> tuple[WeightCell, ...]:
    return tuple(
        WeightCell(float(r["mass_g"]), "Off", int(r["counts"])) for r in _rows("table1.csv")
    )


@lru_cache(maxsize=None)
def on_state_cells() -> tuple[WeightCell, ...]:
    return tuple(
        WeightCell(float(r["mass_g"]), r["temp"], int(r["counts"])) for r in _rows("table2.csv")
    )


@lru_cache(maxsize=None)
def bottle_trigger_rows() -> tuple[tuple[int, bool], ...]:
    return tuple((int(r["volume_ml"]), r["state"] == "ON") for r in _rows("table3.csv"))


@lru_cache(maxsize=None)
def egg_trigger_cells() -> tuple[EggCell, ...]:
    # stored 1-based as printed; exposed 0-based
    return tuple(
        EggCell(r["size_class"], int(r["tray"]) - 1, int(r["slot"]) - 1, r["quality"] == "Good")
        for r in _rows("table4.csv")
    )
