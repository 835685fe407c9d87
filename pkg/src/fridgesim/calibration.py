"""Counts <-> grams calibration for HX711-style load-cell channels.

The model is one shared gain with one offset per temperature level:

    counts = offset[level] + gain * grams

It is fitted by ordinary least squares pooled across levels (the within-level
estimator), then inverted to turn raw readings into mass estimates.
``LoadCellCalibrator`` wraps the same fit behind the scikit-learn estimator
protocol so it can sit in a ``Pipeline`` or be cloned/grid-searched.
"""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from fridgesim import tables
from fridgesim.sensors import RawWeightReading, TempLevel, WeightChannelModel, read_weight

CALIBRATION_FORMAT_VERSION = 1


class CalibrationError(ValueError):
    pass


class DegenerateFitError(CalibrationError):
    """Fewer than two distinct masses for a level."""


class ZeroVarianceError(CalibrationError):
    """Counts do not vary with mass."""


class MissingLevelError(CalibrationError, KeyError):
    """Reading taken at a level the curve was never fitted for."""

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""


@dataclass(frozen=True)
class CalibrationSample:
    mass: float
    counts: int
    temp_level: TempLevel

    def __post_init__(self):
        if self.mass < 0:
            raise ValueError("calibration mass must be non-negative")
        object.__setattr__(self, "temp_level", TempLevel(self.temp_level))


@dataclass(frozen=True)
class GramsEstimate:
    grams: float
    uncertainty: float
    clamped: bool = False


@dataclass(frozen=True)
class CalibrationCurve:
    gain_counts_per_gram: float
    offset_counts_by_level: Mapping[TempLevel, float]
    r_squared: float = 1.0
    residual_max_counts: float = 0.0

    def __post_init__(self):
        if not self.gain_counts_per_gram > 0:
            raise CalibrationError("gain must be positive")
        if not self.r_squared <= 1.0 + 1e-12:
            raise CalibrationError("r_squared above 1")
        if self.residual_max_counts < 0:
            raise CalibrationError("negative residual bound")
        object.__setattr__(
            self,
            "offset_counts_by_level",
            {TempLevel(k): float(v) for k, v in self.offset_counts_by_level.items()},
        )

    @property
    def uncertainty_grams(self) -> float:
        return self.residual_max_counts / self.gain_counts_per_gram

    def offset(self, level: TempLevel) -> float:
        try:
            return self.offset_counts_by_level[TempLevel(level)]
        except (KeyError, ValueError):
            raise MissingLevelError(f"curve has no offset for level {level!r}") from None

    def shifted(self, counts: float) -> "CalibrationCurve":
        """Same curve with every offset moved by ``counts`` (per-channel tare)."""
        return CalibrationCurve(
            self.gain_counts_per_gram,
            {k: v + counts for k, v in self.offset_counts_by_level.items()},
            self.r_squared,
            self.residual_max_counts,
        )


def fit_curve(samples: Iterable[CalibrationSample]) -> CalibrationCurve:
    samples = list(samples)
    by_level: dict[TempLevel, list[CalibrationSample]] = {}
    for s in samples:
        by_level.setdefault(s.temp_level, []).append(s)
    if TempLevel.OFF not in by_level:
        raise DegenerateFitError("calibration needs Off-state samples")
    for level, group in by_level.items():
        if len({s.mass for s in group}) < 2:
            raise DegenerateFitError(f"level {level.value} has fewer than 2 distinct masses")

    mass = np.array([s.mass for s in samples], dtype=float)
    counts = np.array([s.counts for s in samples], dtype=float)
    if np.ptp(counts) == 0:
        raise ZeroVarianceError("all calibration counts are identical")

    # within-level centring removes the per-level intercepts
    levels = [s.temp_level for s in samples]
    mass_c = mass.copy()
    counts_c = counts.copy()
    means = {}
    for level in by_level:
        idx = np.array([lv is level for lv in levels])
        means[level] = (mass[idx].mean(), counts[idx].mean())
        mass_c[idx] -= means[level][0]
        counts_c[idx] -= means[level][1]

    sxy = float(mass_c @ counts_c)
    sxx = float(mass_c @ mass_c)
    gain = sxy / sxx
    if abs(gain) < 1e-12 or float(counts_c @ counts_c) == 0:
        raise ZeroVarianceError("counts do not vary with mass")
    if gain < 0:
        raise CalibrationError(f"fitted gain {gain:.3f} is negative")

    offsets = {level: mc - gain * mm for level, (mm, mc) in means.items()}
    fitted = np.array([offsets[lv] for lv in levels]) + gain * mass
    residual = counts - fitted
    ss_tot = float(((counts - counts.mean()) ** 2).sum())
    r_squared = 1.0 - float(residual @ residual) / ss_tot
    return CalibrationCurve(
        gain_counts_per_gram=gain,
        offset_counts_by_level=offsets,
        r_squared=min(r_squared, 1.0),
        residual_max_counts=float(np.abs(residual).max()),
    )


def counts_to_grams(curve: CalibrationCurve, reading: RawWeightReading) -> GramsEstimate:
    grams = (reading.counts - curve.offset(reading.temp_level)) / curve.gain_counts_per_gram
    clamped = grams < 0
    return GramsEstimate(max(grams, 0.0), curve.uncertainty_grams, clamped)


def round_trip_check(
    curve: CalibrationCurve,
    model: WeightChannelModel,
    mass: float,
    temp: TempLevel,
    rng: np.random.Generator | None = None,
) -> float:
    """Absolute error (g) of simulating a reading of ``mass`` and inverting it."""
    reading = read_weight(model, mass, temp, rng)
    return abs(counts_to_grams(curve, reading).grams - mass)


def table_samples(include_on_state: bool = True) -> list[CalibrationSample]:
    cells = list(tables.off_state_cells())
    if include_on_state:
        cells += tables.on_state_cells()
    return [CalibrationSample(c.mass_g, c.counts, TempLevel(c.level)) for c in cells]


def default_curve() -> CalibrationCurve:
    """Pooled fit over both bundled weight tables (all six levels)."""
    return fit_curve(table_samples(include_on_state=True))


# -- calibration file -------------------------------------------------------

def write_curve(curve: CalibrationCurve, path: str | Path) -> None:
    lines = [
        "# fridgesim load-cell calibration",
        f"version = {CALIBRATION_FORMAT_VERSION}",
        f"gain_counts_per_gram = {curve.gain_counts_per_gram!r}",
        f"r_squared = {curve.r_squared!r}",
        f"residual_max_counts = {curve.residual_max_counts!r}",
    ]
    for level in TempLevel:
        if level in curve.offset_counts_by_level:
            lines.append(f"offset.{level.value} = {curve.offset_counts_by_level[level]!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_curve(path: str | Path) -> CalibrationCurve:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    parser.read_string("[curve]\n" + Path(path).read_text(encoding="utf-8"))
    section = parser["curve"]
    version = int(section.get("version", "0"))
    if version != CALIBRATION_FORMAT_VERSION:
        raise CalibrationError(f"unsupported calibration file version {version}")
    offsets = {
        TempLevel(key.split(".", 1)[1]): float(value)
        for key, value in section.items()
        if key.startswith("offset.")
    }
    return CalibrationCurve(
        gain_counts_per_gram=float(section["gain_counts_per_gram"]),
        offset_counts_by_level=offsets,
        r_squared=float(section["r_squared"]),
        residual_max_counts=float(section["residual_max_counts"]),
    )


# -- estimator interface ----------------------------------------------------

def _levels_from_column(column: np.ndarray) -> list[TempLevel]:
    levels = []
    for value in column:
        if value != math.floor(value) or not 0 <= value < len(TempLevel):
            raise ValueError(f"temperature level index must be an integer in 0..5, got {value}")
        levels.append(TempLevel.from_index(int(value)))
    return levels


class LoadCellCalibrator(RegressorMixin, BaseEstimator):
    """Estimator mapping ``[counts, level_index]`` rows to grams.

    ``fit(X, y)`` takes raw counts and level indices in ``X`` (level 0 is
    ``Off``) and the reference masses in ``y``. A 1-column ``X`` means every
    row is at ``default_level``.

    Parameters
    ----------
    default_level : str
        Level assumed for single-column input.
    clamp_negative : bool
        Clip estimates below 0 g to 0.
    """

    def __init__(self, default_level: str = "Off", clamp_negative: bool = True):
        self.default_level = default_level
        self.clamp_negative = clamp_negative

    def _split(self, X):
        if X.shape[1] == 1:
            return X[:, 0], [TempLevel(self.default_level)] * X.shape[0]
        if X.shape[1] != 2:
            raise ValueError(f"expected 1 or 2 columns, got {X.shape[1]}")
        return X[:, 0], _levels_from_column(X[:, 1])

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64, y_numeric=True)
        counts, levels = self._split(X)
        self.curve_ = fit_curve(
            CalibrationSample(float(m), c, lv) for m, c, lv in zip(y, counts, levels)
        )
        self.gain_ = self.curve_.gain_counts_per_gram
        self.offsets_ = dict(self.curve_.offset_counts_by_level)
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "curve_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, fitted with {self.n_features_in_}")
        counts, levels = self._split(X)
        offsets = np.array([self.curve_.offset(lv) for lv in levels])
        grams = (counts - offsets) / self.gain_
        return np.maximum(grams, 0.0) if self.clamp_negative else grams

    def transform(self, X) -> np.ndarray:
        return self.predict(X).reshape(-1, 1)

    def inverse_transform(self, grams, levels: Sequence[TempLevel] | None = None) -> np.ndarray:
        """Expected raw counts for the given masses."""
        check_is_fitted(self, "curve_")
        grams = check_array(grams, ensure_2d=False, dtype=np.float64).ravel()
        if levels is None:
            levels = [TempLevel(self.default_level)] * len(grams)
        offsets = np.array([self.curve_.offset(lv) for lv in levels])
        return offsets + self.gain_ * grams
