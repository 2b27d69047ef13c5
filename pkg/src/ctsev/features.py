"""The 63-value quantitative summary of a segmented chest CT.

Feature layout (ids 1..63, frozen; the same order is used for CSV columns,
importance reports, and model feature ids):

* 1-3    volumes of the whole / right / left lung, mL;
* 4-55   (infection volume mL, infection ratio) pairs for, in order, the
         whole lung, right lung, left lung, the five lobes RB_S, RB_M,
         RB_I, LB_S, LB_I, then segments RS1..RS10 and LS1..LS8 — each
         ratio is taken with respect to its own region's volume;
* 56-63  (volume mL, ratio to whole-lung volume) pairs for the four HU
         bands: normal (-inf,-750), GGO [-750,-300), consolidation
         [-300,50), calcification [50,+inf).
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _kernels
from .errors import DegenerateError, FormatError, SchemaError
from .volume import (
    DEFAULT_LUNG_MAP,
    CtVolume,
    InfectionMask,
    LungMap,
    RegionLabelMap,
    RegionSelector,
    physical_volume,
    region_voxel_count,
    require_infection_within_lung,
    require_same_geometry,
)

logger = logging.getLogger(__name__)

FEATURE_COUNT = 63


@dataclass(frozen=True)
class HuBand:
    """Half-open HU interval [lower, upper) of one tissue class."""

    name: str
    lower: float
    upper: float

    def contains(self, hu: float) -> bool:
        return self.lower <= hu < self.upper

    def int_bounds(self) -> tuple[int, int]:
        """Inclusive int16 HU range of the band (for clipped sampling)."""
        lo = -32768 if math.isinf(self.lower) else int(self.lower)
        hi = 32767 if math.isinf(self.upper) else int(self.upper) - 1
        return lo, hi

    def label(self) -> str:
        lo = "-inf" if math.isinf(self.lower) else f"{int(self.lower)}"
        hi = "+inf" if math.isinf(self.upper) else f"{int(self.upper)}"
        return f"HU[{lo},{hi})"


HU_BANDS = (
    HuBand("normal", -math.inf, -750.0),
    HuBand("ggo", -750.0, -300.0),
    HuBand("consolidation", -300.0, 50.0),
    HuBand("calcification", 50.0, math.inf),
)
HU_BAND_BY_NAME = {b.name: b for b in HU_BANDS}

# Regions contributing IV/IR pairs, in feature order.
IV_IR_REGIONS = (
    ("WL", "RL", "LL")
    + ("RB_S", "RB_M", "RB_I", "LB_S", "LB_I")
    + tuple(f"RS{i}" for i in range(1, 11))
    + tuple(f"LS{i}" for i in range(1, 9))
)


def _build_registry():
    names = ["V(WL)", "V(RL)", "V(LL)"]
    kinds = ["volume", "volume", "volume"]
    for region in IV_IR_REGIONS:
        names.append(f"IV({region})")
        kinds.append("volume")
        names.append(f"IR({region})")
        kinds.append("ratio")
    for band in HU_BANDS:
        names.append(f"V({band.label()})")
        kinds.append("volume")
        names.append(f"R({band.label()})")
        kinds.append("ratio")
    assert len(names) == FEATURE_COUNT
    return tuple(names), tuple(kinds)


FEATURE_NAMES, FEATURE_KINDS = _build_registry()
RATIO_IDS = frozenset(
    i + 1 for i, kind in enumerate(FEATURE_KINDS) if kind == "ratio"
)
VOLUME_IDS = frozenset(range(1, FEATURE_COUNT + 1)) - RATIO_IDS
FEATURE_COLUMNS = tuple(f"f{i:02d}" for i in range(1, FEATURE_COUNT + 1))


def feature_name(feature_id: int) -> str:
    if not 1 <= feature_id <= FEATURE_COUNT:
        raise ValueError(f"feature id must be 1..{FEATURE_COUNT}, got {feature_id}")
    return FEATURE_NAMES[feature_id - 1]


@dataclass(frozen=True)
class FeatureVector:
    """Ordered 63-feature row; volumes in mL, ratios dimensionless."""

    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.shape != (FEATURE_COUNT,):
            raise ValueError(f"expected {FEATURE_COUNT} values, got shape {vals.shape}")
        if not np.all(np.isfinite(vals)):
            raise ValueError("feature values must be finite")
        if np.any(vals < 0):
            raise ValueError("feature values must be >= 0")
        ratio_idx = np.asarray(sorted(RATIO_IDS)) - 1
        if np.any(vals[ratio_idx] > 1.0):
            raise ValueError("ratio features must lie in [0, 1]")
        if vals.flags.writeable:
            vals = vals.copy()
            vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    def by_id(self, feature_id: int) -> float:
        if not 1 <= feature_id <= FEATURE_COUNT:
            raise ValueError(f"feature id must be 1..{FEATURE_COUNT}, got {feature_id}")
        return float(self.values[feature_id - 1])


def infection_volume(
    labels: RegionLabelMap,
    infection: InfectionMask,
    sel: RegionSelector,
) -> float:
    """Physical volume (mL) of infection-flagged voxels inside ``sel``."""
    require_same_geometry(labels, infection)
    count = region_voxel_count(labels, sel, infection)
    return physical_volume(count, labels.spacing_mm)


def infection_ratio(
    labels: RegionLabelMap,
    infection: InfectionMask,
    sel: RegionSelector,
) -> float:
    """Infected fraction of ``sel``'s volume; 0 when the region is empty."""
    require_same_geometry(labels, infection)
    region_count = region_voxel_count(labels, sel)
    if region_count == 0:
        logger.warning(
            "region %s has zero volume; reporting infection ratio 0", sel.name
        )
        return 0.0
    infected_count = region_voxel_count(labels, sel, infection)
    iv = physical_volume(infected_count, labels.spacing_mm)
    v = physical_volume(region_count, labels.spacing_mm)
    return iv / v


def hu_band_features(
    ct: CtVolume, labels: RegionLabelMap, band: HuBand
) -> tuple[float, float]:
    """Volume (mL) of lung voxels with HU inside ``band`` and its ratio to
    the whole-lung volume."""
    require_same_geometry(ct, labels)
    lung = labels.labels != 0
    lung_count = int(np.count_nonzero(lung))
    if lung_count == 0:
        raise DegenerateError("whole lung is empty; HU-band ratio undefined")
    member = lung.copy()
    if not math.isinf(band.lower):
        member &= ct.hu >= band.lower
    if not math.isinf(band.upper):
        member &= ct.hu < band.upper
    vol = physical_volume(int(np.count_nonzero(member)), ct.spacing_mm)
    wl_vol = physical_volume(lung_count, ct.spacing_mm)
    return vol, vol / wl_vol


def extract_features(
    ct: CtVolume,
    labels: RegionLabelMap,
    infection: InfectionMask,
    lung_map: LungMap = DEFAULT_LUNG_MAP,
) -> FeatureVector:
    """Compute the full 63-feature vector from a matched grid triple."""
    require_same_geometry(ct, labels)
    require_same_geometry(ct, infection)
    require_infection_within_lung(labels, infection)

    label_counts, infected_counts, band_counts = _kernels.voxel_scan(
        ct.hu.reshape(-1), labels.labels.reshape(-1), infection.flags.reshape(-1)
    )
    spacing = ct.spacing_mm

    def counts_for(sel: RegionSelector) -> tuple[int, int]:
        codes = list(sel.codes)
        return int(label_counts[codes].sum()), int(infected_counts[codes].sum())

    wl_count, _ = counts_for(lung_map.selector("WL"))
    if wl_count == 0:
        raise DegenerateError("whole lung is empty; features undefined")
    wl_vol = physical_volume(wl_count, spacing)

    values = np.empty(FEATURE_COUNT, dtype=np.float64)
    for i, name in enumerate(("WL", "RL", "LL")):
        count, _ = counts_for(lung_map.selector(name))
        values[i] = physical_volume(count, spacing)

    empty_regions = []
    pos = 3
    for name in IV_IR_REGIONS:
        count, infected = counts_for(lung_map.selector(name))
        iv = physical_volume(infected, spacing)
        values[pos] = iv
        if count == 0:
            empty_regions.append(name)
            values[pos + 1] = 0.0
        else:
            values[pos + 1] = iv / physical_volume(count, spacing)
        pos += 2
    if empty_regions:
        logger.warning(
            "%d region(s) have zero volume, infection ratio reported as 0: %s",
            len(empty_regions),
            ", ".join(empty_regions),
        )

    for b in range(4):
        vol = physical_volume(int(band_counts[b]), spacing)
        values[pos] = vol
        values[pos + 1] = vol / wl_vol
        pos += 2
    assert pos == FEATURE_COUNT

    return FeatureVector(values)


# ---------------------------------------------------------------------------
# Feature-table CSV: header `patient_id,label,f01..f63`. Lines starting with
# '#' are metadata comments and are skipped on read.

LABEL_VALUES = ("non-severe", "severe")


def write_feature_table(
    path,
    patient_ids,
    labels,
    matrix: np.ndarray,
    comment: str | None = None,
) -> None:
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[1] != FEATURE_COUNT:
        raise ValueError(f"feature matrix must be (n, {FEATURE_COUNT}), got {matrix.shape}")
    if not len(patient_ids) == len(labels) == matrix.shape[0]:
        raise ValueError("patient_ids, labels and matrix rows must align")
    for lab in labels:
        if lab not in LABEL_VALUES and lab != "":
            raise ValueError(f"label must be one of {LABEL_VALUES} or empty, got {lab!r}")
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["patient_id", "label", *FEATURE_COLUMNS])
        for pid, lab, row in zip(patient_ids, labels, matrix):
            writer.writerow([pid, lab, *(repr(float(v)) for v in row)])


def read_feature_table(path) -> tuple[list[str], list[str], np.ndarray]:
    """Returns (patient_ids, labels, matrix); labels may be empty strings."""
    path = Path(path)
    with path.open("r", newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(line for line in fh if not line.startswith("#")))
    if not rows:
        raise FormatError(f"feature table {path} is empty")
    expected = ["patient_id", "label", *FEATURE_COLUMNS]
    if rows[0] != expected:
        raise SchemaError(
            f"feature table {path} header mismatch: expected "
            f"'patient_id,label,f01..f{FEATURE_COUNT}', got {rows[0][:4]}..."
        )
    ids: list[str] = []
    labels: list[str] = []
    data = np.empty((len(rows) - 1, FEATURE_COUNT), dtype=np.float64)
    for r, row in enumerate(rows[1:], start=2):
        if len(row) != len(expected):
            raise FormatError(f"feature table {path} line {r}: expected {len(expected)} fields, got {len(row)}")
        pid, lab = row[0], row[1]
        if lab not in LABEL_VALUES and lab != "":
            raise FormatError(
                f"feature table {path} line {r}: label must be one of {LABEL_VALUES} or empty, got {lab!r}"
            )
        try:
            data[r - 2] = [float(v) for v in row[2:]]
        except ValueError as exc:
            raise FormatError(f"feature table {path} line {r}: non-numeric feature value ({exc})") from exc
        ids.append(pid)
        labels.append(lab)
    return ids, labels, data
