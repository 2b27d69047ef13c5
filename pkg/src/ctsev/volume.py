"""Voxel-grid data model, lung region selectors, and the QLV file format.

Grids are stored as numpy arrays with axis order (z, y, x); ``dims`` and
``spacing_mm`` are always reported per axis in (x, y, z) order, matching the
on-disk layout where x varies fastest. All grid objects are frozen and their
arrays are marked read-only, so they are safe to share across threads.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, GeometryError, InputError, SpecError

MAX_LABEL_CODE = 18
RIGHT_LUNG_CODES = tuple(range(1, 11))   # RS1..RS10
LEFT_LUNG_CODES = tuple(range(11, 19))   # LS1..LS8

LOBE_NAMES = ("RB_S", "RB_M", "RB_I", "LB_S", "LB_I")

# Which segment codes make up each lobe. The left-lung assignment is a
# convention (segment numbering differs between atlases), hence overridable.
DEFAULT_LOBE_SEGMENTS = {
    "RB_S": (1, 2, 3),
    "RB_M": (4, 5),
    "RB_I": (6, 7, 8, 9, 10),
    "LB_S": (11, 12, 13, 14),
    "LB_I": (15, 16, 17, 18),
}


def _check_spacing(spacing) -> tuple[float, float, float]:
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3:
        raise GeometryError(f"spacing must have 3 components, got {len(spacing)}")
    if not all(np.isfinite(s) and s > 0 for s in spacing):
        raise GeometryError(f"spacing components must be positive, got {spacing}")
    return spacing


def _freeze_grid(grid: np.ndarray, dtype, what: str) -> np.ndarray:
    grid = np.asarray(grid)
    if grid.ndim != 3:
        raise GeometryError(f"{what} grid must be 3-D, got {grid.ndim}-D")
    if grid.dtype != np.dtype(dtype):
        raise InputError(f"{what} grid must have dtype {np.dtype(dtype)}, got {grid.dtype}")
    if grid.flags.writeable:
        grid = grid.copy()
        grid.setflags(write=False)
    return grid


@dataclass(frozen=True)
class CtVolume:
    """HU intensities (int16) on a regular voxel grid."""

    hu: np.ndarray
    spacing_mm: tuple[float, float, float]

    def __post_init__(self):
        object.__setattr__(self, "hu", _freeze_grid(self.hu, np.int16, "HU"))
        object.__setattr__(self, "spacing_mm", _check_spacing(self.spacing_mm))

    @property
    def dims(self) -> tuple[int, int, int]:
        nz, ny, nx = self.hu.shape
        return (nx, ny, nz)

    @property
    def voxel_count(self) -> int:
        return int(self.hu.size)


@dataclass(frozen=True)
class RegionLabelMap:
    """Anatomical region codes per voxel: 0 outside lung, 1..10 right-lung
    segments RS1..RS10, 11..18 left-lung segments LS1..LS8."""

    labels: np.ndarray
    spacing_mm: tuple[float, float, float]

    def __post_init__(self):
        grid = _freeze_grid(self.labels, np.uint8, "label")
        high = int(grid.max(initial=0))
        if high > MAX_LABEL_CODE:
            raise InputError(
                f"label codes must be <= {MAX_LABEL_CODE}, found {high}"
            )
        object.__setattr__(self, "labels", grid)
        object.__setattr__(self, "spacing_mm", _check_spacing(self.spacing_mm))

    @property
    def dims(self) -> tuple[int, int, int]:
        nz, ny, nx = self.labels.shape
        return (nx, ny, nz)


@dataclass(frozen=True)
class InfectionMask:
    """Binary infection flags per voxel."""

    flags: np.ndarray
    spacing_mm: tuple[float, float, float]

    def __post_init__(self):
        grid = _freeze_grid(self.flags, np.uint8, "infection")
        if int(grid.max(initial=0)) > 1:
            raise InputError("infection flags must be 0 or 1")
        object.__setattr__(self, "flags", grid)
        object.__setattr__(self, "spacing_mm", _check_spacing(self.spacing_mm))

    @property
    def dims(self) -> tuple[int, int, int]:
        nz, ny, nx = self.flags.shape
        return (nx, ny, nz)


def _grid_of(obj):
    for name in ("hu", "labels", "flags"):
        if hasattr(obj, name):
            return getattr(obj, name)
    raise TypeError(f"not a grid object: {type(obj)!r}")


def require_same_geometry(a, b) -> None:
    """Raise InputError unless two grid objects share dims and spacing."""
    ga, gb = _grid_of(a), _grid_of(b)
    if ga.shape != gb.shape:
        raise InputError(f"grid dims differ: {a.dims} vs {b.dims}")
    if a.spacing_mm != b.spacing_mm:
        raise InputError(
            f"grid spacing differs: {a.spacing_mm} vs {b.spacing_mm}"
        )


def require_infection_within_lung(labels: RegionLabelMap, infection: InfectionMask) -> None:
    """Every infection-flagged voxel must carry a nonzero lung label."""
    require_same_geometry(labels, infection)
    outside = (infection.flags != 0) & (labels.labels == 0)
    if outside.any():
        where = np.argwhere(outside)[0]
        raise InputError(
            f"infection flagged outside the lung at (z,y,x)={tuple(int(v) for v in where)}"
        )


@dataclass(frozen=True)
class RegionSelector:
    """A named set of label codes (whole lung, one lung, a lobe, a segment)."""

    name: str
    codes: tuple[int, ...]

    def __post_init__(self):
        codes = tuple(sorted(set(int(c) for c in self.codes)))
        if not codes or codes[0] < 1 or codes[-1] > MAX_LABEL_CODE:
            raise SpecError(f"selector {self.name!r} has invalid codes {self.codes}")
        object.__setattr__(self, "codes", codes)

    def code_array(self) -> np.ndarray:
        return np.asarray(self.codes, dtype=np.uint8)


@dataclass(frozen=True)
class LungMap:
    """Lobe -> segment-code table plus the derived selectors.

    The defaults assign RS1-3 to the right superior lobe, RS4-5 to the
    middle, RS6-10 to the inferior, LS1-4 to the left superior and LS5-8 to
    the left inferior. Override ``lobe_segments`` when the cohort's
    segment numbering follows a different convention.
    """

    lobe_segments: dict = field(
        default_factory=lambda: dict(DEFAULT_LOBE_SEGMENTS)
    )

    def __post_init__(self):
        got = {name: tuple(int(c) for c in codes) for name, codes in self.lobe_segments.items()}
        if set(got) != set(LOBE_NAMES):
            raise SpecError(f"lobe map must define exactly {LOBE_NAMES}, got {sorted(got)}")
        right = sorted(c for n in ("RB_S", "RB_M", "RB_I") for c in got[n])
        left = sorted(c for n in ("LB_S", "LB_I") for c in got[n])
        if right != list(RIGHT_LUNG_CODES):
            raise SpecError(f"right lobes must partition codes 1..10, got {right}")
        if left != list(LEFT_LUNG_CODES):
            raise SpecError(f"left lobes must partition codes 11..18, got {left}")
        object.__setattr__(self, "lobe_segments", got)

    def selector(self, name: str) -> RegionSelector:
        if name == "WL":
            return RegionSelector("WL", RIGHT_LUNG_CODES + LEFT_LUNG_CODES)
        if name == "RL":
            return RegionSelector("RL", RIGHT_LUNG_CODES)
        if name == "LL":
            return RegionSelector("LL", LEFT_LUNG_CODES)
        if name in self.lobe_segments:
            return RegionSelector(name, self.lobe_segments[name])
        if name.startswith("RS"):
            idx = int(name[2:])
            if 1 <= idx <= 10:
                return RegionSelector(name, (idx,))
        if name.startswith("LS"):
            idx = int(name[2:])
            if 1 <= idx <= 8:
                return RegionSelector(name, (10 + idx,))
        raise SpecError(f"unknown region name {name!r}")

    def segment_names(self) -> tuple[str, ...]:
        return tuple(f"RS{i}" for i in range(1, 11)) + tuple(
            f"LS{i}" for i in range(1, 9)
        )

    def region_names(self) -> tuple[str, ...]:
        """All 26 selectable regions: whole/right/left lung, lobes, segments."""
        return ("WL", "RL", "LL") + LOBE_NAMES + self.segment_names()


DEFAULT_LUNG_MAP = LungMap()


def physical_volume(voxel_count: int, spacing_mm) -> float:
    """Physical volume in mL of ``voxel_count`` voxels at the given spacing."""
    spacing_mm = _check_spacing(spacing_mm)
    if voxel_count < 0:
        raise InputError(f"voxel count must be >= 0, got {voxel_count}")
    return voxel_count * (spacing_mm[0] * spacing_mm[1] * spacing_mm[2]) / 1000.0


def region_voxel_count(
    labels: RegionLabelMap,
    sel: RegionSelector,
    restrict: InfectionMask | None = None,
) -> int:
    """Number of voxels whose label is in ``sel`` (optionally also flagged)."""
    member = np.isin(labels.labels, sel.code_array())
    if restrict is not None:
        require_same_geometry(labels, restrict)
        member &= restrict.flags != 0
    return int(np.count_nonzero(member))


# ---------------------------------------------------------------------------
# QLV file format: a UTF-8 JSON header naming a raw little-endian payload.

_QLV_DTYPES = {"i16": np.dtype("<i2"), "u8": np.dtype("u1")}


def _payload_name(header_path: Path) -> str:
    return header_path.stem + ".raw"


def _write_qlv(header_path, grid: np.ndarray, spacing_mm, dtype_tag: str) -> None:
    header_path = Path(header_path)
    nz, ny, nx = grid.shape
    header = {
        "dims": [nx, ny, nz],
        "spacing_mm": list(spacing_mm),
        "dtype": dtype_tag,
        "order": "x-fastest",
        "payload": _payload_name(header_path),
    }
    payload = np.ascontiguousarray(grid, dtype=_QLV_DTYPES[dtype_tag]).tobytes()
    (header_path.parent / _payload_name(header_path)).write_bytes(payload)
    header_path.write_text(json.dumps(header, indent=2) + "\n", encoding="utf-8")


def _read_qlv(header_path, expected_dtype: str) -> tuple[np.ndarray, tuple[float, float, float]]:
    header_path = Path(header_path)
    try:
        header = json.loads(header_path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable QLV header {header_path}: {exc}") from exc
    if not isinstance(header, dict):
        raise FormatError(f"QLV header {header_path} is not a JSON object")

    for key in ("dims", "spacing_mm", "dtype", "order", "payload"):
        if key not in header:
            raise FormatError(f"QLV header field '{key}' missing in {header_path}")

    dims = header["dims"]
    if (
        not isinstance(dims, list)
        or len(dims) != 3
        or not all(isinstance(d, int) and d > 0 for d in dims)
    ):
        raise FormatError(f"QLV header field 'dims' must be 3 positive ints, got {dims!r}")
    spacing = header["spacing_mm"]
    if (
        not isinstance(spacing, list)
        or len(spacing) != 3
        or not all(isinstance(s, (int, float)) and s > 0 for s in spacing)
    ):
        raise FormatError(
            f"QLV header field 'spacing_mm' must be 3 positive reals, got {spacing!r}"
        )
    if header["dtype"] != expected_dtype:
        raise FormatError(
            f"QLV header field 'dtype' must be '{expected_dtype}' here, got {header['dtype']!r}"
        )
    if header["order"] != "x-fastest":
        raise FormatError(
            f"QLV header field 'order' must be 'x-fastest', got {header['order']!r}"
        )
    if not isinstance(header["payload"], str):
        raise FormatError("QLV header field 'payload' must be a relative path string")

    nx, ny, nz = dims
    dtype = _QLV_DTYPES[expected_dtype]
    payload_path = header_path.parent / header["payload"]
    try:
        raw = payload_path.read_bytes()
    except OSError as exc:
        raise FormatError(f"QLV payload unreadable: {payload_path}: {exc}") from exc
    expected_len = nx * ny * nz * dtype.itemsize
    if len(raw) != expected_len:
        raise FormatError(
            f"QLV payload length mismatch in {payload_path}: "
            f"expected {expected_len} bytes for dims {dims}, got {len(raw)}"
        )
    grid = np.frombuffer(raw, dtype=dtype).reshape(nz, ny, nx)
    return grid, tuple(float(s) for s in spacing)


def save_volume(vol: CtVolume, header_path) -> None:
    _write_qlv(header_path, vol.hu, vol.spacing_mm, "i16")


def load_volume(header_path) -> CtVolume:
    grid, spacing = _read_qlv(header_path, "i16")
    return CtVolume(grid.astype(np.int16, copy=False), spacing)


def save_label_map(labels: RegionLabelMap, header_path) -> None:
    _write_qlv(header_path, labels.labels, labels.spacing_mm, "u8")


def load_label_map(header_path) -> RegionLabelMap:
    grid, spacing = _read_qlv(header_path, "u8")
    high = int(grid.max(initial=0))
    if high > MAX_LABEL_CODE:
        raise FormatError(
            f"QLV payload field 'payload' holds label value {high}, "
            f"outside the allowed range 0..{MAX_LABEL_CODE}"
        )
    return RegionLabelMap(grid, spacing)


def save_infection(mask: InfectionMask, header_path) -> None:
    _write_qlv(header_path, mask.flags, mask.spacing_mm, "u8")


def load_infection(header_path) -> InfectionMask:
    grid, spacing = _read_qlv(header_path, "u8")
    high = int(grid.max(initial=0))
    if high > 1:
        raise FormatError(
            f"QLV payload field 'payload' holds flag value {high}, flags must be 0 or 1"
        )
    return InfectionMask(grid, spacing)
