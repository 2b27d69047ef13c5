"""Synthetic lung phantoms: deterministic stand-ins for segmented chest CT.

A phantom scatters the 18 lung segments over the grid at requested volume
fractions, flags a per-segment share of voxels as infected, and draws HU
values from per-tissue normal distributions clipped into their HU band, so
band membership holds by construction. The whole construction is a pure
function of the spec (seed included).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import SpecError
from .features import HU_BAND_BY_NAME
from .volume import CtVolume, InfectionMask, RegionLabelMap

SEGMENT_COUNT = 18


@dataclass(frozen=True)
class TissueModel:
    """Normal distribution of HU values for one tissue class."""

    mean_hu: float
    sd_hu: float


DEFAULT_TISSUES = {
    "normal": TissueModel(-850.0, 60.0),
    "ggo": TissueModel(-550.0, 90.0),
    "consolidation": TissueModel(-120.0, 80.0),
    "calcification": TissueModel(250.0, 120.0),
}

# Everything outside the lung is treated as air-like background; its HU
# values never enter any feature.
_OUTSIDE = TissueModel(-1000.0, 30.0)
_OUTSIDE_CLIP = (-1024, -800)


@dataclass(frozen=True)
class PhantomSpec:
    """Recipe for one phantom patient.

    ``segment_fractions`` and ``infection_fractions`` are 18-vectors indexed
    by segment code - 1 (RS1..RS10 then LS1..LS8): the first gives each
    segment's share of the total grid volume, the second the infected share
    of that segment.
    """

    dims: tuple[int, int, int]
    spacing_mm: tuple[float, float, float]
    segment_fractions: tuple[float, ...]
    infection_fractions: tuple[float, ...]
    tissues: dict = field(default_factory=lambda: dict(DEFAULT_TISSUES))
    consolidation_share: float = 0.25
    calcification_share: float = 0.0
    seed: int = 0

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or any(d < 1 for d in dims):
            raise SpecError(f"dims must be 3 positive ints, got {self.dims}")
        object.__setattr__(self, "dims", dims)
        spacing = tuple(float(s) for s in self.spacing_mm)
        if len(spacing) != 3 or any(not np.isfinite(s) or s <= 0 for s in spacing):
            raise SpecError(f"spacing must be 3 positive reals, got {self.spacing_mm}")
        object.__setattr__(self, "spacing_mm", spacing)

        seg = tuple(float(f) for f in self.segment_fractions)
        inf = tuple(float(f) for f in self.infection_fractions)
        if len(seg) != SEGMENT_COUNT:
            raise SpecError(f"segment_fractions must have {SEGMENT_COUNT} entries, got {len(seg)}")
        if len(inf) != SEGMENT_COUNT:
            raise SpecError(f"infection_fractions must have {SEGMENT_COUNT} entries, got {len(inf)}")
        if any(not 0.0 <= f <= 1.0 for f in seg):
            raise SpecError("segment fractions must lie in [0, 1]")
        if any(not 0.0 <= f <= 1.0 for f in inf):
            raise SpecError("infection fractions must lie in [0, 1]")
        if sum(seg) > 1.0 + 1e-9:
            raise SpecError(f"segment fractions sum to {sum(seg):.6f} > 1")
        object.__setattr__(self, "segment_fractions", seg)
        object.__setattr__(self, "infection_fractions", inf)

        for share_name in ("consolidation_share", "calcification_share"):
            share = float(getattr(self, share_name))
            if not 0.0 <= share <= 1.0:
                raise SpecError(f"{share_name} must lie in [0, 1], got {share}")
            object.__setattr__(self, share_name, share)

        tissues = dict(self.tissues)
        if set(tissues) != set(DEFAULT_TISSUES):
            raise SpecError(
                f"tissues must define exactly {sorted(DEFAULT_TISSUES)}, got {sorted(tissues)}"
            )
        for name, model in tissues.items():
            band = HU_BAND_BY_NAME[name]
            if not band.lower < model.mean_hu < band.upper:
                raise SpecError(
                    f"tissue {name!r} mean {model.mean_hu} is not strictly inside "
                    f"its HU band {band.label()}"
                )
            if model.sd_hu <= 0:
                raise SpecError(f"tissue {name!r} sd must be positive, got {model.sd_hu}")
        object.__setattr__(self, "tissues", tissues)
        object.__setattr__(self, "seed", int(self.seed))


def _rounded(x: float) -> int:
    return int(np.floor(x + 0.5))


def _sample_band(rng, model: TissueModel, clip: tuple[int, int], size: int) -> np.ndarray:
    vals = rng.normal(model.mean_hu, model.sd_hu, size)
    return np.clip(np.rint(vals), clip[0], clip[1]).astype(np.int16)


def generate_phantom(
    spec: PhantomSpec,
) -> tuple[CtVolume, RegionLabelMap, InfectionMask]:
    rng = np.random.default_rng(spec.seed)
    nx, ny, nz = spec.dims
    total = nx * ny * nz

    # Cumulative rounding keeps every segment within one voxel of its target.
    cum = np.cumsum(spec.segment_fractions)
    bounds = np.rint(cum * total).astype(np.int64)
    counts = np.diff(bounds, prepend=0)

    perm = rng.permutation(total)
    label_flat = np.zeros(total, dtype=np.uint8)
    infect_flat = np.zeros(total, dtype=np.uint8)
    infected_runs = []
    healthy_runs = []
    pos = 0
    for code in range(1, SEGMENT_COUNT + 1):
        count = int(counts[code - 1])
        vox = perm[pos : pos + count]
        pos += count
        label_flat[vox] = code
        n_inf = _rounded(spec.infection_fractions[code - 1] * count)
        infect_flat[vox[:n_inf]] = 1
        infected_runs.append(vox[:n_inf])
        healthy_runs.append(vox[n_inf:])
    outside = perm[pos:]

    infected = np.concatenate(infected_runs) if infected_runs else np.empty(0, np.int64)
    healthy = np.concatenate(healthy_runs) if healthy_runs else np.empty(0, np.int64)
    n_cons = _rounded(spec.consolidation_share * infected.size)
    cons_vox = infected[:n_cons]
    ggo_vox = infected[n_cons:]
    n_calc = _rounded(spec.calcification_share * healthy.size)
    calc_vox = healthy[:n_calc]
    normal_vox = healthy[n_calc:]

    hu_flat = np.empty(total, dtype=np.int16)
    hu_flat[outside] = _sample_band(rng, _OUTSIDE, _OUTSIDE_CLIP, outside.size)
    for name, vox in (
        ("normal", normal_vox),
        ("ggo", ggo_vox),
        ("consolidation", cons_vox),
        ("calcification", calc_vox),
    ):
        band = HU_BAND_BY_NAME[name]
        hu_flat[vox] = _sample_band(rng, spec.tissues[name], band.int_bounds(), vox.size)

    shape = (nz, ny, nx)  # x varies fastest in the flat layout
    return (
        CtVolume(hu_flat.reshape(shape), spec.spacing_mm),
        RegionLabelMap(label_flat.reshape(shape), spec.spacing_mm),
        InfectionMask(infect_flat.reshape(shape), spec.spacing_mm),
    )


def uniform_spec(
    dims=(24, 24, 16),
    spacing_mm=(1.5, 1.5, 2.0),
    lung_fraction: float = 0.85,
    infection: float | tuple[float, ...] = 0.0,
    seed: int = 0,
    **kwargs,
) -> PhantomSpec:
    """Spec with 18 equal-volume segments filling ``lung_fraction`` of the
    grid; ``infection`` is a single shared fraction or an 18-vector."""
    if not 0.0 <= lung_fraction <= 1.0:
        raise SpecError(f"lung_fraction must lie in [0, 1], got {lung_fraction}")
    seg = (lung_fraction / SEGMENT_COUNT,) * SEGMENT_COUNT
    if isinstance(infection, (int, float)):
        inf = (float(infection),) * SEGMENT_COUNT
    else:
        inf = tuple(float(f) for f in infection)
    return PhantomSpec(
        dims=dims,
        spacing_mm=spacing_mm,
        segment_fractions=seg,
        infection_fractions=inf,
        seed=seed,
        **kwargs,
    )
