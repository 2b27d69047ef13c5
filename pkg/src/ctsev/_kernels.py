"""Hot inner loops, each shipped as a numba-compiled / pure-numpy twin pair.

The compiled build is active whenever numba imports cleanly and the
``CTSEV_NO_NUMBA`` environment variable is unset (or falsy); otherwise the
numpy twin takes over. The two halves of every pair must stay
arithmetically identical expression by expression: both reduce to exact
integer counting plus the same float formulas, so callers may rely on
bitwise-equal outputs when switching paths (the test suite enforces this).
"""

from __future__ import annotations

import os

import numpy as np

# HU thresholds separating the four half-open tissue bands:
# (-inf,-750) normal, [-750,-300) GGO, [-300,50) consolidation, [50,+inf).
BAND_EDGES = (-750, -300, 50)

N_LABEL_CODES = 19  # 0 = outside lung, 1..18 = lung segments


def _voxel_scan_loops(hu, labels, flags):
    # hu: int16[n], labels: uint8[n], flags: uint8[n], all flattened x-fastest.
    label_counts = np.zeros(N_LABEL_CODES, np.int64)
    infected_counts = np.zeros(N_LABEL_CODES, np.int64)
    band_counts = np.zeros(4, np.int64)
    for i in range(hu.size):
        lab = labels[i]
        label_counts[lab] += 1
        if flags[i] != 0:
            infected_counts[lab] += 1
        if lab != 0:
            h = hu[i]
            if h < -750:
                band_counts[0] += 1
            elif h < -300:
                band_counts[1] += 1
            elif h < 50:
                band_counts[2] += 1
            else:
                band_counts[3] += 1
    return label_counts, infected_counts, band_counts


def voxel_scan_numpy(hu, labels, flags):
    """Fused single-pass tally: per-label voxel counts, per-label infected
    counts, and lung-only HU-band counts. Integer-exact, so it matches the
    compiled loop bit for bit."""
    label_counts = np.bincount(labels, minlength=N_LABEL_CODES).astype(np.int64)
    infected_counts = np.bincount(
        labels[flags != 0], minlength=N_LABEL_CODES
    ).astype(np.int64)
    lung = labels != 0
    band_idx = np.digitize(hu[lung], np.asarray(BAND_EDGES, dtype=np.int64))
    band_counts = np.bincount(band_idx, minlength=4).astype(np.int64)
    return label_counts, infected_counts, band_counts


def _split_scan_loops(values, labels, w0, w1, n0_total, n1_total, w_total):
    # values: float64[n, m] (one column per candidate feature, ascending id
    # order), labels: uint8[n]. Candidate thresholds are midpoints between
    # consecutive distinct sorted values; rows with value < threshold go
    # left. Returns (-1, ...) when no column admits a threshold.
    n, m = values.shape
    best_col = -1
    best_thr = 0.0
    best_cost = np.inf
    best_n0_left = 0
    best_n1_left = 0
    col = np.empty(n, np.float64)
    for j in range(m):
        for i in range(n):
            col[i] = values[i, j]
        order = np.argsort(col)
        c0 = 0
        c1 = 0
        for r in range(n - 1):
            if labels[order[r]] == 0:
                c0 += 1
            else:
                c1 += 1
            lo = col[order[r]]
            hi = col[order[r + 1]]
            if lo == hi:
                continue
            thr = 0.5 * (lo + hi)
            if not thr > lo:  # midpoint collapsed onto lo: not representable
                continue
            n0l = c0
            n1l = c1
            n0r = n0_total - c0
            n1r = n1_total - c1
            wl = n0l * w0 + n1l * w1
            wr = n0r * w0 + n1r * w1
            p0 = (n0l * w0) / wl
            p1 = (n1l * w1) / wl
            gl = 1.0 - (p0 * p0 + p1 * p1)
            q0 = (n0r * w0) / wr
            q1 = (n1r * w1) / wr
            gr = 1.0 - (q0 * q0 + q1 * q1)
            cost = (wl / w_total) * gl + (wr / w_total) * gr
            if cost < best_cost:
                best_col = j
                best_thr = thr
                best_cost = cost
                best_n0_left = c0
                best_n1_left = c1
    return best_col, best_thr, best_cost, best_n0_left, best_n1_left


def split_scan_numpy(values, labels, w0, w1, n0_total, n1_total, w_total):
    """Vectorized twin of the split scan. Costs are evaluated with the same
    elementwise expressions on the same integer cumulative counts, and the
    first-minimum selection reproduces the loop's tie rule (lowest column,
    then lowest threshold)."""
    n, m = values.shape
    best_col = -1
    best_thr = 0.0
    best_cost = np.inf
    best_n0_left = 0
    best_n1_left = 0
    is0 = labels == 0
    for j in range(m):
        col = values[:, j]
        order = np.argsort(col)
        sv = col[order]
        cut = np.nonzero(sv[:-1] != sv[1:])[0]
        if cut.size == 0:
            continue
        thr = 0.5 * (sv[cut] + sv[cut + 1])
        keep = thr > sv[cut]
        cut = cut[keep]
        thr = thr[keep]
        if cut.size == 0:
            continue
        cum0 = np.cumsum(is0[order])
        n0l = cum0[cut]
        n1l = (cut + 1) - n0l
        n0r = n0_total - n0l
        n1r = n1_total - n1l
        wl = n0l * w0 + n1l * w1
        wr = n0r * w0 + n1r * w1
        p0 = (n0l * w0) / wl
        p1 = (n1l * w1) / wl
        gl = 1.0 - (p0 * p0 + p1 * p1)
        q0 = (n0r * w0) / wr
        q1 = (n1r * w1) / wr
        gr = 1.0 - (q0 * q0 + q1 * q1)
        cost = (wl / w_total) * gl + (wr / w_total) * gr
        k = int(np.argmin(cost))
        if cost[k] < best_cost:
            best_col = j
            best_thr = float(thr[k])
            best_cost = float(cost[k])
            best_n0_left = int(n0l[k])
            best_n1_left = int(n1l[k])
    return best_col, best_thr, best_cost, best_n0_left, best_n1_left


def _env_disabled() -> bool:
    return os.environ.get("CTSEV_NO_NUMBA", "").strip().lower() in {
        "1",
        "true",
        "yes",
        "on",
    }


try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised via CTSEV_NO_NUMBA runs
    njit = None
    HAVE_NUMBA = False

if HAVE_NUMBA:
    voxel_scan_jit = njit(cache=True, nogil=True)(_voxel_scan_loops)
    split_scan_jit = njit(cache=True, nogil=True)(_split_scan_loops)
else:  # pragma: no cover
    voxel_scan_jit = None
    split_scan_jit = None

NUMBA_ENABLED = HAVE_NUMBA and not _env_disabled()

if NUMBA_ENABLED:
    voxel_scan = voxel_scan_jit
    split_scan = split_scan_jit
else:
    voxel_scan = voxel_scan_numpy
    split_scan = split_scan_numpy


def warmup() -> None:
    """Force JIT compilation of the active kernels (no-op on the numpy path)."""
    hu = np.zeros(2, np.int16)
    lab = np.zeros(2, np.uint8)
    lab[1] = 1
    voxel_scan(hu, lab, lab)
    vals = np.array([[0.0], [1.0]])
    split_scan(vals, lab, 1.0, 1.0, 1, 1, 2.0)
