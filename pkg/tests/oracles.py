"""Independent reference implementations used to cross-check the package.

Everything here is deliberately naive (explicit python loops, no shared
code with the package internals beyond numpy array access) so that
agreement with the fast paths is meaningful.
"""

import numpy as np

# Default lobe composition, restated independently of the package tables.
LOBES = {
    "RB_S": {1, 2, 3},
    "RB_M": {4, 5},
    "RB_I": {6, 7, 8, 9, 10},
    "LB_S": {11, 12, 13, 14},
    "LB_I": {15, 16, 17, 18},
}
REGION_CODES = {
    "WL": set(range(1, 19)),
    "RL": set(range(1, 11)),
    "LL": set(range(11, 19)),
    **LOBES,
    **{f"RS{i}": {i} for i in range(1, 11)},
    **{f"LS{i}": {10 + i} for i in range(1, 9)},
}
IV_IR_ORDER = (
    ["WL", "RL", "LL", "RB_S", "RB_M", "RB_I", "LB_S", "LB_I"]
    + [f"RS{i}" for i in range(1, 11)]
    + [f"LS{i}" for i in range(1, 9)]
)


def brute_force_features(hu, labels, flags, spacing):
    """Triple-loop re-implementation of the 63-feature extraction."""
    nz, ny, nx = hu.shape
    voxel_ml = spacing[0] * spacing[1] * spacing[2] / 1000.0

    count = {code: 0 for code in range(19)}
    infected = {code: 0 for code in range(19)}
    bands = [0, 0, 0, 0]
    for z in range(nz):
        for y in range(ny):
            for x in range(nx):
                code = int(labels[z, y, x])
                count[code] += 1
                if flags[z, y, x]:
                    infected[code] += 1
                if code != 0:
                    h = int(hu[z, y, x])
                    if h < -750:
                        bands[0] += 1
                    elif h < -300:
                        bands[1] += 1
                    elif h < 50:
                        bands[2] += 1
                    else:
                        bands[3] += 1

    def region_counts(name):
        codes = REGION_CODES[name]
        return (
            sum(count[c] for c in codes),
            sum(infected[c] for c in codes),
        )

    values = []
    for name in ("WL", "RL", "LL"):
        values.append(region_counts(name)[0] * voxel_ml)
    for name in IV_IR_ORDER:
        n, ninf = region_counts(name)
        iv = ninf * voxel_ml
        values.append(iv)
        values.append(iv / (n * voxel_ml) if n > 0 else 0.0)
    wl_vol = region_counts("WL")[0] * voxel_ml
    for b in range(4):
        vol = bands[b] * voxel_ml
        values.append(vol)
        values.append(vol / wl_vol)
    return np.asarray(values)


def brute_force_region_count(labels, codes, flags=None):
    nz, ny, nx = labels.shape
    total = 0
    for z in range(nz):
        for y in range(ny):
            for x in range(nx):
                if int(labels[z, y, x]) in codes:
                    if flags is None or flags[z, y, x]:
                        total += 1
    return total


def exhaustive_best_split(x, y, w0, w1, candidates):
    """Enumerate every (feature, midpoint) pair; rows with value < threshold
    go left; ties keep the lower column, then the lower threshold. Returns
    (cost, column, threshold, n0_left, n1_left) or None when nothing beats
    the node impurity."""
    n1t = int((y == 1).sum())
    n0t = len(y) - n1t
    w_total = n0t * w0 + n1t * w1
    p0 = (n0t * w0) / w_total
    p1 = (n1t * w1) / w_total
    g_parent = 1.0 - (p0 * p0 + p1 * p1)

    best = None
    for j in sorted(int(c) for c in candidates):
        vals = sorted(set(float(v) for v in x[:, j]))
        for a, b in zip(vals, vals[1:]):
            thr = 0.5 * (a + b)
            if not thr > a:
                continue
            left = x[:, j] < thr
            n0l = int(((y == 0) & left).sum())
            n1l = int(((y == 1) & left).sum())
            n0r = n0t - n0l
            n1r = n1t - n1l
            if n0l + n1l == 0 or n0r + n1r == 0:
                continue
            wl = n0l * w0 + n1l * w1
            wr = n0r * w0 + n1r * w1
            p0 = (n0l * w0) / wl
            p1 = (n1l * w1) / wl
            gl = 1.0 - (p0 * p0 + p1 * p1)
            q0 = (n0r * w0) / wr
            q1 = (n1r * w1) / wr
            gr = 1.0 - (q0 * q0 + q1 * q1)
            cost = (wl / w_total) * gl + (wr / w_total) * gr
            if best is None or cost < best[0]:
                best = (cost, j, thr, n0l, n1l)
    if best is None or not best[0] < g_parent:
        return None
    return best


def walk_reduced_gini(forest, mode):
    """Enumerate every split node of every tree and average the decreases
    per feature id. Returns {feature_id: mean decrease}."""
    w0, w1 = forest.weights.weights

    def gini_of(c0, c1):
        w = c0 * w0 + c1 * w1
        p0 = (c0 * w0) / w
        p1 = (c1 * w1) / w
        return 1.0 - (p0 * p0 + p1 * p1), w

    sums: dict[int, float] = {}
    counts: dict[int, int] = {}
    for tree in forest.trees:
        for i in range(tree.node_count):
            fid = int(tree.feature[i])
            if fid < 0:
                continue
            li, ri = int(tree.left[i]), int(tree.right[i])
            gp, wp = gini_of(int(tree.n0[i]), int(tree.n1[i]))
            gl, wl = gini_of(int(tree.n0[li]), int(tree.n1[li]))
            gr, wr = gini_of(int(tree.n0[ri]), int(tree.n1[ri]))
            if mode == "weighted":
                dec = gp - ((wl / wp) * gl + (wr / wp) * gr)
            else:
                dec = gp - gl - gr
            sums[fid] = sums.get(fid, 0.0) + dec
            counts[fid] = counts.get(fid, 0) + 1
    return {fid: sums[fid] / counts[fid] for fid in sums}


def mann_whitney_auc(y_true, scores):
    """AUC as the tie-corrected rank statistic: average rank of the
    positives, computed from scratch."""
    y_true = np.asarray(y_true)
    scores = np.asarray(scores, dtype=float)
    n1 = int((y_true == 1).sum())
    n0 = len(y_true) - n1
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(len(scores), dtype=float)
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and scores[order[j + 1]] == scores[order[i]]:
            j += 1
        avg = (i + j) / 2.0 + 1.0  # 1-based average rank of the tie group
        for k in range(i, j + 1):
            ranks[order[k]] = avg
        i = j + 1
    rank_sum = float(ranks[y_true == 1].sum())
    u = rank_sum - n1 * (n1 + 1) / 2.0
    return u / (n1 * n0)
