"""Numba kernels for weighted CART growth and traversal.

Conventions shared with :mod:`sigmap.forest`:

* nodes are numbered in depth-first pre-order, left child first;
* numeric splits send ``x <= threshold`` left; categorical splits send
  ``x == threshold`` left and everything else (including unseen codes) right;
* split candidates are enumerated over positive-weight records only, so
  zero-weight records never move a threshold; they are still routed and
  counted towards ``min_leaf``;
* ``rand[node]`` holds the random keys ordering the features tried at ``node``.
"""
import numpy as np
from numba import njit

LEAF = -1


@njit(cache=True)
def _node_stats(y, w, idx, start, end, n_classes, out):
    # out[0..]: regression -> (mean, var); classification -> class proportions
    wsum = 0.0
    if n_classes == 0:
        s = 0.0
        for p in range(start, end):
            i = idx[p]
            wsum += w[i]
            s += w[i] * y[i]
        if wsum <= 0.0:
            return 0.0
        mean = s / wsum
        v = 0.0
        for p in range(start, end):
            i = idx[p]
            d = y[i] - mean
            v += w[i] * d * d
        out[0] = mean
        out[1] = v / wsum
    else:
        for k in range(n_classes):
            out[k] = 0.0
        for p in range(start, end):
            i = idx[p]
            wsum += w[i]
            out[int(y[i])] += w[i]
        if wsum <= 0.0:
            return 0.0
        for k in range(n_classes):
            out[k] /= wsum
    return wsum


@njit(cache=True)
def _impurity_score(sw, sy, sc, n_classes):
    # larger is better; parent score is subtracted by the caller
    if n_classes == 0:
        return sy * sy / sw
    acc = 0.0
    for k in range(n_classes):
        acc += sc[k] * sc[k]
    return acc / sw


@njit(cache=True)
def _best_numeric(X, y, w, idx, start, end, f, n_classes, min_leaf, center, parent_score):
    n = end - start
    vals = np.empty(n)
    for p in range(n):
        vals[p] = X[idx[start + p], f]
    order = np.argsort(vals, kind="mergesort")
    C = max(n_classes, 1)
    cw = np.zeros(n + 1)
    cy = np.zeros(n + 1)
    cc = np.zeros((n + 1, C))
    for p in range(n):
        i = idx[start + order[p]]
        wi = w[i]
        cw[p + 1] = cw[p] + wi
        cy[p + 1] = cy[p] + wi * (y[i] - center)
        for k in range(C):
            cc[p + 1, k] = cc[p, k]
        if n_classes > 0:
            cc[p + 1, int(y[i])] += wi
    W = cw[n]
    best_gain = 0.0
    best_thr = 0.0
    found = False
    prev_val = 0.0
    have_prev = False
    sc_r = np.empty(C)
    p = 0
    while p < n:
        # advance to the next positive-weight record
        i = idx[start + order[p]]
        if w[i] <= 0.0:
            p += 1
            continue
        v = vals[order[p]]
        if have_prev and v > prev_val:
            thr = 0.5 * (prev_val + v)
            if thr >= v:
                thr = prev_val
            # left = all records with value <= thr, i.e. the first q positions
            q = p
            while q > 0 and vals[order[q - 1]] > thr:
                q -= 1
            n_left = q
            if n_left >= min_leaf and n - n_left >= min_leaf:
                wl = cw[q]
                wr = W - wl
                if wl > 0.0 and wr > 0.0:
                    for k in range(C):
                        sc_r[k] = cc[n, k] - cc[q, k]
                    g = (_impurity_score(wl, cy[q], cc[q], n_classes)
                         + _impurity_score(wr, cy[n] - cy[q], sc_r, n_classes) - parent_score)
                    if g > best_gain:
                        best_gain = g
                        best_thr = thr
                        found = True
        prev_val = v
        have_prev = True
        p += 1
    return found, best_gain, best_thr


@njit(cache=True)
def _best_categorical(X, y, w, idx, start, end, f, n_classes, min_leaf, center, parent_score,
                      tot_w, tot_y, tot_c):
    n = end - start
    vals = np.empty(n)
    for p in range(n):
        vals[p] = X[idx[start + p], f]
    order = np.argsort(vals, kind="mergesort")
    C = max(n_classes, 1)
    best_gain = 0.0
    best_thr = 0.0
    found = False
    gc = np.zeros(C)
    sc_r = np.empty(C)
    p = 0
    while p < n:
        v = vals[order[p]]
        q = p
        gw = 0.0
        gy = 0.0
        for k in range(C):
            gc[k] = 0.0
        while q < n and vals[order[q]] == v:
            i = idx[start + order[q]]
            gw += w[i]
            gy += w[i] * (y[i] - center)
            if n_classes > 0:
                gc[int(y[i])] += w[i]
            q += 1
        n_left = q - p
        if gw > 0.0 and tot_w - gw > 0.0 and n_left >= min_leaf and n - n_left >= min_leaf:
            for k in range(C):
                sc_r[k] = tot_c[k] - gc[k]
            g = (_impurity_score(gw, gy, gc, n_classes)
                 + _impurity_score(tot_w - gw, tot_y - gy, sc_r, n_classes) - parent_score)
            if g > best_gain:
                best_gain = g
                best_thr = v
                found = True
        p = q
    return found, best_gain, best_thr


@njit(cache=True)
def build_tree(X, y, w, sample, is_cat, max_depth, min_leaf, max_features, n_classes, rand):
    n_samples = sample.shape[0]
    n_features = X.shape[1]
    cap = 2 * n_samples + 1
    V = n_classes if n_classes > 0 else 2
    feature = np.full(cap, LEAF, dtype=np.int64)
    threshold = np.zeros(cap)
    left = np.full(cap, LEAF, dtype=np.int64)
    right = np.full(cap, LEAF, dtype=np.int64)
    value = np.zeros((cap, V))
    count = np.zeros(cap, dtype=np.int64)
    weight = np.zeros(cap)
    depth_arr = np.zeros(cap, dtype=np.int64)

    idx = sample.copy()
    buf = np.empty(n_samples, dtype=np.int64)
    # stack entries: start, end, depth, parent, is_left
    st_start = np.empty(cap, dtype=np.int64)
    st_end = np.empty(cap, dtype=np.int64)
    st_depth = np.empty(cap, dtype=np.int64)
    st_parent = np.empty(cap, dtype=np.int64)
    st_isleft = np.empty(cap, dtype=np.int64)
    top = 0
    st_start[0] = 0
    st_end[0] = n_samples
    st_depth[0] = 0
    st_parent[0] = -1
    st_isleft[0] = 0
    top = 1
    n_nodes = 0
    stats = np.zeros(V)
    tot_c = np.zeros(max(n_classes, 1))

    while top > 0:
        top -= 1
        start = st_start[top]
        end = st_end[top]
        depth = st_depth[top]
        parent = st_parent[top]
        node = n_nodes
        n_nodes += 1
        if parent >= 0:
            if st_isleft[top] == 1:
                left[parent] = node
            else:
                right[parent] = node
        count[node] = end - start
        depth_arr[node] = depth
        wsum = _node_stats(y, w, idx, start, end, n_classes, stats)
        weight[node] = wsum
        if wsum > 0.0:
            for k in range(V):
                value[node, k] = stats[k]
        elif parent >= 0:
            for k in range(V):
                value[node, k] = value[parent, k]

        if depth >= max_depth or end - start < 2 * min_leaf or wsum <= 0.0:
            continue
        # purity over positive-weight records
        pure = True
        first = True
        ref = 0.0
        n_pos = 0
        for p in range(start, end):
            i = idx[p]
            if w[i] > 0.0:
                n_pos += 1
                if first:
                    ref = y[i]
                    first = False
                elif y[i] != ref:
                    pure = False
        if pure or n_pos < 2:
            continue

        center = stats[0] if n_classes == 0 else 0.0
        tot_y = 0.0
        for k in range(max(n_classes, 1)):
            tot_c[k] = 0.0
        for p in range(start, end):
            i = idx[p]
            tot_y += w[i] * (y[i] - center)
            if n_classes > 0:
                tot_c[int(y[i])] += w[i]
        parent_score = _impurity_score(wsum, tot_y, tot_c, n_classes)

        forder = np.argsort(rand[node], kind="mergesort")
        tried = 0
        best_found = False
        best_gain = 0.0
        best_f = -1
        best_thr = 0.0
        for t in range(n_features):
            f = forder[t]
            # skip features constant over positive-weight records
            lo = np.inf
            hi = -np.inf
            for p in range(start, end):
                i = idx[p]
                if w[i] > 0.0:
                    xv = X[i, f]
                    if xv < lo:
                        lo = xv
                    if xv > hi:
                        hi = xv
            if not hi > lo:
                continue
            tried += 1
            if is_cat[f]:
                ok, g, thr = _best_categorical(X, y, w, idx, start, end, f, n_classes, min_leaf,
                                               center, parent_score, wsum, tot_y, tot_c)
            else:
                ok, g, thr = _best_numeric(X, y, w, idx, start, end, f, n_classes, min_leaf,
                                           center, parent_score)
            if ok and g > best_gain:
                best_found = True
                best_gain = g
                best_f = f
                best_thr = thr
            if tried >= max_features:
                break
        scale = abs(parent_score) + 1e-300
        if n_classes == 0:
            # gain is relative to the centred sum of squares
            sst = 0.0
            for p in range(start, end):
                i = idx[p]
                d = y[i] - center
                sst += w[i] * d * d
            scale = sst
        if not best_found or best_gain <= 1e-12 * scale:
            continue

        feature[node] = best_f
        threshold[node] = best_thr
        # stable partition
        nl = 0
        for p in range(start, end):
            i = idx[p]
            xv = X[i, best_f]
            go_left = (xv == best_thr) if is_cat[best_f] else (xv <= best_thr)
            if go_left:
                buf[nl] = i
                nl += 1
        nr = nl
        for p in range(start, end):
            i = idx[p]
            xv = X[i, best_f]
            go_left = (xv == best_thr) if is_cat[best_f] else (xv <= best_thr)
            if not go_left:
                buf[nr] = i
                nr += 1
        for p in range(end - start):
            idx[start + p] = buf[p]
        mid = start + nl
        # push right first so the left child is numbered next
        st_start[top] = mid
        st_end[top] = end
        st_depth[top] = depth + 1
        st_parent[top] = node
        st_isleft[top] = 0
        top += 1
        st_start[top] = start
        st_end[top] = mid
        st_depth[top] = depth + 1
        st_parent[top] = node
        st_isleft[top] = 1
        top += 1

    return (feature[:n_nodes].copy(), threshold[:n_nodes].copy(), left[:n_nodes].copy(),
            right[:n_nodes].copy(), value[:n_nodes].copy(), count[:n_nodes].copy(),
            weight[:n_nodes].copy(), depth_arr[:n_nodes].copy())


@njit(cache=True)
def apply_tree(X, is_cat, feature, threshold, left, right):
    n = X.shape[0]
    out = np.empty(n, dtype=np.int64)
    for r in range(n):
        node = 0
        while left[node] != LEAF:
            f = feature[node]
            xv = X[r, f]
            if is_cat[f]:
                go_left = xv == threshold[node]
            else:
                go_left = xv <= threshold[node]
            node = left[node] if go_left else right[node]
        out[r] = node
    return out
