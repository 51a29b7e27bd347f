"""Hot inner loops, each with a numba and a fallback implementation.

The numba path is used when numba imports cleanly and the environment
variable ``GRAPETRACK_DISABLE_NUMBA`` is unset (or set to ``0``).  Both
paths return identical results; ``tests/test_kernels.py`` checks this and
``benchmarks/bench_kernels.py`` times them against each other.
"""
import heapq
import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None

_flag = os.environ.get("GRAPETRACK_DISABLE_NUMBA", "").strip().lower()
USE_NUMBA = numba is not None and _flag in ("", "0", "false", "no")

RIDGE = -1


def _njit(fn):
    if numba is None:  # pragma: no cover
        return fn
    return numba.njit(cache=True, nogil=True)(fn)


# ---------------------------------------------------------------------------
# co-observation pair keys

def _pair_keys_loop(ptr, frame, node, window, n_nodes):
    # hits of each point are sorted by frame, so the inner loop can stop
    # as soon as the frame gap leaves the window
    total = 0
    for p in range(ptr.size - 1):
        lo = ptr[p]
        hi = ptr[p + 1]
        for a in range(lo, hi):
            for b in range(a + 1, hi):
                gap = frame[b] - frame[a]
                if window >= 0 and gap > window:
                    break
                if gap > 0:
                    total += 1
    out = np.empty(total, dtype=np.int64)
    k = 0
    for p in range(ptr.size - 1):
        lo = ptr[p]
        hi = ptr[p + 1]
        for a in range(lo, hi):
            for b in range(a + 1, hi):
                gap = frame[b] - frame[a]
                if window >= 0 and gap > window:
                    break
                if gap > 0:
                    out[k] = node[a] * n_nodes + node[b]
                    k += 1
    return out


pair_keys_numba = _njit(_pair_keys_loop)


def pair_keys_numpy(ptr, frame, node, window, n_nodes):
    """Vectorised over hit offsets: pair hit ``t`` with hit ``t + k``."""
    counts = np.diff(ptr)
    n = frame.size
    if n == 0:
        return np.empty(0, dtype=np.int64)
    owner = np.repeat(np.arange(counts.size), counts)
    keys = []
    for k in range(1, int(counts.max())):
        a = np.arange(n - k)
        b = a + k
        gap = frame[b] - frame[a]
        ok = (owner[a] == owner[b]) & (gap > 0)
        if window >= 0:
            ok &= gap <= window
        keys.append(node[a[ok]] * n_nodes + node[b[ok]])
    if not keys:
        return np.empty(0, dtype=np.int64)
    return np.concatenate(keys).astype(np.int64, copy=False)


def pair_keys(ptr, frame, node, window, n_nodes):
    """Encode every (earlier hit, later hit) pair sharing a point as ``u * n_nodes + v``.

    ``ptr`` is a CSR offset array over points; ``frame`` and ``node`` hold
    the hits of each point sorted by frame.  ``window < 0`` means unbounded.
    """
    ptr = np.ascontiguousarray(ptr, dtype=np.int64)
    frame = np.ascontiguousarray(frame, dtype=np.int64)
    node = np.ascontiguousarray(node, dtype=np.int64)
    if USE_NUMBA:
        return pair_keys_numba(ptr, frame, node, np.int64(window), np.int64(n_nodes))
    return pair_keys_numpy(ptr, frame, node, window, n_nodes)


# ---------------------------------------------------------------------------
# marker-driven priority flood (Meyer) on a 4-connected raster

def _heap_push(prio, age, val, size, p, a, v):
    i = size
    prio[i] = p
    age[i] = a
    val[i] = v
    while i > 0:
        parent = (i - 1) // 2
        if prio[parent] < prio[i] or (prio[parent] == prio[i] and age[parent] < age[i]):
            break
        prio[parent], prio[i] = prio[i], prio[parent]
        age[parent], age[i] = age[i], age[parent]
        val[parent], val[i] = val[i], val[parent]
        i = parent
    return size + 1


def _heap_pop(prio, age, val, size):
    top = val[0]
    size -= 1
    prio[0] = prio[size]
    age[0] = age[size]
    val[0] = val[size]
    i = 0
    while True:
        left = 2 * i + 1
        if left >= size:
            break
        best = left
        right = left + 1
        if right < size and (prio[right] < prio[left] or (prio[right] == prio[left] and age[right] < age[left])):
            best = right
        if prio[i] < prio[best] or (prio[i] == prio[best] and age[i] < age[best]):
            break
        prio[best], prio[i] = prio[i], prio[best]
        age[best], age[i] = age[i], age[best]
        val[best], val[i] = val[i], val[best]
        i = best
    return top, size


_heap_push_jit = _njit(_heap_push)
_heap_pop_jit = _njit(_heap_pop)


@_njit
def flood_numba(gradient, markers):
    h, w = gradient.shape
    n = h * w
    g = gradient.ravel()
    labels = markers.ravel().copy()
    queued = labels != 0
    prio = np.empty(n, dtype=np.float64)
    age = np.empty(n, dtype=np.int64)
    val = np.empty(n, dtype=np.int64)
    size = 0
    counter = 0
    nbr = np.empty(4, dtype=np.int64)
    for idx in range(n):
        if labels[idx] == 0:
            continue
        y = idx // w
        x = idx - y * w
        m = 0
        if y > 0:
            nbr[m] = idx - w
            m += 1
        if x > 0:
            nbr[m] = idx - 1
            m += 1
        if x < w - 1:
            nbr[m] = idx + 1
            m += 1
        if y < h - 1:
            nbr[m] = idx + w
            m += 1
        for t in range(m):
            q = nbr[t]
            if not queued[q]:
                queued[q] = True
                size = _heap_push_jit(prio, age, val, size, g[q], counter, q)
                counter += 1
    while size > 0:
        idx, size = _heap_pop_jit(prio, age, val, size)
        y = idx // w
        x = idx - y * w
        m = 0
        if y > 0:
            nbr[m] = idx - w
            m += 1
        if x > 0:
            nbr[m] = idx - 1
            m += 1
        if x < w - 1:
            nbr[m] = idx + 1
            m += 1
        if y < h - 1:
            nbr[m] = idx + w
            m += 1
        found = 0
        conflict = False
        for t in range(m):
            lab = labels[nbr[t]]
            if lab > 0:
                if found == 0:
                    found = lab
                elif lab != found:
                    conflict = True
        if conflict:
            labels[idx] = -1
            continue
        labels[idx] = found
        for t in range(m):
            q = nbr[t]
            if not queued[q]:
                queued[q] = True
                size = _heap_push_jit(prio, age, val, size, g[q], counter, q)
                counter += 1
    return labels.reshape(h, w)


def _neighbors(idx, h, w):
    y, x = divmod(idx, w)
    if y > 0:
        yield idx - w
    if x > 0:
        yield idx - 1
    if x < w - 1:
        yield idx + 1
    if y < h - 1:
        yield idx + w


def flood_python(gradient, markers):
    h, w = gradient.shape
    g = gradient.ravel().tolist()
    labels = markers.ravel().astype(np.int64).tolist()
    queued = [lab != 0 for lab in labels]
    heap = []
    counter = 0
    for idx, lab in enumerate(labels):
        if lab == 0:
            continue
        for q in _neighbors(idx, h, w):
            if not queued[q]:
                queued[q] = True
                heapq.heappush(heap, (g[q], counter, q))
                counter += 1
    while heap:
        _, _, idx = heapq.heappop(heap)
        nbrs = list(_neighbors(idx, h, w))
        found = {labels[q] for q in nbrs if labels[q] > 0}
        if len(found) > 1:
            labels[idx] = RIDGE
            continue
        labels[idx] = found.pop()
        for q in nbrs:
            if not queued[q]:
                queued[q] = True
                heapq.heappush(heap, (g[q], counter, q))
                counter += 1
    return np.asarray(labels, dtype=np.int64).reshape(h, w)


def flood(gradient, markers):
    """Flood ``gradient`` from positive ``markers``; pixels where basins meet get ``RIDGE``.

    Ties in priority are popped first-in first-out so the result does not
    depend on heap internals.
    """
    gradient = np.ascontiguousarray(gradient, dtype=np.float64)
    markers = np.ascontiguousarray(markers, dtype=np.int64)
    if USE_NUMBA:
        return flood_numba(gradient, markers)
    return flood_python(gradient, markers)
