"""Hot inner loops, each with a numba kernel and a pure-numpy twin.

The active implementation is picked once at import time from the
``RNCA_BACKEND`` environment variable (``numba`` or ``numpy``).  When numba
is missing the numpy path is used silently.  Both variants are always
importable as ``<name>_nb`` / ``<name>_np`` so they can be cross-checked.
"""

import os

import numpy as np

try:
    import numba
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]):
            return args[0]
        return lambda fn: fn


def _pick_backend():
    want = os.environ.get("RNCA_BACKEND", "numba").strip().lower()
    if want not in ("numba", "numpy"):
        raise ValueError(f"RNCA_BACKEND must be 'numba' or 'numpy', got {want!r}")
    if want == "numba" and not HAVE_NUMBA:
        return "numpy"
    return want


BACKEND = _pick_backend()

_JIT = dict(cache=True, nogil=True)


# ---------------------------------------------------------------------------
# 3x3 neighbourhood max (zero padded)


def nbmax3_np(a):
    """Max over the 3x3 window of the last two axes, out-of-bounds = 0."""
    a = np.asarray(a)
    pad = [(0, 0)] * (a.ndim - 2) + [(1, 1), (1, 1)]
    p = np.pad(a, pad)
    h, w = a.shape[-2:]
    out = p[..., 0:h, 0:w].copy()
    for dy in range(3):
        for dx in range(3):
            np.maximum(out, p[..., dy:dy + h, dx:dx + w], out=out)
    return out


@njit(**_JIT)
def _nbmax3_kernel(a, out):
    # separable: row max into ``out``, then column max in place via two row buffers
    nb, h, w = a.shape
    zero = a.dtype.type(0)
    prev = np.empty(w, dtype=a.dtype)
    cur = np.empty(w, dtype=a.dtype)
    for b in range(nb):
        for y in range(h):
            for x in range(w):
                m = a[b, y, x]
                left = a[b, y, x - 1] if x > 0 else zero
                right = a[b, y, x + 1] if x < w - 1 else zero
                if left > m:
                    m = left
                if right > m:
                    m = right
                out[b, y, x] = m
        for x in range(w):
            prev[x] = zero
        for y in range(h):
            for x in range(w):
                cur[x] = out[b, y, x]
            for x in range(w):
                m = cur[x]
                if prev[x] > m:
                    m = prev[x]
                nxt = out[b, y + 1, x] if y < h - 1 else zero
                if nxt > m:
                    m = nxt
                out[b, y, x] = m
            prev, cur = cur, prev
    return out


def nbmax3_nb(a):
    a = np.asarray(a)
    shape = a.shape
    a3 = np.ascontiguousarray(a.reshape((-1,) + shape[-2:]))
    out = np.empty_like(a3)
    _nbmax3_kernel(a3, out)
    return out.reshape(shape)


# ---------------------------------------------------------------------------
# im2col gather / scatter on active pixels
#
# Pixels are addressed by flat index f = (b * H + i) * W + j into a
# (B, H, W, C) batch.  Patch columns are ordered (dy, dx, channel), matching
# ``Kernel3x3.matrix``; out-of-image taps read zero.


def gather_patches_np(x, flat):
    """Rows of 3x3xC zero-padded patches centred on the given flat pixel indices."""
    nb, h, w, c = x.shape
    b, i, j = np.unravel_index(flat, (nb, h, w))
    p = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    out = np.empty((flat.shape[0], 9, c), dtype=x.dtype)
    k = 0
    for dy in range(3):
        for dx in range(3):
            out[:, k] = p[b, i + dy, j + dx]
            k += 1
    return out.reshape(flat.shape[0], 9 * c)


@njit(**_JIT)
def _gather_kernel(x, flat, out):
    nb, h, w, c = x.shape
    cells = x.reshape((nb * h * w, c))
    for r in range(flat.shape[0]):
        f = flat[r]
        jj = f % w
        ii = (f // w) % h
        col = 0
        for dy in range(-1, 2):
            for dx in range(-1, 2):
                if ii + dy < 0 or ii + dy >= h or jj + dx < 0 or jj + dx >= w:
                    for ch in range(c):
                        out[r, col + ch] = 0.0
                else:
                    src = f + dy * w + dx
                    for ch in range(c):
                        out[r, col + ch] = cells[src, ch]
                col += c
    return out


def gather_patches_nb(x, flat):
    x = np.ascontiguousarray(x)
    out = np.empty((flat.shape[0], 9 * x.shape[-1]), dtype=x.dtype)
    return _gather_kernel(x, flat, out)


def scatter_patches_np(rows, flat, out):
    """Adjoint of ``gather_patches``: accumulate patch rows into ``out`` in place."""
    nb, h, w, c = out.shape
    b, i, j = np.unravel_index(flat, (nb, h, w))
    p = np.zeros((nb, h + 2, w + 2, c), dtype=out.dtype)
    rows = rows.reshape(flat.shape[0], 9, c)
    k = 0
    for dy in range(3):
        for dx in range(3):
            # flat indices are unique, so a fancy-index add has no collisions
            p[b, i + dy, j + dx] += rows[:, k]
            k += 1
    out += p[:, 1:-1, 1:-1]
    return out


@njit(**_JIT)
def _scatter_kernel(rows, flat, out):
    nb, h, w, c = out.shape
    cells = out.reshape((nb * h * w, c))
    for r in range(flat.shape[0]):
        f = flat[r]
        jj = f % w
        ii = (f // w) % h
        col = 0
        for dy in range(-1, 2):
            for dx in range(-1, 2):
                if ii + dy >= 0 and ii + dy < h and jj + dx >= 0 and jj + dx < w:
                    dst = f + dy * w + dx
                    for ch in range(c):
                        cells[dst, ch] += rows[r, col + ch]
                col += c
    return out


def scatter_patches_nb(rows, flat, out):
    return _scatter_kernel(np.ascontiguousarray(rows), flat, out)


# ---------------------------------------------------------------------------
# residual update with alive masking


def apply_update_np(S, flat, delta, pre_alive, alpha):
    """Add ``delta`` at ``flat`` pixels, then zero pixels dead before or after.

    Returns ``(S_next, keep)``.
    """
    nb, h, w, k = S.shape
    cand = S.copy()
    cf = cand.reshape(-1, k)
    cf[flat] += delta
    post = nbmax3_np(cand[..., 0]) >= alpha
    keep = pre_alive & post
    cand *= keep[..., None]
    return cand, keep


@njit(**_JIT)
def _apply_kernel(flat, delta, pre_alive, alpha, out, keep):
    # ``out`` arrives as a copy of S; numba's 4D slice assignment is much slower than ndarray.copy
    nb, h, w, k = out.shape
    cells = out.reshape((nb * h * w, k))
    for r in range(flat.shape[0]):
        f = flat[r]
        for ch in range(k):
            cells[f, ch] += delta[r, ch]
    # post-update alive map: separable OR of (visible >= alpha) over the 3x3 window
    vis = np.empty((h, w), dtype=np.bool_)
    row = np.empty((h, w), dtype=np.bool_)
    for b in range(nb):
        base = b * h * w
        for y in range(h):
            for x in range(w):
                vis[y, x] = cells[base + y * w + x, 0] >= alpha
        for y in range(h):
            for x in range(w):
                row[y, x] = vis[y, x] or (x > 0 and vis[y, x - 1]) or (x < w - 1 and vis[y, x + 1])
        for y in range(h):
            for x in range(w):
                v = row[y, x] or (y > 0 and row[y - 1, x]) or (y < h - 1 and row[y + 1, x])
                v = v and pre_alive[b, y, x]
                keep[b, y, x] = v
                if not v:
                    f = base + y * w + x
                    for ch in range(k):
                        cells[f, ch] = 0.0
    return out, keep


def apply_update_nb(S, flat, delta, pre_alive, alpha):
    out = np.array(S, order="C")
    keep = np.empty(S.shape[:3], dtype=np.bool_)
    return _apply_kernel(flat, np.ascontiguousarray(delta, dtype=S.dtype), pre_alive,
                         S.dtype.type(alpha), out, keep)


# ---------------------------------------------------------------------------
# binary erosion / dilation with an arbitrary offset footprint


def erode_np(mask, offsets):
    h, w = mask.shape
    r = int(np.abs(offsets).max()) if len(offsets) else 0
    p = np.pad(mask, r, constant_values=False)
    out = np.ones_like(mask)
    for dy, dx in offsets:
        out &= p[r + dy:r + dy + h, r + dx:r + dx + w]
    return out


def dilate_np(mask, offsets):
    h, w = mask.shape
    r = int(np.abs(offsets).max()) if len(offsets) else 0
    p = np.pad(mask, r, constant_values=False)
    out = np.zeros_like(mask)
    for dy, dx in offsets:
        out |= p[r - dy:r - dy + h, r - dx:r - dx + w]
    return out


@njit(**_JIT)
def _erode_kernel(mask, offsets, out):
    h, w = mask.shape
    for y in range(h):
        for x in range(w):
            ok = True
            for k in range(offsets.shape[0]):
                yy = y + offsets[k, 0]
                xx = x + offsets[k, 1]
                if yy < 0 or xx < 0 or yy >= h or xx >= w or not mask[yy, xx]:
                    ok = False
                    break
            out[y, x] = ok
    return out


@njit(**_JIT)
def _dilate_kernel(mask, offsets, out):
    h, w = mask.shape
    for y in range(h):
        for x in range(w):
            hit = False
            for k in range(offsets.shape[0]):
                yy = y - offsets[k, 0]
                xx = x - offsets[k, 1]
                if yy >= 0 and xx >= 0 and yy < h and xx < w and mask[yy, xx]:
                    hit = True
                    break
            out[y, x] = hit
    return out


def erode_nb(mask, offsets):
    return _erode_kernel(np.ascontiguousarray(mask), offsets, np.empty(mask.shape, np.bool_))


def dilate_nb(mask, offsets):
    return _dilate_kernel(np.ascontiguousarray(mask), offsets, np.empty(mask.shape, np.bool_))


# ---------------------------------------------------------------------------
# connected component labelling


def label_np(mask, connectivity):
    """Label components by iterated min-propagation.  Labels are 1..n in raster order."""
    h, w = mask.shape
    big = h * w + 1
    lab = np.where(mask, np.arange(1, h * w + 1).reshape(h, w), big)
    if connectivity == 8:
        shifts = [(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1) if dy or dx]
    else:
        shifts = [(-1, 0), (1, 0), (0, -1), (0, 1)]
    while True:
        p = np.pad(lab, 1, constant_values=big)
        new = lab.copy()
        for dy, dx in shifts:
            np.minimum(new, p[1 + dy:1 + dy + h, 1 + dx:1 + dx + w], out=new)
        new = np.where(mask, new, big)
        if np.array_equal(new, lab):
            break
        lab = new
    out = np.zeros((h, w), dtype=np.int32)
    roots = np.unique(lab[mask])
    if roots.size:
        out[mask] = np.searchsorted(roots, lab[mask]) + 1
    return out, int(roots.size)


@njit(**_JIT)
def _find(parent, x):
    while parent[x] != x:
        parent[x] = parent[parent[x]]
        x = parent[x]
    return x


@njit(**_JIT)
def _label_kernel(mask, eight):
    h, w = mask.shape
    parent = np.arange(h * w)
    for y in range(h):
        for x in range(w):
            if not mask[y, x]:
                continue
            p = y * w + x
            # previously visited neighbours: W, NW, N, NE
            for k in range(4):
                if k == 0:
                    yy, xx = y, x - 1
                elif k == 1:
                    if not eight:
                        continue
                    yy, xx = y - 1, x - 1
                elif k == 2:
                    yy, xx = y - 1, x
                else:
                    if not eight:
                        continue
                    yy, xx = y - 1, x + 1
                if yy < 0 or xx < 0 or xx >= w:
                    continue
                if mask[yy, xx]:
                    ra = _find(parent, p)
                    rb = _find(parent, yy * w + xx)
                    if ra != rb:
                        if ra < rb:
                            parent[rb] = ra
                        else:
                            parent[ra] = rb
    out = np.zeros((h, w), dtype=np.int32)
    remap = np.zeros(h * w, dtype=np.int32)
    n = 0
    for y in range(h):
        for x in range(w):
            if mask[y, x]:
                r = _find(parent, y * w + x)
                if remap[r] == 0:
                    n += 1
                    remap[r] = n
                out[y, x] = remap[r]
    return out, n


def label_nb(mask, connectivity):
    out, n = _label_kernel(np.ascontiguousarray(mask, dtype=np.bool_), connectivity == 8)
    return out, int(n)


# ---------------------------------------------------------------------------
# Zhang-Suen thinning with a simple-point guard
#
# Candidates of each sub-iteration follow the classic rule evaluated on the
# image as it was before the sub-iteration.  They are then deleted one by one
# in raster order, re-checking on the live image that the pixel is still a
# simple, non-end point; this keeps 2-pixel-thick parts (where the parallel
# rule would erase whole components) topologically intact.


def _zs_neighbours_np(img):
    p = np.pad(img, 1).astype(np.int8)
    h, w = img.shape
    # P2..P9 clockwise from north
    offs = [(-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1)]
    return [p[1 + dy:1 + dy + h, 1 + dx:1 + dx + w] for dy, dx in offs]


def _zs_candidates_np(img, first):
    n = _zs_neighbours_np(img)
    b = sum(n)
    a = sum(((n[k] == 0) & (n[(k + 1) % 8] == 1)).astype(np.int8) for k in range(8))
    p2, p3, p4, p5, p6, p7, p8, p9 = n
    if first:
        c3 = (p2 * p4 * p6) == 0
        c4 = (p4 * p6 * p8) == 0
    else:
        c3 = (p2 * p4 * p8) == 0
        c4 = (p2 * p6 * p8) == 0
    return img & (b >= 2) & (b <= 6) & (a == 1) & c3 & c4


_CW = ((-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1))


def _deletable_py(img, y, x):
    h, w = img.shape
    v = []
    for dy, dx in _CW:
        yy, xx = y + dy, x + dx
        v.append(1 if (0 <= yy < h and 0 <= xx < w and img[yy, xx]) else 0)
    if sum(v) < 2:
        return False
    # Yokoi 8-connectivity number over 4-neighbours N, E, S, W (indices 0,2,4,6)
    yokoi = 0
    for k in (0, 2, 4, 6):
        a, b, c = 1 - v[k], 1 - v[(k + 1) % 8], 1 - v[(k + 2) % 8]
        yokoi += a - a * b * c
    return yokoi == 1


def zhang_suen_np(mask):
    img = np.array(mask, dtype=bool)
    changed = True
    while changed:
        changed = False
        for first in (True, False):
            cand = _zs_candidates_np(img, first)
            for y, x in zip(*np.nonzero(cand)):
                if _deletable_py(img, y, x):
                    img[y, x] = False
                    changed = True
    return img


@njit(**_JIT)
def _nbr(img, y, x, dy, dx):
    h, w = img.shape
    yy = y + dy
    xx = x + dx
    if yy < 0 or xx < 0 or yy >= h or xx >= w:
        return 0
    return 1 if img[yy, xx] else 0


@njit(**_JIT)
def _zs_kernel(img):
    h, w = img.shape
    cand = np.zeros((h, w), np.bool_)
    v = np.zeros(8, np.int64)
    dys = np.array([-1, -1, 0, 1, 1, 1, 0, -1])
    dxs = np.array([0, 1, 1, 1, 0, -1, -1, -1])
    changed = True
    while changed:
        changed = False
        for sub in range(2):
            for y in range(h):
                for x in range(w):
                    cand[y, x] = False
                    if not img[y, x]:
                        continue
                    b = 0
                    for k in range(8):
                        v[k] = _nbr(img, y, x, dys[k], dxs[k])
                        b += v[k]
                    if b < 2 or b > 6:
                        continue
                    a = 0
                    for k in range(8):
                        if v[k] == 0 and v[(k + 1) % 8] == 1:
                            a += 1
                    if a != 1:
                        continue
                    p2, p4, p6, p8 = v[0], v[2], v[4], v[6]
                    if sub == 0:
                        ok = p2 * p4 * p6 == 0 and p4 * p6 * p8 == 0
                    else:
                        ok = p2 * p4 * p8 == 0 and p2 * p6 * p8 == 0
                    cand[y, x] = ok
            for y in range(h):
                for x in range(w):
                    if not cand[y, x]:
                        continue
                    s = 0
                    for k in range(8):
                        v[k] = _nbr(img, y, x, dys[k], dxs[k])
                        s += v[k]
                    if s < 2:
                        continue
                    yokoi = 0
                    for k in range(0, 8, 2):
                        a1 = 1 - v[k]
                        b1 = 1 - v[(k + 1) % 8]
                        c1 = 1 - v[(k + 2) % 8]
                        yokoi += a1 - a1 * b1 * c1
                    if yokoi == 1:
                        img[y, x] = False
                        changed = True
    return img


def zhang_suen_nb(mask):
    return _zs_kernel(np.array(mask, dtype=np.bool_))


# ---------------------------------------------------------------------------
# nearest-point distances (exact Euclidean, brute force)


def nearest_distances_np(src, dst, chunk=2048):
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    out = np.empty(len(src))
    for s in range(0, len(src), chunk):
        d = src[s:s + chunk, None, :] - dst[None, :, :]
        out[s:s + chunk] = np.sqrt((d ** 2).sum(-1).min(axis=1))
    return out


@njit(**_JIT)
def _nearest_kernel(src, dst, out):
    for a in range(src.shape[0]):
        best = np.inf
        for b in range(dst.shape[0]):
            dy = src[a, 0] - dst[b, 0]
            dx = src[a, 1] - dst[b, 1]
            d = dy * dy + dx * dx
            if d < best:
                best = d
        out[a] = np.sqrt(best)
    return out


def nearest_distances_nb(src, dst):
    src = np.ascontiguousarray(src, dtype=np.float64)
    dst = np.ascontiguousarray(dst, dtype=np.float64)
    return _nearest_kernel(src, dst, np.empty(len(src)))


# ---------------------------------------------------------------------------

KERNELS = (
    "nbmax3",
    "gather_patches",
    "scatter_patches",
    "apply_update",
    "erode",
    "dilate",
    "label",
    "zhang_suen",
    "nearest_distances",
)

_suffix = "_nb" if BACKEND == "numba" else "_np"
nbmax3 = globals()["nbmax3" + _suffix]
gather_patches = globals()["gather_patches" + _suffix]
scatter_patches = globals()["scatter_patches" + _suffix]
apply_update = globals()["apply_update" + _suffix]
erode = globals()["erode" + _suffix]
dilate = globals()["dilate" + _suffix]
label = globals()["label" + _suffix]
zhang_suen = globals()["zhang_suen" + _suffix]
nearest_distances = globals()["nearest_distances" + _suffix]
