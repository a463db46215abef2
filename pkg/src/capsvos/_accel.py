"""Hot inner loops, compiled with numba when available.

Every compiled kernel has a pure-numpy twin with identical results. im2col is
numpy-only since a compiled gather was slower than numpy's strided copy. The numba path is
used unless ``CAPSVOS_DISABLE_NUMBA=1`` is set in the environment or numba
cannot be imported. ``benchmarks/bench_kernels.py`` times both paths.
"""

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_DISABLED = os.environ.get("CAPSVOS_DISABLE_NUMBA", "").lower() in ("1", "true", "yes")

try:
    if _DISABLED:
        raise ImportError
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised via the env flag
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA


def set_backend(name):
    """Switch between ``"numba"`` and ``"numpy"`` at runtime (tests, benchmarks)."""
    global USE_NUMBA
    if name == "numba":
        if not HAVE_NUMBA:
            raise RuntimeError("numba is not available")
        USE_NUMBA = True
    elif name == "numpy":
        USE_NUMBA = False
    else:
        raise ValueError(f"unknown backend {name!r}")


def backend():
    return "numba" if USE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# im2col / col2im on canonical rank-3 spatial layout (N, D, H, W, C)
# ---------------------------------------------------------------------------

def im2col_numpy(xp, ksize, stride, out_size):
    kd, kh, kw = ksize
    sd, sh, sw = stride
    od, oh, ow = out_size
    win = sliding_window_view(xp, (kd, kh, kw), axis=(1, 2, 3))
    win = win[:, : sd * (od - 1) + 1 : sd, : sh * (oh - 1) + 1 : sh, : sw * (ow - 1) + 1 : sw]
    # (N, od, oh, ow, C, kd, kh, kw) -> (N, od, oh, ow, kd, kh, kw, C)
    return np.ascontiguousarray(win.transpose(0, 1, 2, 3, 5, 6, 7, 4))


def col2im_numpy(cols, padded_shape, stride):
    n, od, oh, ow, kd, kh, kw, c = cols.shape
    sd, sh, sw = stride
    out = np.zeros(padded_shape, dtype=cols.dtype)
    for a in range(kd):
        for b in range(kh):
            for e in range(kw):
                out[:, a : a + sd * (od - 1) + 1 : sd,
                    b : b + sh * (oh - 1) + 1 : sh,
                    e : e + sw * (ow - 1) + 1 : sw, :] += cols[:, :, :, :, a, b, e, :]
    return out


if HAVE_NUMBA:

    @njit(cache=True)
    def _col2im_nb(cols, out, sd, sh, sw):
        n, od, oh, ow, kd, kh, kw, c = cols.shape
        for i in range(n):
            for z in range(od):
                for y in range(oh):
                    for x in range(ow):
                        for a in range(kd):
                            for b in range(kh):
                                for e in range(kw):
                                    for ch in range(c):
                                        out[i, z * sd + a, y * sh + b, x * sw + e, ch] += cols[i, z, y, x, a, b, e, ch]
        return out

    @njit(cache=True)
    def _matched_count_nb(src, dst, tol):
        h, w = src.shape
        r = int(np.floor(tol))
        tol2 = tol * tol
        count = 0
        for y in range(h):
            for x in range(w):
                if not src[y, x]:
                    continue
                hit = False
                for dy in range(-r, r + 1):
                    yy = y + dy
                    if yy < 0 or yy >= h:
                        continue
                    for dx in range(-r, r + 1):
                        xx = x + dx
                        if xx < 0 or xx >= w:
                            continue
                        if dy * dy + dx * dx <= tol2 and dst[yy, xx]:
                            hit = True
                            break
                    if hit:
                        break
                if hit:
                    count += 1
        return count


def im2col(xp, ksize, stride, out_size):
    # a strided gather; numpy's copy beats a compiled loop here (see the benchmark)
    return im2col_numpy(xp, ksize, stride, out_size)


def col2im(cols, padded_shape, stride):
    if USE_NUMBA:
        out = np.zeros(padded_shape, dtype=cols.dtype)
        return _col2im_nb(np.ascontiguousarray(cols), out, *stride)
    return col2im_numpy(cols, padded_shape, stride)


# ---------------------------------------------------------------------------
# boundary matching for the contour metric
# ---------------------------------------------------------------------------

def matched_count_numpy(src, dst, tol):
    """Number of True pixels in ``src`` within Euclidean ``tol`` of a True pixel in ``dst``."""
    h, w = src.shape
    r = int(np.floor(tol))
    reach = np.zeros((h, w), dtype=bool)
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            if dy * dy + dx * dx > tol * tol:
                continue
            ys, yd = (slice(dy, h), slice(0, h - dy)) if dy >= 0 else (slice(0, h + dy), slice(-dy, h))
            xs, xd = (slice(dx, w), slice(0, w - dx)) if dx >= 0 else (slice(0, w + dx), slice(-dx, w))
            reach[yd, xd] |= dst[ys, xs]
    return int(np.count_nonzero(src & reach))


def matched_count(src, dst, tol):
    src = np.ascontiguousarray(src, dtype=np.bool_)
    dst = np.ascontiguousarray(dst, dtype=np.bool_)
    if USE_NUMBA:
        return int(_matched_count_nb(src, dst, float(tol)))
    return matched_count_numpy(src, dst, tol)
