"""Hot inner loops: convolution lowering and parallel-beam projection.

Every kernel exists twice, a numba version and a pure-numpy version with the
same signature. The public names at the bottom of the module dispatch on
``lactlab._accel.USE_NUMBA``; the ``*_numpy`` / ``*_numba`` variants stay
importable so tests and the benchmark can compare them directly.

Image geometry used by the projector: pixel (row i, col j) of an S x S image
sits at x = j - c, y = c - i with c = (S - 1) / 2, in pixel units. A ray at
angle theta and detector offset s is the line {x cos + y sin = s}.
"""
import numpy as np

from ._accel import USE_NUMBA, HAVE_NUMBA, njit


# ----------------------------------------------------------------------------
# im2col / col2im
# ----------------------------------------------------------------------------

def conv_out_size(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def im2col_numpy(x, kh, kw, stride, pad):
    """(B, C, H, W) -> (B, C, kh, kw, Ho, Wo)."""
    B, C, H, W = x.shape
    Ho = conv_out_size(H, kh, stride, pad)
    Wo = conv_out_size(W, kw, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, : (Ho - 1) * stride + 1 : stride, : (Wo - 1) * stride + 1 : stride]
    # win: (B, C, Ho, Wo, kh, kw)
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3))


def col2im_numpy(cols, H, W, stride, pad):
    """Adjoint of :func:`im2col_numpy`; overlapping taps are summed."""
    B, C, kh, kw, Ho, Wo = cols.shape
    out = np.zeros((B, C, H + 2 * pad, W + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += cols[:, :, i, j]
    if pad:
        out = out[:, :, pad : pad + H, pad : pad + W]
    return np.ascontiguousarray(out)


@njit(cache=True)
def _im2col_nb(x, kh, kw, stride, pad, Ho, Wo):
    B, C, H, W = x.shape
    out = np.zeros((B, C, kh, kw, Ho, Wo), dtype=x.dtype)
    for b in range(B):
        for c in range(C):
            for i in range(kh):
                for j in range(kw):
                    for oy in range(Ho):
                        iy = oy * stride + i - pad
                        if iy < 0 or iy >= H:
                            continue
                        for ox in range(Wo):
                            ix = ox * stride + j - pad
                            if ix >= 0 and ix < W:
                                out[b, c, i, j, oy, ox] = x[b, c, iy, ix]
    return out


@njit(cache=True)
def _col2im_nb(cols, H, W, stride, pad):
    B, C, kh, kw, Ho, Wo = cols.shape
    out = np.zeros((B, C, H, W), dtype=cols.dtype)
    for b in range(B):
        for c in range(C):
            for i in range(kh):
                for j in range(kw):
                    for oy in range(Ho):
                        iy = oy * stride + i - pad
                        if iy < 0 or iy >= H:
                            continue
                        for ox in range(Wo):
                            ix = ox * stride + j - pad
                            if ix >= 0 and ix < W:
                                out[b, c, iy, ix] += cols[b, c, i, j, oy, ox]
    return out


def im2col_numba(x, kh, kw, stride, pad):
    H, W = x.shape[2:]
    Ho = conv_out_size(H, kh, stride, pad)
    Wo = conv_out_size(W, kw, stride, pad)
    return _im2col_nb(np.ascontiguousarray(x), kh, kw, stride, pad, Ho, Wo)


def col2im_numba(cols, H, W, stride, pad):
    return _col2im_nb(np.ascontiguousarray(cols), H, W, stride, pad)


# ----------------------------------------------------------------------------
# parallel-beam projector
# ----------------------------------------------------------------------------

def ray_samples(size, step=0.5):
    """Sample offsets along each ray covering the whole image diagonal."""
    reach = np.ceil(size / np.sqrt(2.0)) + 1.0
    n = int(2 * reach / step) + 1
    return (-reach + step * np.arange(n)).astype(np.float64), step


def _bilinear_numpy(img, row, col):
    S0, S1 = img.shape
    r0 = np.floor(row).astype(np.int64)
    c0 = np.floor(col).astype(np.int64)
    fr = row - r0
    fc = col - c0
    out = np.zeros(row.shape, dtype=np.float64)
    for dr, wr in ((0, 1.0 - fr), (1, fr)):
        for dc, wc in ((0, 1.0 - fc), (1, fc)):
            rr = r0 + dr
            cc = c0 + dc
            ok = (rr >= 0) & (rr < S0) & (cc >= 0) & (cc < S1)
            vals = np.zeros(row.shape, dtype=np.float64)
            vals[ok] = img[rr[ok], cc[ok]]
            out += wr * wc * vals
    return out


def radon_numpy(img, angles_rad, det_pos, t, dt):
    S = img.shape[0]
    c = (S - 1) / 2.0
    img = np.asarray(img, dtype=np.float64)
    sino = np.zeros((len(angles_rad), len(det_pos)), dtype=np.float64)
    s = det_pos[:, None]
    tt = t[None, :]
    for a, th in enumerate(angles_rad):
        co, si = np.cos(th), np.sin(th)
        x = s * co - tt * si
        y = s * si + tt * co
        sino[a] = _bilinear_numpy(img, c - y, x + c).sum(axis=1) * dt
    return sino


@njit(cache=True)
def _radon_nb(img, angles_rad, det_pos, t, dt):
    S0, S1 = img.shape
    c = (S0 - 1) / 2.0
    A = angles_rad.shape[0]
    D = det_pos.shape[0]
    sino = np.zeros((A, D), dtype=np.float64)
    for a in range(A):
        co = np.cos(angles_rad[a])
        si = np.sin(angles_rad[a])
        for d in range(D):
            s = det_pos[d]
            acc = 0.0
            for k in range(t.shape[0]):
                x = s * co - t[k] * si
                y = s * si + t[k] * co
                row = c - y
                col = x + c
                r0 = int(np.floor(row))
                c0 = int(np.floor(col))
                fr = row - r0
                fc = col - c0
                if r0 < -1 or r0 >= S0 or c0 < -1 or c0 >= S1:
                    continue
                v = 0.0
                if r0 >= 0 and c0 >= 0:
                    v += (1.0 - fr) * (1.0 - fc) * img[r0, c0]
                if r0 >= 0 and c0 + 1 < S1:
                    v += (1.0 - fr) * fc * img[r0, c0 + 1]
                if r0 + 1 < S0 and c0 >= 0:
                    v += fr * (1.0 - fc) * img[r0 + 1, c0]
                if r0 + 1 < S0 and c0 + 1 < S1:
                    v += fr * fc * img[r0 + 1, c0 + 1]
                acc += v
            sino[a, d] = acc * dt
    return sino


def radon_numba(img, angles_rad, det_pos, t, dt):
    return _radon_nb(np.ascontiguousarray(img, dtype=np.float64),
                     np.asarray(angles_rad, dtype=np.float64),
                     np.asarray(det_pos, dtype=np.float64),
                     np.asarray(t, dtype=np.float64), float(dt))


def backproject_numpy(proj, angles_rad, weights, size, det_spacing=1.0):
    """Linear-interpolated backprojection of ``proj`` (A, D) onto size x size."""
    A, D = proj.shape
    c = (size - 1) / 2.0
    cd = (D - 1) / 2.0
    idx = np.arange(size, dtype=np.float64)
    x = (idx - c)[None, :]
    y = (c - idx)[:, None]
    img = np.zeros((size, size), dtype=np.float64)
    for a in range(A):
        u = (x * np.cos(angles_rad[a]) + y * np.sin(angles_rad[a])) / det_spacing + cd
        u0 = np.floor(u).astype(np.int64)
        fu = u - u0
        row = proj[a]
        v = np.zeros_like(u)
        ok = (u0 >= 0) & (u0 < D)
        v[ok] += (1.0 - fu[ok]) * row[u0[ok]]
        ok1 = (u0 + 1 >= 0) & (u0 + 1 < D)
        v[ok1] += fu[ok1] * row[u0[ok1] + 1]
        img += weights[a] * v
    return img


@njit(cache=True)
def _backproject_nb(proj, angles_rad, weights, size, det_spacing):
    A, D = proj.shape
    c = (size - 1) / 2.0
    cd = (D - 1) / 2.0
    img = np.zeros((size, size), dtype=np.float64)
    cos_t = np.cos(angles_rad)
    sin_t = np.sin(angles_rad)
    # angle loop innermost per pixel keeps the summation order fixed
    for i in range(size):
        y = c - i
        for j in range(size):
            x = j - c
            acc = 0.0
            for a in range(A):
                u = (x * cos_t[a] + y * sin_t[a]) / det_spacing + cd
                u0 = int(np.floor(u))
                fu = u - u0
                v = 0.0
                if u0 >= 0 and u0 < D:
                    v += (1.0 - fu) * proj[a, u0]
                if u0 + 1 >= 0 and u0 + 1 < D:
                    v += fu * proj[a, u0 + 1]
                acc += weights[a] * v
            img[i, j] = acc
    return img


def backproject_numba(proj, angles_rad, weights, size, det_spacing=1.0):
    return _backproject_nb(np.ascontiguousarray(proj, dtype=np.float64),
                           np.asarray(angles_rad, dtype=np.float64),
                           np.asarray(weights, dtype=np.float64),
                           int(size), float(det_spacing))


if USE_NUMBA:
    im2col, col2im = im2col_numba, col2im_numba
    radon_kernel, backproject_kernel = radon_numba, backproject_numba
else:
    im2col, col2im = im2col_numpy, col2im_numpy
    radon_kernel, backproject_kernel = radon_numpy, backproject_numpy

__all__ = [
    "HAVE_NUMBA", "USE_NUMBA", "conv_out_size", "ray_samples",
    "im2col", "col2im", "radon_kernel", "backproject_kernel",
    "im2col_numpy", "col2im_numpy", "im2col_numba", "col2im_numba",
    "radon_numpy", "radon_numba", "backproject_numpy", "backproject_numba",
]
