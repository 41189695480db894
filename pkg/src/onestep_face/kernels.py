"""Hot non-differentiable kernels.

Every kernel exists twice: a ``_nb`` loop version compiled with numba and a
``_np`` vectorised numpy version. The public name is bound to one of them at
import time (see ``_accel``). Both variants accumulate in the same order, so
they agree to rounding; the codec can differ only on exact rounding ties.

Images here are float64 ``H x W x C`` arrays.
"""
import numpy as np

from ._accel import USE_NUMBA, njit

__all__ = [
    "nearest_code",
    "correlate2d",
    "gaussian_blur",
    "sobel_magnitude",
    "resize_bilinear",
    "dct_roundtrip",
    "dct_matrix",
    "SOBEL_X",
    "SOBEL_Y",
]

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T.copy()


# nearest code ----------------------------------------------------------------


@njit
def _nearest_code_nb(features, codes):
    K, d = features.shape
    N = codes.shape[0]
    out = np.empty(K, np.int64)
    for k in range(K):
        best = np.inf
        best_q = 0
        for q in range(N):
            s = 0.0
            for j in range(d):
                diff = features[k, j] - codes[q, j]
                s += diff * diff
            # strict '<' keeps the lowest index on ties
            if s < best:
                best = s
                best_q = q
        out[k] = best_q
    return out


def _nearest_code_np(features, codes):
    diff = features[:, None, :] - codes[None, :, :]
    # argmin returns the first occurrence, i.e. the lowest index on ties
    return np.argmin((diff * diff).sum(axis=-1), axis=1).astype(np.int64)


# 2-D correlation with replicate padding ----------------------------------------


@njit
def _correlate2d_nb(img, kernel):
    H, W, C = img.shape
    kh, kw = kernel.shape
    ph, pw = kh // 2, kw // 2
    out = np.zeros((H, W, C))
    for y in range(H):
        for x in range(W):
            for c in range(C):
                acc = 0.0
                for i in range(kh):
                    yy = min(max(y + i - ph, 0), H - 1)
                    for j in range(kw):
                        xx = min(max(x + j - pw, 0), W - 1)
                        acc += kernel[i, j] * img[yy, xx, c]
                out[y, x, c] = acc
    return out


def _correlate2d_np(img, kernel):
    H, W, _ = img.shape
    kh, kw = kernel.shape
    ph, pw = kh // 2, kw // 2
    padded = np.pad(img, ((ph, kh - 1 - ph), (pw, kw - 1 - pw), (0, 0)), mode="edge")
    out = np.zeros(img.shape)
    for i in range(kh):
        for j in range(kw):
            out += kernel[i, j] * padded[i : i + H, j : j + W]
    return out


# bilinear resize (half-pixel centres, edge clamp) ------------------------------


def _resize_axis(n_in, n_out):
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    return lo, hi, frac


@njit
def _resize_nb(img, ylo, yhi, yf, xlo, xhi, xf):
    Ho = ylo.shape[0]
    Wo = xlo.shape[0]
    C = img.shape[2]
    out = np.empty((Ho, Wo, C))
    for y in range(Ho):
        a, b, fy = ylo[y], yhi[y], yf[y]
        for x in range(Wo):
            l, r, fx = xlo[x], xhi[x], xf[x]
            for c in range(C):
                top = img[a, l, c] * (1.0 - fx) + img[a, r, c] * fx
                bot = img[b, l, c] * (1.0 - fx) + img[b, r, c] * fx
                out[y, x, c] = top * (1.0 - fy) + bot * fy
    return out


def _resize_np(img, ylo, yhi, yf, xlo, xhi, xf):
    fx = xf[None, :, None]
    fy = yf[:, None, None]
    rows_a = img[ylo]
    rows_b = img[yhi]
    top = rows_a[:, xlo] * (1.0 - fx) + rows_a[:, xhi] * fx
    bot = rows_b[:, xlo] * (1.0 - fx) + rows_b[:, xhi] * fx
    return top * (1.0 - fy) + bot * fy


# 8x8 block DCT quantise / dequantise -----------------------------------------


def dct_matrix(n=8):
    """Orthonormal DCT-II basis, rows are frequencies."""
    k = np.arange(n)[:, None]
    x = np.arange(n)[None, :]
    m = np.cos(np.pi * (2 * x + 1) * k / (2 * n)) * np.sqrt(2.0 / n)
    m[0] /= np.sqrt(2.0)
    return m


@njit
def _dct_roundtrip_nb(plane, qtable, basis):
    # plane: (H, W) on the 0..255 scale, H and W multiples of 8
    H, W = plane.shape
    out = np.empty((H, W))
    blk = np.empty((8, 8))
    tmp = np.empty((8, 8))
    coef = np.empty((8, 8))
    for by in range(0, H, 8):
        for bx in range(0, W, 8):
            for i in range(8):
                for j in range(8):
                    blk[i, j] = plane[by + i, bx + j] - 128.0
            # coef = B @ blk @ B.T
            for u in range(8):
                for j in range(8):
                    acc = 0.0
                    for i in range(8):
                        acc += basis[u, i] * blk[i, j]
                    tmp[u, j] = acc
            for u in range(8):
                for v in range(8):
                    acc = 0.0
                    for j in range(8):
                        acc += tmp[u, j] * basis[v, j]
                    coef[u, v] = np.rint(acc / qtable[u, v]) * qtable[u, v]
            # blk = B.T @ coef @ B
            for i in range(8):
                for v in range(8):
                    acc = 0.0
                    for u in range(8):
                        acc += basis[u, i] * coef[u, v]
                    tmp[i, v] = acc
            for i in range(8):
                for j in range(8):
                    acc = 0.0
                    for v in range(8):
                        acc += tmp[i, v] * basis[v, j]
                    out[by + i, bx + j] = acc + 128.0
    return out


def _dct_roundtrip_np(plane, qtable, basis):
    H, W = plane.shape
    blocks = (plane - 128.0).reshape(H // 8, 8, W // 8, 8).transpose(0, 2, 1, 3)
    coef = basis @ blocks @ basis.T
    coef = np.rint(coef / qtable) * qtable
    rec = basis.T @ coef @ basis
    return rec.transpose(0, 2, 1, 3).reshape(H, W) + 128.0


if USE_NUMBA:
    _nearest_code = _nearest_code_nb
    _correlate2d = _correlate2d_nb
    _resize = _resize_nb
    _dct_roundtrip = _dct_roundtrip_nb
else:
    _nearest_code = _nearest_code_np
    _correlate2d = _correlate2d_np
    _resize = _resize_np
    _dct_roundtrip = _dct_roundtrip_np


# public wrappers -------------------------------------------------------------


def nearest_code(features, codes):
    """Index of the nearest code (squared L2) for each feature row.

    Ties resolve to the lowest code index.
    """
    features = np.ascontiguousarray(features, dtype=np.float64)
    codes = np.ascontiguousarray(codes, dtype=np.float64)
    if features.ndim != 2 or codes.ndim != 2:
        raise ValueError("features and codes must be 2-D")
    if features.shape[1] != codes.shape[1]:
        raise ValueError(
            f"feature width {features.shape[1]} does not match code width {codes.shape[1]}"
        )
    return _nearest_code(features, codes)


def correlate2d(img, kernel):
    img = np.ascontiguousarray(img, dtype=np.float64)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[:, :, None]
    out = _correlate2d(img, np.ascontiguousarray(kernel, dtype=np.float64))
    return out[:, :, 0] if squeeze else out


def gaussian_kernel1d(sigma):
    radius = max(1, int(np.ceil(3.0 * sigma)))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(img, sigma):
    """Separable isotropic Gaussian blur; ``sigma <= 0`` returns a copy."""
    img = np.asarray(img, dtype=np.float64)
    if sigma <= 0:
        return img.copy()
    k = gaussian_kernel1d(sigma)
    out = correlate2d(img, k[None, :])
    return correlate2d(out, k[:, None])


def sobel_magnitude(img):
    """Per-channel sqrt(Gx^2 + Gy^2) with the 3x3 Sobel kernels.

    Computed difference-first (replicate padding), so flat regions give
    exactly zero rather than rounding residue.
    """
    img = np.asarray(img, dtype=np.float64)
    pad = ((1, 1), (1, 1)) + ((0, 0),) * (img.ndim - 2)
    p = np.pad(img, pad, mode="edge")
    dx = p[:, 2:] - p[:, :-2]
    dy = p[2:] - p[:-2]
    gx = dx[:-2] + 2.0 * dx[1:-1] + dx[2:]
    gy = dy[:, :-2] + 2.0 * dy[:, 1:-1] + dy[:, 2:]
    return np.sqrt(gx * gx + gy * gy)


def resize_bilinear(img, out_h, out_w):
    img = np.ascontiguousarray(img, dtype=np.float64)
    H, W = img.shape[:2]
    if (H, W) == (out_h, out_w):
        return img.copy()
    squeeze = img.ndim == 2
    if squeeze:
        img = img[:, :, None]
    ylo, yhi, yf = _resize_axis(H, out_h)
    xlo, xhi, xf = _resize_axis(W, out_w)
    out = _resize(img, ylo, yhi, yf, xlo, xhi, xf)
    return out[:, :, 0] if squeeze else out


_BASIS = dct_matrix(8)


def dct_roundtrip(img, qtable):
    """Quantise/dequantise every 8x8 block of every channel.

    ``img`` is on the 0..255 scale. Edges are replicate-padded to a multiple of
    8 and cropped afterwards.
    """
    img = np.asarray(img, dtype=np.float64)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[:, :, None]
    H, W, C = img.shape
    ph, pw = (-H) % 8, (-W) % 8
    padded = np.pad(img, ((0, ph), (0, pw), (0, 0)), mode="edge")
    qtable = np.ascontiguousarray(qtable, dtype=np.float64)
    out = np.empty(padded.shape)
    for c in range(C):
        out[:, :, c] = _dct_roundtrip(np.ascontiguousarray(padded[:, :, c]), qtable, _BASIS)
    out = out[:H, :W]
    return out[:, :, 0] if squeeze else out
