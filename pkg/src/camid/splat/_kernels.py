"""Front-to-back splat compositing, with optional forward-mode pose tangents.

Both paths implement the same arithmetic: Gaussians arrive sorted near to far,
each pixel keeps its transmittance ``T`` and, when tangents are requested, the
six directional derivatives of ``T`` and of the accumulated color. Compositing
front to back with transmittance is algebraically the back-to-front "over"
operator applied in sorted order.

The footprint is a Gaussian shifted down so it reaches zero at 3 sigma; that
keeps the image continuous in the pose, which the finite-difference checks of
the gradient rely on.
"""
import math

import numpy as np

from camid._accel import njit, use_numba

CUTOFF_D2 = 9.0
EDGE = math.exp(-0.5 * CUTOFF_D2)
ALPHA_MAX = 0.99


def _raster_numpy(means, conics, opac, colors, radii, slots, n_slots, dmeans, dconics, bg, height, width, with_grad):
    img = np.zeros((height, width, 3))
    T = np.ones((height, width))
    weights = np.zeros((height, width, n_slots))
    dimg = np.zeros((height, width, 6, 3)) if with_grad else None
    dT = np.zeros((height, width, 6)) if with_grad else None
    for g in range(means.shape[0]):
        u, v = means[g]
        r = radii[g]
        x0, x1 = max(0, int(math.floor(u - r))), min(width, int(math.ceil(u + r)) + 1)
        y0, y1 = max(0, int(math.floor(v - r))), min(height, int(math.ceil(v + r)) + 1)
        if x0 >= x1 or y0 >= y1:
            continue
        px = np.arange(x0, x1) + 0.5 - u
        py = np.arange(y0, y1) + 0.5 - v
        dx, dy = np.meshgrid(px, py)
        a, b, c = conics[g]
        d2 = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy
        inside = d2 < CUTOFF_D2
        if not inside.any():
            continue
        e = np.exp(-0.5 * d2)
        w = np.where(inside, (e - EDGE) / (1.0 - EDGE), 0.0)
        raw = opac[g] * w
        clamped = raw > ALPHA_MAX
        alpha = np.where(clamped, ALPHA_MAX, raw)
        Tp = T[y0:y1, x0:x1]
        contrib = alpha * Tp
        img[y0:y1, x0:x1] += contrib[..., None] * colors[g]
        weights[y0:y1, x0:x1, slots[g]] += contrib
        if with_grad:
            # dd2/dxi for the 6 pose directions
            da, db, dc = dconics[g, :, 0], dconics[g, :, 1], dconics[g, :, 2]
            du, dv = dmeans[g, :, 0], dmeans[g, :, 1]
            dd2 = (da[:, None, None] * (dx * dx) + 2.0 * db[:, None, None] * (dx * dy) + dc[:, None, None] * (dy * dy)
                   - du[:, None, None] * (2.0 * a * dx + 2.0 * b * dy)
                   - dv[:, None, None] * (2.0 * b * dx + 2.0 * c * dy))
            dalpha = np.where(inside & ~clamped, -0.5 * opac[g] * e / (1.0 - EDGE), 0.0)[None] * dd2
            dalpha = np.moveaxis(dalpha, 0, -1)
            dTp = dT[y0:y1, x0:x1]
            dcontrib = dalpha * Tp[..., None] + alpha[..., None] * dTp
            dimg[y0:y1, x0:x1] += dcontrib[..., None] * colors[g]
            dT[y0:y1, x0:x1] = dTp * (1.0 - alpha)[..., None] - Tp[..., None] * dalpha
        T[y0:y1, x0:x1] = Tp * (1.0 - alpha)
    img += T[..., None] * bg
    if with_grad:
        dimg += dT[..., None] * bg
    return img, weights, T, dimg


def _raster_numba_impl(means, conics, opac, colors, radii, slots, n_slots, dmeans, dconics, bg, height, width,
                       with_grad):
    img = np.zeros((height, width, 3))
    T = np.ones((height, width))
    weights = np.zeros((height, width, n_slots))
    gh = height if with_grad else 1
    gw = width if with_grad else 1
    dimg = np.zeros((gh, gw, 6, 3))
    dT = np.zeros((gh, gw, 6))
    dd2 = np.zeros(6)
    inv_edge = 1.0 / (1.0 - EDGE)
    for g in range(means.shape[0]):
        u = means[g, 0]
        v = means[g, 1]
        r = radii[g]
        x0 = max(0, int(math.floor(u - r)))
        x1 = min(width, int(math.ceil(u + r)) + 1)
        y0 = max(0, int(math.floor(v - r)))
        y1 = min(height, int(math.ceil(v + r)) + 1)
        a = conics[g, 0]
        b = conics[g, 1]
        c = conics[g, 2]
        o = opac[g]
        s = slots[g]
        for i in range(y0, y1):
            dy = i + 0.5 - v
            for j in range(x0, x1):
                dx = j + 0.5 - u
                d2 = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy
                if d2 >= CUTOFF_D2:
                    continue
                e = math.exp(-0.5 * d2)
                raw = o * (e - EDGE) * inv_edge
                clamped = raw > ALPHA_MAX
                alpha = ALPHA_MAX if clamped else raw
                Tp = T[i, j]
                contrib = alpha * Tp
                for ch in range(3):
                    img[i, j, ch] += contrib * colors[g, ch]
                weights[i, j, s] += contrib
                if with_grad:
                    gx = 2.0 * a * dx + 2.0 * b * dy
                    gy = 2.0 * b * dx + 2.0 * c * dy
                    for k in range(6):
                        dd2[k] = (dconics[g, k, 0] * dx * dx + 2.0 * dconics[g, k, 1] * dx * dy
                                  + dconics[g, k, 2] * dy * dy - dmeans[g, k, 0] * gx - dmeans[g, k, 1] * gy)
                    coef = 0.0 if clamped else -0.5 * o * e * inv_edge
                    for k in range(6):
                        dal = coef * dd2[k]
                        dc_k = dal * Tp + alpha * dT[i, j, k]
                        for ch in range(3):
                            dimg[i, j, k, ch] += dc_k * colors[g, ch]
                        dT[i, j, k] = dT[i, j, k] * (1.0 - alpha) - Tp * dal
                T[i, j] = Tp * (1.0 - alpha)
    for i in range(height):
        for j in range(width):
            for ch in range(3):
                img[i, j, ch] += T[i, j] * bg[ch]
            if with_grad:
                for k in range(6):
                    for ch in range(3):
                        dimg[i, j, k, ch] += dT[i, j, k] * bg[ch]
    return img, weights, T, dimg


_raster_numba = njit(_raster_numba_impl) if njit is not None else None


def rasterize(means, conics, opac, colors, radii, slots, n_slots, bg, height, width, dmeans=None, dconics=None):
    """Composite sorted 2D Gaussians. Returns ``(image, slot_weights, transmittance, d_image or None)``."""
    with_grad = dmeans is not None
    n = means.shape[0]
    if dmeans is None:
        dmeans = np.zeros((n, 6, 2))
        dconics = np.zeros((n, 6, 3))
    args = (np.ascontiguousarray(means, dtype=np.float64), np.ascontiguousarray(conics, dtype=np.float64),
            np.ascontiguousarray(opac, dtype=np.float64), np.ascontiguousarray(colors, dtype=np.float64),
            np.ascontiguousarray(radii, dtype=np.float64), np.ascontiguousarray(slots, dtype=np.int64),
            int(n_slots), np.ascontiguousarray(dmeans, dtype=np.float64),
            np.ascontiguousarray(dconics, dtype=np.float64), np.ascontiguousarray(bg, dtype=np.float64),
            int(height), int(width), bool(with_grad))
    if use_numba():
        img, weights, T, dimg = _raster_numba(*args)
    else:
        img, weights, T, dimg = _raster_numpy(*args)
    return img, weights, T, (dimg if with_grad else None)
