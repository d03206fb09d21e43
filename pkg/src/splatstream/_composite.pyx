# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled compositing kernels; math identical to ``_kernels_py``."""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp

cnp.import_array()

EPS_CONTRIB = 1.0 / 255.0
ALPHA_CLAMP = 0.999

cdef double C_EPS = 1.0 / 255.0
cdef double C_CLAMP = 0.999


def forward(cnp.ndarray[cnp.float64_t, ndim=2] means2d,
            cnp.ndarray[cnp.float64_t, ndim=2] conics,
            cnp.ndarray[cnp.float64_t, ndim=1] alphas,
            cnp.ndarray[cnp.float64_t, ndim=2] colors,
            cnp.ndarray[cnp.int64_t, ndim=2] bboxes,
            int height, int width, bint record=False):
    cdef int k = means2d.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=3] image = np.zeros((height, width, 3))
    cdef cnp.ndarray[cnp.float64_t, ndim=2] trans = np.ones((height, width))
    cdef cnp.ndarray[cnp.int64_t, ndim=1] usage = np.zeros(k, dtype=np.int64)

    cdef cnp.int64_t total_area = 0
    cdef int i
    for i in range(k):
        total_area += (bboxes[i, 1] - bboxes[i, 0]) * (bboxes[i, 3] - bboxes[i, 2])
    cdef cnp.ndarray[cnp.uint8_t, ndim=1] masks = None
    if record:
        masks = np.zeros(total_area, dtype=np.uint8)

    cdef cnp.int64_t offset = 0
    cdef int x0, x1, y0, y1, ix, iy
    cdef double mx, my, a, b, c, al, cr, cg, cb
    cdef double dx, dy, e, g, ap, t, w
    cdef cnp.int64_t cnt, pix
    for i in range(k):
        x0 = <int>bboxes[i, 0]; x1 = <int>bboxes[i, 1]
        y0 = <int>bboxes[i, 2]; y1 = <int>bboxes[i, 3]
        if x1 <= x0 or y1 <= y0:
            continue
        mx = means2d[i, 0]; my = means2d[i, 1]
        a = conics[i, 0]; b = conics[i, 1]; c = conics[i, 2]
        al = alphas[i]
        cr = colors[i, 0]; cg = colors[i, 1]; cb = colors[i, 2]
        cnt = 0
        for iy in range(y0, y1):
            dy = (iy + 0.5) - my
            for ix in range(x0, x1):
                dx = (ix + 0.5) - mx
                e = 0.5 * (a * dx * dx + c * dy * dy) + b * dx * dy
                g = exp(-e)
                ap = al * g
                if ap > C_CLAMP:
                    ap = C_CLAMP
                t = trans[iy, ix]
                w = ap * t
                if w > C_EPS:
                    image[iy, ix, 0] += w * cr
                    image[iy, ix, 1] += w * cg
                    image[iy, ix, 2] += w * cb
                    trans[iy, ix] = t * (1.0 - ap)
                    cnt += 1
                    if record:
                        pix = offset + (iy - y0) * (x1 - x0) + (ix - x0)
                        masks[pix] = 1
        usage[i] = cnt
        offset += (x1 - x0) * (y1 - y0)
    return image, trans, usage, masks


def backward(cnp.ndarray[cnp.float64_t, ndim=2] means2d,
             cnp.ndarray[cnp.float64_t, ndim=2] conics,
             cnp.ndarray[cnp.float64_t, ndim=1] alphas,
             cnp.ndarray[cnp.float64_t, ndim=2] colors,
             cnp.ndarray[cnp.int64_t, ndim=2] bboxes,
             int height, int width,
             cnp.ndarray[cnp.uint8_t, ndim=1] masks,
             cnp.ndarray[cnp.float64_t, ndim=2] t_final,
             cnp.ndarray[cnp.float64_t, ndim=3] d_image):
    cdef int k = means2d.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] d_means2d = np.zeros((k, 2))
    cdef cnp.ndarray[cnp.float64_t, ndim=2] d_conics = np.zeros((k, 3))
    cdef cnp.ndarray[cnp.float64_t, ndim=1] d_alphas = np.zeros(k)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] d_colors = np.zeros((k, 3))
    cdef cnp.ndarray[cnp.float64_t, ndim=2] trans = t_final.copy()
    cdef cnp.ndarray[cnp.float64_t, ndim=3] accum = np.zeros((height, width, 3))

    cdef cnp.ndarray[cnp.int64_t, ndim=1] offsets = np.zeros(k + 1, dtype=np.int64)
    cdef int i
    for i in range(k):
        offsets[i + 1] = offsets[i] + (bboxes[i, 1] - bboxes[i, 0]) * (bboxes[i, 3] - bboxes[i, 2])

    cdef int x0, x1, y0, y1, ix, iy
    cdef double mx, my, a, b, c, al, cr, cg, cb
    cdef double dx, dy, e, g, ap, raw, t_before, w
    cdef double dc0, dc1, dc2, dc_dot_col, d_ap, d_g, d_e
    cdef cnp.int64_t pix
    for i in range(k - 1, -1, -1):
        x0 = <int>bboxes[i, 0]; x1 = <int>bboxes[i, 1]
        y0 = <int>bboxes[i, 2]; y1 = <int>bboxes[i, 3]
        if x1 <= x0 or y1 <= y0:
            continue
        mx = means2d[i, 0]; my = means2d[i, 1]
        a = conics[i, 0]; b = conics[i, 1]; c = conics[i, 2]
        al = alphas[i]
        cr = colors[i, 0]; cg = colors[i, 1]; cb = colors[i, 2]
        for iy in range(y0, y1):
            dy = (iy + 0.5) - my
            for ix in range(x0, x1):
                pix = offsets[i] + (iy - y0) * (x1 - x0) + (ix - x0)
                if masks[pix] == 0:
                    continue
                dx = (ix + 0.5) - mx
                e = 0.5 * (a * dx * dx + c * dy * dy) + b * dx * dy
                g = exp(-e)
                raw = al * g
                ap = raw
                if ap > C_CLAMP:
                    ap = C_CLAMP
                t_before = trans[iy, ix] / (1.0 - ap)
                w = ap * t_before
                dc0 = d_image[iy, ix, 0]
                dc1 = d_image[iy, ix, 1]
                dc2 = d_image[iy, ix, 2]
                d_colors[i, 0] += w * dc0
                d_colors[i, 1] += w * dc1
                d_colors[i, 2] += w * dc2
                dc_dot_col = dc0 * cr + dc1 * cg + dc2 * cb
                d_ap = t_before * dc_dot_col - (
                    accum[iy, ix, 0] * dc0 + accum[iy, ix, 1] * dc1 + accum[iy, ix, 2] * dc2
                ) / (1.0 - ap)
                if raw >= C_CLAMP:
                    d_ap = 0.0
                d_alphas[i] += d_ap * g
                d_g = d_ap * al
                d_e = -g * d_g
                d_means2d[i, 0] += -d_e * (a * dx + b * dy)
                d_means2d[i, 1] += -d_e * (b * dx + c * dy)
                d_conics[i, 0] += d_e * 0.5 * dx * dx
                d_conics[i, 1] += d_e * dx * dy
                d_conics[i, 2] += d_e * 0.5 * dy * dy
                accum[iy, ix, 0] += cr * w
                accum[iy, ix, 1] += cg * w
                accum[iy, ix, 2] += cb * w
                trans[iy, ix] = t_before
    return d_means2d, d_conics, d_alphas, d_colors
