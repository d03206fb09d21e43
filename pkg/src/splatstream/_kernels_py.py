"""Numpy fallback for the per-pixel compositing kernels.

Semantics shared with the compiled twin in ``_composite.pyx``:

* primitives arrive front-to-back; depth sorting happened upstream;
* a primitive touches a pixel only when its compositing weight
  ``alpha' * T`` strictly exceeds ``EPS_CONTRIB`` (one display quantum),
  which doubles as the usage-frequency criterion, so a primitive with
  usage count zero provably never altered the image;
* ``alpha' = min(alpha * g, ALPHA_CLAMP)``.

``forward`` optionally records per-primitive contribution masks so that
``backward`` replays the exact same pixel sets.
"""

from __future__ import annotations

import numpy as np

EPS_CONTRIB = 1.0 / 255.0
ALPHA_CLAMP = 0.999


def _gaussian_weights(mean, conic, bbox):
    x0, x1, y0, y1 = bbox
    dx = np.arange(x0, x1, dtype=np.float64) + 0.5 - mean[0]
    dy = np.arange(y0, y1, dtype=np.float64) + 0.5 - mean[1]
    dxg, dyg = np.meshgrid(dx, dy)
    a, b, c = conic
    e = 0.5 * (a * dxg * dxg + c * dyg * dyg) + b * dxg * dyg
    return np.exp(-e), dxg, dyg


def forward(means2d, conics, alphas, colors, bboxes, height, width, record=False):
    """Front-to-back alpha compositing over an opaque black background.

    Returns ``(image, t_final, usage, masks)`` where ``masks`` is a flat
    uint8 array over concatenated bbox areas (None unless ``record``).
    """
    k = means2d.shape[0]
    image = np.zeros((height, width, 3), dtype=np.float64)
    trans = np.ones((height, width), dtype=np.float64)
    usage = np.zeros(k, dtype=np.int64)
    areas = (bboxes[:, 1] - bboxes[:, 0]) * (bboxes[:, 3] - bboxes[:, 2])
    masks = np.zeros(int(areas.sum()), dtype=np.uint8) if record else None
    offset = 0
    for i in range(k):
        x0, x1, y0, y1 = bboxes[i]
        area = int(areas[i])
        if area <= 0:
            continue
        g, _, _ = _gaussian_weights(means2d[i], conics[i], bboxes[i])
        ap = np.minimum(alphas[i] * g, ALPHA_CLAMP)
        tb = trans[y0:y1, x0:x1]
        w = ap * tb
        m = w > EPS_CONTRIB
        if m.any():
            image[y0:y1, x0:x1][m] += w[m, None] * colors[i]
            tb[m] *= 1.0 - ap[m]
            usage[i] = int(m.sum())
        if record:
            masks[offset : offset + area] = m.ravel()
        offset += area
    return image, trans, usage, masks


def backward(means2d, conics, alphas, colors, bboxes, height, width, masks, t_final, d_image):
    """Gradients of a scalar loss w.r.t. per-primitive 2D quantities.

    Replays compositing back-to-front using the recorded contribution masks
    and the final transmittance. Returns ``(d_means2d, d_conics, d_alphas,
    d_colors)``; ``d_conics`` is w.r.t. the (a, b, c) parameters of the
    symmetric conic ``[[a, b], [b, c]]``.
    """
    kcount = means2d.shape[0]
    d_means2d = np.zeros((kcount, 2), dtype=np.float64)
    d_conics = np.zeros((kcount, 3), dtype=np.float64)
    d_alphas = np.zeros(kcount, dtype=np.float64)
    d_colors = np.zeros((kcount, 3), dtype=np.float64)

    trans = t_final.copy()
    accum = np.zeros((height, width, 3), dtype=np.float64)
    areas = (bboxes[:, 1] - bboxes[:, 0]) * (bboxes[:, 3] - bboxes[:, 2])
    offsets = np.concatenate([[0], np.cumsum(areas)])

    for i in range(kcount - 1, -1, -1):
        x0, x1, y0, y1 = bboxes[i]
        if areas[i] <= 0:
            continue
        m = masks[offsets[i] : offsets[i + 1]].reshape(y1 - y0, x1 - x0).astype(bool)
        if not m.any():
            continue
        g, dxg, dyg = _gaussian_weights(means2d[i], conics[i], bboxes[i])
        raw = alphas[i] * g
        ap = np.minimum(raw, ALPHA_CLAMP)

        gm = g[m]
        apm = ap[m]
        t_before = trans[y0:y1, x0:x1][m] / (1.0 - apm)
        w = apm * t_before
        dc = d_image[y0:y1, x0:x1][m]  # (npix, 3)
        col = colors[i]

        d_colors[i] = dc.T @ w
        dc_dot_col = dc @ col
        acc = accum[y0:y1, x0:x1][m]
        d_ap = t_before * dc_dot_col - (acc * dc).sum(axis=1) / (1.0 - apm)

        unclamped = raw[m] < ALPHA_CLAMP
        d_ap = np.where(unclamped, d_ap, 0.0)
        d_alphas[i] = float((d_ap * gm).sum())
        d_g = d_ap * alphas[i]
        d_e = -gm * d_g  # g = exp(-e)

        a, b, c = conics[i]
        dxm = dxg[m]
        dym = dyg[m]
        d_means2d[i, 0] = float((-d_e * (a * dxm + b * dym)).sum())
        d_means2d[i, 1] = float((-d_e * (b * dxm + c * dym)).sum())
        d_conics[i, 0] = float((d_e * 0.5 * dxm * dxm).sum())
        d_conics[i, 1] = float((d_e * dxm * dym).sum())
        d_conics[i, 2] = float((d_e * 0.5 * dym * dym).sum())

        # restore pre-i state for the next (earlier) primitive
        accum[y0:y1, x0:x1][m] += col * w[:, None]
        trans[y0:y1, x0:x1][m] = t_before

    return d_means2d, d_conics, d_alphas, d_colors
