"""Deterministic CPU splatting rasterizer with an analytic backward pass.

The per-pixel compositing loops live in a compiled extension when available
(``splatstream._composite``), otherwise in the numpy fallback
(``_kernels_py``); both implement identical math. Set
``SPLATSTREAM_FORCE_PY=1`` to force the fallback.

Footprints are bounded by a 3.5 sigma box. Because ``exp(-0.5 * 3.5**2)``
is already below the contribution quantum ``EPS_CONTRIB``, the box never
cuts off a pixel that could have contributed: the weight test is the sole
truncation, which keeps the analytic gradients exact away from the
(measure-zero) weight-threshold and depth-order boundaries.
"""

from __future__ import annotations

import os
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from . import _kernels_py
from .camera import Camera
from .errors import StructuralError, ValidationError
from .model import (
    COLOR,
    LOG_SCALE,
    OPACITY,
    POS,
    QUAT,
    SH_START,
    GaussianFrame,
    quat_to_matrix,
    sigmoid,
)

if os.environ.get("SPLATSTREAM_FORCE_PY"):
    _kernels = _kernels_py
    KERNEL_BACKEND = "python"
else:
    try:
        from . import _composite as _kernels  # type: ignore

        KERNEL_BACKEND = "compiled"
    except ImportError:
        _kernels = _kernels_py
        KERNEL_BACKEND = "python"

EPS_CONTRIB = _kernels_py.EPS_CONTRIB
COV_BLUR = 0.3  # pixels^2, added to the diagonal of every 2D covariance
RADIUS_SIGMA = 3.5

SH_C0 = 0.2820947917738781
SH_C1 = 0.4886025119029199


@dataclass(frozen=True)
class RenderedImage:
    pixels: np.ndarray  # (h, w, 3) float64 in [0, 1]
    resolution: tuple  # (width, height)

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        w, h = self.resolution
        if px.shape != (h, w, 3):
            raise StructuralError("pixel buffer does not match resolution")
        if not np.all(np.isfinite(px)):
            raise ValidationError("non-finite pixel values")
        px = np.ascontiguousarray(px)
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)
        object.__setattr__(self, "resolution", (int(w), int(h)))


@dataclass(frozen=True)
class UsageFrequency:
    """Per-primitive count of (pixel, view) pairs with perceptible weight."""

    counts: np.ndarray  # (n,) int64

    def merged_with(self, other: "UsageFrequency") -> "UsageFrequency":
        if self.counts.shape != other.counts.shape:
            raise StructuralError("usage count length mismatch")
        return UsageFrequency(counts=self.counts + other.counts)


class _Prep:
    """Per-camera activated and projected quantities, kept for backward."""

    __slots__ = (
        "cam", "n", "sh_degree", "order", "means2d", "conics", "alphas",
        "colors", "bboxes", "t_cam", "q_hat", "q_norm", "rot", "s2",
        "cov3d", "m_proj", "dirs", "dir_norms", "alpha_act", "color_lin",
        "sh_lin",
    )


def _activate(frame: GaussianFrame):
    p = frame.params
    mu = p[:, POS]
    q = p[:, QUAT]
    qn = np.linalg.norm(q, axis=1)
    if np.any(qn == 0) or not np.all(np.isfinite(p)):
        raise ValidationError("frame contains invalid primitive parameters")
    q_hat = q / qn[:, None]
    scales2 = np.exp(2.0 * p[:, LOG_SCALE])
    alpha = sigmoid(p[:, OPACITY])
    return mu, q_hat, qn, scales2, alpha


def _prepare(frame: GaussianFrame, cam: Camera, frozen_order=None) -> _Prep:
    if frame.count == 0:
        raise StructuralError("cannot render an empty frame")
    mu, q_hat, q_norm, s2, alpha = _activate(frame)
    w_px, h_px = cam.resolution
    rot_wc = cam.rotation
    t_cam = mu @ rot_wc.T + cam.translation
    f = cam.focal

    # Primitives behind the near plane or below the contribution quantum can
    # never touch a pixel; skipping them is exact, not an approximation.
    keep = (t_cam[:, 2] > cam.near_clip) & (alpha > EPS_CONTRIB)
    idx = np.nonzero(keep)[0]
    if frozen_order is None:
        order = idx[np.argsort(t_cam[idx, 2], kind="stable")]
    else:
        # Reuse a reference compositing order so that an optimizer's line
        # search sees a loss that is continuous in the parameters: depth
        # crossings between overlapping primitives otherwise make the image
        # jump under infinitesimal steps. Primitives absent from the
        # reference (newly above threshold) contribute ~nothing yet and are
        # appended back-to-front.
        mask = keep.copy()
        inherited = frozen_order[mask[frozen_order]]
        mask[inherited] = False
        extra = np.nonzero(mask)[0]
        if extra.size:
            extra = extra[np.argsort(t_cam[extra, 2], kind="stable")]
            order = np.concatenate([inherited, extra])
        else:
            order = inherited

    prep = _Prep()
    prep.cam = cam
    prep.n = frame.count
    prep.sh_degree = frame.sh_degree
    prep.order = order
    k = order.size

    tc = t_cam[order]
    z = tc[:, 2]
    mean_x = f * tc[:, 0] / z + 0.5 * w_px
    mean_y = f * tc[:, 1] / z + 0.5 * h_px
    prep.means2d = np.stack([mean_x, mean_y], axis=1)

    rot_q = quat_to_matrix(q_hat[order])
    cov3d = rot_q * s2[order][:, None, :] @ np.transpose(rot_q, (0, 2, 1))
    m_proj = np.zeros((k, 2, 3), dtype=np.float64)
    jac = np.zeros((k, 2, 3), dtype=np.float64)
    jac[:, 0, 0] = f / z
    jac[:, 1, 1] = f / z
    jac[:, 0, 2] = -f * tc[:, 0] / (z * z)
    jac[:, 1, 2] = -f * tc[:, 1] / (z * z)
    m_proj = jac @ rot_wc
    cov2d = m_proj @ cov3d @ np.transpose(m_proj, (0, 2, 1))
    cov2d[:, 0, 0] += COV_BLUR
    cov2d[:, 1, 1] += COV_BLUR

    a2, b2, c2 = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a2 * c2 - b2 * b2
    conic = np.stack([c2 / det, -b2 / det, a2 / det], axis=1)
    eig_max = 0.5 * (a2 + c2) + np.sqrt(np.maximum(0.25 * (a2 - c2) ** 2 + b2 * b2, 0.0))
    radius = RADIUS_SIGMA * np.sqrt(eig_max)

    x0 = np.clip(np.floor(mean_x - radius), 0, w_px).astype(np.int64)
    x1 = np.clip(np.ceil(mean_x + radius) + 1, 0, w_px).astype(np.int64)
    y0 = np.clip(np.floor(mean_y - radius), 0, h_px).astype(np.int64)
    y1 = np.clip(np.ceil(mean_y + radius) + 1, 0, h_px).astype(np.int64)
    prep.bboxes = np.stack([x0, x1, y0, y1], axis=1)

    # View-dependent color, sigmoid of color logit plus SH contribution.
    dirs = mu[order] - cam.center
    dn = np.linalg.norm(dirs, axis=1)
    dn = np.where(dn == 0, 1.0, dn)
    dh = dirs / dn[:, None]
    sh = frame.params[order, SH_START:]
    lin = frame.params[order, COLOR] + SH_C0 * sh[:, 0:3]
    if frame.sh_degree >= 1:
        lin = lin + SH_C1 * (
            -dh[:, 1:2] * sh[:, 3:6] + dh[:, 2:3] * sh[:, 6:9] - dh[:, 0:1] * sh[:, 9:12]
        )
        prep.sh_lin = sh[:, 3:12].reshape(-1, 3, 3)  # (k, coeff, channel)
    else:
        prep.sh_lin = None
    prep.color_lin = lin
    prep.colors = sigmoid(lin)
    prep.dirs = dh
    prep.dir_norms = dn

    prep.t_cam = tc
    prep.q_hat = q_hat[order]
    prep.q_norm = q_norm[order]
    prep.rot = rot_q
    prep.s2 = s2[order]
    prep.cov3d = cov3d
    prep.m_proj = m_proj
    prep.conics = conic
    prep.alphas = alpha[order]
    prep.alpha_act = alpha[order]
    return prep


def render(frame: GaussianFrame, cam: Camera) -> RenderedImage:
    """Render one frame; pure and deterministic for fixed inputs."""
    prep = _prepare(frame, cam)
    w, h = cam.resolution
    image, _, _, _ = _kernels.forward(
        prep.means2d, prep.conics, prep.alphas, prep.colors, prep.bboxes, h, w
    )
    return RenderedImage(pixels=np.clip(image, 0.0, 1.0), resolution=cam.resolution)


def render_with_usage(frame: GaussianFrame, cams) -> tuple:
    """Per-camera images plus usage-frequency counts over all cameras."""
    cams = list(cams)
    if not cams:
        raise StructuralError("at least one camera required")
    images = []
    counts = np.zeros(frame.count, dtype=np.int64)
    for cam in cams:
        prep = _prepare(frame, cam)
        w, h = cam.resolution
        image, _, usage, _ = _kernels.forward(
            prep.means2d, prep.conics, prep.alphas, prep.colors, prep.bboxes, h, w
        )
        counts[prep.order] += usage
        images.append(RenderedImage(pixels=np.clip(image, 0.0, 1.0), resolution=cam.resolution))
    return images, UsageFrequency(counts=counts)


def compositing_orders(frame: GaussianFrame, cams) -> list:
    """Per-camera compositing orders of ``frame``, for freezing a fit's
    depth ordering (see :func:`_prepare`)."""
    return [_prepare(frame, cam).order for cam in cams]


def render_forward(frame: GaussianFrame, cam: Camera, frozen_order=None):
    """Forward pass that records what backward needs. Returns
    ``(image, state)``; pass ``state`` to :func:`render_backward`."""
    prep = _prepare(frame, cam, frozen_order=frozen_order)
    w, h = cam.resolution
    image, t_final, usage, masks = _kernels.forward(
        prep.means2d, prep.conics, prep.alphas, prep.colors, prep.bboxes, h, w, record=True
    )
    return image, (prep, t_final, masks)


# Derivatives of the rotation matrix w.r.t. unit quaternion components.
def _rot_jacobians(q):
    w, x, y, z = q
    dw = 2.0 * np.array([[0, -z, y], [z, 0, -x], [-y, x, 0]], dtype=np.float64)
    dx = 2.0 * np.array([[0, y, z], [y, -2 * x, -w], [z, w, -2 * x]], dtype=np.float64)
    dy = 2.0 * np.array([[-2 * y, x, w], [x, 0, z], [-w, z, -2 * y]], dtype=np.float64)
    dz = 2.0 * np.array([[-2 * z, -w, x], [w, -2 * z, y], [x, y, 0]], dtype=np.float64)
    return dw, dx, dy, dz


def render_backward(state, d_image: np.ndarray) -> np.ndarray:
    """Backpropagate ``d_image`` (dLoss/dpixel) to pre-activation parameters.

    Depth ordering and contribution masks are frozen to those of the
    recorded forward pass. Returns an (n, param_dim) gradient array.
    """
    prep, t_final, masks = state
    cam = prep.cam
    w_px, h_px = cam.resolution
    d_means2d, d_conics, d_alphas, d_colors = _kernels.backward(
        prep.means2d, prep.conics, prep.alphas, prep.colors, prep.bboxes,
        h_px, w_px, masks, t_final, np.ascontiguousarray(d_image),
    )

    from .model import param_dim as _pd

    grads = np.zeros((prep.n, _pd(prep.sh_degree)), dtype=np.float64)
    rot_wc = cam.rotation
    f = cam.focal

    for j, i in enumerate(prep.order):
        conic = np.array(
            [[prep.conics[j, 0], prep.conics[j, 1]], [prep.conics[j, 1], prep.conics[j, 2]]]
        )
        g_full = np.array(
            [
                [d_conics[j, 0], 0.5 * d_conics[j, 1]],
                [0.5 * d_conics[j, 1], d_conics[j, 2]],
            ]
        )
        d_cov2d = -conic @ g_full @ conic
        m = prep.m_proj[j]
        cov3d = prep.cov3d[j]
        d_m = 2.0 * d_cov2d @ m @ cov3d
        d_cov3d = m.T @ d_cov2d @ m
        d_jac = d_m @ rot_wc.T

        tx, ty, tz = prep.t_cam[j]
        inv_z = 1.0 / tz
        inv_z2 = inv_z * inv_z
        d_t = np.zeros(3)
        # via the projection Jacobian entries
        d_t[0] += d_jac[0, 2] * (-f * inv_z2)
        d_t[1] += d_jac[1, 2] * (-f * inv_z2)
        d_t[2] += (
            d_jac[0, 0] * (-f * inv_z2)
            + d_jac[1, 1] * (-f * inv_z2)
            + d_jac[0, 2] * (2 * f * tx * inv_z2 * inv_z)
            + d_jac[1, 2] * (2 * f * ty * inv_z2 * inv_z)
        )
        # via the projected mean
        du, dv = d_means2d[j]
        d_t[0] += du * f * inv_z
        d_t[1] += dv * f * inv_z
        d_t[2] += -f * (du * tx + dv * ty) * inv_z2

        grads[i, POS] += rot_wc.T @ d_t

        # scale and rotation through the 3D covariance
        rot_q = prep.rot[j]
        s2 = prep.s2[j]
        psym = 0.5 * (d_cov3d + d_cov3d.T)
        for k in range(3):
            rk = rot_q[:, k]
            grads[i, 7 + k] += 2.0 * s2[k] * float(rk @ psym @ rk)
        d_rot = 2.0 * psym @ rot_q * s2[None, :]
        q = prep.q_hat[j]
        d_qhat = np.array([float(np.sum(d_rot * dj)) for dj in _rot_jacobians(q)])
        grads[i, QUAT] += (d_qhat - float(d_qhat @ q) * q) / prep.q_norm[j]

        # opacity logit
        a_act = prep.alpha_act[j]
        grads[i, OPACITY] += d_alphas[j] * a_act * (1.0 - a_act)

        # color logit and SH
        col = prep.colors[j]
        d_lin = d_colors[j] * col * (1.0 - col)
        grads[i, COLOR] += d_lin
        grads[i, SH_START : SH_START + 3] += SH_C0 * d_lin
        if prep.sh_degree >= 1:
            dh = prep.dirs[j]
            grads[i, SH_START + 3 : SH_START + 6] += -SH_C1 * dh[1] * d_lin
            grads[i, SH_START + 6 : SH_START + 9] += SH_C1 * dh[2] * d_lin
            grads[i, SH_START + 9 : SH_START + 12] += -SH_C1 * dh[0] * d_lin
            # the view direction depends on the position; Y1 bases are
            # linear in the direction: (-C1*y, C1*z, -C1*x)
            sh_block = prep.sh_lin[j]  # (coeff, channel)
            d_dir = np.zeros(3)
            for ch in range(3):
                v = np.array(
                    [
                        -SH_C1 * sh_block[2, ch],
                        -SH_C1 * sh_block[0, ch],
                        SH_C1 * sh_block[1, ch],
                    ]
                )
                d_dir += d_lin[ch] * v
            dn = prep.dir_norms[j]
            grads[i, POS] += (d_dir - float(d_dir @ dh) * dh) / dn
    return grads


def export_png(image: RenderedImage, path) -> None:
    """Write an 8-bit RGB PNG (no external imaging dependency)."""
    px = (np.clip(image.pixels, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    h, w, _ = px.shape
    raw = b"".join(b"\x00" + px[row].tobytes() for row in range(h))

    def chunk(tag, data):
        block = tag + data
        return struct.pack(">I", len(data)) + block + struct.pack(">I", zlib.crc32(block))

    header = struct.pack(">IIBBBBB", w, h, 8, 2, 0, 0, 0)
    with open(path, "wb") as fh:
        fh.write(b"\x89PNG\r\n\x1a\n")
        fh.write(chunk(b"IHDR", header))
        fh.write(chunk(b"IDAT", zlib.compress(raw, 9)))
        fh.write(chunk(b"IEND", b""))
