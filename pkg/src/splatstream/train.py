"""Loss functions and the toy-scale optimizer.

Three fitting modes share one gradient-descent loop with backtracking line
search (halve the step on a loss increase, at most 20 halvings):

* ``fit_group_frame`` — per-primitive delta parameters against a fixed
  canonical space, image loss plus an L1 temporal penalty on the delta;
* ``fit_keyframe`` — free parameters initialized from the previous frame,
  with densification, opacity culling and the inflation penalty;
* ``fit_first_frame`` — random initialization, image loss only.

The inflation loss max(0, N - U) is count-valued and has no parameter
gradient; its optimization effect is a proximal opacity push applied to the
excess newly-added primitives after each accepted step (see
``INFLATION_PUSH``), while the scalar is still reported as a loss term.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import metrics, rasterizer
from .errors import CapacityError, StructuralError, TrainingError, ValidationError
from .model import (
    LOG_SCALE,
    OPACITY,
    POS,
    TOMBSTONE_LOGIT,
    CanonicalSpace,
    DeltaTensor,
    GaussianFrame,
    apply_delta,
    logit,
    sigmoid,
)

# Relative step sizes per attribute block; one global step_size scales all.
STEP_MULT = {
    "pos": 4.0,
    "quat": 1.0,
    "log_scale": 1.0,
    "opacity": 4.0,
    "color": 4.0,
    "sh": 2.0,
}
MAX_HALVINGS = 20
STEP_GROWTH_CAP = 8.0
# Opacity-logit decrement per iteration and unit of lambda_inf applied to
# primitives in excess of the capacity U.
INFLATION_PUSH = 0.2
# Split rather than clone when the largest scale exceeds this fraction of
# the scene extent.
SPLIT_SCALE_FRAC = 0.01
SPLIT_SCALE_DIV = 1.6
CLONE_OFFSET_FRAC = 0.01
# At most this fraction of U may be added per densification event.
DENSIFY_EVENT_CAP_FRAC = 0.05


@dataclass(frozen=True)
class LossWeights:
    lambda_dssim: float = 0.2
    lambda_temp: float = 1e-3
    lambda_inf: float = 1e-5

    def __post_init__(self):
        if not 0.0 <= self.lambda_dssim <= 1.0:
            raise ValidationError("lambda_dssim must lie in [0, 1]")
        if self.lambda_temp < 0 or self.lambda_inf < 0:
            raise ValidationError("loss weights must be non-negative")


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 80
    step_size: float = 0.05
    densify_grad_threshold: float = 2e-4
    densify_interval: int = 20
    cull_opacity: float = 0.005
    capacity_U: int = 0  # 0 = derive from the previous canonical space

    def __post_init__(self):
        if self.iterations <= 0:
            raise ValidationError("iterations must be positive")
        if not 0.0 < self.cull_opacity < 1.0:
            raise ValidationError("cull_opacity must lie in (0, 1)")


@dataclass(frozen=True)
class GroundTruth:
    """Per-camera target images for one time step."""

    images: tuple  # of (h, w, 3) float64 arrays

    def __post_init__(self):
        object.__setattr__(self, "images", tuple(np.asarray(im, dtype=np.float64) for im in self.images))

    def check_cameras(self, cams):
        if len(self.images) != len(cams):
            raise StructuralError("target image count does not match cameras")
        for im, cam in zip(self.images, cams):
            w, h = cam.resolution
            if im.shape != (h, w, 3):
                raise StructuralError("target resolution does not match camera")


def loss_3dgs(rendered, target, lambda_dssim: float = 0.2) -> float:
    """(1 - lambda) * L1 + lambda * (1 - SSIM) / 2."""
    l1 = metrics.l1(rendered, target)
    dssim = (1.0 - metrics.ssim(rendered, target)) / 2.0
    return (1.0 - lambda_dssim) * l1 + lambda_dssim * dssim


def loss_temporal(delta: DeltaTensor) -> float:
    """L1 norm of the motion delta (the delta is the predicted motion)."""
    return delta.l1_norm()


def loss_keyframe_temporal(current: GaussianFrame, previous: GaussianFrame, capacity_U: int) -> float:
    """Mean L1 distance over the first min(count, U) primitive parameter rows.

    Normalized per element: as an unnormalized sum its gradient (lambda per
    coordinate) overwhelms the image gradients and pins the refit to the
    previous frame."""
    m = min(current.count, previous.count, capacity_U)
    if m <= 0:
        return 0.0
    return float(np.abs(current.params[:m] - previous.params[:m]).mean())


def loss_inflation(n_current: int, capacity_U: int) -> float:
    return float(max(0, n_current - capacity_U))


def _step_scale(width: int) -> np.ndarray:
    s = np.empty(width)
    s[POS] = STEP_MULT["pos"]
    s[3:7] = STEP_MULT["quat"]
    s[LOG_SCALE] = STEP_MULT["log_scale"]
    s[OPACITY] = STEP_MULT["opacity"]
    s[11:14] = STEP_MULT["color"]
    s[14:] = STEP_MULT["sh"]
    return s


def _image_loss(params, frame_proto: GaussianFrame, cams, target: GroundTruth, lam: float,
                orders=None):
    """Mean over cameras of the 3DGS image loss; forward only. ``orders``
    optionally freezes the per-camera compositing order (see _prepare)."""
    frame = frame_proto.with_params(params)
    total = 0.0
    for i, (cam, gt) in enumerate(zip(cams, target.images)):
        img, _ = rasterizer.render_forward(frame, cam,
                                           frozen_order=None if orders is None else orders[i])
        total += loss_3dgs(img, gt, lam)
    return total / len(cams)


def _image_loss_grad(params, frame_proto: GaussianFrame, cams, target: GroundTruth, lam: float,
                     orders=None):
    """Image loss and its gradient w.r.t. pre-activation parameters."""
    frame = frame_proto.with_params(params)
    total = 0.0
    grad = np.zeros_like(params)
    for i, (cam, gt) in enumerate(zip(cams, target.images)):
        img, state = rasterizer.render_forward(frame, cam,
                                               frozen_order=None if orders is None else orders[i])
        l1 = metrics.l1(img, gt)
        ssim_val = metrics.ssim(img, gt)
        total += (1.0 - lam) * l1 + lam * (1.0 - ssim_val) / 2.0
        d_img = (1.0 - lam) * metrics.l1_grad(img, gt) - lam * 0.5 * metrics.ssim_grad(img, gt)
        grad += rasterizer.render_backward(state, d_img)
    return total / len(cams), grad / len(cams)


def gradients(frame: GaussianFrame, cams, target: GroundTruth, weights: LossWeights, mode: str,
              delta: DeltaTensor | None = None, previous: GaussianFrame | None = None,
              capacity_U: int | None = None):
    """Analytic gradient of the selected total loss.

    ``mode`` is "group" (image + temporal on ``delta``), "keyframe"
    (image + keyframe-temporal vs ``previous`` + inflation scalar) or
    "first" (image loss only). Depth ordering is frozen during
    differentiation. Returns ``(loss_parts, grad)``.
    """
    target.check_cameras(cams)
    img_loss, grad = _image_loss_grad(frame.params, frame, cams, target, weights.lambda_dssim)
    parts = {"loss_3dgs": img_loss, "loss_temp": 0.0, "loss_inf": 0.0}
    if mode == "group":
        if delta is None:
            raise StructuralError("group mode requires the motion delta")
        parts["loss_temp"] = loss_temporal(delta)
        for i, block in delta.entries.items():
            grad[i] += weights.lambda_temp * np.sign(block)
    elif mode == "keyframe":
        if previous is None or capacity_U is None:
            raise StructuralError("keyframe mode requires previous frame and capacity")
        parts["loss_temp"] = loss_keyframe_temporal(frame, previous, capacity_U)
        m = min(frame.count, previous.count, capacity_U)
        if m > 0:
            scale_t = weights.lambda_temp / (m * frame.params.shape[1])
            grad[:m] += scale_t * np.sign(frame.params[:m] - previous.params[:m])
        parts["loss_inf"] = loss_inflation(_live_count(frame.params), capacity_U)
    elif mode != "first":
        raise StructuralError(f"unknown gradient mode {mode!r}")
    parts["loss_total"] = (
        parts["loss_3dgs"]
        + weights.lambda_temp * parts["loss_temp"]
        + weights.lambda_inf * parts["loss_inf"]
    )
    return parts, grad


def _live_count(params) -> int:
    return int(np.count_nonzero(params[:, OPACITY] > TOMBSTONE_LOGIT / 2))


def _descend(loss_fn, grad_fn, x0, iterations, step_size, scale, log=None, post_step=None):
    """Gradient descent with backtracking line search; deterministic.

    The accepted step carries over to the next iteration and doubles after
    every acceptance (capped at ``STEP_GROWTH_CAP`` times the base step),
    so backtracking work is amortized. ``post_step(x, step)`` may apply
    proximal updates after each accepted step.
    """
    x = x0.copy()
    loss, grad = grad_fn(x)
    if not math.isfinite(loss):
        raise TrainingError("non-finite loss at initialization", iteration=0)
    step = step_size
    cap = STEP_GROWTH_CAP * step_size
    for it in range(iterations):
        accepted = False
        for _ in range(MAX_HALVINGS + 1):
            cand = x - step * scale * grad
            cand_loss = loss_fn(cand)
            if math.isnan(cand_loss):
                raise TrainingError("loss diverged to NaN", iteration=it)
            if cand_loss <= loss:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            if log is not None:
                log.append({"iteration": it, "loss_total": loss, "converged": True})
            break
        x = cand
        step = min(step * 2.0, cap)
        if post_step is not None:
            post_step(x, step)
        loss, grad = grad_fn(x)
        if not math.isfinite(loss):
            raise TrainingError("loss diverged", iteration=it)
        if log is not None:
            log.append({"iteration": it, "loss_total": loss})
    return x


def fit_group_frame(space: CanonicalSpace, prev_delta: DeltaTensor, target: GroundTruth,
                    cams, weights: LossWeights, cfg: TrainConfig, log=None) -> DeltaTensor:
    """Fit the motion delta for one in-group frame; count never changes.

    Returns d_t relative to the previous frame's reconstruction (the frame
    t reconstruction is ``apply_delta(space, prev_delta + d_t)``).
    """
    target.check_cameras(cams)
    base = space.frame.params + prev_delta.dense()
    proto = space.frame
    lam = weights.lambda_dssim
    lam_t = weights.lambda_temp
    scale = _step_scale(base.shape[1])
    # Freeze the compositing order at the starting point for the whole fit;
    # this keeps the objective continuous in d.
    orders = rasterizer.compositing_orders(proto.with_params(base), cams)

    def loss_fn(d):
        return _image_loss(base + d, proto, cams, target, lam, orders) + lam_t * np.abs(d).sum()

    def grad_fn(d):
        img_loss, g = _image_loss_grad(base + d, proto, cams, target, lam, orders)
        return img_loss + lam_t * np.abs(d).sum(), g + lam_t * np.sign(d)

    d0 = np.zeros_like(base)
    hist = [] if log is None else log
    d = _descend(loss_fn, grad_fn, d0, cfg.iterations, cfg.step_size, scale, log=hist)
    if log is not None:
        for row in hist:
            row.setdefault("primitive_count", space.frame.count)
    return DeltaTensor.from_dense(d)


def _scene_extent(params) -> float:
    pos = params[:, POS]
    span = pos.max(axis=0) - pos.min(axis=0)
    return float(max(np.linalg.norm(span), 1e-6))


def _cull(params, threshold: float) -> int:
    """Tombstone live primitives whose activated opacity fell below the
    threshold; returns how many were culled."""
    alive = params[:, OPACITY] > TOMBSTONE_LOGIT / 2
    low = sigmoid(params[:, OPACITY]) < threshold
    doomed = alive & low
    params[doomed, OPACITY] = TOMBSTONE_LOGIT
    return int(doomed.sum())


def _densify(params, avg_grad, capacity_U, cfg, extent, row_budget=None):
    """Clone/split high-gradient live primitives; returns the new array and
    how many rows were appended. ``row_budget`` bounds the appended rows so
    a group can never densify past its attribute-image capacity."""
    alive = params[:, OPACITY] > TOMBSTONE_LOGIT / 2
    grad_norm = np.linalg.norm(avg_grad[:, POS], axis=1)
    cand = np.nonzero(alive & (grad_norm > cfg.densify_grad_threshold))[0]
    if cand.size == 0:
        return params, 0
    cap = max(1, math.ceil(DENSIFY_EVENT_CAP_FRAC * capacity_U))
    cand = cand[np.argsort(-grad_norm[cand], kind="stable")][:cap]
    if row_budget is None:
        row_budget = 2 * cap

    rows = [params]
    added = 0
    split_threshold = SPLIT_SCALE_FRAC * extent
    for i in cand:
        need = 2 if np.exp(params[i, LOG_SCALE]).max() > split_threshold else 1
        if added + need > row_budget:
            continue
        row = params[i].copy()
        scales = np.exp(row[LOG_SCALE])
        if scales.max() > split_threshold:
            # split: two children offset along the largest principal axis,
            # original tombstoned
            from .model import QUAT, quat_to_matrix

            q = row[QUAT] / np.linalg.norm(row[QUAT])
            axis_idx = int(np.argmax(scales))
            axis = quat_to_matrix(q[None])[0][:, axis_idx]
            child = row.copy()
            child[LOG_SCALE] -= np.log(SPLIT_SCALE_DIV)
            c1 = child.copy()
            c1[POS] += 0.6 * scales[axis_idx] * axis
            c2 = child.copy()
            c2[POS] -= 0.6 * scales[axis_idx] * axis
            rows.append(c1[None])
            rows.append(c2[None])
            params[i, OPACITY] = TOMBSTONE_LOGIT
            added += 2
        else:
            # clone: copy nudged along the descent direction
            g = avg_grad[i, POS]
            gn = np.linalg.norm(g)
            if gn > 0:
                row[POS] -= CLONE_OFFSET_FRAC * extent * g / gn
            rows.append(row[None])
            added += 1
    return np.concatenate(rows, axis=0), added


def group_capacity(capacity_U: int) -> int:
    """Hard attribute-image capacity for a group: the square grid that
    comfortably covers the soft constraint U."""
    side = math.ceil(math.sqrt(2 * max(capacity_U, 1)))
    return side * side


def fit_keyframe(previous: GaussianFrame, target: GroundTruth, cams, weights: LossWeights,
                 cfg: TrainConfig, frame_index: int | None = None, log=None) -> CanonicalSpace:
    """Fast keyframe reconstruction with densification, culling and the
    inflation penalty; opens a new canonical space."""
    target.check_cameras(cams)
    capacity_U = cfg.capacity_U if cfg.capacity_U > 0 else previous.live_count()
    hard_cap = group_capacity(capacity_U)
    if previous.count > hard_cap:
        raise CapacityError(
            f"{previous.count} primitives exceed group capacity {hard_cap}"
        )
    if frame_index is None:
        frame_index = previous.frame_index + 1
    n_prev = previous.count
    prev_params = previous.params
    lam = weights.lambda_dssim
    lam_t = weights.lambda_temp
    extent = _scene_extent(prev_params)

    params = prev_params.copy()
    proto = GaussianFrame(params=params, frame_index=frame_index, group_key=frame_index)
    scale = _step_scale(params.shape[1])
    hist = [] if log is None else log

    def temporal(p):
        m = min(p.shape[0], n_prev, capacity_U)
        if m <= 0:
            return 0.0
        return float(np.abs(p[:m] - prev_params[:m]).mean())

    # The compositing order is re-frozen at every iterate (and after each
    # densify event); candidates within one line search share it so the
    # searched objective stays continuous.
    orders = rasterizer.compositing_orders(proto, cams)

    def total_loss(p):
        img = _image_loss(p, proto.with_params(p), cams, target, lam, orders)
        return img + lam_t * temporal(p) + weights.lambda_inf * loss_inflation(_live_count(p), capacity_U)

    def total_grad(p):
        img, g = _image_loss_grad(p, proto.with_params(p), cams, target, lam, orders)
        m = min(p.shape[0], n_prev, capacity_U)
        if m > 0:
            g[:m] += lam_t / (m * p.shape[1]) * np.sign(p[:m] - prev_params[:m])
        loss = img + lam_t * temporal(p) + weights.lambda_inf * loss_inflation(
            _live_count(p), capacity_U
        )
        return loss, g

    grad_accum = np.zeros_like(params)
    accum_n = 0
    loss, grad = total_grad(params)
    if not math.isfinite(loss):
        raise TrainingError("non-finite loss at keyframe initialization", iteration=0)

    step = cfg.step_size
    cap = STEP_GROWTH_CAP * cfg.step_size
    for it in range(cfg.iterations):
        accepted = False
        for _ in range(MAX_HALVINGS + 1):
            cand = params - step * scale * grad
            cand_loss = total_loss(cand)
            if math.isnan(cand_loss):
                raise TrainingError("keyframe loss diverged to NaN", iteration=it)
            if cand_loss <= loss:
                accepted = True
                break
            step *= 0.5
        if accepted:
            params = cand
            step = min(step * 2.0, cap)
            grad_accum = grad_accum + np.abs(grad)
            accum_n += 1
        # inflation surrogate: push down opacity of the excess among the
        # primitives added since the previous keyframe
        if weights.lambda_inf > 0:
            alive = params[:, OPACITY] > TOMBSTONE_LOGIT / 2
            excess = _live_count(params) - capacity_U
            if excess > 0:
                new_alive = np.nonzero(alive)[0]
                new_alive = new_alive[new_alive >= n_prev]
                if new_alive.size > 0:
                    order = np.argsort(params[new_alive, OPACITY], kind="stable")
                    push = new_alive[order[: min(excess, new_alive.size)]]
                    params[push, OPACITY] -= weights.lambda_inf * INFLATION_PUSH

        if (it + 1) % cfg.densify_interval == 0 and it + 1 < cfg.iterations:
            _cull(params, cfg.cull_opacity)
            avg = grad_accum / max(accum_n, 1)
            params, added = _densify(params, avg, capacity_U, cfg, extent,
                                     row_budget=hard_cap - params.shape[0])
            if added:
                if params.shape[0] > hard_cap:
                    raise CapacityError(
                        f"{params.shape[0]} primitives exceed group capacity {hard_cap}"
                    )
                grad_accum = np.zeros_like(params)
                accum_n = 0
            else:
                grad_accum = np.zeros_like(grad_accum)
                accum_n = 0

        orders = rasterizer.compositing_orders(proto.with_params(params), cams)
        loss, grad = total_grad(params)
        if not math.isfinite(loss):
            raise TrainingError("keyframe loss diverged", iteration=it)
        hist.append(
            {
                "iteration": it,
                "loss_total": loss,
                "primitive_count": _live_count(params),
            }
        )

    _cull(params, cfg.cull_opacity)
    frame = GaussianFrame(params=params, frame_index=frame_index, group_key=frame_index)
    return CanonicalSpace(frame=frame, capacity_U=max(capacity_U, frame.live_count()))


def fit_first_frame(target: GroundTruth, cams, weights: LossWeights, cfg: TrainConfig,
                    bounds, init_count: int, sh_degree: int = 0, seed: int = 0, log=None) -> CanonicalSpace:
    """Train frame 0 from a random initialization under the image loss only,
    with densification and culling as in conventional splatting training."""
    from .model import param_dim

    target.check_cameras(cams)
    rng = np.random.default_rng(seed)
    lo = np.asarray(bounds[0], dtype=np.float64)
    hi = np.asarray(bounds[1], dtype=np.float64)
    extent = float(np.linalg.norm(hi - lo))
    width = param_dim(sh_degree)
    params = np.zeros((init_count, width))
    params[:, POS] = rng.uniform(lo, hi, (init_count, 3))
    params[:, 3] = 1.0  # identity quaternion
    params[:, LOG_SCALE] = np.log(0.25 * extent / max(init_count, 1) ** (1.0 / 3.0))
    params[:, OPACITY] = 0.0
    params[:, 11:14] = logit(np.clip(rng.uniform(0.2, 0.8, (init_count, 3)), 1e-6, 1 - 1e-6))

    weights_first = LossWeights(lambda_dssim=weights.lambda_dssim, lambda_temp=0.0, lambda_inf=0.0)
    cfg_first = TrainConfig(
        iterations=cfg.iterations,
        step_size=cfg.step_size,
        densify_grad_threshold=cfg.densify_grad_threshold,
        densify_interval=cfg.densify_interval,
        cull_opacity=cfg.cull_opacity,
        capacity_U=init_count,
    )
    previous = GaussianFrame(params=params, frame_index=0, group_key=0)
    space = fit_keyframe(previous, target, cams, weights_first, cfg_first, frame_index=0, log=log)
    # U for the first group is the count after fitting
    return CanonicalSpace(frame=space.frame, capacity_U=space.frame.live_count())
