"""Implicit-differentiation gradients and the alternating render/step attack loop.

For a rendered point on the object, ``x = s + k e`` with ``g(z, T(x; pose)) = 0``.
Differentiating the constraint gives

    dk/dq = -(dg/dq) / (e . dg/dx)

for any shape or pose parameter q, so the loss gradient is a weighted sum of
``dg/dq`` over on-object points with weights ``-(e . dL/dx) / (e . dg/dx)``.
The weights are computed first and treated as constants, then contracted with
``dg/dz`` or ``dg/dpose``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from sdfadv.detector import BevBox, ToyDetector, adv_loss_from_scores, anchor_ious
from sdfadv.errors import DegenerateRadius, InfeasibleStart, InvalidShape
from sdfadv.geometry import Pose, from_object_frame, pose_jacobian, to_object_frame
from sdfadv.metrics import MATCH_RADIUS, best_match
from sdfadv.render import (EPS_FLOAT, EPS_OVERLAP, MAX_STEP, Feasibility, RenderedScene, Roi,
                           Scene, check_all, render, settle_height)
from sdfadv.sdf import object_extent

log = logging.getLogger(__name__)

GRAZING_TOL = 1e-4


@dataclass(frozen=True)
class ImplicitGradient:
    grad: np.ndarray
    dropped: int  # grazing points whose term was skipped


def _implicit_weights(rendered: RenderedScene, decoder, z, pose: Pose, point_grads):
    idx = rendered.moved_indices
    x = rendered.points[idx]
    e = rendered.beam_directions(idx)
    x_obj = to_object_frame(x, pose)
    _, gx_obj, gz = decoder.value_and_grads(z, x_obj)
    G = gx_obj @ pose.rotation()  # dg/dx in the sensor frame
    a = np.einsum("ij,ij->i", e, np.asarray(point_grads)[idx])
    b = np.einsum("ij,ij->i", e, G)
    keep = np.abs(b) >= GRAZING_TOL
    coef = np.where(keep, -a / np.where(keep, b, 1.0), 0.0)
    return idx, x, e, gx_obj, G, gz, coef, int(np.sum(~keep))


def grad_shape(rendered: RenderedScene, decoder, z, pose: Pose, point_grads) -> ImplicitGradient:
    """dL/dz through the on-object points (the regularizer is added by the caller)."""
    idx, _, _, _, _, gz, coef, dropped = _implicit_weights(rendered, decoder, z, pose, point_grads)
    if idx.size == 0:
        return ImplicitGradient(np.zeros(decoder.d_z), 0)
    return ImplicitGradient(coef @ gz, dropped)


def grad_pose(rendered: RenderedScene, decoder, z, pose: Pose, point_grads,
              ds_dpose=None, de_dpose=None) -> ImplicitGradient:
    """dL/dpose (6-vector, :meth:`Pose.as_vector` order).

    ``ds_dpose`` and ``de_dpose`` (each (N_moved, 3, 6)) add the terms for a
    sensor or beam that moves with the pose; both are zero for a static sensor
    and are omitted by default.
    """
    idx, x, e, gx_obj, G, _, coef, dropped = _implicit_weights(rendered, decoder, z, pose, point_grads)
    if idx.size == 0:
        return ImplicitGradient(np.zeros(6), 0)
    dg_dpose = np.einsum("ij,ijk->ik", gx_obj, pose_jacobian(x, pose))
    grad = coef @ dg_dpose
    if ds_dpose is not None or de_dpose is not None:
        dLdx = np.asarray(point_grads)[idx]
        b = np.einsum("ij,ij->i", e, G)
        keep = np.abs(b) >= GRAZING_TOL
        proj = dLdx - G * (np.einsum("ij,ij->i", e, dLdx) / np.where(keep, b, 1.0))[:, None]
        proj[~keep] = 0.0
        move = np.zeros((idx.size, 3, 6))
        if ds_dpose is not None:
            move += ds_dpose
        if de_dpose is not None:
            k = np.linalg.norm(x - rendered.sensors[rendered.sensor_index[idx]], axis=1)
            move += k[:, None, None] * de_dpose
        grad = grad + np.einsum("ijk,ij->k", move, proj)
    return ImplicitGradient(grad, dropped)


# -- constraints ------------------------------------------------------------------

@dataclass(frozen=True)
class PoseConstraint:
    """Product constraint around ``center``: xy disc, pitch/roll box, free yaw.

    With ``settle`` the height is not optimized; it is recomputed after each
    step so the object rests on the ground plane.
    """

    center: Pose
    xy_radius: float = 4.0
    pitch_roll_limit: float = 0.1
    yaw_free: bool = True
    settle: bool = True

    def __post_init__(self):
        if not self.xy_radius > 0:
            raise ValueError("xy_radius must be positive")
        if not self.pitch_roll_limit >= 0:
            raise ValueError("pitch_roll_limit must be non-negative")

    def satisfied(self, pose: Pose, tol: float = 1e-9) -> bool:
        c = self.center
        ok = math.hypot(pose.tx - c.tx, pose.ty - c.ty) <= self.xy_radius + tol
        ok &= abs(pose.pitch - c.pitch) <= self.pitch_roll_limit + tol
        ok &= abs(pose.roll - c.roll) <= self.pitch_roll_limit + tol
        if not self.yaw_free:
            ok &= pose.yaw == c.yaw
        return bool(ok)


def project_pose(pose: Pose, c: PoseConstraint) -> Pose:
    c0 = c.center
    dx, dy = pose.tx - c0.tx, pose.ty - c0.ty
    r = math.hypot(dx, dy)
    if r > c.xy_radius * (1.0 + 1e-12):  # slack keeps projection idempotent under rounding
        dx, dy = dx * c.xy_radius / r, dy * c.xy_radius / r
    lim = c.pitch_roll_limit
    return Pose(
        c0.tx + dx, c0.ty + dy, pose.tz,
        pose.yaw if c.yaw_free else c0.yaw,
        min(max(pose.pitch, c0.pitch - lim), c0.pitch + lim),
        min(max(pose.roll, c0.roll - lim), c0.roll + lim),
    )


# -- forward pass ---------------------------------------------------------------------

def ground_truth_box(decoder, z, pose: Pose) -> BevBox:
    """Object-frame BEV bounding rectangle of the shape placed by ``pose``."""
    xmin, xmax, ymin, ymax = object_extent(decoder, z)
    center = from_object_frame(np.array([(xmin + xmax) / 2, (ymin + ymax) / 2, 0.0]), pose)
    fwd = pose.orientation() @ np.array([1.0, 0.0, 0.0])
    return BevBox(float(center[0]), float(center[1]), xmax - xmin, ymax - ymin,
                  math.atan2(fwd[1], fwd[0]))


@dataclass(frozen=True)
class Hyper:
    n_iter: int = 40
    alpha: float = 0.01
    lam: float = 1.0
    eps_overlap: float = EPS_OVERLAP
    eps_float: float = EPS_FLOAT
    min_points: int = 300
    max_step: float = MAX_STEP
    match_radius: float = MATCH_RADIUS


@dataclass
class Forward:
    """One render + detect pass.

    ``scores`` and ``ious`` cover only ``anchor_idx``: the anchors within the
    match radius of the ground-truth center plus every anchor overlapping it.
    All other anchors have zero IoU and cannot be matched, so they do not
    affect the loss or the matched score.
    """

    rendered: RenderedScene
    gt: BevBox
    anchor_idx: np.ndarray
    scores: np.ndarray
    ious: np.ndarray
    l_adv: float
    dL_dp: np.ndarray
    matched_score: float
    feasibility: Feasibility

    @property
    def feasible(self) -> bool:
        return self.feasibility.ok


def relevant_anchors(detector: ToyDetector, gt: BevBox, match_radius: float = MATCH_RADIUS):
    """(anchor indices, their IoU with ``gt``) for anchors that can matter."""
    ious = anchor_ious(detector, gt)
    a = detector.anchors
    near = np.hypot(a[:, 0] - gt.cx, a[:, 1] - gt.cy) < match_radius
    idx = np.flatnonzero(near | (ious > 0))
    return idx, ious[idx]


def forward(scene: Scene, roi: Roi, decoder, z, pose: Pose, detector: ToyDetector,
            hyper: Hyper = Hyper()) -> Forward:
    rendered = render(scene, roi, decoder, z, pose, hyper.max_step)
    gt = ground_truth_box(decoder, z, pose)
    idx, ious = relevant_anchors(detector, gt, hyper.match_radius)
    scores = detector.scores(rendered.points, idx)
    l_adv, dL_dp = adv_loss_from_scores(scores, ious)
    i = best_match(detector.anchors[idx, :2], scores, (gt.cx, gt.cy), hyper.match_radius)
    matched = 0.0 if i is None else float(scores[i])
    feas = check_all(scene, rendered, decoder, z, pose, hyper.eps_overlap, hyper.eps_float,
                     hyper.min_points)
    return Forward(rendered, gt, idx, scores, ious, l_adv, dL_dp, matched, feas)


def point_gradients(fw: Forward, detector: ToyDetector) -> np.ndarray:
    """dL_adv/dx for every rendered point."""
    keep = fw.dL_dp != 0
    return detector.backward(fw.rendered.points, fw.dL_dp[keep], fw.anchor_idx[keep])


# -- attack loop ------------------------------------------------------------------------

@dataclass(frozen=True)
class TraceEntry:
    iteration: int
    loss: float
    l_adv: float
    score: float
    feasible: bool
    params: tuple


@dataclass
class AttackResult:
    mode: str
    initial_params: np.ndarray
    best_params: np.ndarray
    best_loss: float
    best_l_adv: float
    initial_score: float
    best_score: float
    trace: list = field(default_factory=list)
    iterations: int = 0
    no_feasible_step: bool = False
    lam: float = 0.0
    dropped_grazing: int = 0

    @property
    def best_pose(self) -> Pose:
        return Pose.from_vector(self.best_params)

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "lam": self.lam,
            "initial_params": [float(v) for v in self.initial_params],
            "best_params": [float(v) for v in self.best_params],
            "best_loss": self.best_loss,
            "best_l_adv": self.best_l_adv,
            "initial_score": self.initial_score,
            "best_score": self.best_score,
            "iterations": self.iterations,
            "no_feasible_step": self.no_feasible_step,
            "dropped_grazing": self.dropped_grazing,
            "trace": [
                {"iter": t.iteration, "loss": t.loss, "l_adv": t.l_adv, "score": t.score,
                 "feasible": t.feasible, "params": list(t.params)}
                for t in self.trace
            ],
        }


def attack(mode: str, scene: Scene, roi: Roi, decoder, z0, pose0: Pose, detector: ToyDetector,
           hyper: Hyper = Hyper(), constraint: PoseConstraint | None = None) -> AttackResult:
    """Gradient descent on the shape code (``mode="shape"``) or pose (``"pose"``).

    Every iterate continues the walk; only iterates passing all realism checks
    can become the returned best.
    """
    if mode not in ("shape", "pose"):
        raise ValueError(f"mode must be 'shape' or 'pose', got {mode!r}")
    z0 = np.asarray(z0, dtype=float)
    if mode == "pose" and constraint is None:
        constraint = PoseConstraint(center=pose0)
    z, pose = z0.copy(), pose0

    def objective(fw: Forward, z):
        if mode == "shape":
            return fw.l_adv + hyper.lam * float((z - z0) @ (z - z0))
        return fw.l_adv

    def params(z, pose):
        return z.copy() if mode == "shape" else pose.as_vector()

    fw = forward(scene, roi, decoder, z, pose, detector, hyper)
    if not fw.feasible:
        raise InfeasibleStart(f"initial placement fails realism checks: {fw.feasibility}")
    init_params = params(z, pose)
    loss = objective(fw, z)
    trace = [TraceEntry(0, loss, fw.l_adv, fw.matched_score, True, tuple(float(v) for v in init_params))]
    best = None  # (loss, l_adv, score, params)
    prev = (z, pose)
    dropped = 0
    for it in range(1, hyper.n_iter + 1):
        dLdx = point_gradients(fw, detector)
        if mode == "shape":
            ig = grad_shape(fw.rendered, decoder, z, pose, dLdx)
            z = z - hyper.alpha * (ig.grad + 2.0 * hyper.lam * (z - z0))
        else:
            ig = grad_pose(fw.rendered, decoder, z, pose, dLdx)
            pose = project_pose(Pose.from_vector(pose.as_vector() - hyper.alpha * ig.grad), constraint)
            if constraint.settle:
                pose = pose.replace(tz=settle_height(decoder, z, pose))
        dropped += ig.dropped
        p = params(z, pose)
        try:
            fw_new = forward(scene, roi, decoder, z, pose, detector, hyper)
        except InvalidShape:
            # outside the decoder's domain: record and step back to the last rendered state
            log.warning("iteration %d left the shape domain; reverting", it)
            trace.append(TraceEntry(it, math.inf, math.inf, math.nan, False, tuple(float(v) for v in p)))
            z, pose = prev
            continue
        fw = fw_new
        prev = (z, pose)
        loss = objective(fw, z)
        trace.append(TraceEntry(it, loss, fw.l_adv, fw.matched_score, fw.feasible, tuple(float(v) for v in p)))
        if fw.feasible and (best is None or loss <= best[0]):
            best = (loss, fw.l_adv, fw.matched_score, p)
    res = AttackResult(mode=mode, initial_params=init_params, best_params=init_params,
                       best_loss=trace[0].loss, best_l_adv=trace[0].l_adv,
                       initial_score=trace[0].score, best_score=trace[0].score, trace=trace,
                       iterations=hyper.n_iter, no_feasible_step=best is None, lam=hyper.lam,
                       dropped_grazing=dropped)
    if best is not None:
        res.best_loss, res.best_l_adv, res.best_score, res.best_params = best
    return res


def attack_shape_select(scene, roi, decoder, z0, pose0, detector, hyper: Hyper = Hyper(),
                        lams=(1.0, 10.0), tie_rtol: float = 0.05) -> AttackResult:
    """Shape attack for each lambda; keep the lowest adversarial loss, with
    near-ties (relative difference below ``tie_rtol``) going to the larger lambda."""
    results = [attack("shape", scene, roi, decoder, z0, pose0, detector, replace(hyper, lam=l))
               for l in lams]
    results.sort(key=lambda r: -r.lam)  # largest lambda first
    best = results[0]
    for r in results[1:]:
        if r.best_l_adv < best.best_l_adv * (1.0 - tie_rtol):
            best = r
    return best


# -- baselines -------------------------------------------------------------------------

def random_baseline(z0, z_adv, seed: int) -> np.ndarray:
    """Uniform draw on the sphere of radius ||z_adv - z0|| centered at z0."""
    z0 = np.asarray(z0, dtype=float)
    r = float(np.linalg.norm(np.asarray(z_adv, dtype=float) - z0))
    if r < 1e-12:
        raise DegenerateRadius("z_adv coincides with z0")
    u = np.random.default_rng(seed).standard_normal(z0.size)
    return z0 + r * (u / np.linalg.norm(u))


def robustness_noise(z_adv, sigma: float, n: int, seed: int) -> list[np.ndarray]:
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    z_adv = np.asarray(z_adv, dtype=float)
    noise = np.random.default_rng(seed).standard_normal((n, z_adv.size))
    return [z_adv + sigma * row for row in noise]


def random_pose_baseline(pose0: Pose, pose_adv: Pose, constraint: PoseConstraint, seed: int,
                         decoder=None, z=None) -> Pose:
    """Random pose with the same per-group perturbation sizes as ``pose_adv``.

    The xy displacement keeps its length with a uniform random direction; yaw,
    pitch and roll offsets keep their magnitudes with random signs.
    """
    rng = np.random.default_rng(seed)
    r = math.hypot(pose_adv.tx - pose0.tx, pose_adv.ty - pose0.ty)
    phi = rng.uniform(0.0, 2 * math.pi)
    dyaw = abs(math.remainder(pose_adv.yaw - pose0.yaw, 2 * math.pi))
    sgn = rng.choice([-1.0, 1.0], size=3)
    pose = Pose(pose0.tx + r * math.cos(phi), pose0.ty + r * math.sin(phi), pose0.tz,
                pose0.yaw + sgn[0] * dyaw,
                pose0.pitch + sgn[1] * abs(pose_adv.pitch - pose0.pitch),
                pose0.roll + sgn[2] * abs(pose_adv.roll - pose0.roll))
    pose = project_pose(pose, constraint)
    if constraint.settle and decoder is not None:
        pose = pose.replace(tz=settle_height(decoder, z, pose))
    return pose
