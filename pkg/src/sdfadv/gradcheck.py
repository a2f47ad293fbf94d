"""Finite-difference checks for every hand-written derivative in the pipeline."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from sdfadv.adversary import Hyper, forward, grad_pose, grad_shape, point_gradients
from sdfadv.detector import ToyDetector, adv_loss_from_scores
from sdfadv.geometry import Pose, pose_jacobian, to_object_frame
from sdfadv.render import render

REL_TOL = 1e-2
FLIP_LIMIT = 0.10


def relative_errors(analytic, numeric, floor_frac: float = 1e-3) -> np.ndarray:
    """|a - n| / max(|n|, floor_frac * max|n|, 1e-8), per coordinate.

    The floor keeps coordinates that are tiny next to the largest one (and
    exactly-zero padding coordinates) from dividing by finite-difference noise.
    """
    a = np.asarray(analytic, dtype=float)
    n = np.asarray(numeric, dtype=float)
    scale = np.max(np.abs(n), initial=0.0)
    return np.abs(a - n) / np.maximum(np.abs(n), max(floor_frac * scale, 1e-8))


def _central(f, x0, h):
    x0 = np.asarray(x0, dtype=float)
    out = []
    for i in range(x0.size):
        e = np.zeros_like(x0)
        e.flat[i] = h
        out.append((f(x0 + e) - f(x0 - e)) / (2 * h))
    return np.stack(out, axis=-1)


@dataclass
class SuiteResult:
    name: str
    max_rel_error: float
    tolerance: float
    n_checked: int
    n_excluded: int = 0
    details: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance

    def to_dict(self) -> dict:
        return {"name": self.name, "max_rel_error": self.max_rel_error, "tolerance": self.tolerance,
                "n_checked": self.n_checked, "n_excluded": self.n_excluded, "passed": self.passed,
                **self.details}


def check_decoder(decoder, z, points, h: float = 1e-6, tol: float = 1e-4) -> list[SuiteResult]:
    """dg/dx and dg/dz of ``decoder`` against central differences."""
    z = np.asarray(z, dtype=float)
    pts = np.asarray(points, dtype=float)
    _, gx, gz = decoder.value_and_grads(z, pts)
    fd_x = _central(lambda p: decoder.sdf(z, p.reshape(-1, 3)).reshape(-1, 1), pts, h)
    # fd_x has shape (N, 3N); keep the diagonal blocks
    N = len(pts)
    fd_x = fd_x.reshape(N, N, 3)[np.arange(N), np.arange(N)]
    fd_z = _central(lambda zz: decoder.sdf(zz, pts), z, h)
    ex = relative_errors(gx, fd_x)
    ez = relative_errors(gz, fd_z)
    return [SuiteResult("decoder_point", float(ex.max()), tol, ex.size),
            SuiteResult("decoder_latent", float(ez.max()), tol, ez.size)]


def check_pose_jacobian(points, pose: Pose, h: float = 1e-6, tol: float = 1e-4) -> SuiteResult:
    pts = np.asarray(points, dtype=float)
    J = pose_jacobian(pts, pose)
    fd = _central(lambda v: to_object_frame(pts, Pose.from_vector(v)), pose.as_vector(), h)
    e = relative_errors(J, fd)
    return SuiteResult("pose_jacobian", float(e.max()), tol, e.size)


def check_detector(detector: ToyDetector, points, weights, h: float = 1e-6, tol: float = 1e-4) -> SuiteResult:
    """Detector backward pass for the scalar ``weights @ scores``."""
    pts = np.asarray(points, dtype=float)
    w = np.asarray(weights, dtype=float)
    grad = detector.backward(pts, w)
    f = lambda p: float(w @ detector.scores(p.reshape(-1, 3)))
    fd = _central(f, pts.ravel(), h).reshape(pts.shape)
    e = relative_errors(grad, fd)
    return SuiteResult("detector_backward", float(e.max()), tol, e.size)


@dataclass
class EndToEnd:
    """Implicit gradient next to the re-rendering finite difference."""

    analytic: np.ndarray
    numeric: np.ndarray
    flipped: np.ndarray  # coordinates whose +-h renders moved a different set of beams
    rel_errors: np.ndarray
    n_grazing: int = 0  # masked beams left out of both sides as silhouette beams

    @property
    def max_rel_error(self) -> float:
        ok = ~self.flipped
        return float(self.rel_errors[ok].max()) if np.any(ok) else 0.0


def penetration_depths(decoder, z, pose: Pose, sensors, endpoints, hits, reach: float = 6.0,
                       coarse: float = 0.01, fine: float = 1e-4) -> np.ndarray:
    """Smallest SDF value along each beam beyond its hit point.

    A beam that only clips the object (value close to zero) lies on the
    silhouette: a tiny perturbation can make it miss.  Coarse samples every
    ``coarse`` meters locate the minimum; shallow ones are refined at ``fine``.
    """
    sensors = np.atleast_2d(sensors)
    hits = np.atleast_2d(hits)
    d = np.atleast_2d(endpoints) - sensors
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    remaining = np.minimum(np.linalg.norm(np.atleast_2d(endpoints) - hits, axis=1), reach)
    out = np.empty(len(hits))
    for b in range(len(hits)):
        t = np.linspace(0.0, remaining[b], max(int(np.ceil(remaining[b] / coarse)), 1) + 1)
        g = decoder.sdf(z, to_object_frame(hits[b] + t[:, None] * d[b], pose))
        k = int(np.argmin(g))
        low = float(g[k])
        if low > -2 * coarse:
            tt = np.linspace(max(t[k] - coarse, 0.0), min(t[k] + coarse, remaining[b]), int(2 * coarse / fine) + 1)
            low = min(low, float(decoder.sdf(z, to_object_frame(hits[b] + tt[:, None] * d[b], pose)).min()))
        out[b] = low
    return out


def end_to_end(mode: str, scene, roi, decoder, z, pose: Pose, detector: ToyDetector,
               h: float = 1e-4, hyper: Hyper = Hyper(), grazing_margin: float | None = 1e-3) -> EndToEnd:
    """Compare grad_shape / grad_pose with central differences of the adversarial
    loss, re-rendering at every probe.  IoU weights are frozen at the base
    configuration because the implicit gradient treats them as constants.

    Beams that penetrate the object by less than ``grazing_margin`` are
    silhouette beams: their hit point is not a smooth function of the
    parameters at the probe scale.  They are left out of both sides (zero
    weight in the implicit gradient, held at their base position in the
    probes).  ``grazing_margin=None`` keeps every beam.
    """
    z = np.asarray(z, dtype=float)
    fw = forward(scene, roi, decoder, z, pose, detector, hyper)
    dLdx = point_gradients(fw, detector)
    base = fw.rendered
    grazing = np.zeros(len(base.points), dtype=bool)
    if grazing_margin is not None:
        idx = np.flatnonzero(base.mask)
        depth = penetration_depths(decoder, z, pose, base.sensors[base.sensor_index[idx]],
                                   scene.points[idx], base.points[idx])
        grazing[idx[depth > -grazing_margin]] = True
        dLdx = np.where(grazing[:, None], 0.0, dLdx)
    if mode == "shape":
        analytic = grad_shape(base, decoder, z, pose, dLdx).grad
        x0 = z
        probe = lambda v: render(scene, roi, decoder, v, pose, hyper.max_step)
    elif mode == "pose":
        analytic = grad_pose(base, decoder, z, pose, dLdx).grad
        x0 = pose.as_vector()
        probe = lambda v: render(scene, roi, decoder, z, Pose.from_vector(v), hyper.max_step)
    else:
        raise ValueError(f"mode must be 'shape' or 'pose', got {mode!r}")

    def loss(r):
        pts = np.where(grazing[:, None], base.points, r.points)
        return adv_loss_from_scores(detector.scores(pts, fw.anchor_idx), fw.ious)[0]

    numeric = np.zeros(x0.size)
    flipped = np.zeros(x0.size, dtype=bool)
    for i in range(x0.size):
        e = np.zeros(x0.size)
        e[i] = h
        rp, rm = probe(x0 + e), probe(x0 - e)
        numeric[i] = (loss(rp) - loss(rm)) / (2 * h)
        flipped[i] = not (np.array_equal(rp.mask, base.mask) and np.array_equal(rm.mask, base.mask))
    return EndToEnd(analytic, numeric, flipped, relative_errors(analytic, numeric), int(grazing.sum()))
