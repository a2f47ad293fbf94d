"""Insert an SDF object into a LiDAR scene with occlusion.

Only existing beams are used: a scene point whose beam (sensor -> point)
enters the object is pulled back along that beam onto the object's surface.
No points are created or removed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from sdfadv.errors import ObjectAtSensor, SurfaceNotFound
from sdfadv.geometry import Beam, Pose, to_object_frame

MAX_STEP = 0.1
BISECTION_STEPS = 30
SURFACE_TOL = 1e-6
EPS_OVERLAP = -0.02
EPS_FLOAT = 0.02
MIN_POINTS = 300


@dataclass(frozen=True)
class Scene:
    """Sensor-frame points, sensor origins and the sensor each point came from."""

    points: np.ndarray
    sensors: np.ndarray
    sensor_index: np.ndarray = None

    def __post_init__(self):
        pts = np.ascontiguousarray(self.points, dtype=float).reshape(-1, 3)
        sensors = np.ascontiguousarray(self.sensors, dtype=float).reshape(-1, 3)
        idx = (np.zeros(len(pts), dtype=np.int64) if self.sensor_index is None
               else np.asarray(self.sensor_index, dtype=np.int64).reshape(-1))
        if len(pts) < 1:
            raise ValueError("scene needs at least one point")
        if len(idx) != len(pts):
            raise ValueError("sensor_index length differs from point count")
        if idx.min() < 0 or idx.max() >= len(sensors):
            raise ValueError("sensor_index refers to a missing sensor")
        if np.any(np.linalg.norm(pts - sensors[idx], axis=1) <= 1e-6):
            raise ValueError("scene point within 1e-6 m of its sensor")
        for arr in (pts, sensors, idx):
            arr.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "sensors", sensors)
        object.__setattr__(self, "sensor_index", idx)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def origins(self) -> np.ndarray:
        """Per-point sensor origin, shape (N, 3)."""
        return self.sensors[self.sensor_index]


@dataclass(frozen=True)
class Roi:
    """Sphere around the insertion location plus a minimum beam range."""

    center: np.ndarray
    radius: float = 7.0
    min_range: float = 15.0

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float).reshape(3))
        if not self.radius > 0:
            raise ValueError("roi radius must be positive")
        if not self.min_range >= 0:
            raise ValueError("roi min_range must be non-negative")


@dataclass(frozen=True)
class RenderedScene:
    points: np.ndarray
    mask: np.ndarray
    active_indices: np.ndarray
    sensors: np.ndarray
    sensor_index: np.ndarray
    moved_count: int = field(default=0)

    @property
    def moved_indices(self) -> np.ndarray:
        return np.flatnonzero(self.mask)

    def beam_directions(self, idx=None) -> np.ndarray:
        """Unit beam directions for the given (default: moved) point indices."""
        idx = self.moved_indices if idx is None else np.asarray(idx)
        d = self.points[idx] - self.sensors[self.sensor_index[idx]]
        return d / np.linalg.norm(d, axis=1, keepdims=True)


@dataclass(frozen=True)
class Hit:
    point: np.ndarray
    fraction: float  # position along the beam, 0 at the sensor and 1 at the point
    j_in: int


def select_roi(scene: Scene, roi: Roi) -> np.ndarray:
    """Indices whose sensor-to-point segment passes within ``roi.radius`` of the
    center and whose range is at least ``roi.min_range``."""
    s = scene.origins
    d = scene.points - s
    k2 = np.einsum("ij,ij->i", d, d)
    t = np.clip(np.einsum("ij,ij->i", roi.center - s, d) / k2, 0.0, 1.0)
    closest = s + t[:, None] * d
    near = np.linalg.norm(closest - roi.center, axis=1) <= roi.radius
    far_enough = np.sqrt(k2) >= roi.min_range
    return np.flatnonzero(near & far_enough)


def n_intervals(length, max_step: float = MAX_STEP):
    """Number of intervals J so that length / J <= max_step."""
    return np.maximum(np.ceil(np.asarray(length) / max_step).astype(np.int64), 1)


def sample_beam(beam: Beam, max_step: float = MAX_STEP) -> np.ndarray:
    """J + 1 evenly spaced samples from the sensor (first) to the point (last)."""
    if not max_step > 0:
        raise ValueError("max_step must be positive")
    J = int(n_intervals(beam.length, max_step))
    t = np.arange(J + 1) / J
    return _lerp(beam.origin[None, :], beam.endpoint[None, :], t[:, None])


def _lerp(a, b, t):
    # exact at both ends: t=0 -> a, t=1 -> b
    return (1.0 - t) * a + t * b


def _trace(s: np.ndarray, xhat: np.ndarray, decoder, z, pose: Pose,
           max_step: float = MAX_STEP, indices=None):
    """Sign scan and bisection for many beams at once.

    Returns (hit mask, surface points, fractions, j_in); rows of the last three
    are meaningful only where the mask is set.
    """
    M = len(s)
    k = np.linalg.norm(xhat - s, axis=1)
    J = n_intervals(k, max_step)
    hit = np.zeros(M, dtype=bool)
    j_in = np.zeros(M, dtype=np.int64)
    frac = np.ones(M)
    surf = xhat.copy()
    if M == 0:
        return hit, surf, frac, j_in

    so = to_object_frame(s, pose)
    xo = to_object_frame(xhat, pose)
    jlo, jhi = _sphere_window(so, xo, J, circumscribed_radius(decoder, z))
    counts = np.maximum(jhi - jlo + 1, 0)
    # chunk beams so each batch evaluates a bounded number of samples
    bounds = np.searchsorted(np.cumsum(counts), np.arange(1, int(counts.sum()) // 400_000 + 1) * 400_000)
    for sl in np.split(np.arange(M), bounds):
        if sl.size == 0:
            continue
        cnt = counts[sl]
        total = int(cnt.sum())
        if total == 0:
            continue
        beam = np.repeat(np.arange(sl.size), cnt)
        start = np.cumsum(cnt) - cnt
        j = jlo[sl][beam] + (np.arange(total) - start[beam])
        t = j / J[sl][beam]
        P = _lerp(so[sl][beam], xo[sl][beam], t[:, None])
        g = decoder.sdf(z, P)
        jneg = np.where(g < 0, j, np.iinfo(np.int64).max)
        nz = cnt > 0
        first = np.full(sl.size, np.iinfo(np.int64).max)
        first[nz] = np.minimum.reduceat(jneg, start[nz])
        occ = first < np.iinfo(np.int64).max
        hit[sl] = occ
        j_in[sl] = np.where(occ, first, 0)
    if np.any(hit & (j_in == 0)):
        bad = np.flatnonzero(hit & (j_in == 0))
        if indices is not None:
            bad = np.asarray(indices)[bad]
        raise ObjectAtSensor(f"object contains the sensor origin of beam(s) {bad[:5].tolist()}")

    h = np.flatnonzero(hit)
    if h.size:
        lo = (j_in[h] - 1) / J[h]
        hi = j_in[h] / J[h]
        sh, xh = s[h], xhat[h]
        for _ in range(BISECTION_STEPS):
            mid = 0.5 * (lo + hi)
            gm = decoder.sdf(z, to_object_frame(_lerp(sh, xh, mid[:, None]), pose))
            neg = gm < 0
            hi = np.where(neg, mid, hi)
            lo = np.where(neg, lo, mid)
        tf = 0.5 * (lo + hi)
        pts = _lerp(sh, xh, tf[:, None])
        gf = decoder.sdf(z, to_object_frame(pts, pose))
        if np.any(np.abs(gf) >= SURFACE_TOL):
            worst = float(np.max(np.abs(gf)))
            raise SurfaceNotFound(f"bisection ended with |g| = {worst:.3g} >= {SURFACE_TOL}")
        surf[h] = pts
        frac[h] = tf
    return hit, surf, frac, j_in


def _sphere_window(so, xo, J, radius):
    """Sample index range [jlo, jhi] per beam that can lie inside the object's
    bounding sphere (widened by one sample each side); jlo > jhi when none can."""
    if not np.isfinite(radius):
        return np.zeros_like(J), J.copy()
    d = xo - so
    a = np.einsum("ij,ij->i", d, d)
    b = np.einsum("ij,ij->i", so, d)
    c = np.einsum("ij,ij->i", so, so) - radius * radius
    disc = b * b - a * c
    ok = disc > 0
    sq = np.sqrt(np.where(ok, disc, 0.0))
    t0 = (-b - sq) / a
    t1 = (-b + sq) / a
    jlo = np.clip(np.floor(t0 * J).astype(np.int64) - 1, 0, J)
    jhi = np.clip(np.ceil(t1 * J).astype(np.int64) + 1, 0, J)
    miss = ~ok | (t1 < 0) | (t0 > 1)
    jlo = np.where(miss, 1, jlo)
    jhi = np.where(miss, 0, jhi)
    return jlo, jhi


def trace_beam(beam: Beam, decoder, z, pose: Pose, max_step: float = MAX_STEP) -> Hit | None:
    """First surface crossing along ``beam``; ``None`` when the beam is unoccluded."""
    s = beam.origin[None, :]
    x = beam.endpoint[None, :]
    hit, surf, frac, j_in = _trace(s, x, decoder, z, pose, max_step)
    if not hit[0]:
        return None
    return Hit(point=surf[0], fraction=float(frac[0]), j_in=int(j_in[0]))


def render(scene: Scene, roi: Roi, decoder, z, pose: Pose, max_step: float = MAX_STEP) -> RenderedScene:
    active = select_roi(scene, roi)
    s = scene.origins[active]
    hit, surf, _, _ = _trace(s, scene.points[active], decoder, z, pose, max_step, indices=active)
    points = scene.points.copy()
    mask = np.zeros(len(scene), dtype=bool)
    moved = active[hit]
    points[moved] = surf[hit]
    mask[moved] = True
    for arr in (points, mask):
        arr.setflags(write=False)
    return RenderedScene(points=points, mask=mask, active_indices=active, sensors=scene.sensors,
                         sensor_index=scene.sensor_index, moved_count=int(moved.size))


def _near_object_sdf(scene: Scene, decoder, z, pose: Pose, margin: float = 1.0) -> np.ndarray:
    p = to_object_frame(scene.points, pose)
    if hasattr(decoder, "bounding_radius"):
        R = decoder.bounding_radius(z) + margin
        p = p[np.einsum("ij,ij->i", p, p) < R * R]
    if len(p) == 0:
        return np.empty(0)
    return decoder.sdf(z, p)


def check_no_overlap(scene: Scene, decoder, z, pose: Pose, eps_overlap: float = EPS_OVERLAP) -> bool:
    """True when no original point lies deeper inside the object than ``-eps_overlap``."""
    g = _near_object_sdf(scene, decoder, z, pose)
    return not bool(np.any(g < eps_overlap))


def check_grounded(scene: Scene, decoder, z, pose: Pose, eps_float: float = EPS_FLOAT) -> bool:
    """True when at least one original point is within ``eps_float`` of the surface."""
    g = _near_object_sdf(scene, decoder, z, pose)
    return bool(np.any(np.abs(g) < eps_float))


def check_visible(rendered: RenderedScene, min_points: int = MIN_POINTS) -> bool:
    return rendered.moved_count >= min_points


@dataclass(frozen=True)
class Feasibility:
    no_overlap: bool
    grounded: bool
    visible: bool

    @property
    def ok(self) -> bool:
        return self.no_overlap and self.grounded and self.visible


def check_all(scene, rendered, decoder, z, pose, eps_overlap=EPS_OVERLAP, eps_float=EPS_FLOAT,
              min_points=MIN_POINTS) -> Feasibility:
    return Feasibility(
        no_overlap=check_no_overlap(scene, decoder, z, pose, eps_overlap),
        grounded=check_grounded(scene, decoder, z, pose, eps_float),
        visible=check_visible(rendered, min_points),
    )


def settle_height(decoder, z, pose: Pose, ground_z: float = 0.0) -> float:
    """tz that puts the object's lowest surface point on the plane z = ground_z.

    Needs a decoder with a support function (the analytic family).
    """
    down_obj = pose.rotation() @ np.array([0.0, 0.0, -1.0])
    return ground_z + decoder.support(z, down_obj)


def circumscribed_radius(decoder, z) -> float:
    return decoder.bounding_radius(z) if hasattr(decoder, "bounding_radius") else math.inf
