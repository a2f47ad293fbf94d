"""Deterministic synthetic LiDAR scenes: a ground plane plus analytic clutter."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from sdfadv.geometry import Pose
from sdfadv.render import Scene, settle_height


@dataclass(frozen=True)
class SpherePrimitive:
    center: tuple[float, float, float]
    radius: float

    def intersect(self, o: np.ndarray, d: np.ndarray) -> np.ndarray:
        """Nearest positive ray parameter per ray (inf on a miss); d is unit."""
        oc = o - np.asarray(self.center)
        b = d @ oc
        c = oc @ oc - self.radius**2
        disc = b * b - c
        t = np.full(len(d), np.inf)
        ok = disc >= 0
        sq = np.sqrt(np.where(ok, disc, 0.0))
        t0, t1 = -b - sq, -b + sq
        t = np.where(ok & (t0 > 0), t0, t)
        t = np.where(ok & (t0 <= 0) & (t1 > 0), t1, t)
        return t


@dataclass(frozen=True)
class BoxPrimitive:
    """Box with half extents, rotated by ``yaw`` about +z (counter-clockwise)."""

    center: tuple[float, float, float]
    half_extents: tuple[float, float, float]
    yaw: float = 0.0

    def intersect(self, o: np.ndarray, d: np.ndarray) -> np.ndarray:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        Rt = np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])
        ol = Rt @ (o - np.asarray(self.center))
        dl = d @ Rt.T
        h = np.asarray(self.half_extents)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / dl
            ta = (-h - ol) * inv
            tb = (h - ol) * inv
        tmin = np.nanmax(np.minimum(ta, tb), axis=1)
        tmax = np.nanmin(np.maximum(ta, tb), axis=1)
        t = np.full(len(d), np.inf)
        hit = tmax >= np.maximum(tmin, 0.0)
        t = np.where(hit & (tmin > 0), tmin, t)
        t = np.where(hit & (tmin <= 0) & (tmax > 0), tmax, t)
        return t


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    ground_extent: float = 60.0
    n_azimuth: int = 1024
    n_elevation: int = 64
    elevation_range: tuple[float, float] = (math.radians(-12.0), math.radians(2.0))
    azimuth_range: tuple[float, float] = (0.0, 2 * math.pi)
    sensor_height: float = 2.0
    clutter: tuple = field(default_factory=tuple)
    n_random_clutter: int = 0

    def __post_init__(self):
        if self.n_azimuth < 1 or self.n_elevation < 1:
            raise ValueError("beam resolutions must be >= 1")
        if not self.ground_extent > 0:
            raise ValueError("ground extent must be positive")

    @property
    def sensor(self) -> np.ndarray:
        return np.array([0.0, 0.0, self.sensor_height])


def random_clutter(spec: SceneSpec) -> list:
    """Boxes and spheres scattered between 8 m and 45 m; fixed per seed."""
    rng = np.random.default_rng(spec.seed)
    out = []
    for _ in range(spec.n_random_clutter):
        r = rng.uniform(8.0, 45.0)
        phi = rng.uniform(0, 2 * math.pi)
        x, y = r * math.cos(phi), r * math.sin(phi)
        if rng.random() < 0.5:
            he = (rng.uniform(0.3, 2.0), rng.uniform(0.3, 2.0), rng.uniform(0.5, 2.0))
            out.append(BoxPrimitive((x, y, he[2]), he, rng.uniform(0, math.pi)))
        else:
            rad = rng.uniform(0.3, 1.2)
            out.append(SpherePrimitive((x, y, rad), rad))
    return out


def ray_directions(spec: SceneSpec) -> np.ndarray:
    a0, a1 = spec.azimuth_range
    full = math.isclose(a1 - a0, 2 * math.pi)
    az = (a0 + (a1 - a0) * np.arange(spec.n_azimuth) / spec.n_azimuth if full
          else np.linspace(a0, a1, spec.n_azimuth))
    el = np.linspace(*spec.elevation_range, spec.n_elevation)
    A, E = np.meshgrid(az, el, indexing="ij")
    A, E = A.ravel(), E.ravel()
    return np.stack([np.cos(E) * np.cos(A), np.cos(E) * np.sin(A), np.sin(E)], axis=1)


def generate(spec: SceneSpec) -> Scene:
    """First hits of a polar ray grid against the ground disc and clutter."""
    s = spec.sensor
    d = ray_directions(spec)
    with np.errstate(divide="ignore"):
        tg = np.where(d[:, 2] < 0, -s[2] / d[:, 2], np.inf)
    foot = s[None, :2] + np.where(np.isfinite(tg), tg, 0.0)[:, None] * d[:, :2]
    tg = np.where(np.hypot(foot[:, 0], foot[:, 1]) <= spec.ground_extent, tg, np.inf)
    t = tg
    for prim in (*spec.clutter, *random_clutter(spec)):
        t = np.minimum(t, prim.intersect(s, d))
    hit = np.isfinite(t)
    pts = s + t[hit, None] * d[hit]
    # plane hits land exactly on z=0
    on_ground = hit & (t == tg)
    pts[on_ground[hit], 2] = 0.0
    return Scene(points=pts, sensors=s[None, :])


def sample_placement(spec: SceneSpec, seed: int, decoder=None, z=None,
                     range_bounds: tuple[float, float] = (15.0, 30.0)) -> Pose:
    """Random ground-resting pose: range and azimuth about the sensor, yaw in [0, 2pi).

    With a decoder, tz puts the object's lowest point on the ground plane.
    """
    rng = np.random.default_rng(seed)
    r = rng.uniform(*range_bounds)
    phi = rng.uniform(0.0, 2 * math.pi)
    yaw = rng.uniform(0.0, 2 * math.pi)
    s = spec.sensor
    pose = Pose(s[0] + r * math.cos(phi), s[1] + r * math.sin(phi), 0.0, yaw, 0.0, 0.0)
    if decoder is not None:
        pose = pose.replace(tz=settle_height(decoder, z, pose))
    return pose
