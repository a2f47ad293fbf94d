"""Rigid placement of objects in the sensor frame.

Points are plain ``numpy`` arrays with a trailing axis of length 3.

Rotation convention (right-handed): a pose with yaw ``d`` shows the object
turned counter-clockwise by ``d`` about +z when seen from above, and likewise
pitch about +y and roll about +x.  The sensor-to-object map is

    T(x; pose) = R(yaw) R(pitch) R(roll) (x - t)

where each factor is the *inverse* of the counter-clockwise rotation by that
angle, e.g. ``R(yaw) = Rz(-yaw)``.  Consequently ``T((1, 0, 0))`` for a pure
yaw of pi/2 is ``(0, -1, 0)``, and the inverse map is
``x = Rx(roll) Ry(pitch) Rz(yaw) p + t``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from sdfadv.errors import DegenerateBeam

TWO_PI = 2.0 * math.pi


def _rx(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _ry(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _rz(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _drx(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[0.0, 0.0, 0.0], [0.0, -s, -c], [0.0, c, -s]])


def _dry(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[-s, 0.0, c], [0.0, 0.0, 0.0], [-c, 0.0, -s]])


def _drz(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[-s, -c, 0.0], [c, -s, 0.0], [0.0, 0.0, 0.0]])


@dataclass(frozen=True)
class Pose:
    """Six-parameter placement: translation in meters, angles in radians.

    Yaw is wrapped into [0, 2*pi); pitch and roll are stored as given.
    """

    tx: float = 0.0
    ty: float = 0.0
    tz: float = 0.0
    yaw: float = 0.0
    pitch: float = 0.0
    roll: float = 0.0

    def __post_init__(self):
        vals = (self.tx, self.ty, self.tz, self.yaw, self.pitch, self.roll)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite pose component in {vals}")
        for name in ("tx", "ty", "tz", "pitch", "roll"):
            object.__setattr__(self, name, float(getattr(self, name)))
        yaw = float(self.yaw) % TWO_PI
        if yaw >= TWO_PI:  # -tiny % 2pi can round up to 2pi
            yaw = 0.0
        object.__setattr__(self, "yaw", yaw)

    @classmethod
    def from_vector(cls, v) -> "Pose":
        v = np.asarray(v, dtype=float)
        return cls(*(float(c) for c in v))

    def as_vector(self) -> np.ndarray:
        return np.array([self.tx, self.ty, self.tz, self.yaw, self.pitch, self.roll])

    @property
    def translation(self) -> np.ndarray:
        return np.array([self.tx, self.ty, self.tz])

    def replace(self, **kw) -> "Pose":
        d = dict(tx=self.tx, ty=self.ty, tz=self.tz, yaw=self.yaw, pitch=self.pitch, roll=self.roll)
        d.update(kw)
        return Pose(**d)

    def rotation(self) -> np.ndarray:
        """Matrix applied to ``x - t`` in the sensor-to-object map."""
        return _rz(-self.yaw) @ _ry(-self.pitch) @ _rx(-self.roll)

    def orientation(self) -> np.ndarray:
        """Object-to-sensor rotation (transpose of :meth:`rotation`)."""
        return self.rotation().T


def to_object_frame(x, pose: Pose) -> np.ndarray:
    """Map sensor-frame point(s) ``x`` (..., 3) into the object frame."""
    x = np.asarray(x, dtype=float)
    return (x - pose.translation) @ pose.rotation().T


def from_object_frame(p, pose: Pose) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    return p @ pose.rotation() + pose.translation


def pose_jacobian(x, pose: Pose) -> np.ndarray:
    """Analytic d T(x; pose) / d pose.

    Returns shape (3, 6) for a single point or (N, 3, 6) for N points; the
    columns follow the ordering of :meth:`Pose.as_vector`.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    d = np.atleast_2d(x) - pose.translation
    Ry, Rp, Rr = _rz(-pose.yaw), _ry(-pose.pitch), _rx(-pose.roll)
    A = Ry @ Rp @ Rr
    # d/dangle of R(-angle) is -R'(-angle)
    dA = (
        -_drz(-pose.yaw) @ Rp @ Rr,
        -Ry @ _dry(-pose.pitch) @ Rr,
        -Ry @ Rp @ _drx(-pose.roll),
    )
    J = np.empty((d.shape[0], 3, 6))
    J[:, :, :3] = -A
    for k, M in enumerate(dA):
        J[:, :, 3 + k] = d @ M.T
    return J[0] if single else J


@dataclass(frozen=True)
class Beam:
    """Ray from a sensor through a scene point: ``origin + length * direction``."""

    origin: np.ndarray
    direction: np.ndarray
    length: float

    @property
    def endpoint(self) -> np.ndarray:
        return self.origin + self.length * self.direction


def beam_from_point(s, x_hat) -> Beam:
    s = np.asarray(s, dtype=float)
    x_hat = np.asarray(x_hat, dtype=float)
    diff = x_hat - s
    k = float(np.linalg.norm(diff))
    if k < 1e-9:
        raise DegenerateBeam(f"point {x_hat} coincides with sensor {s}")
    return Beam(origin=s, direction=diff / k, length=k)


def beams_from_points(s: np.ndarray, x_hat: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized :func:`beam_from_point`: unit directions (N, 3) and lengths (N,)."""
    diff = np.asarray(x_hat, dtype=float) - np.asarray(s, dtype=float)
    k = np.linalg.norm(diff, axis=-1)
    if np.any(k < 1e-9):
        raise DegenerateBeam("scene point coincides with its sensor")
    return diff / k[..., None], k
