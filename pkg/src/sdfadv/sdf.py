"""Shape decoders g(z, x) with analytic gradients, and the PCA latent subspace.

Two decoder backends share one interface::

    decoder.sdf(z, x)              -> (N,)
    decoder.grad_point(z, x)       -> (N, 3)     dg/dx in the object frame
    decoder.grad_latent(z, x)      -> (N, d_z)   dg/dz
    decoder.value_and_grads(z, x)  -> (g, dg/dx, dg/dz)

``AnalyticFamily`` is a union of superellipsoid parts whose geometry is an
affine function of the latent code; ``MlpDecoder`` is a small tanh network
with a hand-written backward pass.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from sdfadv.errors import InvalidShape, RankDeficient

FORMAT_VERSION = "1"
SMOOTH_MIN_TEMPERATURE = 1e-3


def _smooth_min(values: np.ndarray, tau: float, axis: int = -1) -> tuple[np.ndarray, np.ndarray]:
    """Log-sum-exp soft minimum and its weights (softmax of -values/tau)."""
    lo = np.min(values, axis=axis, keepdims=True)
    ex = np.exp(-(values - lo) / tau)
    s = np.sum(ex, axis=axis, keepdims=True)
    m = lo - tau * np.log(s)
    return np.squeeze(m, axis=axis), ex / s


def _pnorm_with_grads(v: np.ndarray, n: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """||v||_n over the last axis, d/dv and d/dn; overflow-safe by max-scaling.

    At v == 0 both derivatives are reported as zero.
    """
    av = np.abs(v)
    M = np.max(av, axis=-1)
    safe = M > 0
    Ms = np.where(safe, M, 1.0)
    u = av / Ms[:, None]
    un = u**n
    S = np.where(safe, np.sum(un, axis=-1), 1.0)  # >= 1
    N = Ms * S ** (1.0 / n)
    N = np.where(safe, N, 0.0)
    dv = np.sign(v) * u ** (n - 1.0) / (S ** ((n - 1.0) / n))[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        ulog = np.where(u > 0, un * np.log(np.where(u > 0, u, 1.0)), 0.0)
    dn = N * (-np.log(S) / n**2 + np.sum(ulog, axis=-1) / (n * S))
    dv = np.where(safe[:, None], dv, 0.0)
    dn = np.where(safe, dn, 0.0)
    return N, dv, dn


@dataclass(frozen=True)
class _PartLayout:
    """Where a part's geometry lives in the parameter vector.

    ``geometry = G @ params + g0`` with geometry ordered
    (cx, cy, cz, ex, ey, ez, n).  For isotropic parts the three extents share
    one parameter.
    """

    G: np.ndarray
    g0: np.ndarray


def _layouts(kind: str) -> tuple[int, list[_PartLayout], list[str]]:
    if kind == "sphere":
        names = ["radius"]
        G = np.zeros((7, 1))
        G[3:6, 0] = 1.0
        g0 = np.zeros(7)
        g0[6] = 2.0
        return 1, [_PartLayout(G, g0)], names
    if kind == "superellipsoid":
        names = ["a", "b", "c", "n"]
        G = np.zeros((7, 4))
        G[3, 0] = G[4, 1] = G[5, 2] = G[6, 3] = 1.0
        return 4, [_PartLayout(G, np.zeros(7))], names
    if kind == "car":
        # body sits on z=0 with center (0, 0, c); cabin center (dx, 0, 2c + dz)
        names = ["body_a", "body_b", "body_c", "body_n",
                 "cab_a", "cab_b", "cab_c", "cab_n", "cab_dx", "cab_dz"]
        Gb = np.zeros((7, 10))
        Gb[2, 2] = 1.0
        Gb[3, 0] = Gb[4, 1] = Gb[5, 2] = Gb[6, 3] = 1.0
        Gc = np.zeros((7, 10))
        Gc[0, 8] = 1.0
        Gc[2, 2] = 2.0
        Gc[2, 9] = 1.0
        Gc[3, 4] = Gc[4, 5] = Gc[5, 6] = Gc[6, 7] = 1.0
        return 10, [_PartLayout(Gb, np.zeros(7)), _PartLayout(Gc, np.zeros(7))], names
    raise ValueError(f"unknown analytic family kind {kind!r}")


CAR_SCALES = np.array([1.0, 0.32, 0.24, 1.6, 0.6, 0.24, 0.2, 1.2, 0.6, 0.2])
CAR_BASE_PARAMS = np.array([2.25, 0.95, 0.45, 4.0, 1.2, 0.8, 0.35, 3.0, -0.2, 0.2])


class AnalyticFamily:
    """Union of superellipsoid parts driven affinely by the latent code.

    ``params = base + matrix @ z``.  Columns of ``matrix`` that are zero are
    padding directions with no influence on the shape.  Each part is

        g_k(x) = m_k * (||(x - c_k) / e_k||_n - 1)

    with ``m_k`` the log-sum-exp soft minimum of the half-extents ``e_k``
    (temperature 1e-3), so g_k is 1-Lipschitz for exponents >= 2 and therefore
    never exceeds the distance to its own zero set.  Parts are merged with the
    same soft minimum.  Isotropic parts (kind ``"sphere"``) use ``m = radius``
    and are exact Euclidean SDFs.

    Valid box: half-extents in [0.05, 10] m and exponents in [2, 10].  Outside
    it g stays continuous; half-extents <= 1e-3 or exponents <= 1.05 raise
    :class:`InvalidShape`.
    """

    kind_name = "analytic"

    def __init__(self, kind: str, base, matrix, tau: float = SMOOTH_MIN_TEMPERATURE):
        self.kind = kind
        n_params, self._layouts, self.param_names = _layouts(kind)
        self.base = np.array(base, dtype=float).reshape(n_params)
        self.matrix = np.array(matrix, dtype=float)
        if self.matrix.ndim != 2 or self.matrix.shape[0] != n_params:
            raise ValueError(f"matrix must be ({n_params}, d_z), got {self.matrix.shape}")
        if np.linalg.matrix_rank(self.matrix) != n_params:
            raise ValueError("latent-to-parameter map must have full row rank")
        self.d_z = self.matrix.shape[1]
        self.tau = float(tau)
        self._isotropic = kind == "sphere"
        for arr in (self.base, self.matrix):
            arr.setflags(write=False)

    # -- construction helpers -------------------------------------------------
    @classmethod
    def sphere(cls, radius: float = 1.0, d_z: int = 16, scale: float = 0.1) -> "AnalyticFamily":
        """z=0 gives a sphere of ``radius`` centered at the origin; z[0] grows it."""
        M = np.zeros((1, d_z))
        M[0, 0] = scale
        return cls("sphere", [radius], M)

    @classmethod
    def superellipsoid(cls, extents=(1.0, 1.0, 1.0), exponent: float = 2.0, d_z: int = 16,
                       scale: float = 0.1) -> "AnalyticFamily":
        """z[j] scales half-extent j (j < 3) and z[3] the exponent; no mixing."""
        M = np.zeros((4, d_z))
        M[np.arange(4), np.arange(4)] = scale
        return cls("superellipsoid", [*extents, exponent], M)

    @classmethod
    def car(cls, d_z: int = 16, seed: int = 0, base=None, scales=None) -> "AnalyticFamily":
        """Two-part vehicle-like family (body + cabin) with a seeded mixing map.

        The first 10 latent coordinates are mixed by a random orthogonal matrix
        and scaled per parameter; coordinates 10.. are padding.
        """
        if d_z < 10:
            raise ValueError("car family needs d_z >= 10")
        rng = np.random.default_rng(seed)
        Q, R = np.linalg.qr(rng.standard_normal((10, 10)))
        Q = Q * np.sign(np.diag(R))
        if scales is None:
            scales = CAR_SCALES
        M = np.zeros((10, d_z))
        M[:, :10] = np.asarray(scales, dtype=float)[:, None] * Q
        return cls("car", CAR_BASE_PARAMS if base is None else base, M)

    # -- parameters -------------------------------------------------------------
    def params(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        if z.shape != (self.d_z,):
            raise ValueError(f"latent code must have shape ({self.d_z},), got {z.shape}")
        return self.base + self.matrix @ z

    def _geometry(self, p: np.ndarray) -> list[np.ndarray]:
        geoms = [lay.G @ p + lay.g0 for lay in self._layouts]
        for gm in geoms:
            if np.any(gm[3:6] <= 1e-3) or gm[6] <= 1.05:
                raise InvalidShape(f"part geometry out of domain: extents={gm[3:6]}, n={gm[6]}")
        return geoms

    def in_valid_box(self, z) -> bool:
        try:
            geoms = self._geometry(self.params(z))
        except InvalidShape:
            return False
        return all(np.all((g[3:6] >= 0.05) & (g[3:6] <= 10.0)) and 2.0 <= g[6] <= 10.0
                   for g in geoms)

    # -- evaluation ------------------------------------------------------------
    def _part(self, gm: np.ndarray, x: np.ndarray, need_grads: bool):
        center, ext, n = gm[:3], gm[3:6], gm[6]
        v = (x - center) / ext
        N, dN_dv, dN_dn = _pnorm_with_grads(v, n)
        if self._isotropic:
            m, dm = ext[0], np.array([1.0, 0.0, 0.0])
        else:
            m, dm = _smooth_min(ext, self.tau)
        g = m * (N - 1.0)
        if not need_grads:
            return g, None, None
        gx = m * dN_dv / ext
        dgeom = np.empty((x.shape[0], 7))
        dgeom[:, :3] = -gx
        if self._isotropic:
            # single extent parameter drives all three axes
            dgeom[:, 3] = (N - 1.0) - m * np.sum(dN_dv * v, axis=-1) / ext[0]
            dgeom[:, 4:6] = 0.0
        else:
            dgeom[:, 3:6] = dm[None, :] * (N - 1.0)[:, None] - m * dN_dv * v / ext
        dgeom[:, 6] = m * dN_dn
        return g, gx, dgeom

    def value_and_grads(self, z, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        geoms = self._geometry(self.params(z))
        parts = [self._part(gm, x, True) for gm in geoms]
        if len(parts) == 1:
            g, gx, dgeom = parts[0]
            dp = dgeom @ self._layouts[0].G
        else:
            gs = np.stack([p[0] for p in parts], axis=-1)
            g, w = _smooth_min(gs, self.tau)
            gx = sum(w[:, k, None] * parts[k][1] for k in range(len(parts)))
            dp = sum(w[:, k, None] * (parts[k][2] @ self._layouts[k].G) for k in range(len(parts)))
        return g, gx, dp @ self.matrix

    def sdf(self, z, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        geoms = self._geometry(self.params(z))
        gs = [self._part(gm, x, False)[0] for gm in geoms]
        if len(gs) == 1:
            return gs[0]
        return _smooth_min(np.stack(gs, axis=-1), self.tau)[0]

    def grad_point(self, z, x) -> np.ndarray:
        return self.value_and_grads(z, x)[1]

    def grad_latent(self, z, x) -> np.ndarray:
        return self.value_and_grads(z, x)[2]

    # -- geometric summaries -----------------------------------------------------
    def bounding_radius(self, z) -> float:
        """Radius about the object-frame origin outside which g > 0."""
        geoms = self._geometry(self.params(z))
        return max(float(np.linalg.norm(g[:3]) + np.linalg.norm(g[3:6])) for g in geoms) + 0.05

    def extent(self, z) -> tuple[float, float, float, float]:
        """Object-frame BEV bounding rectangle (xmin, xmax, ymin, ymax)."""
        geoms = self._geometry(self.params(z))
        xmin = min(g[0] - g[3] for g in geoms)
        xmax = max(g[0] + g[3] for g in geoms)
        ymin = min(g[1] - g[4] for g in geoms)
        ymax = max(g[1] + g[4] for g in geoms)
        return float(xmin), float(xmax), float(ymin), float(ymax)

    def support(self, z, direction) -> float:
        """max over the shape of direction . p (dual-norm support function)."""
        d = np.asarray(direction, dtype=float)
        best = -np.inf
        for g in self._geometry(self.params(z)):
            n = g[6]
            dual = n / (n - 1.0)
            h = float(g[:3] @ d + np.sum(np.abs(g[3:6] * d) ** dual) ** (1.0 / dual))
            best = max(best, h)
        return best

    def interior_points(self, z) -> np.ndarray:
        """One point strictly inside each part (the part centers)."""
        return np.array([g[:3] for g in self._geometry(self.params(z))])

    # -- serialization -------------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "kind": self.kind_name,
            "family": self.kind,
            "d_z": self.d_z,
            "tau": self.tau,
            "base": _encode(self.base),
            "matrix": _encode(self.matrix),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AnalyticFamily":
        return cls(d["family"], _decode(d["base"]), _decode(d["matrix"]), tau=d.get("tau", SMOOTH_MIN_TEMPERATURE))


class MlpDecoder:
    """g(z, x) = w3 . tanh(W2 tanh(W1 [z; x] + b1) + b2) + b3."""

    kind_name = "mlp"

    def __init__(self, W1, b1, W2, b2, w3, b3):
        self.W1 = np.array(W1, dtype=float)
        self.b1 = np.array(b1, dtype=float)
        self.W2 = np.array(W2, dtype=float)
        self.b2 = np.array(b2, dtype=float)
        self.w3 = np.array(w3, dtype=float)
        self.b3 = float(b3)
        self.d_z = self.W1.shape[1] - 3
        if self.d_z < 1:
            raise ValueError("first layer must take d_z + 3 inputs")
        for arr in (self.W1, self.b1, self.W2, self.b2, self.w3):
            arr.setflags(write=False)

    @classmethod
    def random(cls, d_z: int = 16, hidden=(64, 64), seed: int = 0, input_scale: float = 1.0):
        rng = np.random.default_rng(seed)
        h1, h2 = hidden
        W1 = rng.standard_normal((h1, d_z + 3)) * input_scale / np.sqrt(d_z + 3)
        b1 = rng.standard_normal(h1) * 0.5
        W2 = rng.standard_normal((h2, h1)) / np.sqrt(h1)
        b2 = rng.standard_normal(h2) * 0.1
        w3 = rng.standard_normal(h2) / np.sqrt(h2)
        return cls(W1, b1, W2, b2, w3, 0.0)

    @classmethod
    def fit_to(cls, target, z0, hidden=(128, 128), seed: int = 0, n_samples: int = 20000,
               z_spread: float = 0.2, box=None, clip: float = 0.5, ridge: float = 1e-6):
        """Random tanh features with the output layer solved by least squares.

        Samples latent codes around ``z0`` and points in ``box`` (object frame
        ``(lo, hi)`` corners); targets are the clipped SDF of ``target``.
        """
        rng = np.random.default_rng(seed)
        d_z = target.d_z
        if box is None:
            r = target.bounding_radius(z0)
            box = (-r * np.ones(3), r * np.ones(3))
        lo, hi = (np.asarray(b, dtype=float) for b in box)
        net = cls.random(d_z, hidden, seed, input_scale=2.0)
        Z = z0 + z_spread * rng.standard_normal((n_samples, d_z))
        X = lo + (hi - lo) * rng.random((n_samples, 3))
        y = np.empty(n_samples)
        for i in range(0, n_samples, 500):
            for j in range(i, min(i + 500, n_samples)):
                y[j] = target.sdf(Z[j], X[j:j + 1])[0]
        y = np.clip(y, -clip, clip)
        H = net._hidden(np.concatenate([Z, X], axis=1))[1]
        A = np.concatenate([H, np.ones((n_samples, 1))], axis=1)
        coef = np.linalg.solve(A.T @ A + ridge * np.eye(A.shape[1]), A.T @ y)
        return cls(net.W1, net.b1, net.W2, net.b2, coef[:-1], coef[-1])

    def _inputs(self, z, x) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        if z.shape != (self.d_z,):
            raise ValueError(f"latent code must have shape ({self.d_z},), got {z.shape}")
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return np.concatenate([np.broadcast_to(z, (x.shape[0], self.d_z)), x], axis=1)

    def _hidden(self, U):
        h1 = np.tanh(U @ self.W1.T + self.b1)
        h2 = np.tanh(h1 @ self.W2.T + self.b2)
        return h1, h2

    def sdf(self, z, x) -> np.ndarray:
        h2 = self._hidden(self._inputs(z, x))[1]
        return h2 @ self.w3 + self.b3

    def value_and_grads(self, z, x):
        U = self._inputs(z, x)
        h1, h2 = self._hidden(U)
        g = h2 @ self.w3 + self.b3
        d2 = (1.0 - h2**2) * self.w3
        d1 = (d2 @ self.W2) * (1.0 - h1**2)
        dU = d1 @ self.W1
        return g, dU[:, self.d_z:], dU[:, : self.d_z]

    def grad_point(self, z, x) -> np.ndarray:
        return self.value_and_grads(z, x)[1]

    def grad_latent(self, z, x) -> np.ndarray:
        return self.value_and_grads(z, x)[2]

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "kind": self.kind_name,
            "d_z": self.d_z,
            "W1": _encode(self.W1), "b1": _encode(self.b1),
            "W2": _encode(self.W2), "b2": _encode(self.b2),
            "w3": _encode(self.w3), "b3": self.b3,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpDecoder":
        return cls(_decode(d["W1"]), _decode(d["b1"]), _decode(d["W2"]), _decode(d["b2"]),
                   _decode(d["w3"]), d["b3"])


# module-level operation names ---------------------------------------------------

def eval_sdf(decoder, z, x_obj) -> np.ndarray:
    """Signed distance: negative inside, zero on the surface, positive outside."""
    return decoder.sdf(z, x_obj)


def grad_point(decoder, z, x_obj) -> np.ndarray:
    return decoder.grad_point(z, x_obj)


def grad_latent(decoder, z, x_obj) -> np.ndarray:
    return decoder.grad_latent(z, x_obj)


def object_extent(decoder, z, resolution: float = 0.02) -> tuple[float, float, float, float]:
    """BEV bounding rectangle of the zero level set in the object frame.

    Uses the decoder's closed form when it has one, otherwise a dense grid at
    ``resolution`` over the decoder's bounding cube (or +-3 m).
    """
    if hasattr(decoder, "extent"):
        return decoder.extent(z)
    r = decoder.bounding_radius(z) if hasattr(decoder, "bounding_radius") else 3.0
    ax = np.arange(-r, r + resolution, resolution)
    xmin = ymin = np.inf
    xmax = ymax = -np.inf
    for zc in ax:
        X, Y = np.meshgrid(ax, ax, indexing="ij")
        P = np.stack([X.ravel(), Y.ravel(), np.full(X.size, zc)], axis=1)
        inside = decoder.sdf(z, P) <= 0
        if np.any(inside):
            xmin, xmax = min(xmin, P[inside, 0].min()), max(xmax, P[inside, 0].max())
            ymin, ymax = min(ymin, P[inside, 1].min()), max(ymax, P[inside, 1].max())
    if not np.isfinite(xmin):
        raise InvalidShape("decoder has an empty zero level set on the sampling grid")
    return float(xmin), float(xmax), float(ymin), float(ymax)


def sample_surface(decoder, z, n: int, seed: int = 0, iters: int = 60) -> np.ndarray:
    """Points on the zero set found by bisection along random rays.

    Rays start at the decoder's interior points (part centers) and leave
    through its bounding sphere, so each bracket has a sign change.
    """
    rng = np.random.default_rng(seed)
    starts = decoder.interior_points(z)
    R = 2.0 * decoder.bounding_radius(z)
    idx = rng.integers(0, len(starts), n)
    d = rng.standard_normal((n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    o = starts[idx]
    lo = np.zeros(n)
    hi = np.full(n, R)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        neg = decoder.sdf(z, o + mid[:, None] * d) < 0
        lo = np.where(neg, mid, lo)
        hi = np.where(neg, hi, mid)
    return o + (0.5 * (lo + hi))[:, None] * d


@dataclass(frozen=True)
class PcaSubspace:
    """Affine subspace ``mean + span(basis)`` with orthonormal basis columns."""

    mean: np.ndarray
    basis: np.ndarray

    @property
    def dim(self) -> int:
        return self.basis.shape[1]

    def project(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        return self.mean + self.basis @ (self.basis.T @ (z - self.mean))

    def project_direction(self, v) -> np.ndarray:
        return self.basis @ (self.basis.T @ np.asarray(v, dtype=float))

    def coefficients(self, z) -> np.ndarray:
        return self.basis.T @ (np.asarray(z, dtype=float) - self.mean)

    def from_coefficients(self, c) -> np.ndarray:
        return self.mean + self.basis @ np.asarray(c, dtype=float)

    def residual(self, z) -> float:
        return float(np.linalg.norm(np.asarray(z, dtype=float) - self.project(z)))

    def to_dict(self) -> dict:
        return {"format_version": FORMAT_VERSION, "kind": "pca", "d_z": int(self.mean.size),
                "mean": _encode(self.mean), "basis": _encode(self.basis)}

    @classmethod
    def from_dict(cls, d: dict) -> "PcaSubspace":
        return cls(_decode(d["mean"]), _decode(d["basis"]))


def fit_pca(samples, n_components: int = 10, rtol: float = 1e-10) -> PcaSubspace:
    """Top principal directions of the centered samples."""
    Z = np.asarray(samples, dtype=float)
    if Z.ndim != 2 or Z.shape[0] < n_components:
        raise RankDeficient(f"need at least {n_components} samples, got {len(Z)}")
    mean = Z.mean(axis=0)
    _, s, Vt = np.linalg.svd(Z - mean, full_matrices=False)
    scale = max(float(s[0]) if s.size else 0.0, float(np.abs(Z).max(initial=0.0)))
    good = int(np.sum(s > rtol * max(scale, 1.0)))
    if good < n_components:
        raise RankDeficient(f"only {good} non-degenerate directions, need {n_components}")
    return PcaSubspace(mean=mean, basis=Vt[:n_components].T.copy())


# -- JSON helpers ----------------------------------------------------------------

def _encode(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(a.shape), "dtype": "float64",
            "data": base64.b64encode(a.tobytes(order="C")).decode("ascii")}


def _decode(d) -> np.ndarray:
    if isinstance(d, dict):
        raw = base64.b64decode(d["data"])
        return np.frombuffer(raw, dtype="<f8").reshape(d["shape"]).astype(float)
    return np.asarray(d, dtype=float)


def decoder_from_dict(d: dict):
    kind = d.get("kind")
    if kind == AnalyticFamily.kind_name:
        return AnalyticFamily.from_dict(d)
    if kind == MlpDecoder.kind_name:
        return MlpDecoder.from_dict(d)
    raise ValueError(f"unknown decoder kind {kind!r}")


def save_decoder(decoder, path) -> None:
    Path(path).write_text(json.dumps(decoder.to_dict(), indent=1, sort_keys=True))


def load_decoder(path):
    return decoder_from_dict(json.loads(Path(path).read_text()))
