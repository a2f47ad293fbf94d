"""Latent-code reconstruction from observed object points and a retrieval pool.

Reconstruction minimizes the squared SDF of observed points over the affine
PCA subspace, by projected gradient descent or by damped Gauss-Newton steps
taken in the subspace coordinates. The pool holds reconstructed
"natural" codes so attack outputs can be compared against their nearest one.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from sdfadv.errors import Diverged, InvalidShape
from sdfadv.geometry import Pose, to_object_frame
from sdfadv.sdf import PcaSubspace

DEFAULT_STEPS = 200
DEFAULT_STEP_SIZE = 0.05
DIVERGENCE_FACTOR = 1e3


@dataclass
class Reconstruction:
    z: np.ndarray
    objective: float
    initial_objective: float
    history: list = field(default_factory=list)  # objective per step, starting at z_init


def squared_sdf_objective(decoder, z, x_obj) -> tuple[float, np.ndarray]:
    """(sum of g^2, its gradient 2 * sum g * dg/dz)."""
    g, _, gz = decoder.value_and_grads(z, x_obj)
    return float(g @ g), 2.0 * (g @ gz)


def reconstruct(points, pose: Pose, decoder, pca: PcaSubspace, steps: int = DEFAULT_STEPS,
                step_size: float = DEFAULT_STEP_SIZE, z_init=None,
                method: str = "gauss_newton") -> Reconstruction:
    """Fit a code in ``pca`` whose zero set passes through ``points`` (sensor frame).

    ``method="gd"`` is projected gradient descent; its step is ``step_size / N``
    times the projected gradient of the summed objective, so the step does not
    depend on how many points were seen.  ``method="gauss_newton"`` solves the
    damped normal equations in the subspace coordinates each step (``step_size``
    is unused); it converges on problems where the plain gradient stalls.
    The lowest-objective iterate is returned.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(pts) < 10:
        raise ValueError(f"reconstruction needs at least 10 points, got {len(pts)}")
    if steps < 0 or not step_size > 0:
        raise ValueError("steps must be >= 0 and step_size positive")
    if method not in ("gd", "gauss_newton"):
        raise ValueError(f"unknown method {method!r}")
    x_obj = to_object_frame(pts, pose)
    B = pca.basis
    z = pca.project(pca.mean if z_init is None else z_init)
    g, _, gz = decoder.value_and_grads(z, x_obj)
    f0 = f = float(g @ g)
    best_z, best_f = z.copy(), f
    history = [f]
    eta = step_size / len(pts)
    mu = 1e-3
    for _ in range(steps):
        if method == "gd":
            z = z - eta * pca.project_direction(2.0 * (g @ gz))
            g, gz, f = _evaluate(decoder, z, x_obj, f0)
        else:
            J = gz @ B
            JtJ, Jtg = J.T @ J, J.T @ g
            while True:
                step = np.linalg.solve(JtJ + mu * (np.diag(np.diag(JtJ)) + 1e-12 * np.eye(len(JtJ))), -Jtg)
                z_try = z + B @ step
                try:
                    g_try, gz_try, f_try = _evaluate(decoder, z_try, x_obj, f0)
                except Diverged:
                    f_try = np.inf
                if f_try < f or mu > 1e12:
                    break
                mu *= 10.0
            if not f_try < f:  # no damping helps: converged to machine precision
                break
            z, g, gz, f = z_try, g_try, gz_try, f_try
            mu = max(mu / 10.0, 1e-12)
        history.append(f)
        if f < best_f:
            best_z, best_f = z.copy(), f
    return Reconstruction(best_z, best_f, f0, history)


def _evaluate(decoder, z, x_obj, f0):
    try:
        g, _, gz = decoder.value_and_grads(z, x_obj)
    except InvalidShape as exc:
        raise Diverged(f"iterate left the decoder domain: {exc}") from exc
    f = float(g @ g)
    if not np.isfinite(f) or f > DIVERGENCE_FACTOR * max(f0, 1e-300):
        raise Diverged(f"objective rose from {f0:.3g} to {f:.3g}")
    return g, gz, f


@dataclass(frozen=True)
class PoolEntry:
    id: int
    z: np.ndarray


@dataclass
class RetrievalPool:
    entries: list
    pca: PcaSubspace

    def __post_init__(self):
        if self.entries:
            d = self.entries[0].z.size
            if any(e.z.size != d for e in self.entries):
                raise ValueError("pool entries differ in latent dimension")
        for e in self.entries:
            if self.pca.residual(e.z) >= 1e-8:
                raise ValueError(f"pool entry {e.id} lies outside the PCA subspace")

    def __len__(self) -> int:
        return len(self.entries)

    def matrix(self) -> np.ndarray:
        return np.stack([e.z for e in self.entries])

    def save_jsonl(self, path) -> None:
        with open(path, "w") as f:
            for e in self.entries:
                f.write(json.dumps({"id": int(e.id), "z": [float(v) for v in e.z]}) + "\n")

    @classmethod
    def load_jsonl(cls, path, pca: PcaSubspace) -> "RetrievalPool":
        entries = []
        for line in Path(path).read_text().splitlines():
            if line.strip():
                d = json.loads(line)
                entries.append(PoolEntry(int(d["id"]), np.asarray(d["z"], dtype=float)))
        return cls(entries, pca)


def retrieve_nearest(pool: RetrievalPool, z_query):
    """Nearest pool entry as (id, z), or None when it is not closer than ||z_query||.

    Ties go to the lower id.
    """
    if len(pool) == 0:
        raise ValueError("retrieval pool is empty")
    q = np.asarray(z_query, dtype=float)
    d = np.linalg.norm(pool.matrix() - q, axis=1)
    ids = np.array([e.id for e in pool.entries])
    i = int(np.lexsort((ids, d))[0])
    if not d[i] < np.linalg.norm(q):
        return None
    return pool.entries[i].id, pool.entries[i].z


def natural_codes(pca: PcaSubspace, n: int, seed: int, coef_scale: float = 0.3) -> list[np.ndarray]:
    """Codes ``mean + basis @ c`` with c ~ N(0, coef_scale^2 I)."""
    rng = np.random.default_rng(seed)
    return [pca.project(pca.from_coefficients(c)) for c in coef_scale * rng.standard_normal((n, pca.dim))]


def build_pool(decoder, pca: PcaSubspace, observe, n: int = 200, seed: int = 0,
               coef_scale: float = 0.3, steps: int = DEFAULT_STEPS,
               step_size: float = DEFAULT_STEP_SIZE,
               method: str = "gauss_newton") -> tuple[RetrievalPool, list[np.ndarray]]:
    """Pool of reconstructed codes plus the generating codes.

    ``observe(z, i)`` returns (points, pose) for generating code ``z`` of entry ``i``.
    """
    truth = natural_codes(pca, n, seed, coef_scale)
    entries = []
    for i, z in enumerate(truth):
        pts, pose = observe(z, i)
        rec = reconstruct(pts, pose, decoder, pca, steps, step_size, method=method)
        entries.append(PoolEntry(i, pca.project(rec.z)))
    return RetrievalPool(entries, pca), truth


def default_pca(decoder, n_components: int = 10, n_samples: int = 500, seed: int = 0,
                scale: float = 0.3) -> PcaSubspace:
    """PCA of seeded Gaussian codes over the latent coordinates the decoder uses.

    For a decoder with a linear parameter map, coordinates with an all-zero
    column are padding and are left at zero.
    """
    from sdfadv.sdf import fit_pca

    rng = np.random.default_rng(seed)
    active = np.ones(decoder.d_z, dtype=bool)
    if hasattr(decoder, "matrix"):
        active = np.linalg.norm(decoder.matrix, axis=0) > 0
    Z = np.zeros((n_samples, decoder.d_z))
    Z[:, active] = scale * rng.standard_normal((n_samples, int(active.sum())))
    return fit_pca(Z, n_components)
