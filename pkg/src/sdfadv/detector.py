"""A smooth soft-count BEV detector, rotated-box IoU and the adversarial loss.

Each anchor box scores ``sigmoid(gain * C + bias)`` where ``C`` is a soft count
of points inside the box footprint:

    C = sum_i  sig((L/2 - |u_i|)/tau) * sig((W/2 - |v_i|)/tau) * gate_i

with (u, v) the point's BEV coordinates in the box frame and
``gate_i = sig((z_i - min_height)/height_tau)`` a soft height gate that keeps flat
ground from counting (``min_height=None`` disables it). Terms more than
``PRUNE_SIGMAS`` soft widths outside a box footprint, or that far below the
height threshold, are dropped exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from sdfadv.errors import ScoreOutOfRange

SCORE_CLAMP = 1e-7
LOGIT_CLIP = 30.0
PRUNE_SIGMAS = 20.0


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=float)))


@dataclass(frozen=True)
class BevBox:
    cx: float
    cy: float
    length: float
    width: float
    heading: float = 0.0

    def __post_init__(self):
        if not (self.length > 0 and self.width > 0):
            raise ValueError("box dimensions must be positive")
        if self.width > self.length:
            length, width = self.width, self.length
            object.__setattr__(self, "length", float(length))
            object.__setattr__(self, "width", float(width))
            object.__setattr__(self, "heading", float(self.heading) + math.pi / 2)

    @property
    def center(self) -> np.ndarray:
        return np.array([self.cx, self.cy])

    @property
    def area(self) -> float:
        return self.length * self.width

    def corners(self) -> np.ndarray:
        """Counter-clockwise corners, shape (4, 2)."""
        c, s = math.cos(self.heading), math.sin(self.heading)
        hl, hw = self.length / 2, self.width / 2
        local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + self.center

    def as_tuple(self) -> tuple[float, float, float, float, float]:
        return (self.cx, self.cy, self.length, self.width, self.heading)


@dataclass(frozen=True)
class Detection:
    box: BevBox
    score: float

    def __post_init__(self):
        if not 0.0 < self.score < 1.0:
            raise ScoreOutOfRange(f"score {self.score} not in (0, 1)")


# -- rotated IoU ------------------------------------------------------------------

_COLLINEAR_EPS = 1e-9
_SLIVER_AREA = 1e-12


def _polygon_area(poly) -> float:
    if len(poly) < 3:
        return 0.0
    p = np.asarray(poly)
    x, y = p[:, 0], p[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def clip_convex(subject, clip) -> list:
    """Sutherland-Hodgman: part of polygon ``subject`` inside convex CCW ``clip``."""
    out = [tuple(p) for p in subject]
    m = len(clip)
    for k in range(m):
        if not out:
            break
        ax, ay = clip[k]
        bx, by = clip[(k + 1) % m]
        ex, ey = bx - ax, by - ay

        def side(p):
            return ex * (p[1] - ay) - ey * (p[0] - ax)

        inp, out = out, []
        prev = inp[-1]
        sp = side(prev)
        for cur in inp:
            sc = side(cur)
            if sc >= -_COLLINEAR_EPS:
                if sp < -_COLLINEAR_EPS:
                    out.append(_intersect(prev, cur, sp, sc))
                out.append(cur)
            elif sp >= -_COLLINEAR_EPS:
                out.append(_intersect(prev, cur, sp, sc))
            prev, sp = cur, sc
    return out


def _intersect(p, q, sp, sq):
    t = sp / (sp - sq)
    return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))


def iou_bev(a: BevBox, b: BevBox) -> float:
    """Intersection over union of two rotated rectangles."""
    reach = 0.5 * (math.hypot(a.length, a.width) + math.hypot(b.length, b.width))
    if math.hypot(a.cx - b.cx, a.cy - b.cy) >= reach:
        return 0.0
    inter = _polygon_area(clip_convex(a.corners(), b.corners()))
    if inter < _SLIVER_AREA:
        return 0.0
    union = a.area + b.area - inter
    return float(min(1.0, max(0.0, inter / union)))


# -- detector -----------------------------------------------------------------------

@dataclass(frozen=True)
class ToyDetector:
    """Anchor grid of ``nx * ny`` cells (anchor at each cell center) times headings."""

    origin: tuple[float, float] = (0.0, 0.0)
    nx: int = 8
    ny: int = 8
    cell: float = 2.0
    headings: tuple[float, ...] = (0.0, math.pi / 4, math.pi / 2, 3 * math.pi / 4)
    length: float = 4.5
    width: float = 2.0
    tau: float = 0.25
    gain: float = 0.15
    bias: float = -3.0
    min_height: float | None = None
    height_tau: float = 0.02
    _anchors: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not (self.tau > 0 and self.height_tau > 0):
            raise ValueError("tau must be positive")
        if self.nx < 1 or self.ny < 1 or len(self.headings) < 1:
            raise ValueError("anchor grid is empty")
        ox, oy = self.origin
        xs = ox + (np.arange(self.nx) + 0.5) * self.cell
        ys = oy + (np.arange(self.ny) + 0.5) * self.cell
        X, Y, H = np.meshgrid(xs, ys, np.asarray(self.headings, dtype=float), indexing="ij")
        anchors = np.stack([X.ravel(), Y.ravel(), H.ravel()], axis=1)
        anchors.setflags(write=False)
        object.__setattr__(self, "_anchors", anchors)

    @classmethod
    def around(cls, center, half_size: float = 8.0, **kw) -> "ToyDetector":
        """Grid covering ``center +- half_size`` snapped to the global cell lattice."""
        cell = kw.get("cell", cls.cell)
        cx, cy = float(center[0]), float(center[1])
        ox = math.floor((cx - half_size) / cell) * cell
        oy = math.floor((cy - half_size) / cell) * cell
        n = int(math.ceil(2 * half_size / cell)) + 1
        return cls(origin=(ox, oy), nx=n, ny=n, **kw)

    def to_dict(self) -> dict:
        return {"origin": list(self.origin), "nx": self.nx, "ny": self.ny, "cell": self.cell,
                "headings": list(self.headings), "length": self.length, "width": self.width,
                "tau": self.tau, "gain": self.gain, "bias": self.bias,
                "min_height": self.min_height, "height_tau": self.height_tau}

    @property
    def anchors(self) -> np.ndarray:
        """(A, 3) array of (cx, cy, heading)."""
        return self._anchors

    def boxes(self) -> list[BevBox]:
        return [BevBox(cx, cy, self.length, self.width, h) for cx, cy, h in self._anchors]

    # -- forward / backward ---------------------------------------------------------
    def _relevant(self, points: np.ndarray, anchors: np.ndarray) -> np.ndarray:
        """Indices of points that can contribute more than sig(-20) to any of
        ``anchors``, in lexicographic (x, y, z) order so summation order is
        input-independent."""
        a = anchors
        m = math.hypot(self.length / 2 + PRUNE_SIGMAS * self.tau, self.width / 2 + PRUNE_SIGMAS * self.tau)
        keep = ((points[:, 0] > a[:, 0].min() - m) & (points[:, 0] < a[:, 0].max() + m)
                & (points[:, 1] > a[:, 1].min() - m) & (points[:, 1] < a[:, 1].max() + m))
        if self.min_height is not None:
            keep &= points[:, 2] > self.min_height - PRUNE_SIGMAS * self.height_tau
        idx = np.flatnonzero(keep)
        order = np.lexsort((points[idx, 2], points[idx, 1], points[idx, 0]))
        return idx[order]

    def _terms(self, P: np.ndarray, a: np.ndarray):
        c, s = np.cos(a[:, 2])[:, None], np.sin(a[:, 2])[:, None]
        dx = P[None, :, 0] - a[:, 0, None]
        dy = P[None, :, 1] - a[:, 1, None]
        u = c * dx + s * dy
        v = -s * dx + c * dy
        # contributions beyond PRUNE_SIGMAS soft widths are exactly zero, so a
        # score does not depend (beyond summation rounding) on which other
        # anchors or points were evaluated
        cut_u = np.abs(u) < self.length / 2 + PRUNE_SIGMAS * self.tau
        cut_v = np.abs(v) < self.width / 2 + PRUNE_SIGMAS * self.tau
        su = np.where(cut_u, sigmoid((self.length / 2 - np.abs(u)) / self.tau), 0.0)
        sv = np.where(cut_v, sigmoid((self.width / 2 - np.abs(v)) / self.tau), 0.0)
        if self.min_height is None:
            gate = np.ones(len(P))
        else:
            gate = sigmoid((P[:, 2] - self.min_height) / self.height_tau)
        return c, s, u, v, su, sv, gate

    def _logits(self, points: np.ndarray, anchor_idx=None):
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        a = self._anchors if anchor_idx is None else self._anchors[np.asarray(anchor_idx)]
        idx = self._relevant(points, a)
        P = points[idx]
        terms = self._terms(P, a)
        su, sv, gate = terms[4], terms[5], terms[6]
        C = np.sum(su * sv * gate[None, :], axis=1)
        return self.gain * C + self.bias, C, idx, P, terms

    def soft_counts(self, points, anchor_idx=None) -> np.ndarray:
        return self._logits(points, anchor_idx)[1]

    def scores(self, points, anchor_idx=None) -> np.ndarray:
        """Scores of all anchors, or of the anchors listed in ``anchor_idx``."""
        logit = self._logits(points, anchor_idx)[0]
        return sigmoid(np.clip(logit, -LOGIT_CLIP, LOGIT_CLIP))

    def detect(self, points) -> list[Detection]:
        return [Detection(b, float(p)) for b, p in zip(self.boxes(), self.scores(points))]

    def backward(self, points, dL_dp, anchor_idx=None) -> np.ndarray:
        """dL/dx for every input point given dL/dp per anchor (per listed anchor
        when ``anchor_idx`` is given; unlisted anchors have dL/dp = 0)."""
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        dL_dp = np.asarray(dL_dp, dtype=float)
        if anchor_idx is None and np.count_nonzero(dL_dp) < dL_dp.size:
            anchor_idx = np.flatnonzero(dL_dp)
            dL_dp = dL_dp[anchor_idx]
        if anchor_idx is not None and len(anchor_idx) == 0:
            return np.zeros_like(points)
        logit, _, idx, P, (c, s, u, v, su, sv, gate) = self._logits(points, anchor_idx)
        p = sigmoid(np.clip(logit, -LOGIT_CLIP, LOGIT_CLIP))
        w = dL_dp * p * (1.0 - p) * self.gain
        w = np.where(np.abs(logit) < LOGIT_CLIP, w, 0.0)[:, None]
        dsu = su * (1.0 - su) * (-np.sign(u) / self.tau)   # d su / d u
        dsv = sv * (1.0 - sv) * (-np.sign(v) / self.tau)   # d sv / d v
        gu = w * dsu * sv * gate[None, :]
        gv = w * su * dsv * gate[None, :]
        grad = np.zeros_like(points)
        # du/dx = c, du/dy = s, dv/dx = -s, dv/dy = c
        grad[idx, 0] = np.sum(gu * c - gv * s, axis=0)
        grad[idx, 1] = np.sum(gu * s + gv * c, axis=0)
        if self.min_height is not None:
            dgate = gate * (1.0 - gate) / self.height_tau
            grad[idx, 2] = np.sum(w * su * sv, axis=0) * dgate
        return grad


def detect(detector: ToyDetector, points) -> list[Detection]:
    return detector.detect(points)


def detect_backward(detector: ToyDetector, points, dL_dp) -> np.ndarray:
    return detector.backward(points, dL_dp)


# -- loss ------------------------------------------------------------------------------

def anchor_ious(detector: ToyDetector, gt: BevBox) -> np.ndarray:
    """IoU of ``gt`` with every anchor box (zero without evaluating far anchors)."""
    a = detector.anchors
    reach = math.hypot(gt.length, gt.width) / 2 + math.hypot(detector.length, detector.width) / 2
    near = np.flatnonzero(np.hypot(a[:, 0] - gt.cx, a[:, 1] - gt.cy) < reach)
    out = np.zeros(len(a))
    for i in near:
        out[i] = iou_bev(gt, BevBox(a[i, 0], a[i, 1], detector.length, detector.width, a[i, 2]))
    return out


def adv_loss_from_scores(scores, ious) -> tuple[float, np.ndarray]:
    """Sum of -IoU * log(1 - p); IoU weights are constants for the gradient.

    Scores are clamped to [1e-7, 1 - 1e-7]; the gradient is zero at the clamp.
    """
    p = np.asarray(scores, dtype=float)
    w = np.asarray(ious, dtype=float)
    if np.any(~((p > 0) & (p < 1))):
        raise ScoreOutOfRange("detection scores must lie in (0, 1)")
    pc = np.clip(p, SCORE_CLAMP, 1.0 - SCORE_CLAMP)
    loss = float(np.sum(-w * np.log1p(-pc)))
    inside = (p >= SCORE_CLAMP) & (p <= 1.0 - SCORE_CLAMP)
    grad = np.where(inside, w / (1.0 - pc), 0.0)
    return loss, grad


def adv_loss(detections, gt: BevBox) -> tuple[float, np.ndarray]:
    scores = np.array([d.score for d in detections])
    ious = np.array([iou_bev(gt, d.box) for d in detections])
    return adv_loss_from_scores(scores, ious)


def shape_objective(l_adv: float, z, z0, lam: float) -> tuple[float, np.ndarray]:
    """Regularized objective and the gradient of its penalty term."""
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    dz = np.asarray(z, dtype=float) - np.asarray(z0, dtype=float)
    return float(l_adv + lam * dz @ dz), 2.0 * lam * dz


def write_detections_csv(detections, path) -> None:
    with open(path, "w") as f:
        f.write("cx,cy,length,width,heading,score\n")
        for d in detections:
            b = d.box
            f.write(f"{b.cx!r},{b.cy!r},{b.length!r},{b.width!r},{b.heading!r},{d.score!r}\n")
