"""Seeded trial construction and the baseline / attack / random comparison runs."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from sdfadv.adversary import (AttackResult, Hyper, PoseConstraint, attack, attack_shape_select, forward,
                              random_baseline, random_pose_baseline, robustness_noise)
from sdfadv.detector import ToyDetector
from sdfadv.errors import InfeasibleStart, InvalidShape
from sdfadv.geometry import Pose
from sdfadv.metrics import TrialOutcome, auc, threshold_recall
from sdfadv.render import Roi, Scene
from sdfadv.scenegen import SceneSpec, generate, sample_placement

log = logging.getLogger(__name__)

PLACEMENT_RANGE = (22.0, 30.0)
DESK_MIN_POINTS = 30
CONDITIONS = ("baseline", "shape_attack", "shape_random", "pose_attack", "pose_random")

# Detector used for the attack experiments: denser anchors and a softer footprint
# than the class defaults, plus a height gate so the ground plane does not count.
DESK_DETECTOR = {
    "cell": 1.0,
    "headings": tuple(k * math.pi / 8 for k in range(8)),
    "tau": 0.5,
    "gain": 0.15,
    "bias": -4.0,
    "min_height": 0.8,
    "height_tau": 0.02,
}


@dataclass(frozen=True)
class TrialConfig:
    n_clutter: int = 8
    range_bounds: tuple[float, float] = PLACEMENT_RANGE
    roi_radius: float = 7.0
    roi_min_range: float = 15.0
    detector_half_size: float = 8.0
    max_placement_tries: int = 50
    hyper: Hyper = field(default_factory=lambda: Hyper(min_points=DESK_MIN_POINTS))
    lams: tuple[float, ...] = (1.0, 10.0)
    xy_radius: float = 4.0
    pitch_roll_limit: float = 0.1
    detector: dict = field(default_factory=lambda: dict(DESK_DETECTOR))


@dataclass
class Trial:
    seed: int
    scene: Scene
    pose: Pose
    roi: Roi
    detector: ToyDetector

    @property
    def scene_id(self) -> str:
        return f"scene{self.seed:04d}"


def make_trial(seed: int, decoder, z0, cfg: TrialConfig = TrialConfig()) -> Trial:
    """Scene ``seed`` with random clutter and the first feasible placement in it."""
    spec = SceneSpec(seed=seed, n_random_clutter=cfg.n_clutter)
    scene = generate(spec)
    for k in range(cfg.max_placement_tries):
        pose = sample_placement(spec, seed * 1000 + k, decoder, z0, cfg.range_bounds)
        roi = Roi(pose.translation, cfg.roi_radius, cfg.roi_min_range)
        det = ToyDetector.around(pose.translation, cfg.detector_half_size, **cfg.detector)
        if forward(scene, roi, decoder, z0, pose, det, cfg.hyper).feasible:
            return Trial(seed, scene, pose, roi, det)
    raise InfeasibleStart(f"no feasible placement found in scene {seed}")


def _outcome(trial: Trial, fw) -> TrialOutcome:
    matched = fw.matched_score > 0.0
    return TrialOutcome(fw.gt, fw.matched_score, matched, trial.scene_id)


@dataclass
class TrialRecord:
    """Per-trial scores for every condition plus the attack results."""

    scene_id: str
    pose: Pose
    outcomes: dict
    shape_result: AttackResult | None = None
    pose_result: AttackResult | None = None
    noise_scores: list = field(default_factory=list)


def run_trial(trial: Trial, decoder, z0, cfg: TrialConfig = TrialConfig(), modes=("shape", "pose"),
              noise_sigma: float = 0.0, n_noise: int = 0) -> TrialRecord:
    hy = cfg.hyper
    z0 = np.asarray(z0, dtype=float)
    base = forward(trial.scene, trial.roi, decoder, z0, trial.pose, trial.detector, hy)
    rec = TrialRecord(trial.scene_id, trial.pose, {"baseline": _outcome(trial, base)})
    if "shape" in modes:
        res = attack_shape_select(trial.scene, trial.roi, decoder, z0, trial.pose, trial.detector,
                                  hy, cfg.lams)
        rec.shape_result = res
        z_adv = res.best_params
        fw = forward(trial.scene, trial.roi, decoder, z_adv, trial.pose, trial.detector, hy)
        rec.outcomes["shape_attack"] = _outcome(trial, fw)
        rec.outcomes["shape_random"] = _outcome(trial, _random_shape_forward(trial, decoder, z0, z_adv, hy))
        for zn in robustness_noise(z_adv, noise_sigma, n_noise, seed=trial.seed):
            fwn = forward(trial.scene, trial.roi, decoder, zn, trial.pose, trial.detector, hy)
            rec.noise_scores.append((fw.matched_score, fwn.matched_score))
    if "pose" in modes:
        con = PoseConstraint(trial.pose, cfg.xy_radius, cfg.pitch_roll_limit)
        res = attack("pose", trial.scene, trial.roi, decoder, z0, trial.pose, trial.detector, hy, con)
        rec.pose_result = res
        fw = forward(trial.scene, trial.roi, decoder, z0, res.best_pose, trial.detector, hy)
        rec.outcomes["pose_attack"] = _outcome(trial, fw)
        rec.outcomes["pose_random"] = _outcome(
            trial, _random_pose_forward(trial, decoder, z0, res.best_pose, con, hy))
    return rec


def _random_shape_forward(trial, decoder, z0, z_adv, hy, tries: int = 20):
    if np.allclose(z_adv, z0):
        return forward(trial.scene, trial.roi, decoder, z0, trial.pose, trial.detector, hy)
    for k in range(tries):
        z = random_baseline(z0, z_adv, seed=trial.seed * 100 + k)
        try:
            return forward(trial.scene, trial.roi, decoder, z, trial.pose, trial.detector, hy)
        except InvalidShape:
            continue
    raise InvalidShape(f"no valid random shape after {tries} draws")


def _random_pose_forward(trial, decoder, z0, pose_adv, con, hy, tries: int = 20):
    """Random pose of matching perturbation size; resampled until feasible,
    falling back to the initial pose."""
    for k in range(tries):
        pose = random_pose_baseline(trial.pose, pose_adv, con, seed=trial.seed * 100 + k,
                                    decoder=decoder, z=z0)
        fw = forward(trial.scene, trial.roi, decoder, z0, pose, trial.detector, hy)
        if fw.feasible:
            return fw
    return forward(trial.scene, trial.roi, decoder, z0, trial.pose, trial.detector, hy)


@dataclass
class Summary:
    records: list
    aucs: dict
    mean_scores: dict
    seconds: float

    def outcomes(self, condition: str) -> list[TrialOutcome]:
        return [r.outcomes[condition] for r in self.records if condition in r.outcomes]

    def to_dict(self) -> dict:
        return {
            "aucs": self.aucs,
            "mean_scores": self.mean_scores,
            "trials": [
                {"scene_id": r.scene_id, "pose": list(map(float, r.pose.as_vector())),
                 "scores": {k: o.score for k, o in r.outcomes.items()}}
                for r in self.records
            ],
        }


def run_suite(seeds, decoder, z0, cfg: TrialConfig = TrialConfig(), modes=("shape", "pose"),
              noise_sigma: float = 0.0, n_noise: int = 0) -> Summary:
    t0 = time.perf_counter()
    records = []
    for seed in seeds:
        trial = make_trial(seed, decoder, z0, cfg)
        records.append(run_trial(trial, decoder, z0, cfg, modes, noise_sigma, n_noise))
        log.info("trial %s: %s", trial.scene_id,
                 {k: round(o.score, 4) for k, o in records[-1].outcomes.items()})
    conds = [c for c in CONDITIONS if all(c in r.outcomes for r in records)]
    aucs = {c: auc(threshold_recall([r.outcomes[c] for r in records])) for c in conds}
    means = {c: float(np.mean([r.outcomes[c].score for r in records])) for c in conds}
    return Summary(records, aucs, means, time.perf_counter() - t0)
