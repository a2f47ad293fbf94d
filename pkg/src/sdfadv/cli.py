"""Command-line entry point: ``sdfadv <command> [options]``.

Exit codes: 0 ok, 1 check failure, 2 usage/config error, 3 infeasible start,
4 no feasible step, 5 diverged reconstruction.
"""

from __future__ import annotations

import argparse
import csv
import glob
import json
import logging
import math
import os
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_INFEASIBLE, EXIT_NO_STEP, EXIT_DIVERGED = 0, 1, 2, 3, 4, 5
FORMAT_VERSION = "1"

log = logging.getLogger("sdfadv")


@dataclass
class RunConfig:
    mode: str = "shape"
    scene: str | None = None
    decoder: str | None = None
    out_dir: str | None = None
    seed: int = 0
    n_iter: int = 40
    alpha: float = 0.01
    lams: tuple = (1.0, 10.0)
    eps_overlap: float = -0.02
    eps_float: float = 0.02
    min_points: int = 300
    roi_radius: float = 7.0
    roi_min_range: float = 15.0
    xy_radius: float = 4.0
    pitch_roll_limit: float = 0.1
    range_min: float = 22.0
    range_max: float = 30.0
    pose: tuple | None = None

    def validate(self) -> None:
        if self.mode not in ("shape", "pose"):
            raise ValueError(f"mode must be 'shape' or 'pose', got {self.mode!r}")
        if self.n_iter < 0:
            raise ValueError("n_iter must be >= 0")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if not self.lams or any(l < 0 for l in self.lams):
            raise ValueError("lams must be a non-empty list of non-negative values")
        if not self.eps_overlap < 0:
            raise ValueError("eps_overlap must be negative")
        if not self.eps_float > 0:
            raise ValueError("eps_float must be positive")
        if self.min_points < 0:
            raise ValueError("min_points must be >= 0")
        if not (self.roi_radius > 0 and self.roi_min_range >= 0):
            raise ValueError("roi radius must be positive and min range non-negative")
        if not (self.xy_radius > 0 and self.pitch_roll_limit >= 0):
            raise ValueError("pose limits must be positive")
        if not 0 < self.range_min <= self.range_max:
            raise ValueError("placement range must satisfy 0 < range_min <= range_max")
        if self.pose is not None and len(self.pose) != 6:
            raise ValueError("pose needs 6 values: tx ty tz yaw pitch roll")

    def resolved(self) -> dict:
        d = asdict(self)
        for key in ("scene", "decoder", "out_dir"):
            if d[key] is not None:
                d[key] = str(Path(d[key]).resolve())
        d["lams"] = list(self.lams)
        d["pose"] = None if self.pose is None else list(self.pose)
        return {"format_version": FORMAT_VERSION, **d}


_CONFIG_FIELDS = {f.name for f in fields(RunConfig)}


class UsageError(Exception):
    pass


def build_config(args) -> RunConfig:
    """Built-in defaults, overridden by --config JSON, overridden by flags."""
    values = {}
    if getattr(args, "config", None):
        try:
            data = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read --config {args.config}: {exc}") from exc
        unknown = set(data) - _CONFIG_FIELDS - {"format_version"}
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        values.update({k: v for k, v in data.items() if k in _CONFIG_FIELDS})
    for name in _CONFIG_FIELDS:
        v = getattr(args, name, None)
        if v is not None:
            values[name] = v
    for key in ("lams", "pose"):
        if values.get(key) is not None:
            values[key] = tuple(float(x) for x in values[key])
    cfg = RunConfig(**values)
    try:
        cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    return cfg


def _write_json(path, payload) -> None:
    payload = {"format_version": FORMAT_VERSION, **payload}
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _echo_config(out_dir: Path, cfg: RunConfig) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.resolved.json").write_text(json.dumps(cfg.resolved(), indent=2, sort_keys=True) + "\n")


def _load_decoder(path):
    from sdfadv.sdf import AnalyticFamily, load_decoder
    return AnalyticFamily.car() if path is None else load_decoder(path)


# -- commands --------------------------------------------------------------------------

def cmd_gen_scene(args) -> int:
    from sdfadv.io import save_scene
    from sdfadv.scenegen import SceneSpec, generate

    out = Path(args.out)
    spec = SceneSpec(seed=args.seed, n_azimuth=args.n_azimuth, n_elevation=args.n_elevation,
                     n_random_clutter=args.clutter)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_scene(generate(spec), out, binary=not args.ascii)
    resolved = {"format_version": FORMAT_VERSION, "command": "gen-scene", "seed": args.seed,
                "n_azimuth": args.n_azimuth, "n_elevation": args.n_elevation, "clutter": args.clutter,
                "out": str(out.resolve()), "ascii": bool(args.ascii)}
    (out.parent / "config.resolved.json").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n")
    print(f"wrote {out}")
    return EXIT_OK


def _placement(cfg: RunConfig, scene, decoder, z0, detector_kw=None):
    from sdfadv.adversary import Hyper, forward
    from sdfadv.detector import ToyDetector
    from sdfadv.experiments import DESK_DETECTOR
    from sdfadv.geometry import Pose
    from sdfadv.render import Roi, settle_height

    hyper = Hyper(n_iter=cfg.n_iter, alpha=cfg.alpha, eps_overlap=cfg.eps_overlap,
                  eps_float=cfg.eps_float, min_points=cfg.min_points)
    if cfg.pose is not None:
        pose = Pose.from_vector(cfg.pose)
        cands = [pose]
    else:
        rng = np.random.default_rng(cfg.seed)
        cands = []
        s = scene.sensors[0]
        for _ in range(50):
            r = rng.uniform(cfg.range_min, cfg.range_max)
            phi, yaw = rng.uniform(0, 2 * math.pi, size=2)
            p = Pose(s[0] + r * math.cos(phi), s[1] + r * math.sin(phi), 0.0, yaw, 0.0, 0.0)
            cands.append(p.replace(tz=settle_height(decoder, z0, p)))
    fw = None
    for pose in cands:
        roi = Roi(pose.translation, cfg.roi_radius, cfg.roi_min_range)
        det = ToyDetector.around(pose.translation, **DESK_DETECTOR)
        fw = forward(scene, roi, decoder, z0, pose, det, hyper)
        if fw.feasible:
            return pose, roi, det, hyper
    return pose, roi, det, hyper  # infeasible; attack() raises


def cmd_attack(args) -> int:
    from sdfadv.adversary import PoseConstraint, attack, attack_shape_select, forward
    from sdfadv.errors import InfeasibleStart
    from sdfadv.experiments import _random_pose_forward, _random_shape_forward, Trial
    from sdfadv.io import load_scene, write_ply

    cfg = build_config(args)
    if cfg.scene is None or cfg.out_dir is None:
        raise UsageError("attack needs --scene and --out-dir (flag or config)")
    out = Path(cfg.out_dir)
    _echo_config(out, cfg)
    scene = load_scene(cfg.scene)
    decoder = _load_decoder(cfg.decoder)
    z0 = np.zeros(decoder.d_z)
    pose, roi, det, hyper = _placement(cfg, scene, decoder, z0)
    trial = Trial(cfg.seed, scene, pose, roi, det)
    try:
        if cfg.mode == "shape":
            res = attack_shape_select(scene, roi, decoder, z0, pose, det, hyper, cfg.lams)
            z_adv, pose_adv = res.best_params, pose
            rand = _random_shape_forward(trial, decoder, z0, z_adv, hyper)
        else:
            con = PoseConstraint(pose, cfg.xy_radius, cfg.pitch_roll_limit)
            res = attack("pose", scene, roi, decoder, z0, pose, det, hyper, con)
            z_adv, pose_adv = z0, res.best_pose
            rand = _random_pose_forward(trial, decoder, z0, pose_adv, con, hyper)
    except InfeasibleStart as exc:
        _write_json(out / "result.json", {"error": "InfeasibleStart", "message": str(exc)})
        print(f"infeasible start: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    init = forward(scene, roi, decoder, z0, pose, det, hyper)
    final = forward(scene, roi, decoder, z_adv, pose_adv, det, hyper)
    payload = {
        "family": getattr(decoder, "kind", type(decoder).__name__),
        "mode": cfg.mode,
        "seed": cfg.seed,
        "initial_pose": [float(v) for v in pose.as_vector()],
        "final_pose": [float(v) for v in pose_adv.as_vector()],
        "z_adv": [float(v) for v in z_adv],
        "initial_score": init.matched_score,
        "final_score": final.matched_score,
        "scores": {"baseline": init.matched_score, "adversarial": final.matched_score,
                   "random": rand.matched_score},
        "constraint": {"xy_radius": cfg.xy_radius, "pitch_roll_limit": cfg.pitch_roll_limit},
        "result": res.to_dict(),
    }
    _write_json(out / "result.json", payload)
    with open(out / "trace.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["iter", "loss", "score", "feasible"])
        for t in res.trace:
            w.writerow([t.iteration, repr(float(t.loss)), repr(float(t.score)), int(t.feasible)])
    write_ply(out / "initial.ply", init.rendered.points, scene.sensor_index)
    write_ply(out / "final.ply", final.rendered.points, scene.sensor_index)
    print(f"initial score {init.matched_score:.4f} -> final score {final.matched_score:.4f}")
    if res.no_feasible_step:
        print("no feasible step", file=sys.stderr)
        return EXIT_NO_STEP
    return EXIT_OK


def cmd_eval(args) -> int:
    from sdfadv.detector import BevBox
    from sdfadv.metrics import TrialOutcome, auc, threshold_recall, write_curve_csv

    paths = sorted({p for pattern in args.results for p in glob.glob(pattern)})
    if not paths:
        raise UsageError(f"no result files match {args.results}")
    rows = []
    for p in paths:
        d = json.loads(Path(p).read_text())
        if "scores" not in d:
            raise UsageError(f"{p} has no 'scores' field")
        rows.append((d.get("family", "unknown"), d["scores"]))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dummy = BevBox(0.0, 0.0, 1.0, 1.0)
    table = {}
    for family in sorted({f for f, _ in rows}):
        scores = [s for f, s in rows if f == family]
        conds = [c for c in ("baseline", "adversarial", "random") if all(c in s for s in scores)]
        table[family] = {}
        for c in conds:
            outcomes = [TrialOutcome(dummy, float(s[c]), float(s[c]) > 0) for s in scores]
            curve = threshold_recall(outcomes)
            write_curve_csv(curve, out / f"curve_{family}_{c}.csv")
            table[family][c] = round(auc(curve), 6)
    _write_json(out / "auc.json", {"n_results": len(paths), "auc": table})
    print(json.dumps(table, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from sdfadv import gradcheck as gc
    from sdfadv.detector import ToyDetector
    from sdfadv.experiments import TrialConfig, make_trial
    from sdfadv.geometry import Pose
    from sdfadv.sdf import AnalyticFamily, MlpDecoder

    rng = np.random.default_rng(args.seed)
    suites = []
    decoders = {"car": AnalyticFamily.car(), "mlp": MlpDecoder.random(seed=args.seed)}
    if args.inject_grad_bug:
        decoders = {k: _GradBug(v) for k, v in decoders.items()}
    for name, dec in decoders.items():
        z = 0.1 * rng.standard_normal(dec.d_z)
        pts = rng.uniform(-2.0, 2.0, (20, 3))
        for r in gc.check_decoder(dec, z, pts):
            r.name = f"{name}_{r.name}"
            suites.append(r)
    pose = Pose(*rng.uniform(-5, 5, 3), *rng.uniform(-0.5, 0.5, 3))
    suites.append(gc.check_pose_jacobian(rng.uniform(-5, 5, (10, 3)), pose))
    det = ToyDetector(nx=2, ny=2)
    pts = np.c_[rng.uniform(-1, 3, (30, 2)), rng.uniform(0.6, 1.2, 30)]
    suites.append(gc.check_detector(det, pts, rng.uniform(0, 1, len(det.anchors))))
    car = decoders["car"]
    trial = make_trial(args.seed, getattr(car, "inner", car), np.zeros(16), TrialConfig())
    # 1 cm above the settled height (inside the floating tolerance): probes at
    # exact ground contact would cross the non-differentiable contact point
    lifted = trial.pose.replace(tz=trial.pose.tz + 0.01)
    for mode in ("shape", "pose"):
        e2e = gc.end_to_end(mode, trial.scene, trial.roi, car, np.zeros(16), lifted, trial.detector)
        suites.append(gc.SuiteResult(f"end_to_end_{mode}", e2e.max_rel_error, gc.REL_TOL,
                                     int((~e2e.flipped).sum()), int(e2e.flipped.sum())))
    report = {"suites": [s.to_dict() for s in suites], "passed": all(s.passed for s in suites)}
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        _write_json(args.out, report)
    for s in suites:
        print(f"{'PASS' if s.passed else 'FAIL'} {s.name}: max rel err {s.max_rel_error:.3g} (tol {s.tolerance:g})")
    failed = [s.name for s in suites if not s.passed]
    if failed:
        print("failing suites: " + ", ".join(failed), file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


class _GradBug:
    """Decoder wrapper whose latent gradient is off by 10% (negative control)."""

    def __init__(self, inner):
        self.inner = inner
        self.d_z = inner.d_z

    def __getattr__(self, name):
        return getattr(self.inner, name)

    def value_and_grads(self, z, x):
        g, gx, gz = self.inner.value_and_grads(z, x)
        return g, gx, 1.1 * gz

    def grad_latent(self, z, x):
        return self.value_and_grads(z, x)[2]


def cmd_reconstruct(args) -> int:
    from sdfadv.errors import Diverged
    from sdfadv.geometry import Pose
    from sdfadv.io import read_csv, read_ply
    from sdfadv.sdf import PcaSubspace
    from sdfadv.shapefit import default_pca, reconstruct

    decoder = _load_decoder(args.decoder)
    pca = (PcaSubspace.from_dict(json.loads(Path(args.pca).read_text())) if args.pca
           else default_pca(decoder))
    pts = (read_csv(args.points) if args.points.endswith(".csv") else read_ply(args.points))[0]
    if len(pts) < 10:
        raise UsageError(f"{args.points}: reconstruction needs at least 10 points")
    try:
        rec = reconstruct(pts, Pose.from_vector(args.pose), decoder, pca, args.steps,
                          args.step_size, method=args.method)
    except Diverged as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_json(out, {"z": [float(v) for v in rec.z], "objective": rec.objective,
                      "initial_objective": rec.initial_objective, "steps": len(rec.history) - 1})
    print(f"objective {rec.initial_objective:.3g} -> {rec.objective:.3g}")
    return EXIT_OK


def cmd_verify(args) -> int:
    """Re-check a pose-attack result: every recorded pose inside its limits."""
    d = json.loads(Path(args.result).read_text())
    if d.get("mode") != "pose":
        print("nothing to verify for shape results")
        return EXIT_OK
    c0 = d["initial_pose"]
    lim = d["constraint"]
    bad = []
    poses = [t["params"] for t in d["result"]["trace"]] + [d["final_pose"]]
    for i, p in enumerate(poses):
        ok = math.hypot(p[0] - c0[0], p[1] - c0[1]) <= lim["xy_radius"] + 1e-9
        ok &= abs(p[4] - c0[4]) <= lim["pitch_roll_limit"] + 1e-9
        ok &= abs(p[5] - c0[5]) <= lim["pitch_roll_limit"] + 1e-9
        if not ok:
            bad.append(i)
    if bad:
        print(f"{len(bad)} poses violate the constraint (first: {bad[0]})", file=sys.stderr)
        return EXIT_CHECK
    print(f"all {len(poses)} poses satisfy the constraint")
    return EXIT_OK


# -- parser ---------------------------------------------------------------------------

def _add_run_flags(p: argparse.ArgumentParser) -> None:
    d = RunConfig()
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--scene", help="scene point cloud (.ply or .csv)")
    p.add_argument("--decoder", help="decoder JSON (default: built-in car family)")
    p.add_argument("--out-dir", dest="out_dir", help="output directory")
    p.add_argument("--mode", choices=["shape", "pose"], help=f"attack mode (default: {d.mode})")
    p.add_argument("--seed", type=int, help=f"placement seed (default: {d.seed})")
    p.add_argument("--n-iter", dest="n_iter", type=int, help=f"attack iterations (default: {d.n_iter})")
    p.add_argument("--alpha", type=float, help=f"step size (default: {d.alpha})")
    p.add_argument("--lams", type=float, nargs="+", help=f"shape regularizer weights tried (default: {list(d.lams)})")
    p.add_argument("--eps-overlap", dest="eps_overlap", type=float, help=f"overlap threshold (default: {d.eps_overlap})")
    p.add_argument("--eps-float", dest="eps_float", type=float, help=f"grounding threshold (default: {d.eps_float})")
    p.add_argument("--min-points", dest="min_points", type=int, help=f"visibility threshold (default: {d.min_points})")
    p.add_argument("--roi-radius", dest="roi_radius", type=float, help=f"ROI radius in m (default: {d.roi_radius})")
    p.add_argument("--roi-min-range", dest="roi_min_range", type=float, help=f"minimum beam range in m (default: {d.roi_min_range})")
    p.add_argument("--xy-radius", dest="xy_radius", type=float, help=f"pose xy limit in m (default: {d.xy_radius})")
    p.add_argument("--pitch-roll-limit", dest="pitch_roll_limit", type=float, help=f"pitch/roll limit in rad (default: {d.pitch_roll_limit})")
    p.add_argument("--range-min", dest="range_min", type=float, help=f"placement range lower bound (default: {d.range_min})")
    p.add_argument("--range-max", dest="range_max", type=float, help=f"placement range upper bound (default: {d.range_max})")
    p.add_argument("--pose", type=float, nargs=6, metavar=("TX", "TY", "TZ", "YAW", "PITCH", "ROLL"),
                   help="explicit initial pose (default: sampled from --seed)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sdfadv", description=__doc__.splitlines()[0],
                                     formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    parser.add_argument("--threads", type=int, default=1, help="cap on BLAS/OpenMP threads")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = sub.add_parser("gen-scene", help="generate a synthetic scene", formatter_class=fmt)
    p.add_argument("--out", required=True, help="output cloud path (.ply or .csv)")
    p.add_argument("--seed", type=int, default=0, help="scene seed")
    p.add_argument("--n-azimuth", type=int, default=1024, help="beams per revolution")
    p.add_argument("--n-elevation", type=int, default=64, help="beam rows")
    p.add_argument("--clutter", type=int, default=8, help="number of random clutter objects")
    p.add_argument("--ascii", action="store_true", help="write ascii PLY instead of binary")
    p.set_defaults(func=cmd_gen_scene)

    p = sub.add_parser("attack", help="run a shape or pose attack")
    _add_run_flags(p)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("eval", help="threshold-recall curves and AUC from attack results", formatter_class=fmt)
    p.add_argument("--results", nargs="+", required=True, help="result.json files or glob patterns")
    p.add_argument("--out-dir", required=True, help="output directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference checks of all derivatives", formatter_class=fmt)
    p.add_argument("--seed", type=int, default=0, help="seed for probe points and the scene")
    p.add_argument("--out", default=None, help="report JSON path")
    p.add_argument("--inject-grad-bug", action="store_true", help="corrupt the latent gradient (negative control)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("reconstruct", help="fit a latent code to observed object points", formatter_class=fmt)
    p.add_argument("--points", required=True, help="object points (.ply or .csv)")
    p.add_argument("--pose", type=float, nargs=6, required=True, metavar=("TX", "TY", "TZ", "YAW", "PITCH", "ROLL"))
    p.add_argument("--decoder", default=None, help="decoder JSON; the built-in car family when omitted")
    p.add_argument("--pca", default=None, help="PCA subspace JSON; fitted to the car family when omitted")
    p.add_argument("--steps", type=int, default=200, help="optimizer steps")
    p.add_argument("--step-size", type=float, default=0.05, help="gradient-descent step size")
    p.add_argument("--method", choices=["gauss_newton", "gd"], default="gauss_newton", help="optimizer")
    p.add_argument("--out", required=True, help="output JSON path")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("verify", help="check a pose-attack result against its constraint", formatter_class=fmt)
    p.add_argument("--result", required=True, help="result.json from the attack command")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.threads < 1:
        print("--threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(args.threads)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
