"""Differentiable insertion of SDF objects into LiDAR scenes and adversarial
shape/pose search against a BEV detector."""

from sdfadv.geometry import Beam, Pose, beam_from_point, pose_jacobian, to_object_frame
from sdfadv.sdf import AnalyticFamily, MlpDecoder, PcaSubspace, fit_pca
from sdfadv.render import Roi, RenderedScene, Scene, render, select_roi
from sdfadv.detector import BevBox, Detection, ToyDetector, adv_loss, iou_bev
from sdfadv.adversary import AttackResult, Hyper, PoseConstraint, attack, grad_pose, grad_shape
from sdfadv.metrics import TrialOutcome, auc, threshold_recall
from sdfadv.shapefit import RetrievalPool, reconstruct, retrieve_nearest

__version__ = "0.1.0"

__all__ = [
    "AnalyticFamily",
    "AttackResult",
    "Beam",
    "BevBox",
    "Detection",
    "Hyper",
    "MlpDecoder",
    "PcaSubspace",
    "Pose",
    "PoseConstraint",
    "RenderedScene",
    "RetrievalPool",
    "Roi",
    "Scene",
    "ToyDetector",
    "TrialOutcome",
    "adv_loss",
    "attack",
    "auc",
    "beam_from_point",
    "fit_pca",
    "grad_pose",
    "grad_shape",
    "iou_bev",
    "pose_jacobian",
    "reconstruct",
    "render",
    "retrieve_nearest",
    "select_roi",
    "threshold_recall",
    "to_object_frame",
]
