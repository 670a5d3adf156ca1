"""Trinocular stereo, a self-supervised disparity error model, and a
measurement-robust barrier filter for a unicycle robot, with a closed-loop
simulator tying them together."""

from .geometry import CameraRig, RobotPose, ZeroDisparity, pixel_position, reproject
from .scene import INVALID, Corruption, ImageTriple, Plane, Scene, Sphere, TextureSpec, render_triple
from .matching import MatchConfig, match, reconstruct, reconstruction_error
from .errormodel import ErrorModelParams, FeatureScales, adapt_online, predict, quantile
from .qp import solve_qp
from .safety import BarrierConfig, PixelMeasurements, naive_controller, robust_controller
from .sim import SimConfig, run_experiment

__version__ = "0.1.0"
__all__ = [
    "CameraRig", "RobotPose", "ZeroDisparity", "pixel_position", "reproject",
    "INVALID", "Corruption", "ImageTriple", "Plane", "Scene", "Sphere", "TextureSpec", "render_triple",
    "MatchConfig", "match", "reconstruct", "reconstruction_error",
    "ErrorModelParams", "FeatureScales", "adapt_online", "predict", "quantile",
    "solve_qp", "BarrierConfig", "PixelMeasurements", "naive_controller", "robust_controller",
    "SimConfig", "run_experiment",
]
