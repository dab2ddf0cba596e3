"""Stalk diameter estimation from masked RGB-D captures."""

__version__ = "0.1.0"

from .camera_io import CameraIntrinsics, PointCloud, RearView, backproject
from .errors import (DegenerateAxisError, EmptyCloudError, MeasurementError, NoValidSlicesError,
                     RenderError)
from .evaluation import AblationConfigSet, EvaluationReport, SamplePair, evaluate, run_ablation
from .slicing import PipelineConfig, StalkEstimate, measure_cloud, measure_stalk

__all__ = [
    "AblationConfigSet", "CameraIntrinsics", "DegenerateAxisError", "EmptyCloudError",
    "EvaluationReport", "MeasurementError", "NoValidSlicesError", "PipelineConfig", "PointCloud",
    "RearView", "RenderError", "SamplePair", "StalkEstimate", "backproject", "evaluate",
    "measure_cloud", "measure_stalk", "run_ablation",
]
