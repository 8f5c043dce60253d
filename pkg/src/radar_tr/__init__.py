"""Radar-only teach-and-repeat localization.

A teach pass builds a keyframe map from spinning-radar scans; a repeat pass
localizes against it by registering each scan to nearby map keyframes and a
short window of recent live frames.
"""

from .config import PipelineConfig, load_config
from .geometry import Pose2, Velocity

__all__ = ["PipelineConfig", "Pose2", "Velocity", "load_config"]
__version__ = "0.1.0"
