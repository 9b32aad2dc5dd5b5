"""Two-stage diffusion for audio-driven talking heads: audio to landmarks, landmarks to images."""

from .a2l import A2LDiffusion
from .config import ExperimentConfig
from .geometry import LandmarkNormalizer, LandmarkSequence, RigidPose
from .l2i import L2IDiffusion, PatchCodec
from .synthdata import ClipDataset, GeneratorConfig, generate_clip, load_clip, save_clip

__version__ = "0.1.0"

__all__ = [
    "A2LDiffusion",
    "ClipDataset",
    "ExperimentConfig",
    "GeneratorConfig",
    "L2IDiffusion",
    "LandmarkNormalizer",
    "LandmarkSequence",
    "PatchCodec",
    "RigidPose",
    "generate_clip",
    "load_clip",
    "save_clip",
]
