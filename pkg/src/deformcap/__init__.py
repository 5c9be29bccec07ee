"""deformcap: multi-view hand / deformable-object interaction reconstruction."""

from .scene_io import (CameraParams, TriMesh, KeypointObservation, MaskImage,
                       SequenceManifest)
from .hand_capture import HandModel, HandPose, Skeleton3D
from .object_pose import PoseSample, GAConfig
from .contact import AabbTree, PenetrationPair, ContactTargets
from .deform_solver import DeformConfig, DeformGraph, SilhouetteCorrespondence

__version__ = "0.1.0"

__all__ = [
    "CameraParams", "TriMesh", "KeypointObservation", "MaskImage",
    "SequenceManifest", "HandModel", "HandPose", "Skeleton3D", "PoseSample",
    "GAConfig", "AabbTree", "PenetrationPair", "ContactTargets",
    "DeformConfig", "DeformGraph", "SilhouetteCorrespondence", "__version__",
]
