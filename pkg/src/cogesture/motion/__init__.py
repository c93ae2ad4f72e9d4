from .audio import extract_audio_features
from .corpus import CorpusConfig, CorpusItem, SyntheticCorpus, generate_corpus, render_item, style_transform
from .io import load_motion, save_motion
from .rotation import matrix_from_rot6d, rot6d_from_matrix
from .skeleton import DEFAULT_PARTITION, TOY_SKELETON, Skeleton, toy_skeleton
from .types import AudioFeatures, Motion, Pose, Transcript

__all__ = [
    "AudioFeatures", "CorpusConfig", "CorpusItem", "DEFAULT_PARTITION", "Motion", "Pose",
    "Skeleton", "SyntheticCorpus", "TOY_SKELETON", "Transcript", "extract_audio_features",
    "generate_corpus", "load_motion", "matrix_from_rot6d", "render_item", "rot6d_from_matrix",
    "save_motion", "style_transform", "toy_skeleton",
]
