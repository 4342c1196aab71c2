"""Point clouds: data model, PLY files, model inputs and synthetic scenes."""
from .cloud import InputFeatures, PointCloud, build_input_features, normalize_xyz
from .ply import PlyError, load_ply, save_ply
from .synth import (
    Background,
    Primitive,
    SceneSpec,
    SceneSpecError,
    generate_scene,
    load_scene_spec,
    make_dataset,
    random_scene_spec,
    save_scene_spec,
)

__all__ = [
    "Background",
    "InputFeatures",
    "PlyError",
    "PointCloud",
    "Primitive",
    "SceneSpec",
    "SceneSpecError",
    "build_input_features",
    "generate_scene",
    "load_ply",
    "load_scene_spec",
    "make_dataset",
    "normalize_xyz",
    "random_scene_spec",
    "save_ply",
    "save_scene_spec",
]
