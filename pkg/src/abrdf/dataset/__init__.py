"""Dataset ingestion, ray batching and synthetic oracle scenes."""
from abrdf.dataset.scene import RayBatch, SceneDataset, ViewData, load_dataset, sample_ray_batch
from abrdf.dataset.synthetic import (SyntheticScene, camera_ring, generate_synthetic, light_truth,
                                     scene_from_dataset, view_lights, view_truth)

__all__ = [
    "RayBatch",
    "SceneDataset",
    "SyntheticScene",
    "ViewData",
    "camera_ring",
    "generate_synthetic",
    "light_truth",
    "load_dataset",
    "sample_ray_batch",
    "scene_from_dataset",
    "view_lights",
    "view_truth",
]
