from .checkpoint import load_checkpoint, read_checkpoint, save_checkpoint
from .imageio import read_ppm, write_ppm
from .scenes import DatasetBundle, SceneDataset, load_split, make_dataset, parse_caption, render_scenes, save_dataset

__all__ = [
    "DatasetBundle",
    "SceneDataset",
    "load_checkpoint",
    "load_split",
    "make_dataset",
    "parse_caption",
    "read_checkpoint",
    "read_ppm",
    "render_scenes",
    "save_checkpoint",
    "save_dataset",
    "write_ppm",
]
