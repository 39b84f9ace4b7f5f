from .augment import augment
from .split import SplitManifest, build_split, read_manifest, small_lesion_images, write_manifest
from .synthetic import SynthSpec, generate_corpus, generate_synthetic_volume, lesion_sizes
from .volume import Volume, dataset_mean, normalize_volume, read_volume, write_volume
from .windows import (
    SliceWindow,
    WindowSampler,
    extract_window,
    iter_windows,
    mean_pad,
    sample_training_window,
    strip_pad,
)

__all__ = [
    "SliceWindow",
    "SplitManifest",
    "SynthSpec",
    "Volume",
    "WindowSampler",
    "augment",
    "build_split",
    "dataset_mean",
    "extract_window",
    "generate_corpus",
    "generate_synthetic_volume",
    "iter_windows",
    "lesion_sizes",
    "mean_pad",
    "normalize_volume",
    "read_manifest",
    "read_volume",
    "sample_training_window",
    "small_lesion_images",
    "strip_pad",
    "write_manifest",
    "write_volume",
]
