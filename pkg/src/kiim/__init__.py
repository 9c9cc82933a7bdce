"""Knowledge-informed irrigation-method segmentation."""

from .core import (
    CANONICAL_BANDS,
    CROP_GROUPS,
    IRRIGATION_CLASSES,
    ClassVocab,
    DatasetManifest,
    ExperimentConfig,
    Sample,
    SampleValidationError,
    load_sample,
    one_hot_crop,
    save_sample,
    split_dataset,
)

__version__ = "0.1.0"
