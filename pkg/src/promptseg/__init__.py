"""Promptable, memory-conditioned 3D medical image and video segmentation
with preprocessing, surface-distance metrics, a human-in-the-loop
annotation engine, an HTTP annotation server, and a batch CLI."""

from .volume import (
    BoundingBox2D,
    BoundingBox3D,
    LabelMask,
    SliceRange,
    VoxelGrid,
    extract_slice,
    insert_slice,
    middle_slice_index,
)
from .volume_io import read_nifti1, write_nifti1, read_nifti1_mask, write_nifti1_mask
from .preprocess import WindowPreset, WINDOW_PRESETS, enforce_axial_spacing, percentile_normalize, resample, window_ct
from .model import MemoryBank, MemoryEntry, ModelConfig, PromptableNet, load_checkpoint, save_checkpoint
from .propagate import PropagationPlan, PropagationResult, bank_insert, segment_3d, segment_per_slice_boxes, segment_video
from .metrics import MetricReport, dsc, nsd, video_metrics, wilcoxon_signed_rank
from .training import TrainConfig, adamw_step, augment, dice_loss, fine_tune, focal_loss, simulate_box_prompt, total_loss, train, weighted_sampler
from .estimators import BoxPromptSegmenter, CTWindowNormalizer, PercentileNormalizer

__version__ = "0.1.0"

__all__ = [
    "BoundingBox2D", "BoundingBox3D", "LabelMask", "SliceRange", "VoxelGrid",
    "extract_slice", "insert_slice", "middle_slice_index",
    "read_nifti1", "write_nifti1", "read_nifti1_mask", "write_nifti1_mask",
    "WindowPreset", "WINDOW_PRESETS", "enforce_axial_spacing",
    "percentile_normalize", "resample", "window_ct",
    "MemoryBank", "MemoryEntry", "ModelConfig", "PromptableNet",
    "load_checkpoint", "save_checkpoint",
    "PropagationPlan", "PropagationResult", "bank_insert",
    "segment_3d", "segment_per_slice_boxes", "segment_video",
    "MetricReport", "dsc", "nsd", "video_metrics", "wilcoxon_signed_rank",
    "TrainConfig", "adamw_step", "augment", "dice_loss", "fine_tune",
    "focal_loss", "simulate_box_prompt", "total_loss", "train", "weighted_sampler",
    "BoxPromptSegmenter", "CTWindowNormalizer", "PercentileNormalizer",
    "__version__",
]
