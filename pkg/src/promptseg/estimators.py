"""sklearn-style facade over preprocessing and the promptable segmenter.

These wrappers exist so the pipeline composes with the usual ecosystem
tooling (``get_params``/``set_params``, ``clone``, pipelines).  All the
substance lives in the underlying modules.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .metrics import dsc
from .model import ModelConfig, PromptableNet
from .preprocess import get_preset, percentile_normalize, window_ct
from .propagate import segment_3d
from .training import TrainConfig, samples_from_cases, train
from .validation import as_voxel_grid, check_normalized_grids, check_paired
from .volume import SliceRange, VoxelGrid, middle_slice_index, tight_box_2d


class CTWindowNormalizer(TransformerMixin, BaseEstimator):
    """Stateless CT windowing transformer (fit is a no-op)."""

    def __init__(self, preset="abdomen"):
        self.preset = preset

    def fit(self, X, y=None):
        get_preset(self.preset)  # fail fast on unknown presets
        return self

    def transform(self, X):
        preset = get_preset(self.preset)
        return [window_ct(g if isinstance(g, VoxelGrid) else VoxelGrid(np.asarray(g), (1, 1, 1)), preset) for g in X]


class PercentileNormalizer(TransformerMixin, BaseEstimator):
    """Foreground 0.5-99.5 percentile normalization (MRI/PET route)."""

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        return [
            percentile_normalize(g if isinstance(g, VoxelGrid) else VoxelGrid(np.asarray(g), (1, 1, 1)))
            for g in X
        ]


class BoxPromptSegmenter(BaseEstimator):
    """Trainable box-prompted 3D segmenter with bidirectional propagation.

    ``fit(X, y)`` trains the toy network from scratch on normalized
    volumes and binary masks; ``predict(X, boxes, ranges)`` runs
    propagation from the given prompts.  When prompts are omitted in
    ``score``, they are simulated from the reference masks (tight
    mid-slice box, reference z extent).
    """

    def __init__(self, input_size=64, epochs=200, lr_encoder=3.0e-4, lr_other=5.0e-4,
                 weight_decay=0.0, frames_per_sample=8, memory_capacity=8,
                 box_jitter_px=(0, 10), seed=0):
        self.input_size = input_size
        self.epochs = epochs
        self.lr_encoder = lr_encoder
        self.lr_other = lr_other
        self.weight_decay = weight_decay
        self.frames_per_sample = frames_per_sample
        self.memory_capacity = memory_capacity
        self.box_jitter_px = box_jitter_px
        self.seed = seed

    def _train_config(self):
        return TrainConfig(
            lr_encoder=self.lr_encoder,
            lr_other=self.lr_other,
            weight_decay=self.weight_decay,
            epochs=self.epochs,
            frames_per_sample=self.frames_per_sample,
            box_jitter_px=tuple(self.box_jitter_px),
            seed=self.seed,
        )

    def fit(self, X, y):
        grids, masks = check_paired(X, y)
        config = ModelConfig(input_size=self.input_size, memory_capacity=self.memory_capacity)
        self.model_ = PromptableNet(config, seed=self.seed)
        samples = samples_from_cases([(g, m, "CT") for g, m in zip(grids, masks)])
        self.loss_log_ = train(self.model_, samples, self._train_config())
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("fit the segmenter (or assign model_) before predicting")

    def predict(self, X, boxes=None, ranges=None):
        """Propagate from per-volume box prompts; returns a list of LabelMask."""
        self._check_fitted()
        grids = check_normalized_grids(X)
        if boxes is None:
            raise ValueError("predict needs one BoundingBox2D prompt per volume")
        if len(boxes) != len(grids):
            raise ValueError(f"{len(boxes)} boxes for {len(grids)} volumes")
        if ranges is None:
            ranges = [SliceRange(0, g.dims[2] - 1) for g in grids]
        return [
            segment_3d(g, box, rng, self.model_).mask
            for g, box, rng in zip(grids, boxes, ranges)
        ]

    @staticmethod
    def reference_prompts(masks):
        """Mid-extent tight boxes and z ranges derived from reference masks."""
        boxes, ranges = [], []
        for mask in masks:
            zs = np.where(mask.labels.any(axis=(1, 2)))[0]
            if zs.size == 0:
                raise ValueError("cannot derive a prompt from an empty mask")
            rng = SliceRange(int(zs.min()), int(zs.max()))
            z0 = int(zs[zs.size // 2])
            boxes.append(tight_box_2d(mask.labels[z0], z0))
            ranges.append(rng)
        return boxes, ranges

    def score(self, X, y, boxes=None, ranges=None):
        """Mean 3D DSC against the reference masks."""
        grids, masks = check_paired(X, y)
        if boxes is None:
            boxes, ranges = self.reference_prompts(masks)
        preds = self.predict(grids, boxes=boxes, ranges=ranges)
        return float(np.mean([dsc(p.binary(), m.binary()) for p, m in zip(preds, masks)]))
