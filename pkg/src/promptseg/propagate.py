"""Mask propagation: bidirectional 3D from a prompted slice, forward video
propagation with pinned refinements, and the memory-bank eviction policy.

Each direction of a 3D propagation runs on a fresh bank seeded with the
prompt-slice entry, so the backward pass never sees forward-pass slices.
Human-refined slices are emitted verbatim and enter the bank as prompted
(pinned) entries built from the supplied mask rather than a prediction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .model import MemoryBank, MemoryEntry, logits_to_mask, mask_to_logits
from .volume import (
    NORMALIZED_0_255,
    BoundingBox2D,
    LabelMask,
    SliceRange,
    VoxelGrid,
    extract_slice,
)


@dataclass
class PropagationPlan:
    """Serializable description of one 3D propagation."""

    prompt_slice: int
    slice_range: SliceRange
    box: BoundingBox2D = None
    directions: str = "both"  # forward | backward | both
    refined_masks: dict = field(default_factory=dict)  # slice index -> 2D mask

    def __post_init__(self):
        if self.prompt_slice not in self.slice_range:
            raise ValueError(
                f"prompt slice {self.prompt_slice} outside range {self.slice_range}"
            )
        if self.directions not in ("forward", "backward", "both"):
            raise ValueError(f"bad directions {self.directions!r}")
        for z in self.refined_masks:
            if z not in self.slice_range:
                raise ValueError(f"refined slice {z} outside range {self.slice_range}")

    def to_json_dict(self):
        return {
            "prompt_slice": self.prompt_slice,
            "range": [self.slice_range.top, self.slice_range.bottom],
            "box": None
            if self.box is None
            else [self.box.slice_index, self.box.x_min, self.box.y_min, self.box.x_max, self.box.y_max],
            "directions": self.directions,
            "refined_slices": sorted(int(z) for z in self.refined_masks),
        }

    @classmethod
    def from_json_dict(cls, d, refined_masks=None):
        box = d.get("box")
        return cls(
            prompt_slice=int(d["prompt_slice"]),
            slice_range=SliceRange(int(d["range"][0]), int(d["range"][1])),
            box=None if box is None else BoundingBox2D(*[int(v) for v in box]),
            directions=d.get("directions", "both"),
            refined_masks=refined_masks or {},
        )


@dataclass
class PropagationResult:
    mask: LabelMask
    empty_prompt_mask: bool = False  # warning: prompt slice produced no voxels


def bank_insert(bank: MemoryBank, entry: MemoryEntry) -> MemoryBank:
    """Append an entry, then evict if over capacity.

    Eviction order: oldest unprompted first (FIFO); if every entry is
    prompted, the oldest prompted one other than the original prompt-slice
    entry goes.
    """
    if bank.anchor is None and entry.is_prompted:
        bank.anchor = entry
    bank.entries.append(entry)
    if len(bank.entries) > bank.capacity:
        victim = None
        for i, e in enumerate(bank.entries):
            if not e.is_prompted:
                victim = i
                break
        if victim is None:
            for i, e in enumerate(bank.entries):
                if e is not bank.anchor:
                    victim = i
                    break
        if victim is None:  # capacity 1 holding only the anchor
            victim = len(bank.entries) - 1
        bank.entries.pop(victim)
    bank.check()
    return bank


def _check_normalized(volume):
    if volume.intensity_kind != NORMALIZED_0_255:
        raise ValueError("volume must be normalized to [0, 255] before segmentation")


def _refined_lookup(refined_masks, shape2d):
    refined = {}
    for z, m in (refined_masks or {}).items():
        arr = np.asarray(m) != 0
        if arr.shape != shape2d:
            raise ValueError(f"refined mask at slice {z} has shape {arr.shape}, expected {shape2d}")
        refined[int(z)] = arr
    return refined


def _prompted_entry_from_mask(model, frame, mask2d, frame_index):
    """Memory entry for a human-supplied mask (mask, not prediction)."""
    feats = model.encode_image(frame)
    logits = mask_to_logits(mask2d)
    return model.encode_memory(feats.trunk, logits, frame_index=frame_index, is_prompted=True)


def segment_3d(volume: VoxelGrid, box: BoundingBox2D, slice_range: SliceRange, model,
               refined_masks=None, directions="both") -> PropagationResult:
    """Segment the prompted slice, then propagate toward both range ends.

    Each direction starts from a fresh memory bank seeded with the
    prompt-slice entry.  Slices outside the range stay background.  An
    all-background prompt-slice prediction is reported via the result's
    warning flag, and propagation still runs (the target may reappear).
    """
    _check_normalized(volume)
    nx, ny, nz = volume.dims
    slice_range.check_within(nz)
    if box.slice_index not in slice_range:
        raise ValueError(f"box slice {box.slice_index} outside range {slice_range}")
    box.check_within(volume.dims)
    refined = _refined_lookup(refined_masks, (ny, nx))

    out = np.zeros((nz, ny, nx), dtype=np.uint8)
    z0 = box.slice_index
    with ad.no_grad():
        frame0 = np.asarray(extract_slice(volume, z0))
        if z0 in refined:
            mask0 = refined[z0]
            entry0 = _prompted_entry_from_mask(model, frame0, mask0, z0)
        else:
            logits0, _, entry0 = model.forward_frame(frame0, MemoryBank(model.config.memory_capacity),
                                                     prompt=box, frame_index=z0)
            mask0 = logits_to_mask(logits0)
        out[z0] = mask0
        warning = not bool(mask0.any())

        passes = []
        if directions in ("forward", "both"):
            passes.append(range(z0 + 1, slice_range.bottom + 1))
        if directions in ("backward", "both"):
            passes.append(range(z0 - 1, slice_range.top - 1, -1))
        for zs in passes:
            bank = MemoryBank(capacity=model.config.memory_capacity)
            bank_insert(bank, entry0)
            for z in zs:
                frame = np.asarray(extract_slice(volume, z))
                if z in refined:
                    out[z] = refined[z]
                    entry = _prompted_entry_from_mask(model, frame, refined[z], z)
                else:
                    logits, _, entry = model.forward_frame(frame, bank, prompt=None, frame_index=z)
                    out[z] = logits_to_mask(logits)
                bank_insert(bank, entry)

    return PropagationResult(LabelMask(out, volume.spacing), empty_prompt_mask=warning)


def segment_plan(volume, plan: PropagationPlan, model) -> PropagationResult:
    if plan.box is None:
        raise ValueError("plan has no box prompt")
    return segment_3d(volume, plan.box, plan.slice_range, model,
                      refined_masks=plan.refined_masks, directions=plan.directions)


def segment_video(clip: VoxelGrid, first_frame_prompts, refined_masks=None, model=None):
    """Forward-only propagation from first-frame prompts.

    ``first_frame_prompts`` maps object id -> prompt (box on frame 0, or
    points); ``refined_masks`` maps object id -> {frame -> 2D mask}.
    Refined frames are emitted verbatim and pinned in the bank.  Objects
    run independently; returns {object_id: binary LabelMask}.
    """
    _check_normalized(clip)
    nx, ny, nz = clip.dims
    results = {}
    for obj_id, prompt in sorted(first_frame_prompts.items()):
        if isinstance(prompt, BoundingBox2D):
            if prompt.slice_index != 0:
                raise ValueError(
                    f"video prompts must sit on frame 0, object {obj_id} is on {prompt.slice_index}"
                )
            prompt.check_within(clip.dims)
        refined = _refined_lookup((refined_masks or {}).get(obj_id, {}), (ny, nx))
        out = np.zeros((nz, ny, nx), dtype=np.uint8)
        with ad.no_grad():
            bank = MemoryBank(capacity=model.config.memory_capacity)
            for z in range(nz):
                frame = np.asarray(extract_slice(clip, z))
                if z in refined:
                    out[z] = refined[z]
                    entry = _prompted_entry_from_mask(model, frame, refined[z], z)
                elif z == 0:
                    logits, _, entry = model.forward_frame(frame, bank, prompt=prompt, frame_index=0)
                    out[z] = logits_to_mask(logits)
                else:
                    logits, _, entry = model.forward_frame(frame, bank, prompt=None, frame_index=z)
                    out[z] = logits_to_mask(logits)
                bank_insert(bank, entry)
        results[obj_id] = PropagationResult(LabelMask(out, clip.spacing))
    return results


def segment_per_slice_boxes(volume: VoxelGrid, boxes, model) -> LabelMask:
    """Independent 2D segmentation per slice, no memory coupling."""
    _check_normalized(volume)
    nx, ny, nz = volume.dims
    out = np.zeros((nz, ny, nx), dtype=np.uint8)
    with ad.no_grad():
        for z, box in sorted(boxes.items()):
            if box.slice_index != z:
                raise ValueError(f"box for slice {z} carries slice_index {box.slice_index}")
            box.check_within(volume.dims)
            frame = np.asarray(extract_slice(volume, z))
            logits, _, _ = model.forward_frame(
                frame, MemoryBank(capacity=model.config.memory_capacity), prompt=box, frame_index=z
            )
            out[z] = logits_to_mask(logits)
    return LabelMask(out, volume.spacing)
