"""Losses, optimizer, prompt simulation, augmentation, sampling, and the
round-based fine-tuning schedule.

The training unit is a window of consecutive slices/frames (default 8,
tied to the memory capacity) with a simulated box prompt on the first
frame and losses summed over every frame.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import autodiff as ad
from .autodiff import Tensor
from .model import MemoryBank, PromptableNet, logits_to_mask, save_checkpoint
from .propagate import bank_insert
from .volume import BoundingBox2D, tight_box_2d


@dataclass
class TrainConfig:
    lr_encoder: float = 3.0e-5
    lr_other: float = 5.0e-5
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 0.01
    focal_weight: float = 20.0
    dice_weight: float = 1.0
    iou_weight: float = 1.0
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    dice_smooth: float = 1.0
    epochs: int = 10
    batch_size: int = 1
    frames_per_sample: int = 8
    modality_sampling: dict = field(
        default_factory=lambda: {"MRI": 3.0, "PET": 40.0, "video": 40.0, "CT": 1.0}
    )
    box_jitter_px: tuple = (0, 10)
    seed: int = 0

    def __post_init__(self):
        if self.focal_weight <= 0 or self.dice_weight <= 0:
            raise ValueError("loss weights must be positive")
        if self.frames_per_sample < 1:
            raise ValueError("frames_per_sample must be >= 1")
        if self.box_jitter_px[0] < 0 or self.box_jitter_px[1] < self.box_jitter_px[0]:
            raise ValueError(f"bad jitter bounds {self.box_jitter_px}")


# ---------------------------------------------------------------------------
# losses


def _check_binary_target(target):
    t = np.asarray(target)
    if not np.isin(t, (0, 1)).all():
        raise ValueError("target mask must be binary {0, 1}")
    return t.astype(np.float64)


def focal_loss(logits, target_mask, gamma=2.0, alpha=0.25):
    """Mean focal BCE; stabilized through softplus so saturated logits stay finite."""
    t = Tensor(_check_binary_target(target_mask).astype(
        np.float64 if logits.dtype == np.float64 else np.float32))
    if t.shape != logits.shape:
        raise ValueError(f"target shape {t.shape} != logits shape {logits.shape}")
    p = ad.sigmoid(logits)
    pos = ad.mul(ad.mul(ad.pow_const(ad.sub(1.0, p), gamma), alpha), ad.softplus(ad.neg(logits)))
    neg = ad.mul(ad.mul(ad.pow_const(p, gamma), 1.0 - alpha), ad.softplus(logits))
    per_pixel = ad.add(ad.mul(t, pos), ad.mul(ad.sub(1.0, t), neg))
    return ad.tmean(per_pixel)


def dice_loss(logits, target_mask, smooth=1.0):
    """1 - (2*sum(p*t) + eps) / (sum(p) + sum(t) + eps), p = sigmoid(logits)."""
    t = Tensor(_check_binary_target(target_mask).astype(
        np.float64 if logits.dtype == np.float64 else np.float32))
    if t.shape != logits.shape:
        raise ValueError(f"target shape {t.shape} != logits shape {logits.shape}")
    p = ad.sigmoid(logits)
    num = ad.add(ad.mul(ad.tsum(ad.mul(p, t)), 2.0), smooth)
    den = ad.add(ad.add(ad.tsum(p), ad.tsum(t)), smooth)
    return ad.sub(1.0, ad.div(num, den))


def true_iou(logits, target_mask) -> float:
    """IoU of the binarized prediction vs the target (a constant, no grad)."""
    pred = logits_to_mask(logits)
    t = np.asarray(target_mask) != 0
    union = np.logical_or(pred, t).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, t).sum() / union)


def total_loss(logits, target_mask, iou_estimate, config: TrainConfig):
    """focal*20 + dice*1 + iou regression (L2, weight 1 by default)."""
    focal = focal_loss(logits, target_mask, config.focal_gamma, config.focal_alpha)
    dice = dice_loss(logits, target_mask, config.dice_smooth)
    loss = ad.add(
        ad.mul(focal, config.focal_weight), ad.mul(dice, config.dice_weight)
    )
    if iou_estimate is not None and config.iou_weight > 0:
        err = ad.sub(iou_estimate, true_iou(logits, target_mask))
        loss = ad.add(loss, ad.mul(ad.mul(err, err), config.iou_weight))
    return loss, float(focal.data), float(dice.data)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamWState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params, state: AdamWState, config: TrainConfig, lr_scale=1.0, eps=1e-8):
    """Decoupled-weight-decay Adam with per-group learning rates.

    Parameters named ``encoder.*`` use lr_encoder, everything else
    lr_other.  Parameters without a gradient this step are skipped.
    """
    b1, b2 = config.betas
    state.step += 1
    t = state.step
    for name in sorted(params):
        p = params[name]
        if p.grad is None:
            continue
        g = p.grad
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient in parameter {name!r}")
        lr = (config.lr_encoder if name.startswith("encoder.") else config.lr_other) * lr_scale
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name] = m
        state.v[name] = v
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        p.data = p.data - lr * (m_hat / (np.sqrt(v_hat) + eps)) - lr * config.weight_decay * p.data
    return state


# ---------------------------------------------------------------------------
# prompt simulation and augmentation


def simulate_box_prompt(ref_mask_slice, rng, jitter=(0, 10), slice_index=0) -> BoundingBox2D:
    """Tight box around the mask, each edge shifted in or out by a uniform
    integer offset, clamped to the image and re-validated."""
    mask = np.asarray(ref_mask_slice) != 0
    if not mask.any():
        raise ValueError("cannot simulate a box prompt from an empty mask")
    ny, nx = mask.shape
    tight = tight_box_2d(mask, slice_index)
    lo, hi = int(jitter[0]), int(jitter[1])

    def shifted(edge, sign_out):
        magnitude = int(rng.integers(lo, hi + 1))
        direction = 1 if rng.integers(0, 2) else -1
        return edge + sign_out * direction * magnitude

    x_min = max(0, min(shifted(tight.x_min, -1), nx - 1))
    x_max = max(1, min(shifted(tight.x_max, +1), nx))
    y_min = max(0, min(shifted(tight.y_min, -1), ny - 1))
    y_max = max(1, min(shifted(tight.y_max, +1), ny))
    if x_min >= x_max:
        x_min, x_max = tight.x_min, tight.x_max
    if y_min >= y_max:
        y_min, y_max = tight.y_min, tight.y_max
    return BoundingBox2D(slice_index, x_min, y_min, x_max, y_max)


@dataclass
class TrainSample:
    frames: np.ndarray  # (T, H, W) float32 in [0, 255]
    masks: np.ndarray  # (T, H, W) {0,1}
    modality: str = "CT"
    case_id: str = ""


@dataclass
class AugmentParams:
    p_flip: float = 0.5
    p_affine: float = 1.0
    p_color: float = 1.0
    max_rotate_deg: float = 15.0
    scale_range: tuple = (0.9, 1.1)
    max_translate_frac: float = 0.05
    color_frac: float = 0.2
    temporal_strides: tuple = (1, 2, 4)


def _affine_matrices(h, w, angle_deg, scale, tx, ty):
    """Output->input coordinate map about the image center."""
    theta = math.radians(angle_deg)
    rot = np.array(
        [[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]]
    )
    m = rot * scale
    m_inv = np.linalg.inv(m)
    center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    offset = center - m_inv @ (center + np.array([ty, tx]))
    return m_inv, offset


def augment(sample: TrainSample, rng, params: AugmentParams = None) -> TrainSample:
    """Shared-geometry augmentation of one sample.

    The same flip/affine applies to every frame and to the masks (masks use
    nearest-neighbor); intensity jitter touches only the frames.  Video
    samples additionally subsample frames by a random temporal stride.
    """
    params = params or AugmentParams()
    frames = sample.frames.copy()
    masks = sample.masks.copy()

    if sample.modality == "video" and len(params.temporal_strides) > 0:
        stride = int(params.temporal_strides[rng.integers(0, len(params.temporal_strides))])
        frames = frames[::stride]
        masks = masks[::stride]

    if rng.random() < params.p_flip:
        frames = frames[:, :, ::-1].copy()
        masks = masks[:, :, ::-1].copy()

    if rng.random() < params.p_affine:
        h, w = frames.shape[1:]
        angle = rng.uniform(-params.max_rotate_deg, params.max_rotate_deg)
        scale = rng.uniform(*params.scale_range)
        tx = rng.uniform(-params.max_translate_frac, params.max_translate_frac) * w
        ty = rng.uniform(-params.max_translate_frac, params.max_translate_frac) * h
        m_inv, offset = _affine_matrices(h, w, angle, scale, tx, ty)
        for t in range(frames.shape[0]):
            frames[t] = ndimage.affine_transform(
                frames[t], m_inv, offset=offset, order=1, mode="constant", cval=0.0
            )
            masks[t] = ndimage.affine_transform(
                masks[t], m_inv, offset=offset, order=0, mode="constant", cval=0
            )

    if rng.random() < params.p_color:
        contrast = 1.0 + rng.uniform(-params.color_frac, params.color_frac)
        brightness = rng.uniform(-params.color_frac, params.color_frac) * 255.0
        frames = np.clip((frames - 127.5) * contrast + 127.5 + brightness, 0.0, 255.0)

    return TrainSample(frames.astype(np.float32), masks, sample.modality, sample.case_id)


def weighted_sampler(dataset_index, modality_sampling, rng, n_draws):
    """Sample ids with replacement, weighted by the modality factors.

    ``dataset_index`` maps sample id -> modality.  A zero-weight modality
    is never drawn.
    """
    ids = sorted(dataset_index)
    weights = np.array(
        [float(modality_sampling.get(dataset_index[i], 1.0)) for i in ids], dtype=np.float64
    )
    if weights.sum() <= 0:
        raise ValueError("all sampling weights are zero")
    probs = weights / weights.sum()
    chosen = rng.choice(len(ids), size=n_draws, replace=True, p=probs)
    return [ids[c] for c in chosen]


# ---------------------------------------------------------------------------
# training loops


def _pick_window(sample: TrainSample, frames_per_sample, rng):
    """A consecutive window whose first frame has a nonempty mask.

    Windows reaching past the last frame are truncated, so objects living
    near the volume end remain usable prompts.
    """
    t_total = sample.frames.shape[0]
    starts = [s for s in range(t_total) if sample.masks[s].any()]
    if not starts:
        raise ValueError(f"sample {sample.case_id!r} has no nonempty starting frame")
    start = starts[int(rng.integers(0, len(starts)))]
    stop = min(start + frames_per_sample, t_total)
    return sample.frames[start:stop], sample.masks[start:stop]


def train_step(model: PromptableNet, sample: TrainSample, config: TrainConfig, rng):
    """One unrolled window: prompt on frame 0, memory for the rest."""
    frames, masks = _pick_window(sample, config.frames_per_sample, rng)
    bank = MemoryBank(capacity=model.config.memory_capacity)
    losses = []
    focal_sum = dice_sum = 0.0
    for t in range(frames.shape[0]):
        if t == 0:
            prompt = simulate_box_prompt(masks[0], rng, config.box_jitter_px, slice_index=0)
        else:
            prompt = None
        logits, iou, entry = model.forward_frame(frames[t], bank, prompt=prompt, frame_index=t)
        bank_insert(bank, entry)
        loss_t, focal_v, dice_v = total_loss(logits, masks[t], iou, config)
        losses.append(loss_t)
        focal_sum += focal_v
        dice_sum += dice_v
    loss = losses[0]
    for extra in losses[1:]:
        loss = ad.add(loss, extra)
    model.zero_grads()
    ad.backward(loss)
    return float(loss.data), focal_sum, dice_sum


def train(model: PromptableNet, dataset, config: TrainConfig, lr_scale=1.0,
          checkpoint_dir=None, log_path=None, state=None, epochs=None):
    """Epoch loop with modality-weighted sampling and per-epoch checkpoints.

    ``dataset`` is a list of TrainSample.  Returns the loss log, one row
    per step: (epoch, step, focal, dice, total).
    """
    if not dataset:
        raise ValueError("dataset is empty")
    rng = np.random.default_rng(config.seed)
    state = state or AdamWState()
    epochs = config.epochs if epochs is None else epochs
    index = {i: s.modality for i, s in enumerate(dataset)}
    log = []
    for epoch in range(epochs):
        order = weighted_sampler(index, config.modality_sampling, rng, n_draws=len(dataset))
        for step, sample_id in enumerate(order):
            total, focal_v, dice_v = train_step(model, dataset[sample_id], config, rng)
            state = adamw_step(model.params, state, config, lr_scale=lr_scale)
            log.append((epoch, step, focal_v, dice_v, total))
        if checkpoint_dir is not None:
            path = Path(checkpoint_dir) / f"epoch{epoch:04d}.ckpt"
            save_checkpoint(model, path)
    if log_path is not None:
        write_loss_log(log, log_path)
    return log


ROUND_EPOCHS = {2: 6, 3: 15}  # fine-tuning schedule per annotation round


def fine_tune(model, dataset, round_index, config: TrainConfig,
              round_schedule=None, checkpoint_dir=None, log_path=None):
    """Fine-tune at half the base learning rate for the round's epoch count."""
    schedule = ROUND_EPOCHS if round_schedule is None else round_schedule
    if round_index not in schedule:
        raise ValueError(f"round {round_index} not in schedule {sorted(schedule)}")
    return train(
        model,
        dataset,
        config,
        lr_scale=0.5,
        checkpoint_dir=checkpoint_dir,
        log_path=log_path,
        epochs=schedule[round_index],
    )


def write_loss_log(log, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "step", "focal", "dice", "total"])
        for row in log:
            writer.writerow(row)


def overfit_config(**overrides) -> TrainConfig:
    """Aggressive from-scratch settings for the desk-scale overfit protocol.

    The TrainConfig default learning rates are fine-tuning rates; training
    a fresh toy model needs larger steps.
    """
    base = dict(lr_encoder=6.0e-4, lr_other=1.0e-3, weight_decay=0.0, epochs=200)
    base.update(overrides)
    return TrainConfig(**base)


def samples_from_cases(cases, object_id=None):
    """Adapt (VoxelGrid, LabelMask, modality) cases to TrainSamples."""
    out = []
    for i, (grid, mask, modality) in enumerate(cases):
        binary = mask.binary(object_id).astype(np.uint8)
        out.append(
            TrainSample(
                frames=np.asarray(grid.values, dtype=np.float32),
                masks=binary,
                modality=modality,
                case_id=f"case{i:03d}",
            )
        )
    return out
