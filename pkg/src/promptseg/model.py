"""Toy-scale promptable segmentation network with streaming memory.

The network follows the usual four-part split: a hierarchical image
encoder with windowed/global attention and an FPN neck, a prompt encoder
for box/point prompts, a memory-attention module that conditions the
current frame on a bounded bank of past-frame entries, and a two-way
transformer mask decoder with an IoU estimation head.  A memory encoder
fuses each frame's features with its predicted mask into a bank entry.

Everything runs on the in-package autodiff tensors; weights live in a
flat name -> Tensor dict split into an ``encoder.*`` group and the rest
(the two optimizer learning-rate groups).
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .volume import NORMALIZED_0_255, BoundingBox2D

CHECKPOINT_MAGIC = b"PCKP"


@dataclass(frozen=True)
class ModelConfig:
    input_size: int = 64
    patch_size: int = 4
    stage_blocks: tuple = (1, 1, 2, 1)
    stage_dims: tuple = (24, 32, 48, 64)
    global_attention_layers: tuple = (2, 3)
    window_size: int = 4
    neck_dim: int = 48
    num_heads: int = 4
    memory_layers: int = 2
    memory_dim: int = 32
    memory_capacity: int = 8
    decoder_layers: int = 2
    decoder_output_stride: int = 4
    mlp_ratio: float = 2.0
    rope_theta: float = 10000.0
    rope_grid: tuple = None  # defaults to the stride-16 trunk grid

    def __post_init__(self):
        if self.input_size % (self.patch_size * 8) != 0:
            raise ValueError(
                f"input_size {self.input_size} must divide by patch_size*8 = {self.patch_size * 8}"
            )
        total = sum(self.stage_blocks)
        if not set(self.global_attention_layers) <= set(range(total)):
            raise ValueError(
                f"global_attention_layers {self.global_attention_layers} outside 0..{total - 1}"
            )
        if len(self.stage_blocks) != 4 or len(self.stage_dims) != 4:
            raise ValueError("stage_blocks and stage_dims must have 4 entries")
        if self.memory_capacity < 1:
            raise ValueError("memory_capacity must be >= 1")
        if self.neck_dim % self.num_heads or (self.neck_dim // self.num_heads) % 4:
            raise ValueError("neck_dim / num_heads must be a multiple of 4 (rope pairs)")
        if any(d % self.num_heads for d in self.stage_dims):
            raise ValueError("stage_dims must divide num_heads")
        if self.rope_grid is None:
            g = self.input_size // (self.patch_size * 4)
            object.__setattr__(self, "rope_grid", (g, g))
        if self.decoder_output_stride != self.patch_size:
            raise ValueError("decoder_output_stride must equal patch_size in this architecture")

    @property
    def trunk_grid(self):
        """Token grid of the stride-16 feature map (memory attention)."""
        g = self.input_size // (self.patch_size * 4)
        return (g, g)

    def to_json_dict(self):
        d = asdict(self)
        for key in ("stage_blocks", "stage_dims", "global_attention_layers", "rope_grid"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_json_dict(cls, d):
        d = dict(d)
        for key in ("stage_blocks", "stage_dims", "global_attention_layers", "rope_grid"):
            if key in d and d[key] is not None:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass(frozen=True)
class PointPrompt:
    slice_index: int
    x: float
    y: float
    positive: bool = True


@dataclass
class MemoryEntry:
    frame_index: int
    spatial_features: Tensor  # (trunk tokens, memory_dim)
    is_prompted: bool


@dataclass
class MemoryBank:
    """Capacity-bounded, insertion-ordered store of frame memories.

    Eviction is applied by the propagation policy; the bank itself only
    enforces the capacity invariant.
    """

    capacity: int
    entries: list = field(default_factory=list)
    anchor: MemoryEntry = None  # the original prompt-frame entry, never evicted

    def __post_init__(self):
        if self.capacity < 1:
            raise ValueError("memory bank capacity must be >= 1")

    def __len__(self):
        return len(self.entries)

    def check(self):
        assert len(self.entries) <= self.capacity, "memory bank over capacity"


@dataclass
class ImageFeatures:
    """Per-stage token features plus the FPN-fused maps."""

    stage_tokens: list  # [(N_i, stage_dim_i) Tensor] strides 4/8/16/32
    fpn: dict  # stride -> (H, W, neck_dim) Tensor
    trunk: Tensor  # (N16, neck_dim), flattened fpn[16]


def logits_to_mask(logits) -> np.ndarray:
    """Binarization rule: foreground where logits > 0 (sigmoid 0.5)."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return data > 0


def mask_to_logits(mask, magnitude=12.0) -> np.ndarray:
    """Saturated logits representing a given binary mask."""
    m = np.asarray(mask, dtype=np.float32)
    return (m * 2.0 - 1.0) * magnitude


def _sinusoidal_xy(x_norm, y_norm, dim):
    """Fixed sinusoidal encoding of normalized (x, y) in [0, 1]^2."""
    if dim % 4:
        raise ValueError(f"prompt embedding dim {dim} must divide by 4")
    n = dim // 4
    freqs = (2.0 ** np.arange(n)) * math.pi
    out = np.empty(dim, dtype=np.float32)
    out[0::4] = np.sin(freqs * x_norm)
    out[1::4] = np.cos(freqs * x_norm)
    out[2::4] = np.sin(freqs * y_norm)
    out[3::4] = np.cos(freqs * y_norm)
    return out


class PromptableNet:
    """Weights plus the forward graph builders for every network part."""

    def __init__(self, config: ModelConfig = None, seed: int = 0):
        self.config = config or ModelConfig()
        self.seed = seed
        self.params: dict[str, Tensor] = {}
        self.checkpoint_id = f"untrained-seed{seed}"
        self._rng = np.random.default_rng(seed)
        self._build_params()

    # -- parameter construction ------------------------------------------

    def _weight(self, name, din, dout):
        scale = math.sqrt(2.0 / (din + dout))
        w = self._rng.normal(0.0, scale, size=(din, dout)).astype(np.float32)
        self.params[name + ".w"] = Tensor(w, requires_grad=True)
        self.params[name + ".b"] = Tensor(np.zeros(dout, dtype=np.float32), requires_grad=True)

    def _ln(self, name, dim):
        self.params[name + ".g"] = Tensor(np.ones(dim, dtype=np.float32), requires_grad=True)
        self.params[name + ".b"] = Tensor(np.zeros(dim, dtype=np.float32), requires_grad=True)

    def _vec(self, name, dim, scale=0.02):
        v = self._rng.normal(0.0, scale, size=(dim,)).astype(np.float32)
        self.params[name] = Tensor(v, requires_grad=True)

    def _attn_params(self, prefix, dim, kv_dim=None):
        kv_dim = dim if kv_dim is None else kv_dim
        self._weight(prefix + ".q", dim, dim)
        self._weight(prefix + ".k", kv_dim, dim)
        self._weight(prefix + ".v", kv_dim, dim)
        self._weight(prefix + ".o", dim, dim)

    def _block_params(self, prefix, dim):
        self._ln(prefix + ".ln1", dim)
        self._attn_params(prefix + ".attn", dim)
        self._ln(prefix + ".ln2", dim)
        hidden = int(dim * self.config.mlp_ratio)
        self._weight(prefix + ".mlp1", dim, hidden)
        self._weight(prefix + ".mlp2", hidden, dim)

    def _build_params(self):
        cfg = self.config
        p2 = cfg.patch_size * cfg.patch_size
        self._weight("encoder.patch", p2, cfg.stage_dims[0])
        g1 = cfg.input_size // cfg.patch_size
        self.params["encoder.pos"] = Tensor(
            self._rng.normal(0, 0.02, size=(g1 * g1, cfg.stage_dims[0])).astype(np.float32),
            requires_grad=True,
        )
        layer = 0
        for stage, blocks in enumerate(cfg.stage_blocks):
            for _ in range(blocks):
                self._block_params(f"encoder.s{stage}.b{layer}", cfg.stage_dims[stage])
                layer += 1
            if stage < 3:
                self._weight(f"encoder.down{stage}", cfg.stage_dims[stage], cfg.stage_dims[stage + 1])
        for stage in range(4):
            self._weight(f"encoder.fpn.lat{stage}", cfg.stage_dims[stage], cfg.neck_dim)
        self._ln("encoder.fpn.ln", cfg.neck_dim)

        self._vec("prompt.corner_tl", cfg.neck_dim)
        self._vec("prompt.corner_br", cfg.neck_dim)
        self._vec("prompt.point_pos", cfg.neck_dim)
        self._vec("prompt.point_neg", cfg.neck_dim)

        for i in range(cfg.memory_layers):
            p = f"memory.layer{i}"
            self._ln(p + ".ln1", cfg.neck_dim)
            self._attn_params(p + ".self", cfg.neck_dim)
            self._ln(p + ".ln2", cfg.neck_dim)
            self._attn_params(p + ".cross", cfg.neck_dim, kv_dim=cfg.memory_dim)
            self._ln(p + ".ln3", cfg.neck_dim)
            hidden = int(cfg.neck_dim * cfg.mlp_ratio)
            self._weight(p + ".mlp1", cfg.neck_dim, hidden)
            self._weight(p + ".mlp2", hidden, cfg.neck_dim)

        self._vec("decoder.token_mask", cfg.neck_dim)
        self._vec("decoder.token_iou", cfg.neck_dim)
        for i in range(cfg.decoder_layers):
            p = f"decoder.layer{i}"
            self._ln(p + ".ln_t", cfg.neck_dim)
            self._attn_params(p + ".t_self", cfg.neck_dim)
            self._ln(p + ".ln_t2i", cfg.neck_dim)
            self._attn_params(p + ".t2i", cfg.neck_dim)
            self._ln(p + ".ln_i2t", cfg.neck_dim)
            self._attn_params(p + ".i2t", cfg.neck_dim)
            self._ln(p + ".ln_mlp", cfg.neck_dim)
            hidden = int(cfg.neck_dim * cfg.mlp_ratio)
            self._weight(p + ".mlp1", cfg.neck_dim, hidden)
            self._weight(p + ".mlp2", hidden, cfg.neck_dim)
        self._ln("decoder.final_ln", cfg.neck_dim)
        self._attn_params("decoder.final_t2i", cfg.neck_dim)
        self._weight("decoder.up1", cfg.neck_dim, cfg.neck_dim)
        self._weight("decoder.up2", cfg.neck_dim, cfg.neck_dim)
        half = cfg.neck_dim // 2
        self._weight("decoder.pix", cfg.neck_dim, half)
        self._weight("decoder.mask_mlp1", cfg.neck_dim, cfg.neck_dim)
        self._weight("decoder.mask_mlp2", cfg.neck_dim, half)
        self._weight("decoder.iou_mlp1", cfg.neck_dim, cfg.neck_dim)
        self._weight("decoder.iou_mlp2", cfg.neck_dim, 1)

        self._weight("memenc.fuse1", cfg.neck_dim + 1, cfg.memory_dim)
        self._weight("memenc.fuse2", cfg.memory_dim, cfg.memory_dim)

    # -- small graph helpers ---------------------------------------------

    def _linear(self, x, name):
        return ad.add(ad.matmul(x, self.params[name + ".w"]), self.params[name + ".b"])

    def _layernorm(self, x, name):
        return ad.add(ad.mul(ad.layernorm(x), self.params[name + ".g"]), self.params[name + ".b"])

    def _split_heads(self, x, heads):
        if x.ndim == 2:
            n, d = x.shape
            return ad.transpose(ad.reshape(x, (n, heads, d // heads)), (1, 0, 2))
        b, n, d = x.shape
        return ad.transpose(ad.reshape(x, (b, n, heads, d // heads)), (0, 2, 1, 3))

    def _merge_heads(self, x):
        if x.ndim == 3:
            h, n, dh = x.shape
            return ad.reshape(ad.transpose(x, (1, 0, 2)), (n, h * dh))
        b, h, n, dh = x.shape
        return ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (b, n, h * dh))

    def _mha(self, x, prefix, kv=None, rope_grid=None):
        """Multi-head attention; ``kv`` switches to cross-attention."""
        heads = self.config.num_heads
        src = x if kv is None else kv
        q = self._split_heads(self._linear(x, prefix + ".q"), heads)
        k = self._split_heads(self._linear(src, prefix + ".k"), heads)
        v = self._split_heads(self._linear(src, prefix + ".v"), heads)
        if rope_grid is not None:
            gh, gw = rope_grid
            q = ad.rope2d(q, gh, gw, self.config.rope_theta)
            k = ad.rope2d(k, gh, gw, self.config.rope_theta)
        out = self._merge_heads(ad.attention(q, k, v))
        return self._linear(out, prefix + ".o")

    def _mlp(self, x, prefix):
        return self._linear(ad.gelu(self._linear(x, prefix + "1")), prefix + "2")

    def _window_partition(self, x, grid, w):
        h, width = grid
        c = x.shape[-1]
        x = ad.reshape(x, (h // w, w, width // w, w, c))
        x = ad.transpose(x, (0, 2, 1, 3, 4))
        return ad.reshape(x, ((h // w) * (width // w), w * w, c))

    def _window_merge(self, x, grid, w):
        h, width = grid
        c = x.shape[-1]
        x = ad.reshape(x, (h // w, width // w, w, w, c))
        x = ad.transpose(x, (0, 2, 1, 3, 4))
        return ad.reshape(x, (h * width, c))

    def _encoder_block(self, x, prefix, grid, is_global):
        # grids no larger than one window fall back to full attention
        w = self.config.window_size
        windowed = (
            not is_global
            and grid[0] % w == 0
            and grid[1] % w == 0
            and (grid[0] > w or grid[1] > w)
        )
        y = self._layernorm(x, prefix + ".ln1")
        if windowed:
            y = self._window_partition(y, grid, w)
            y = self._mha(y, prefix + ".attn")
            y = self._window_merge(y, grid, w)
        else:
            y = self._mha(y, prefix + ".attn")
        x = ad.add(x, y)
        return ad.add(x, self._mlp(self._layernorm(x, prefix + ".ln2"), prefix + ".mlp"))

    # -- network parts -----------------------------------------------------

    def encode_image(self, frame: np.ndarray) -> ImageFeatures:
        """Multiscale features for one (input_size, input_size) frame.

        Expects normalized_0_255 values; internally maps to [0, 1] and
        standardizes with fixed mean/std 0.5/0.5.
        """
        cfg = self.config
        frame = np.asarray(frame, dtype=np.float32)
        if frame.shape != (cfg.input_size, cfg.input_size):
            raise ValueError(f"frame shape {frame.shape} != {(cfg.input_size, cfg.input_size)}")
        if frame.min() < 0.0 or frame.max() > 255.0:
            raise ValueError("frame values must lie in [0, 255] (normalized_0_255)")
        x = (frame / 255.0 - 0.5) / 0.5

        tokens = ad.patch_embed(Tensor(x), cfg.patch_size)
        tokens = ad.add(ad.matmul(tokens, self.params["encoder.patch.w"]), self.params["encoder.patch.b"])
        tokens = ad.add(tokens, self.params["encoder.pos"])

        g = cfg.input_size // cfg.patch_size
        grid = (g, g)
        stage_tokens = []
        layer = 0
        for stage, blocks in enumerate(cfg.stage_blocks):
            for _ in range(blocks):
                is_global = layer in cfg.global_attention_layers
                tokens = self._encoder_block(tokens, f"encoder.s{stage}.b{layer}", grid, is_global)
                layer += 1
            stage_tokens.append(tokens)
            if stage < 3:
                as_grid = ad.reshape(tokens, (grid[0], grid[1], tokens.shape[-1]))
                pooled = ad.maxpool2x2(as_grid)
                grid = (grid[0] // 2, grid[1] // 2)
                tokens = ad.reshape(pooled, (grid[0] * grid[1], pooled.shape[-1]))
                tokens = self._linear(tokens, f"encoder.down{stage}")

        # FPN: lateral projections fused top-down with x2 upsampling
        strides = [cfg.patch_size * (2 ** s) for s in range(4)]
        grids = [(cfg.input_size // s,) * 2 for s in strides]
        laterals = []
        for stage in range(4):
            lat = self._linear(stage_tokens[stage], f"encoder.fpn.lat{stage}")
            laterals.append(ad.reshape(lat, (grids[stage][0], grids[stage][1], cfg.neck_dim)))
        fpn = {strides[3]: laterals[3]}
        top = laterals[3]
        for stage in (2, 1, 0):
            top = ad.add(laterals[stage], ad.bilinear_upsample(top, 2))
            fpn[strides[stage]] = top
        trunk_map = fpn[strides[2]]
        trunk = self._layernorm(
            ad.reshape(trunk_map, (grids[2][0] * grids[2][1], cfg.neck_dim)), "encoder.fpn.ln"
        )
        return ImageFeatures(stage_tokens=stage_tokens, fpn=fpn, trunk=trunk)

    def encode_prompt(self, prompt):
        """Embed a box (two corner tokens) or a list of point prompts."""
        cfg = self.config
        if prompt is None:
            return None
        if isinstance(prompt, BoundingBox2D):
            if prompt.x_max > cfg.input_size or prompt.y_max > cfg.input_size:
                raise ValueError(f"box {prompt} exceeds the {cfg.input_size}px frame")
            s = float(cfg.input_size)
            tl = _sinusoidal_xy(prompt.x_min / s, prompt.y_min / s, cfg.neck_dim)
            br = _sinusoidal_xy(prompt.x_max / s, prompt.y_max / s, cfg.neck_dim)
            tokens = [
                ad.add(Tensor(tl), self.params["prompt.corner_tl"]),
                ad.add(Tensor(br), self.params["prompt.corner_br"]),
            ]
        else:
            points = list(prompt)
            if not points:
                raise ValueError("empty point prompt")
            s = float(cfg.input_size)
            tokens = []
            for pt in points:
                if not (0 <= pt.x < cfg.input_size and 0 <= pt.y < cfg.input_size):
                    raise ValueError(f"point prompt ({pt.x}, {pt.y}) outside the frame")
                emb = _sinusoidal_xy(pt.x / s, pt.y / s, cfg.neck_dim)
                kind = "prompt.point_pos" if pt.positive else "prompt.point_neg"
                tokens.append(ad.add(Tensor(emb), self.params[kind]))
        rows = [ad.reshape(t, (1, cfg.neck_dim)) for t in tokens]
        return ad.concat(rows, axis=0)

    def attend_memory(self, trunk, bank: MemoryBank):
        """Condition trunk tokens on the bank (self-attn, cross-attn, FFN).

        With an empty bank the cross-attention block is skipped, so the
        output is exactly the self-attention-only path.
        """
        cfg = self.config
        gh, gw = cfg.trunk_grid
        if trunk.shape != (gh * gw, cfg.neck_dim):
            raise ValueError(f"trunk tokens {trunk.shape} != {(gh * gw, cfg.neck_dim)}")
        mem = None
        if bank is not None and len(bank.entries) > 0:
            mem = ad.concat([e.spatial_features for e in bank.entries], axis=0)
        x = trunk
        for i in range(cfg.memory_layers):
            p = f"memory.layer{i}"
            x = ad.add(x, self._mha(self._layernorm(x, p + ".ln1"), p + ".self", rope_grid=(gh, gw)))
            if mem is not None:
                x = ad.add(x, self._mha(self._layernorm(x, p + ".ln2"), p + ".cross", kv=mem))
            x = ad.add(x, self._mlp(self._layernorm(x, p + ".ln3"), p + ".mlp"))
        return x

    def decode_mask(self, conditioned, prompt_embeddings, fpn):
        """Two-way attention decoding to (input_size^2 logits, iou in [0,1])."""
        cfg = self.config
        gh, gw = cfg.trunk_grid
        tok_list = [
            ad.reshape(self.params["decoder.token_iou"], (1, cfg.neck_dim)),
            ad.reshape(self.params["decoder.token_mask"], (1, cfg.neck_dim)),
        ]
        if prompt_embeddings is not None:
            tok_list.append(prompt_embeddings)
        tokens = ad.concat(tok_list, axis=0)
        img = conditioned
        for i in range(cfg.decoder_layers):
            p = f"decoder.layer{i}"
            tokens = ad.add(tokens, self._mha(self._layernorm(tokens, p + ".ln_t"), p + ".t_self"))
            tokens = ad.add(
                tokens, self._mha(self._layernorm(tokens, p + ".ln_t2i"), p + ".t2i", kv=img)
            )
            img = ad.add(img, self._mha(self._layernorm(img, p + ".ln_i2t"), p + ".i2t", kv=tokens))
            tokens = ad.add(tokens, self._mlp(self._layernorm(tokens, p + ".ln_mlp"), p + ".mlp"))
        tokens = ad.add(
            tokens, self._mha(self._layernorm(tokens, "decoder.final_ln"), "decoder.final_t2i", kv=img)
        )

        # upscale stride-16 image tokens to stride-4 with FPN skips
        x = ad.reshape(img, (gh, gw, cfg.neck_dim))
        x = ad.bilinear_upsample(x, 2)
        x = ad.add(x, fpn[cfg.patch_size * 2])
        x = ad.gelu(self._linear(x, "decoder.up1"))
        x = ad.bilinear_upsample(x, 2)
        x = ad.add(x, fpn[cfg.patch_size])
        x = ad.gelu(self._linear(x, "decoder.up2"))
        pix = self._linear(x, "decoder.pix")  # (g4, g4, half)

        iou_tok = ad.narrow(tokens, 0, 0, 1)
        mask_tok = ad.narrow(tokens, 0, 1, 1)
        mask_vec = self._linear(ad.gelu(self._linear(mask_tok, "decoder.mask_mlp1")), "decoder.mask_mlp2")
        g4 = cfg.input_size // cfg.patch_size
        logits_lo = ad.reshape(
            ad.matmul(ad.reshape(pix, (g4 * g4, pix.shape[-1])), ad.transpose(mask_vec, (1, 0))),
            (g4, g4, 1),
        )
        logits = ad.reshape(
            ad.bilinear_upsample(logits_lo, cfg.patch_size), (cfg.input_size, cfg.input_size)
        )
        iou = ad.sigmoid(
            ad.reshape(
                self._linear(ad.gelu(self._linear(iou_tok, "decoder.iou_mlp1")), "decoder.iou_mlp2"),
                (),
            )
        )
        return logits, iou

    def encode_memory(self, trunk, mask_logits, frame_index=0, is_prompted=False) -> MemoryEntry:
        """Fuse frame features with the (predicted or supplied) mask."""
        cfg = self.config
        gh, gw = cfg.trunk_grid
        block = cfg.input_size // gh
        prob = ad.sigmoid(mask_logits if isinstance(mask_logits, Tensor) else Tensor(mask_logits))
        pooled = ad.tmean(ad.reshape(prob, (gh, block, gw, block)), axis=(1, 3))
        pooled = ad.reshape(pooled, (gh * gw, 1))
        fused = ad.concat([trunk, pooled], axis=1)
        feats = self._linear(ad.gelu(self._linear(fused, "memenc.fuse1")), "memenc.fuse2")
        return MemoryEntry(frame_index=int(frame_index), spatial_features=feats, is_prompted=bool(is_prompted))

    def forward_frame(self, frame, bank: MemoryBank, prompt=None, frame_index=0):
        """Full per-frame pass; returns (logits, iou, new bank entry)."""
        if prompt is None and (bank is None or len(bank.entries) == 0):
            raise ValueError("unprompted frame with an empty memory bank")
        feats = self.encode_image(frame)
        conditioned = self.attend_memory(feats.trunk, bank)
        prompt_emb = self.encode_prompt(prompt)
        logits, iou = self.decode_mask(conditioned, prompt_emb, feats.fpn)
        entry = self.encode_memory(
            feats.trunk, logits, frame_index=frame_index, is_prompted=prompt is not None
        )
        return logits, iou, entry

    # -- bookkeeping -------------------------------------------------------

    def parameter_groups(self):
        enc = {n: p for n, p in self.params.items() if n.startswith("encoder.")}
        other = {n: p for n, p in self.params.items() if not n.startswith("encoder.")}
        return enc, other

    def param_count(self):
        enc, other = self.parameter_groups()
        return {
            "encoder": int(sum(p.data.size for p in enc.values())),
            "other": int(sum(p.data.size for p in other.values())),
        }

    def zero_grads(self):
        for p in self.params.values():
            p.grad = None


# ---------------------------------------------------------------------------
# checkpoint I/O: JSON manifest + raw little-endian float32 payload


def save_checkpoint(model: PromptableNet, path) -> str:
    """Write magic + u32 manifest length + manifest JSON + float32 payload."""
    names = sorted(model.params)
    manifest = {
        "format": "promptseg-checkpoint-v1",
        "config": model.config.to_json_dict(),
        "seed": model.seed,
        "params": [{"name": n, "shape": list(model.params[n].shape)} for n in names],
    }
    payload = b"".join(
        np.ascontiguousarray(model.params[n].data, dtype="<f4").tobytes() for n in names
    )
    manifest_bytes = json.dumps(manifest).encode()
    blob = CHECKPOINT_MAGIC + struct.pack("<I", len(manifest_bytes)) + manifest_bytes + payload
    with open(path, "wb") as fh:
        fh.write(blob)
    model.checkpoint_id = hashlib.sha1(payload).hexdigest()[:12]
    return model.checkpoint_id


def load_checkpoint(path) -> PromptableNet:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"bad checkpoint magic {blob[:4]!r}")
    (mlen,) = struct.unpack_from("<I", blob, 4)
    manifest = json.loads(blob[8 : 8 + mlen].decode())
    if manifest.get("format") != "promptseg-checkpoint-v1":
        raise ValueError(f"unknown checkpoint format {manifest.get('format')!r}")
    config = ModelConfig.from_json_dict(manifest["config"])
    model = PromptableNet(config, seed=manifest.get("seed", 0))
    offset = 8 + mlen
    for spec_entry in manifest["params"]:
        name, shape = spec_entry["name"], tuple(spec_entry["shape"])
        if name not in model.params or model.params[name].shape != shape:
            raise ValueError(f"checkpoint parameter {name} {shape} does not fit the model")
        size = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f4", count=size, offset=offset).reshape(shape)
        model.params[name].data = arr.astype(np.float32).copy()
        offset += size * 4
    if offset != len(blob):
        raise ValueError("checkpoint payload size mismatch")
    model.checkpoint_id = hashlib.sha1(blob[8 + mlen :]).hexdigest()[:12]
    return model
