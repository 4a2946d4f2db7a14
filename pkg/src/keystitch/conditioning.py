"""Conditioning pack construction and attribute-encoder injection.

The conditioning signal is an ordered latent token sequence: an optional
target identity image, the start guidance frame, the source segment being
edited, and the end guidance frame, each encoded by the shared latent codec.
A binary mask channel marking the editable region rides along per token.

A stack of transformer blocks (the attribute encoder) processes the pack; the
hidden state after each block, sliced to the source-segment positions, is
added element-wise into the mapped backbone layer before that layer's block
runs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .backbone import TransformerBlock, VelocityBackbone, sinusoidal_embedding
from .codec import CodecMismatch, LinearCodec
from .synth import VideoTensor

MODES = ("reference", "inpainting", "no_keyframe", "no_target_image")
SEGMENTS = ("target_image", "start_keyframe", "source_segment", "end_keyframe")

_LUMA = np.array([0.299, 0.587, 0.114])


def to_grayscale_keyframe(frame: np.ndarray) -> np.ndarray:
    """Replace chroma with replicated luminance (Y = .299R + .587G + .114B)."""
    if frame.ndim != 3 or frame.shape[-1] != 3:
        raise ValueError(f"expected an (H,W,3) frame, got shape {frame.shape}")
    y = frame @ _LUMA.astype(frame.dtype)
    return np.repeat(y[..., None], 3, axis=-1).astype(frame.dtype)


def map_blocks_to_layers(h_enc: int, l_backbone: int) -> dict[int, int]:
    """Evenly spaced monotone block->layer mapping (both sides 1-based)."""
    if not 1 <= h_enc <= l_backbone:
        raise ValueError(f"need 1 <= encoder blocks ({h_enc}) <= backbone layers ({l_backbone})")
    return {h: math.ceil(h * l_backbone / h_enc) for h in range(1, h_enc + 1)}


@dataclass
class ConditioningPack:
    """Flattened conditioning tokens with per-token mask and segment labels."""

    tokens: np.ndarray            # (L, d) float32
    mask: np.ndarray              # (L,) float32 in {0,1}
    segments: tuple               # ((name, start, stop), ...) token ranges in order
    mode: str
    tokens_per_frame: int
    source_frames: int
    codec_tag: str
    target_position: str = "first"

    def __post_init__(self):
        if self.tokens.ndim != 2:
            raise ValueError(f"tokens must be (L,d), got {self.tokens.shape}")
        if self.mask.shape != (self.tokens.shape[0],):
            raise ValueError("mask length must equal token count")
        if not np.isin(self.mask, (0.0, 1.0)).all():
            raise ValueError("mask values must be binary")
        names = [name for name, _, _ in self.segments]
        expected = [s for s in SEGMENTS if s in names]
        if self.target_position == "last" and "target_image" in names:
            expected = [s for s in expected if s != "target_image"] + ["target_image"]
        if names != expected:
            raise ValueError(f"segment order {names} violates the canonical layout {expected}")
        total = sum(stop - start for _, start, stop in self.segments)
        if total != self.tokens.shape[0]:
            raise ValueError("segment ranges do not cover the token sequence")

    @property
    def n_tokens(self) -> int:
        return int(self.tokens.shape[0])

    @property
    def dim(self) -> int:
        return int(self.tokens.shape[1])

    def segment_slice(self, name: str):
        for seg, start, stop in self.segments:
            if seg == name:
                return slice(start, stop)
        return None

    def source_slice(self) -> slice:
        s = self.segment_slice("source_segment")
        assert s is not None
        return s

    def with_mask_channel(self) -> np.ndarray:
        """(L, d+1) tokens with the mask appended as an extra channel."""
        return np.concatenate([self.tokens, self.mask[:, None]], axis=1).astype(np.float32)


def _frames_of(x) -> np.ndarray:
    return x.frames if isinstance(x, VideoTensor) else np.asarray(x, dtype=np.float32)


def _latent_mask(mask_video: np.ndarray, patch: int) -> np.ndarray:
    """Nearest-neighbor downsample at patch centers -> (T, N) binary mask."""
    m = np.asarray(mask_video, dtype=np.float32)
    if m.ndim == 4:
        m = m[..., 0]
    t, h, w = m.shape
    half = patch // 2
    grid = m[:, half::patch, half::patch]
    grid = grid[:, : h // patch, : w // patch]
    return (grid > 0.5).astype(np.float32).reshape(t, -1)


def build_pack(codec: LinearCodec, source_segment, start_keyframe, end_keyframe,
               mask_video, target_image=None, mode: str = "reference",
               target_position: str = "first", grayscale_keyframes: bool = False) -> ConditioningPack:
    """Encode and concatenate the conditioning inputs for one window.

    Mode effects: ``inpainting`` replaces masked source tokens by the encoded
    black fill; ``no_keyframe`` substitutes encoded black frames for both
    guidance frames; ``no_target_image`` drops the target segment entirely.
    The mask channel is zero for target/keyframe segments.
    """
    if mode not in MODES:
        raise ValueError(f"unknown conditioning mode: {mode!r}")
    if target_position not in ("first", "last"):
        raise ValueError(f"target_position must be 'first' or 'last', got {target_position!r}")
    frames = _frames_of(source_segment)
    f, h, w, _ = frames.shape
    mask = np.asarray(mask_video, dtype=np.float32)
    if mask.ndim == 4:
        mask = mask[..., 0]
    if mask.shape != (f, h, w):
        raise ValueError(f"mask dims {mask.shape} do not match source dims {(f, h, w)}")

    n = codec.tokens_per_frame(h, w)
    black = codec.encode_frame(np.zeros((h, w, 3), dtype=np.float32))

    if mode == "no_keyframe":
        start_tok, end_tok = black.copy(), black.copy()
    else:
        if start_keyframe is None or end_keyframe is None:
            raise ValueError(f"mode {mode!r} requires both guidance keyframes")
        start_kf = np.asarray(start_keyframe, dtype=np.float32)
        end_kf = np.asarray(end_keyframe, dtype=np.float32)
        if start_kf.shape != (h, w, 3) or end_kf.shape != (h, w, 3):
            raise CodecMismatch("keyframe dims do not match the source segment")
        if grayscale_keyframes:
            start_kf = to_grayscale_keyframe(start_kf)
            end_kf = to_grayscale_keyframe(end_kf)
        start_tok = codec.encode_frame(start_kf)
        end_tok = codec.encode_frame(end_kf)

    src_tok = codec.encode(frames).tokens          # (f, n, d)
    lat_mask = _latent_mask(mask, codec.config.patch)   # (f, n)
    if mode == "inpainting":
        src_tok = src_tok.copy()
        tt, nn_ = np.nonzero(lat_mask)
        src_tok[tt, nn_] = black[nn_]

    include_target = target_image is not None and mode != "no_target_image"
    if include_target:
        tgt = np.asarray(target_image, dtype=np.float32)
        if tgt.shape != (h, w, 3):
            raise CodecMismatch("target image dims do not match the source segment")
        tgt_tok = codec.encode_frame(tgt)

    parts = []          # (name, tokens (groups of n), mask rows)
    if include_target and target_position == "first":
        parts.append(("target_image", tgt_tok[None], np.zeros((1, n), dtype=np.float32)))
    parts.append(("start_keyframe", start_tok[None], np.zeros((1, n), dtype=np.float32)))
    parts.append(("source_segment", src_tok, lat_mask))
    parts.append(("end_keyframe", end_tok[None], np.zeros((1, n), dtype=np.float32)))
    if include_target and target_position == "last":
        parts.append(("target_image", tgt_tok[None], np.zeros((1, n), dtype=np.float32)))

    tokens, mask_rows, segments, cursor = [], [], [], 0
    for name, tok, mrow in parts:
        flat = tok.reshape(-1, tok.shape[-1])
        tokens.append(flat)
        mask_rows.append(mrow.reshape(-1))
        segments.append((name, cursor, cursor + flat.shape[0]))
        cursor += flat.shape[0]

    return ConditioningPack(
        tokens=np.concatenate(tokens, axis=0).astype(np.float32),
        mask=np.concatenate(mask_rows, axis=0).astype(np.float32),
        segments=tuple(segments),
        mode=mode,
        tokens_per_frame=n,
        source_frames=f,
        codec_tag=codec.tag,
        target_position=target_position,
    )


class AttributeEncoder(nn.Module):
    """Transformer stack over conditioning tokens, mirroring backbone blocks."""

    def __init__(self, token_dim: int, width: int, n_blocks: int, heads: int):
        super().__init__()
        self.token_dim = token_dim
        self.width = width
        self.in_proj = nn.Linear(token_dim, width)
        self.blocks = nn.ModuleList(TransformerBlock(width, heads) for _ in range(n_blocks))

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    def embed(self, tokens: torch.Tensor) -> torch.Tensor:
        b, n, _ = tokens.shape
        x = self.in_proj(tokens)
        pos = torch.arange(n, dtype=x.dtype, device=x.device)
        return x + sinusoidal_embedding(pos, self.width)[None]

    def stage_outputs(self, tokens: torch.Tensor):
        """Hidden state after each block, in block order."""
        x = self.embed(tokens)
        outs = []
        for block in self.blocks:
            x = block(x)
            outs.append(x)
        return outs

    def init_from_backbone(self, backbone: VelocityBackbone, mapping: dict[int, int]) -> None:
        """Copy the mapped backbone blocks' weights into the encoder blocks."""
        for h, l in mapping.items():
            self.blocks[h - 1].load_state_dict(backbone.blocks[l - 1].state_dict())

    def zero_(self) -> None:
        """Zero every parameter; encoder output (and injection) become zero."""
        with torch.no_grad():
            for p in self.parameters():
                p.zero_()


def packs_to_tensor(packs, device, dtype) -> tuple[torch.Tensor, slice]:
    """Stack packs (with mask channel) into (B, L, d+1); packs must agree."""
    if isinstance(packs, ConditioningPack):
        packs = [packs]
    first = packs[0]
    for p in packs[1:]:
        if p.segments != first.segments or p.codec_tag != first.codec_tag:
            raise ValueError("packs in a batch must share layout and codec")
    arr = np.stack([p.with_mask_channel() for p in packs])
    return torch.from_numpy(arr).to(device=device, dtype=dtype), first.source_slice()


def compute_injections(encoder: AttributeEncoder, mapping: dict[int, int],
                       packs, depth: int, device=None, dtype=None):
    """Per-backbone-layer additive terms from the encoder stages (1-based map)."""
    if device is None:
        device = next(encoder.parameters()).device
    if dtype is None:
        dtype = next(encoder.parameters()).dtype
    tokens, src = packs_to_tensor(packs, device, dtype)
    stages = encoder.stage_outputs(tokens)
    injections = [None] * depth
    for h, l in mapping.items():
        injections[l - 1] = stages[h - 1][:, src, :]
    return injections


def inject_forward(backbone: VelocityBackbone, encoder: AttributeEncoder,
                   xt_tokens: torch.Tensor, packs, t, mapping: dict[int, int] | None = None,
                   injection_override=None, capture: dict | None = None) -> torch.Tensor:
    """Conditioned velocity prediction with layer-wise additive injection.

    ``injection_override`` substitutes precomputed per-layer terms (used both
    for fast sampling and for instrumentation); ``capture`` collects the terms
    actually added.
    """
    if mapping is None:
        mapping = map_blocks_to_layers(encoder.n_blocks, backbone.depth)
    squeeze = xt_tokens.dim() == 2
    if squeeze:
        xt_tokens = xt_tokens[None]
    b = xt_tokens.shape[0]
    if not isinstance(t, torch.Tensor):
        t = torch.full((b,), float(t), dtype=xt_tokens.dtype, device=xt_tokens.device)
    if injection_override is not None:
        injections = injection_override
    else:
        injections = compute_injections(encoder, mapping, packs, backbone.depth,
                                        xt_tokens.device, xt_tokens.dtype)
    for inj in injections:
        if inj is not None and inj.shape[-2:] != (xt_tokens.shape[1], backbone.width):
            raise ValueError(f"injection shape {tuple(inj.shape)} does not match "
                             f"backbone hidden ({xt_tokens.shape[1]}, {backbone.width})")
    if capture is not None:
        capture["injections"] = injections
    out = backbone(xt_tokens, t, injections=injections)
    return out[0] if squeeze else out


@dataclass(frozen=True)
class ModelConfig:
    token_dim: int = 16
    width: int = 64
    depth: int = 4
    heads: int = 4
    enc_blocks: int = 4

    def validate(self):
        if self.depth < 1 or self.width < 1:
            raise ValueError("model depth and width must be positive")
        map_blocks_to_layers(self.enc_blocks, self.depth)


class ConditionedVelocityModel(nn.Module):
    """Backbone + attribute encoder behind the (xt, cond, t) interface."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        config.validate()
        self.config = config
        torch.manual_seed(int(seed) & 0x7FFFFFFF)
        self.backbone = VelocityBackbone(config.token_dim, config.width, config.depth, config.heads)
        self.encoder = AttributeEncoder(config.token_dim + 1, config.width,
                                        config.enc_blocks, config.heads)
        self.mapping = map_blocks_to_layers(config.enc_blocks, config.depth)
        self.encoder.init_from_backbone(self.backbone, self.mapping)

    def forward(self, xt, cond, t):
        return inject_forward(self.backbone, self.encoder, xt, cond, t, self.mapping)

    def injections_for(self, packs):
        """Precompute pack injections once (they do not depend on xt or t)."""
        return compute_injections(self.encoder, self.mapping, packs, self.backbone.depth)

    def velocity_fn(self, packs):
        """Closure suitable for euler_sample; reuses precomputed injections."""
        injections = self.injections_for(packs)

        def fn(x, _cond, t):
            return inject_forward(self.backbone, self.encoder, x, packs, t,
                                  self.mapping, injection_override=injections)

        return fn


def save_checkpoint(path, model: ConditionedVelocityModel, optimizer=None,
                    step: int = 0, extra: dict | None = None) -> None:
    payload = {
        "format": "keystitch-ckpt-v1",
        "model_config": vars(model.config),
        "state": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "step": int(step),
        "extra": extra or {},
    }
    torch.save(payload, path)


def load_checkpoint(path, optimizer=None):
    """Rebuild the model from a checkpoint, validating parameter shapes."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != "keystitch-ckpt-v1":
        raise ValueError(f"{path}: not a recognized checkpoint")
    model = ConditionedVelocityModel(ModelConfig(**payload["model_config"]))
    current = model.state_dict()
    loaded = payload["state"]
    if set(current) != set(loaded):
        raise ValueError(f"{path}: checkpoint parameter names do not match the model")
    for name, tensor in loaded.items():
        if tuple(tensor.shape) != tuple(current[name].shape):
            raise ValueError(f"{path}: shape mismatch for {name}: "
                             f"{tuple(tensor.shape)} vs {tuple(current[name].shape)}")
    model.load_state_dict(loaded)
    if optimizer is not None and payload["optimizer"] is not None:
        optimizer.load_state_dict(payload["optimizer"])
    return model, payload
