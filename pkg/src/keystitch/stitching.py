"""Long-video generation by chunked, keyframe-anchored stitching.

Frame indices are 1-based and chunk ranges are inclusive throughout this
module (matching the serialized plan format); conversions to python slices
happen internally.

A plan partitions [1, T] at the keyframe indices. Gaps that fit the inference
window become single chunks; longer gaps get a strided "skim" pass whose
outputs then serve as pseudo-keyframes for stride-1 refinement chunks
(recursively, for very long gaps). Chunks run in chronological order: the
first chunk starts from a swapped keyframe, every later chunk starts from the
final output frame of its predecessor, and every chunk ends on a keyframe.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from . import rf
from .codec import LinearCodec
from .conditioning import ConditionedVelocityModel, build_pack
from .extractors import frame_feature
from .seeding import rng_for
from .synth import VideoTensor


class PlanError(ValueError):
    """The requested chunking is unsatisfiable."""


class StitchError(RuntimeError):
    """A chunk failed during stitched generation."""


@dataclass
class KeyframeSet:
    """Selected keyframe indices (1-based) and their swapped replacements."""

    indices: list[int]
    length: int
    frames: dict[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        idx = list(self.indices)
        if idx != sorted(set(idx)):
            raise ValueError("keyframe indices must be strictly increasing")
        if not idx or idx[0] != 1 or idx[-1] != self.length:
            raise ValueError("keyframes must include both endpoints 1 and T")
        self.indices = idx

    def with_frames(self, frames: dict[int, np.ndarray]) -> "KeyframeSet":
        missing = [k for k in self.indices if k not in frames]
        if missing:
            raise ValueError(f"missing swapped frames for keyframes {missing}")
        return KeyframeSet(self.indices, self.length, dict(frames))


@dataclass(frozen=True)
class Chunk:
    start: int                       # 1-based inclusive
    end: int
    start_role: str                  # "keyframe" | "propagated"
    end_role: str = "keyframe"
    direction: str = "forward"       # "forward" | "reverse"
    stride: int = 1
    pass_index: int = 0
    refined: bool = False            # True when a later pass overwrites interiors
    positions: tuple = ()            # explicit frame indices for strided chunks

    def frame_indices(self) -> tuple:
        if self.positions:
            return self.positions
        return tuple(range(self.start, self.end + 1))

    @property
    def n_frames(self) -> int:
        return len(self.frame_indices())


@dataclass
class AuxConfig:
    """Auxiliary placement techniques for awkward keyframe gaps."""

    allow_stride: bool = True
    reverse_chunks: tuple = ()       # chronological chunk numbers to run reversed


@dataclass
class ChunkPlan:
    chunks: list[Chunk]
    length: int
    window: int
    keyframes: list[int]

    def final_chunks(self) -> list[Chunk]:
        return [c for c in self.chunks if not c.refined]

    def validate(self) -> None:
        finals = self.final_chunks()
        if not finals:
            raise PlanError("plan has no final-pass chunks")
        if finals[0].start != 1 or finals[-1].end != self.length:
            raise PlanError("final chunks do not span [1, T]")
        for prev, cur in zip(finals, finals[1:]):
            if cur.start != prev.end:
                raise PlanError(f"chunks [{prev.start},{prev.end}] and "
                                f"[{cur.start},{cur.end}] do not share exactly one frame")
        for c in self.chunks:
            if c.n_frames > self.window:
                raise PlanError(f"chunk [{c.start},{c.end}] exceeds window {self.window}")
            if c.end_role != "keyframe":
                raise PlanError("every chunk must end on keyframe guidance")
        if self.chunks[0].start_role != "keyframe":
            raise PlanError("first chunk must start from a keyframe")
        for c in self.chunks[1:]:
            if c.start_role != "propagated":
                raise PlanError("non-initial chunks must start from propagated output")


def select_keyframes(video: VideoTensor, budget: int, strategy: str = "uniform") -> KeyframeSet:
    """Pick keyframe indices; endpoints are always included.

    ``uniform`` spaces them evenly; ``greedy`` grows the set by farthest-point
    sampling on pooled frame features, capturing abrupt appearance changes.
    """
    t = video.length
    if budget < 2:
        raise ValueError(f"keyframe budget must be >= 2, got {budget}")
    if budget > t:
        raise ValueError(f"keyframe budget {budget} exceeds video length {t}")
    if strategy == "uniform":
        idx = [int(round(x)) for x in np.linspace(1, t, budget)]
    elif strategy == "greedy":
        feats = np.stack([frame_feature(video.frames[i]) for i in range(t)])
        chosen = [0, t - 1]
        while len(chosen) < budget:
            dists = np.full(t, np.inf)
            for i in range(t):
                if i in chosen:
                    dists[i] = -np.inf
                    continue
                dists[i] = min(float(np.linalg.norm(feats[i] - feats[j])) for j in chosen)
            chosen.append(int(np.argmax(dists)))
        idx = sorted(i + 1 for i in chosen)
    else:
        raise ValueError(f"unknown keyframe strategy: {strategy!r}")
    return KeyframeSet(indices=idx, length=t)


def _plan_gap(a: int, b: int, window: int, pass_index: int, aux: AuxConfig) -> list[Chunk]:
    gap = b - a
    if gap + 1 <= window:
        return [Chunk(start=a, end=b, start_role="propagated", pass_index=pass_index)]
    if not aux.allow_stride:
        raise PlanError(f"gap [{a},{b}] needs {gap + 1} frames but the window is {window} "
                        "and frame skipping is disabled")
    stride = math.ceil(gap / (window - 1))
    n_steps = math.ceil(gap / stride)
    positions = tuple(a + int(round(j * gap / n_steps)) for j in range(n_steps + 1))
    skim = Chunk(start=a, end=b, start_role="propagated", stride=stride,
                 pass_index=pass_index, refined=True, positions=positions)
    out = [skim]
    for p, q in zip(positions, positions[1:]):
        out.extend(_plan_gap(p, q, window, pass_index + 1, aux))
    return out


def plan_chunks(length: int, keyframes, window: int, aux: AuxConfig | None = None) -> ChunkPlan:
    """Partition [1, T] into generation chunks between consecutive keyframes."""
    if aux is None:
        aux = AuxConfig()
    idx = keyframes.indices if isinstance(keyframes, KeyframeSet) else list(keyframes)
    if window < 2:
        raise PlanError(f"window must be >= 2, got {window}")
    kfs = KeyframeSet(indices=idx, length=length)   # validates endpoints/order
    chunks: list[Chunk] = []
    for a, b in zip(kfs.indices, kfs.indices[1:]):
        chunks.extend(_plan_gap(a, b, window, 0, aux))
    if chunks:
        chunks[0] = replace(chunks[0], start_role="keyframe")
    for num in aux.reverse_chunks:
        if not 1 <= num <= len(chunks):
            raise PlanError(f"reverse_chunks refers to chunk {num} of {len(chunks)}")
        chunks[num - 1] = replace(chunks[num - 1], direction="reverse")
    plan = ChunkPlan(chunks=chunks, length=length, window=window, keyframes=list(kfs.indices))
    plan.validate()
    return plan


def format_plan(plan: ChunkPlan) -> str:
    lines = [
        f"plan length={plan.length} window={plan.window} "
        f"keyframes={','.join(str(k) for k in plan.keyframes)}"
    ]
    for i, c in enumerate(plan.chunks, start=1):
        rec = (f"chunk {i} start={c.start} end={c.end} start_role={c.start_role} "
               f"end_role={c.end_role} direction={c.direction} stride={c.stride} "
               f"pass={c.pass_index} refined={int(c.refined)}")
        if c.positions:
            rec += " positions=" + ",".join(str(p) for p in c.positions)
        lines.append(rec)
    return "\n".join(lines) + "\n"


@dataclass
class LaborReduction:
    overall: float       # frames needing per-frame edits / distinct keyframes
    per_chunk: float     # window / 2


def labor_reduction(plan: ChunkPlan) -> LaborReduction:
    """Manual-edit savings versus editing every frame individually."""
    return LaborReduction(overall=plan.length / len(plan.keyframes),
                          per_chunk=plan.window / 2.0)


@dataclass
class SwapStack:
    """Everything chunk generation needs: model, codec and sampler options."""

    model: ConditionedVelocityModel
    codec: LinearCodec
    sample_steps: int = 8
    init: str = "noise"             # "noise" | "source"
    copy_guidance: bool = True
    mode: str = "reference"
    target_position: str = "first"
    grayscale_keyframes: bool = False


def generate_chunk(stack: SwapStack, chunk: Chunk, source_segment: np.ndarray,
                   start_frame: np.ndarray, end_frame: np.ndarray, mask_segment: np.ndarray,
                   target_image: np.ndarray | None = None, seed=0,
                   end_guidance: bool = True) -> np.ndarray:
    """Generate one chunk's frames (chronological order in, chronological out).

    The start guidance slot holds either the swapped start keyframe (first
    chunk) or the propagated previous output; the end slot holds the swapped
    end keyframe. With ``copy_guidance`` the guidance frames are copied through
    to the output rather than generated. ``end_guidance=False`` ablates the end
    anchor: the end slot is blacked out and not copied.
    """
    frames = np.asarray(source_segment, dtype=np.float32)
    mask = np.asarray(mask_segment, dtype=np.float32)
    # chronological guidance slots; the end anchor may be ablated
    guide_start = np.asarray(start_frame, dtype=np.float32)
    guide_end = np.asarray(end_frame, dtype=np.float32) if end_guidance else np.zeros_like(start_frame)
    copy_start, copy_end = True, end_guidance
    if chunk.direction == "reverse":
        frames = frames[::-1].copy()
        mask = mask[::-1].copy()
        guide_start, guide_end = guide_end, guide_start
        copy_start, copy_end = copy_end, copy_start
    pack = build_pack(stack.codec, frames, guide_start, guide_end, mask,
                      target_image=target_image, mode=stack.mode,
                      target_position=stack.target_position,
                      grayscale_keyframes=stack.grayscale_keyframes)
    f, h, w, _ = frames.shape
    n = stack.codec.tokens_per_frame(h, w)
    d = stack.codec.config.dim
    if stack.init == "noise":
        rng = rng_for(("chunk", seed))
        x0 = rng.standard_normal((f * n, d)).astype(np.float32)
    elif stack.init == "source":
        x0 = stack.codec.encode(frames).tokens.reshape(f * n, d).copy()
    else:
        raise ValueError(f"unknown sampler init: {stack.init!r}")

    with torch.no_grad():
        vel = stack.model.velocity_fn(pack)
        x = rf.euler_sample(vel, torch.from_numpy(x0)[None], None, n_steps=stack.sample_steps)
    out_tokens = x[0].numpy().reshape(f, n, d)
    out = stack.codec.decode_tokens(out_tokens, h, w)
    if stack.copy_guidance:
        if copy_start:
            out[0] = guide_start.copy()
        if copy_end:
            out[-1] = guide_end.copy()
    if chunk.direction == "reverse":
        out = out[::-1].copy()
    return out


@dataclass
class SwapResult:
    """Stitched output frames plus per-chunk provenance."""

    video: VideoTensor
    provenance: list     # (chunk_number, frame_indices_written)

    @property
    def frames(self) -> np.ndarray:
        return self.video.frames


def stitch(stack: SwapStack, video: VideoTensor, keyframes: KeyframeSet, plan: ChunkPlan,
           mask_video: np.ndarray, target_image: np.ndarray | None = None, seed=0,
           end_keyframes: bool = True, on_chunk=None) -> SwapResult:
    """Run every chunk of the plan in order and assemble the output video.

    Propagation is exact: the guidance frame a chunk starts from is byte-equal
    to the frame its predecessor wrote at that index (asserted on every run).
    Setting ``end_keyframes=False`` disables end anchors everywhere, leaving
    first-frame-only guidance (the accumulation-error ablation). ``on_chunk``
    is called with (number, chunk, frames) after each chunk generates.
    """
    t = video.length
    if plan.length != t:
        raise StitchError(f"plan covers {plan.length} frames, video has {t}")
    keyframes = keyframes.with_frames(keyframes.frames)   # validates completeness
    guides: dict[int, np.ndarray] = {k: np.asarray(v, dtype=np.float32).copy()
                                     for k, v in keyframes.frames.items()}
    writer: dict[int, np.ndarray] = {}
    out = np.full(video.frames.shape, np.nan, dtype=np.float32)
    written = np.zeros(t, dtype=bool)
    provenance = []
    mask_video = np.asarray(mask_video, dtype=np.float32)
    if mask_video.ndim == 4:
        mask_video = mask_video[..., 0]

    for num, chunk in enumerate(plan.chunks, start=1):
        try:
            if chunk.start not in guides:
                raise StitchError(f"no start guidance available at frame {chunk.start}")
            if chunk.end not in guides:
                raise StitchError(f"no end guidance available at frame {chunk.end}")
            start_frame = guides[chunk.start]
            if chunk.start_role == "propagated" and chunk.start in writer:
                if not np.array_equal(start_frame, writer[chunk.start]):
                    raise StitchError(f"propagated guidance at frame {chunk.start} "
                                      "is not byte-equal to the producing chunk's output")
            idx = np.asarray(chunk.frame_indices()) - 1
            frames = generate_chunk(
                stack, chunk, video.frames[idx], start_frame, guides[chunk.end],
                mask_video[idx], target_image=target_image, seed=(seed, num),
                end_guidance=end_keyframes,
            )
            for j, fi in enumerate(chunk.frame_indices()):
                guides[fi] = frames[j]
                writer[fi] = frames[j].copy()   # independent record for the byte-equality audit
            if not chunk.refined:
                wrote = []
                for j, fi in enumerate(chunk.frame_indices()):
                    if written[fi - 1]:
                        continue          # shared boundary: written exactly once
                    out[fi - 1] = frames[j]
                    written[fi - 1] = True
                    wrote.append(fi)
                provenance.append((num, tuple(wrote)))
        except Exception as exc:
            raise StitchError(f"chunk {num} [{chunk.start},{chunk.end}] failed: {exc}") from exc

    if not written.all():
        raise StitchError("stitched output left frames unwritten")
    result = VideoTensor(np.clip(out, 0.0, 1.0), fps=video.fps)
    return SwapResult(video=result, provenance=provenance)
