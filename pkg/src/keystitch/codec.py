"""Fixed linear patch codec mapping pixel videos to latent token sequences.

Each frame is cut into patch x patch x 3 blocks; every block is projected onto
``dim`` orthonormal basis vectors. The first 12 basis vectors span the space of
per-channel bilinear patches -- exactly the space the renderer emits -- so on
rendered content the codec inverts to floating-point precision. Remaining
basis vectors come from a seeded random completion. There is no temporal
mixing: latent frame t depends only on pixel frame t.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .seeding import rng_for
from .synth import VideoTensor


class CodecMismatch(ValueError):
    """Latents and codec configuration do not agree."""


@dataclass(frozen=True)
class CodecConfig:
    patch: int = 4
    dim: int = 16
    seed: int = 7
    center: float = 0.0     # subtracted from pixels before projection

    def validate(self):
        if self.patch < 1:
            raise ValueError(f"patch must be >= 1, got {self.patch}")
        if not 1 <= self.dim <= self.patch * self.patch * 3:
            raise ValueError(f"dim must be in [1, {self.patch*self.patch*3}], got {self.dim}")

    @property
    def tag(self) -> str:
        return f"lin-p{self.patch}-d{self.dim}-s{self.seed}-c{self.center:g}"


@dataclass
class LatentVideo:
    """T x N x d token array plus the geometry needed to invert it."""

    tokens: np.ndarray            # (T, N, d) float32
    patch: int
    source_dims: tuple            # (T, H, W, C)
    codec_tag: str

    @property
    def dim(self) -> int:
        return int(self.tokens.shape[-1])

    @property
    def tokens_per_frame(self) -> int:
        return int(self.tokens.shape[1])


def _bilinear_vectors(patch: int) -> np.ndarray:
    a = np.arange(patch) / patch
    wa = 1.0 - a
    spatial = [np.outer(wa, wa), np.outer(wa, a), np.outer(a, wa), np.outer(a, a)]
    vecs = []
    for sw in spatial:
        for c in range(3):
            v = np.zeros((patch, patch, 3))
            v[:, :, c] = sw
            vecs.append(v.ravel())
    return np.stack(vecs)


def make_basis(config: CodecConfig) -> np.ndarray:
    """Seeded orthonormal (dim x patch^2*3) projection; rows orthonormal."""
    p, d = config.patch, config.dim
    n = p * p * 3
    rng = rng_for(("codec", config.seed))
    rows = [_bilinear_vectors(p)[: min(d, 12)]] if p > 1 else []
    got = rows[0].shape[0] if rows else 0
    if d > got:
        rows.append(rng.normal(size=(d - got, n)))
    m = np.concatenate(rows, axis=0) if len(rows) > 1 else rows[0]
    q, r = np.linalg.qr(m.T)
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return (q * signs).T  # (d, n)


class LinearCodec:
    def __init__(self, config: CodecConfig | None = None):
        self.config = config or CodecConfig()
        self.config.validate()
        self.basis = make_basis(self.config)          # float64 (d, p*p*3)
        self._basis32 = self.basis.astype(np.float32)

    @property
    def tag(self) -> str:
        return self.config.tag

    def tokens_per_frame(self, h: int, w: int) -> int:
        p = self.config.patch
        return (h // p) * (w // p)

    def _check_dims(self, h: int, w: int):
        p = self.config.patch
        if h % p or w % p:
            raise CodecMismatch(f"frame dims {h}x{w} not divisible by patch {p}")

    def _patchify(self, frames: np.ndarray) -> np.ndarray:
        t, h, w, c = frames.shape
        p = self.config.patch
        x = frames.reshape(t, h // p, p, w // p, p, c)
        return x.transpose(0, 1, 3, 2, 4, 5).reshape(t, (h // p) * (w // p), p * p * c)

    def _unpatchify(self, patches: np.ndarray, dims) -> np.ndarray:
        t, h, w, c = dims
        p = self.config.patch
        x = patches.reshape(t, h // p, w // p, p, p, c)
        return x.transpose(0, 1, 3, 2, 4, 5).reshape(t, h, w, c)

    def encode(self, video) -> LatentVideo:
        """Pixels -> tokens. Accepts a VideoTensor or a (T,H,W,3) array."""
        frames = video.frames if isinstance(video, VideoTensor) else np.asarray(video, dtype=np.float32)
        if frames.ndim != 4:
            raise CodecMismatch(f"expected (T,H,W,C) frames, got shape {frames.shape}")
        t, h, w, c = frames.shape
        self._check_dims(h, w)
        patches = self._patchify(frames - np.float32(self.config.center))
        tokens = patches @ self._basis32.T
        return LatentVideo(tokens=tokens.astype(np.float32), patch=self.config.patch,
                           source_dims=(t, h, w, c), codec_tag=self.tag)

    def encode_frame(self, frame: np.ndarray) -> np.ndarray:
        """Single frame -> (N, d) tokens."""
        return self.encode(frame[None]).tokens[0]

    def decode(self, z: LatentVideo, clip: bool = True) -> VideoTensor:
        if z.codec_tag != self.tag:
            raise CodecMismatch(f"latents from codec {z.codec_tag!r}, this codec is {self.tag!r}")
        if z.dim != self.config.dim or z.patch != self.config.patch:
            raise CodecMismatch("latent geometry does not match codec config")
        t, h, w, c = z.source_dims
        if z.tokens.shape[:2] != (t, self.tokens_per_frame(h, w)):
            raise CodecMismatch(f"token array {z.tokens.shape} inconsistent with dims {z.source_dims}")
        patches = z.tokens.astype(np.float32) @ self._basis32
        frames = self._unpatchify(patches, z.source_dims) + np.float32(self.config.center)
        if clip:
            frames = np.clip(frames, 0.0, 1.0)
        return VideoTensor(frames, fps=Fraction(12, 1))

    def decode_tokens(self, tokens: np.ndarray, h: int, w: int, clip: bool = True) -> np.ndarray:
        """(T, N, d) raw tokens -> (T, h, w, 3) frames."""
        z = LatentVideo(tokens=np.asarray(tokens, dtype=np.float32), patch=self.config.patch,
                        source_dims=(tokens.shape[0], h, w, 3), codec_tag=self.tag)
        return self.decode(z, clip=clip).frames
