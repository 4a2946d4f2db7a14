"""Procedural synthetic face videos with exact identity/nuisance ground truth.

A "face" is a composite of soft color blobs on a neutral background. Identity
owns the appearance (base color, blob layout, blob sizes); nuisance owns the
per-frame state (in-plane pose angle, illumination level, an expression scalar
that spreads/contracts the blob layout, and a pixel translation). Because both
factors are generated, swapping, masking and every evaluation metric can be
checked against exact ground truth.

Frames are rendered by sampling the analytic blob field on a coarse corner
lattice (one corner per RENDER_GRID pixels) and bilinearly interpolating the
patch interiors. Rendered content therefore lives in a known low-dimensional
patch space, which the default latent codec inverts exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .seeding import rng_for

BACKGROUND = 0.08
# blob kernels are truncated at this many sigmas so identity edits stay inside
# the analytic mask
BLOB_SUPPORT = 2.5
# corner lattice pitch of the renderer; equals the default codec patch size
RENDER_GRID = 4


class SizeError(ValueError):
    """Requested render dimensions are unusable."""


@dataclass(frozen=True)
class IdentitySpec:
    """Appearance parameters of one synthetic identity.

    All parameters are deterministic functions of ``seed``; two specs built
    from the same seed are identical.
    """

    seed: int
    color: np.ndarray       # (3,) base color in [0,1]
    offsets: np.ndarray     # (n_blobs, 2) blob centers in normalized coords
    radii: np.ndarray       # (n_blobs,) blob sigmas in normalized units

    @classmethod
    def from_seed(cls, seed: int) -> "IdentitySpec":
        rng = rng_for(("identity", int(seed)))
        color = 0.15 + 0.8 * rng.random(3)
        n_blobs = int(2 + rng.integers(3))          # 2..4
        offsets = rng.uniform(-0.4, 0.4, size=(n_blobs, 2))
        radii = rng.uniform(0.15, 0.25, size=n_blobs)
        return cls(seed=int(seed), color=color, offsets=offsets, radii=radii)

    @property
    def n_blobs(self) -> int:
        return len(self.radii)


@dataclass(frozen=True)
class NuisanceState:
    """Per-frame nuisance values."""

    pose: float     # in-plane rotation, radians
    illum: float    # illumination scale in [0.3, 1.0]
    expr: float     # expression scalar in [-1, 1]
    tx: float       # translation, pixels
    ty: float


@dataclass
class NuisanceTrack:
    """Per-frame nuisance parameters over a whole video."""

    pose: np.ndarray
    illum: np.ndarray
    expr: np.ndarray
    tx: np.ndarray
    ty: np.ndarray

    def __post_init__(self):
        n = len(self.pose)
        for name in ("pose", "illum", "expr", "tx", "ty"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != (n,):
                raise ValueError(f"nuisance field {name} has shape {arr.shape}, expected ({n},)")
            setattr(self, name, arr)
        if n == 0:
            raise ValueError("nuisance track is empty")
        if self.illum.min() < 0.3 - 1e-9 or self.illum.max() > 1.0 + 1e-9:
            raise ValueError("illumination outside [0.3, 1.0]")
        if np.abs(self.expr).max() > 1.0 + 1e-9:
            raise ValueError("expression outside [-1, 1]")

    def __len__(self) -> int:
        return len(self.pose)

    def state(self, t: int) -> NuisanceState:
        return NuisanceState(
            pose=float(self.pose[t]), illum=float(self.illum[t]),
            expr=float(self.expr[t]), tx=float(self.tx[t]), ty=float(self.ty[t]),
        )

    def slice(self, start: int, stop: int) -> "NuisanceTrack":
        return NuisanceTrack(*(getattr(self, f)[start:stop].copy()
                               for f in ("pose", "illum", "expr", "tx", "ty")))

    def take(self, idx) -> "NuisanceTrack":
        idx = np.asarray(idx)
        return NuisanceTrack(*(getattr(self, f)[idx].copy()
                               for f in ("pose", "illum", "expr", "tx", "ty")))

    @classmethod
    def constant(cls, length: int, pose=0.0, illum=1.0, expr=0.0, tx=0.0, ty=0.0) -> "NuisanceTrack":
        ones = np.ones(length)
        return cls(pose * ones, illum * ones, expr * ones, tx * ones, ty * ones)

    @classmethod
    def random(cls, seed, length: int, motion: float = 1.0) -> "NuisanceTrack":
        """Smooth sinusoidal tracks; ``motion`` scales all amplitudes."""
        rng = rng_for(("nuisance", seed))
        t = np.arange(length)

        def osc(amp):
            freq = rng.uniform(0.2, 1.5)
            phase = rng.uniform(0.0, 2.0 * math.pi)
            return amp * motion * np.sin(2.0 * math.pi * freq * t / max(length, 2) + phase)

        pose = osc(rng.uniform(0.2, 0.9))
        illum = np.clip(0.65 + np.clip(osc(rng.uniform(0.1, 0.3)), -0.35, 0.35), 0.3, 1.0)
        expr = np.clip(osc(rng.uniform(0.3, 1.0)), -1.0, 1.0)
        tx = osc(rng.uniform(0.5, 3.0))
        ty = osc(rng.uniform(0.5, 3.0))
        return cls(pose, illum, expr, tx, ty)


@dataclass
class VideoTensor:
    """A T x H x W x 3 float sequence in [0,1] with optional ground truth."""

    frames: np.ndarray
    fps: Fraction = Fraction(12, 1)
    identity: IdentitySpec | None = None
    nuisance: NuisanceTrack | None = None

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 4 or self.frames.shape[-1] != 3:
            raise ValueError(f"frames must be (T,H,W,3), got {self.frames.shape}")
        if self.frames.shape[0] < 1:
            raise ValueError("video must contain at least one frame")
        if self.frames.min() < 0.0 or self.frames.max() > 1.0:
            raise ValueError("frame values outside [0,1]")
        if self.nuisance is not None and len(self.nuisance) != self.frames.shape[0]:
            raise ValueError("nuisance track length does not match frame count")

    @property
    def shape(self):
        return self.frames.shape

    @property
    def length(self) -> int:
        return int(self.frames.shape[0])

    def window(self, start: int, stop: int) -> "VideoTensor":
        """Sub-video over python-style frame range [start, stop)."""
        nuis = self.nuisance.slice(start, stop) if self.nuisance is not None else None
        return VideoTensor(self.frames[start:stop].copy(), self.fps, self.identity, nuis)


def blob_geometry(identity: IdentitySpec, state: NuisanceState):
    """Transformed blob centers (normalized coords) and sigmas for one frame."""
    c, s = math.cos(state.pose), math.sin(state.pose)
    centers = np.empty_like(identity.offsets)
    for b, (ox, oy) in enumerate(identity.offsets):
        scale = 1.0 + 0.25 * state.expr * (1.0 if b % 2 == 0 else -1.0)
        centers[b, 0] = (c * ox - s * oy) * scale
        centers[b, 1] = (s * ox + c * oy) * scale
    return centers, identity.radii.copy()


def _corner_field(identity: IdentitySpec, state: NuisanceState, h: int, w: int,
                  grid: int = RENDER_GRID) -> np.ndarray:
    """Analytic blob field sampled at the corner lattice, clipped to [0,1]."""
    gh, gw = h // grid, w // grid
    ys = np.linspace(-1.0, 1.0, gh + 1)
    xs = np.linspace(-1.0, 1.0, gw + 1)
    XS, YS = np.meshgrid(xs, ys)
    centers, radii = blob_geometry(identity, state)
    img = np.full((gh + 1, gw + 1, 3), BACKGROUND, dtype=np.float64)
    cut = math.exp(-BLOB_SUPPORT ** 2 / 2.0)
    for b in range(len(radii)):
        cx = centers[b, 0] + 2.0 * state.tx / w
        cy = centers[b, 1] + 2.0 * state.ty / h
        r = radii[b]
        d2 = (XS - cx) ** 2 + (YS - cy) ** 2
        k = np.maximum(np.exp(-d2 / (2.0 * r * r)) - cut, 0.0) / (1.0 - cut)
        shade = 0.75 + 0.25 * ((b + 1) / len(radii))
        img += k[..., None] * (identity.color * shade)
    return np.clip(img * state.illum, 0.0, 1.0)


def _bilinear_patches(corners: np.ndarray, grid: int) -> np.ndarray:
    """Expand a corner lattice to pixels, each patch bilinear in its 4 corners."""
    a = np.arange(grid) / grid
    wa = 1.0 - a
    w00 = np.outer(wa, wa)[None, None, :, :, None]
    w01 = np.outer(wa, a)[None, None, :, :, None]
    w10 = np.outer(a, wa)[None, None, :, :, None]
    w11 = np.outer(a, a)[None, None, :, :, None]
    c00 = corners[:-1, :-1][:, :, None, None, :]
    c01 = corners[:-1, 1:][:, :, None, None, :]
    c10 = corners[1:, :-1][:, :, None, None, :]
    c11 = corners[1:, 1:][:, :, None, None, :]
    patch = c00 * w00 + c01 * w01 + c10 * w10 + c11 * w11
    gh, gw = corners.shape[0] - 1, corners.shape[1] - 1
    return patch.transpose(0, 2, 1, 3, 4).reshape(gh * grid, gw * grid, 3)


def _check_dims(h: int, w: int, grid: int):
    if h < 8 or w < 8:
        raise SizeError(f"render dimensions too small: {h}x{w} (minimum 8x8)")
    if h % grid or w % grid:
        raise SizeError(f"render dimensions must be multiples of {grid}, got {h}x{w}")


def render_frame(identity: IdentitySpec, state: NuisanceState, h: int, w: int,
                 grid: int = RENDER_GRID) -> np.ndarray:
    """Render one H x W x 3 frame; pure function of its arguments."""
    _check_dims(h, w, grid)
    return _bilinear_patches(_corner_field(identity, state, h, w, grid), grid).astype(np.float32)


def render_video(identity: IdentitySpec, nuisance: NuisanceTrack, h: int, w: int,
                 fps: Fraction = Fraction(12, 1), grid: int = RENDER_GRID) -> VideoTensor:
    """Render a video; frame t depends only on (identity, nuisance[t])."""
    _check_dims(h, w, grid)
    frames = np.stack([render_frame(identity, nuisance.state(t), h, w, grid)
                       for t in range(len(nuisance))])
    return VideoTensor(frames, fps=fps, identity=identity, nuisance=nuisance)


def identity_portrait(identity: IdentitySpec, h: int, w: int) -> np.ndarray:
    """Canonical neutral-nuisance render of an identity (used as target image)."""
    return render_frame(identity, NuisanceState(0.0, 1.0, 0.0, 0.0, 0.0), h, w)


def oracle_swap(frame: np.ndarray, state: NuisanceState, target: IdentitySpec,
                grid: int = RENDER_GRID) -> np.ndarray:
    """Exact identity replacement: re-render the target under the same nuisance.

    Only identity-driven pixels change; the nuisance state carries over
    untouched.
    """
    h, w = frame.shape[:2]
    return render_frame(target, state, h, w, grid)


def noisy_swap(frame: np.ndarray, state: NuisanceState, target: IdentitySpec,
               failure_prob: float, artifact_strength: float, rng_seed) -> np.ndarray:
    """Imperfect per-frame swap: may fail outright or add smooth color artifacts."""
    out, _ = noisy_swap_flagged(frame, state, target, failure_prob, artifact_strength, rng_seed)
    return out


def noisy_swap_flagged(frame: np.ndarray, state: NuisanceState, target: IdentitySpec,
                       failure_prob: float, artifact_strength: float, rng_seed,
                       grid: int = RENDER_GRID):
    """Like noisy_swap but also reports whether the swap actually happened.

    With probability ``failure_prob`` the input frame is returned unmodified.
    Otherwise the oracle result is perturbed by a seeded smooth color patch
    field of amplitude ``artifact_strength`` (applied on the corner lattice so
    artifacts stay renderer-shaped).
    """
    if not 0.0 <= failure_prob <= 1.0:
        raise ValueError(f"failure_prob must be in [0,1], got {failure_prob}")
    rng = rng_for(("noisy-swap", rng_seed))
    if rng.random() < failure_prob:
        return frame.copy(), False
    h, w = frame.shape[:2]
    corners = _corner_field(target, state, h, w, grid)
    if artifact_strength > 0.0:
        gh, gw = corners.shape[0], corners.shape[1]
        # a few random soft bumps, smoothed by construction of the lattice
        bump = rng.normal(0.0, 1.0, size=(max(gh // 2, 1), max(gw // 2, 1), 3))
        reps = (math.ceil(gh / bump.shape[0]), math.ceil(gw / bump.shape[1]), 1)
        bump = np.tile(bump, reps)[:gh, :gw, :]
        corners = np.clip(corners + artifact_strength * bump, 0.0, 1.0)
    return _bilinear_patches(corners, grid).astype(np.float32), True


def swap_video(video: VideoTensor, target: IdentitySpec, swapper=None):
    """Per-frame swap of a whole video; returns (video, ok_flags).

    ``swapper(frame, state, target, frame_seed) -> (frame, ok)`` defaults to the
    oracle. The result carries the target identity label and the source
    nuisance track.
    """
    if video.nuisance is None:
        raise ValueError("swap_video requires a video with a nuisance track")
    if swapper is None:
        swapper = make_oracle_swapper()
    frames, flags = [], []
    for t in range(video.length):
        f, ok = swapper(video.frames[t], video.nuisance.state(t), target, t)
        frames.append(f)
        flags.append(ok)
    out = VideoTensor(np.stack(frames), video.fps, identity=target, nuisance=video.nuisance)
    return out, np.asarray(flags, dtype=bool)


def make_oracle_swapper():
    def swapper(frame, state, target, frame_seed):
        return oracle_swap(frame, state, target), True
    return swapper


def make_noisy_swapper(failure_prob: float, artifact_strength: float, seed=0):
    def swapper(frame, state, target, frame_seed):
        return noisy_swap_flagged(frame, state, target, failure_prob,
                                  artifact_strength, (seed, frame_seed))
    return swapper


def editable_mask_frame(identities, state: NuisanceState, h: int, w: int,
                        margin_px: float = 2.0, grid: int = RENDER_GRID) -> np.ndarray:
    """Binary H x W mask covering every given identity's blob support.

    Disk radii include the kernel truncation radius, one corner-lattice cell of
    interpolation spread, and a pixel margin, so all identity-driven pixels of
    any listed identity fall inside the mask.
    """
    ys = np.linspace(-1.0, 1.0, h)
    xs = np.linspace(-1.0, 1.0, w)
    XS, YS = np.meshgrid(xs, ys)
    mask = np.zeros((h, w), dtype=np.float32)
    cell = 2.0 * grid / min(h, w)
    for identity in identities:
        centers, radii = blob_geometry(identity, state)
        for b in range(len(radii)):
            cx = centers[b, 0] + 2.0 * state.tx / w
            cy = centers[b, 1] + 2.0 * state.ty / h
            rad = BLOB_SUPPORT * radii[b] + cell + margin_px * 2.0 / min(h, w)
            mask[(XS - cx) ** 2 + (YS - cy) ** 2 <= rad * rad] = 1.0
    return mask


def editable_mask_video(identities, nuisance: NuisanceTrack, h: int, w: int,
                        margin_px: float = 2.0) -> np.ndarray:
    return np.stack([editable_mask_frame(identities, nuisance.state(t), h, w, margin_px)
                     for t in range(len(nuisance))])
