"""Pluggable per-frame feature extractors with deterministic toy backends.

Real face-swapping evaluation relies on pretrained networks (identity encoder,
3DMM coefficient regressor, gaze and head-pose estimators). Here every
extractor is a plain callable ``f(frame, state) -> vector`` where ``state`` is
the frame's NuisanceState when ground truth is available and None otherwise.

Toy backends:
  * identity embedding: illumination-normalized foreground chroma + value
    quantiles, pushed through a fixed seeded projection and L2-normalized.
    It is deliberately insensitive to pose/translation/illumination so that
    same-identity renders score high under any nuisance.
  * nuisance extractors read the ground-truth state when present and fall back
    to fixed seeded projections of pooled pixels otherwise. Comparisons must
    use the same path on both sides.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .seeding import rng_for

FEATURE_SEED = 1728


def pooled_frame(frame: np.ndarray, grid: int = 8) -> np.ndarray:
    """Mean-pool a frame to grid x grid x 3 and flatten; pose-sensitive."""
    h, w = frame.shape[:2]
    gh, gw = min(grid, h), min(grid, w)
    ys = (np.arange(gh + 1) * h) // gh
    xs = (np.arange(gw + 1) * w) // gw
    out = np.empty((gh, gw, 3), dtype=np.float64)
    for i in range(gh):
        for j in range(gw):
            out[i, j] = frame[ys[i]:ys[i + 1], xs[j]:xs[j + 1]].mean(axis=(0, 1))
    return out.ravel()


def frame_feature(frame: np.ndarray) -> np.ndarray:
    """Feature for keyframe diversity selection: pooled pixels, full nuisance
    sensitivity on purpose."""
    return pooled_frame(frame)


_ID_QUANTILES = np.linspace(0.5, 0.98, 8)


def _id_raw_feature(frame: np.ndarray) -> np.ndarray:
    lum = frame @ np.array([0.299, 0.587, 0.114])
    m = max(float(lum.mean()), 0.05)
    g = frame / m
    fg = np.maximum(lum / m - 1.0, 0.0)       # weight above-average pixels
    wsum = float(fg.sum()) + 1e-9
    chroma = (g * fg[..., None]).reshape(-1, 3).sum(axis=0) / wsum
    chroma = chroma / (np.linalg.norm(chroma) + 1e-9)
    qs = np.quantile(g.reshape(-1, 3), _ID_QUANTILES, axis=0).ravel()
    coverage = np.array([float(np.mean(fg > 0.2))])
    return np.concatenate([3.0 * chroma, qs - 1.0, 3.0 * coverage])


class ToyIdEmbedder:
    """frame -> unit vector; deterministic given the seed."""

    dim = 32

    def __init__(self, seed: int = FEATURE_SEED):
        rng = rng_for(("id-embed", seed))
        self._proj = rng.normal(size=(self.dim, 28)) / np.sqrt(28)

    def __call__(self, frame: np.ndarray, state=None) -> np.ndarray:
        e = self._proj @ _id_raw_feature(frame)
        return e / np.linalg.norm(e)


class ToyCoeffExtractor:
    """frame -> {expression, lighting} coefficient vectors."""

    def __init__(self, seed: int = FEATURE_SEED):
        rng = rng_for(("coeff", seed))
        self._pe = rng.normal(size=(4, 192)) / np.sqrt(192)
        self._pl = rng.normal(size=(4, 192)) / np.sqrt(192)

    def expression(self, frame, state=None) -> np.ndarray:
        if state is not None:
            return np.array([state.expr])
        return self._pe @ pooled_frame(frame)

    def lighting(self, frame, state=None) -> np.ndarray:
        if state is not None:
            return np.array([state.illum])
        return self._pl @ pooled_frame(frame)


class ToyGazeExtractor:
    """frame -> unit 3-vector; ground truth derives gaze from the pose angle."""

    def __init__(self, seed: int = FEATURE_SEED):
        rng = rng_for(("gaze", seed))
        self._p = rng.normal(size=(3, 192)) / np.sqrt(192)

    def __call__(self, frame, state=None) -> np.ndarray:
        if state is not None:
            v = np.array([np.sin(state.pose), 0.0, np.cos(state.pose)])
        else:
            v = self._p @ pooled_frame(frame) + np.array([0.0, 0.0, 1.0])
        return v / np.linalg.norm(v)


class ToyPoseExtractor:
    """frame -> (yaw, pitch, roll) in degrees."""

    def __init__(self, seed: int = FEATURE_SEED):
        rng = rng_for(("pose", seed))
        self._p = rng.normal(size=(3, 192)) / np.sqrt(192)

    def __call__(self, frame, state=None) -> np.ndarray:
        if state is not None:
            return np.array([np.degrees(state.pose), 0.0, 0.0])
        return 30.0 * (self._p @ pooled_frame(frame))


@dataclass
class ExtractorSuite:
    """Bundle of the four extractors used by the metric suite."""

    id_embedder: object = field(default_factory=ToyIdEmbedder)
    coeff_extractor: object = field(default_factory=ToyCoeffExtractor)
    gaze_extractor: object = field(default_factory=ToyGazeExtractor)
    pose_extractor: object = field(default_factory=ToyPoseExtractor)

    def id_embed(self, frame, state=None) -> np.ndarray:
        v = np.asarray(self.id_embedder(frame, state), dtype=np.float64)
        n = np.linalg.norm(v)
        if n < 1e-12:
            raise ValueError("identity embedding has zero norm")
        return v / n

    def coeffs(self, frame, which: str, state=None) -> np.ndarray:
        if which == "expression":
            return np.asarray(self.coeff_extractor.expression(frame, state), dtype=np.float64)
        if which == "lighting":
            return np.asarray(self.coeff_extractor.lighting(frame, state), dtype=np.float64)
        raise ValueError(f"unknown coefficient kind: {which!r}")

    def gaze(self, frame, state=None) -> np.ndarray:
        v = np.asarray(self.gaze_extractor(frame, state), dtype=np.float64)
        return v / np.linalg.norm(v)

    def pose(self, frame, state=None) -> np.ndarray:
        return np.asarray(self.pose_extractor(frame, state), dtype=np.float64)


def default_suite() -> ExtractorSuite:
    return ExtractorSuite()
