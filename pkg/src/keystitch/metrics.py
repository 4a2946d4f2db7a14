"""Evaluation suite: identity similarity, attribute errors, distribution
distance and cross-method ranking.

Image-level metrics are computed on sampled frames; comparisons between a
result and its source use ground-truth nuisance readouts only when both sides
carry them, otherwise both sides fall back to the deterministic pixel
extractors.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.stats

from .extractors import ExtractorSuite, default_suite
from .seeding import rng_for
from .synth import VideoTensor

# direction of "better" per metric column
DIRECTIONS = {
    "id_sim": "higher",
    "expr_err": "lower",
    "light_err": "lower",
    "gaze_sim": "higher",
    "pose_err": "lower",
    "fvd": "lower",
}


def sample_eval_frames(video: VideoTensor, k: int, rng: np.random.Generator) -> np.ndarray:
    """k distinct frame indices, uniform without replacement, sorted."""
    t = video.length
    if k > t:
        raise ValueError(f"cannot sample {k} frames from a {t}-frame video")
    return np.sort(rng.choice(t, size=k, replace=False))


def _obs(video: VideoTensor, idx) -> list:
    """(frame, state) observations at the given indices."""
    out = []
    for i in np.atleast_1d(idx):
        state = video.nuisance.state(int(i)) if video.nuisance is not None else None
        out.append((video.frames[int(i)], state))
    return out


def _paired_obs(result, source):
    """Align two observation lists; drop states unless both sides have them."""
    res = result if isinstance(result, list) else _obs(result, range(result.length))
    src = source if isinstance(source, list) else _obs(source, range(source.length))
    if len(res) != len(src):
        raise ValueError(f"frame count mismatch: {len(res)} vs {len(src)}")
    both = all(s is not None for _, s in res) and all(s is not None for _, s in src)
    if not both:
        res = [(f, None) for f, _ in res]
        src = [(f, None) for f, _ in src]
    return res, src


def _frames_only(frames) -> list:
    if isinstance(frames, VideoTensor):
        return [frames.frames[i] for i in range(frames.length)]
    return [f if isinstance(f, np.ndarray) else f[0] for f in frames]


def id_similarity(result_frames, target_image: np.ndarray, suite: ExtractorSuite) -> float:
    """Mean cosine between frame embeddings and the target-image embedding."""
    frames = _frames_only(result_frames)
    if not frames:
        raise ValueError("empty frame list")
    tgt = suite.id_embed(target_image)
    return float(np.mean([suite.id_embed(f) @ tgt for f in frames]))


def aligned_id_similarity(result: VideoTensor, reference: VideoTensor,
                          suite: ExtractorSuite) -> float:
    """Mean frame-wise embedding cosine between two equal-length videos."""
    if result.length != reference.length:
        raise ValueError("videos must have equal length")
    sims = [suite.id_embed(result.frames[t]) @ suite.id_embed(reference.frames[t])
            for t in range(result.length)]
    return float(np.mean(sims))


def coeff_l2(result, source, which: str, suite: ExtractorSuite) -> float:
    """Mean per-frame euclidean distance between coefficient vectors."""
    res, src = _paired_obs(result, source)
    dists = [float(np.linalg.norm(suite.coeffs(fr, which, sr_state) - suite.coeffs(fs, which, ss_state)))
             for (fr, sr_state), (fs, ss_state) in zip(res, src)]
    return float(np.mean(dists))


def gaze_similarity(result, source, suite: ExtractorSuite) -> float:
    res, src = _paired_obs(result, source)
    sims = [float(suite.gaze(fr, s1) @ suite.gaze(fs, s2))
            for (fr, s1), (fs, s2) in zip(res, src)]
    return float(np.mean(sims))


def pose_error(result, source, suite: ExtractorSuite) -> float:
    res, src = _paired_obs(result, source)
    dists = [float(np.linalg.norm(suite.pose(fr, s1) - suite.pose(fs, s2)))
             for (fr, s1), (fs, s2) in zip(res, src)]
    return float(np.mean(dists))


def _gaussian_stats(features: np.ndarray, shrinkage: float = 1e-6):
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"feature sets must be (n, d), got shape {x.shape}")
    n, d = x.shape
    mu = x.mean(axis=0)
    if n > 1:
        sigma = np.cov(x, rowvar=False).reshape(d, d)
    else:
        sigma = np.zeros((d, d))
    if n < d + 1 or shrinkage > 0:
        sigma = sigma + shrinkage * np.eye(d)
    return mu, sigma


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    """Matrix square root by eigendecomposition, clamping negatives at zero."""
    sym = (m + m.T) / 2.0
    vals, vecs = np.linalg.eigh(sym)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(features_a: np.ndarray, features_b: np.ndarray,
                     shrinkage: float = 1e-6) -> float:
    """Gaussian Frechet distance between two feature sets.

    |mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)), with the cross term
    evaluated through the symmetric product sqrt(S_a)^T S_b sqrt(S_a).
    """
    mu_a, sa = _gaussian_stats(features_a, shrinkage)
    mu_b, sb = _gaussian_stats(features_b, shrinkage)
    if mu_a.shape != mu_b.shape:
        raise ValueError("feature sets have different dimensionality")
    ra = _psd_sqrt(sa)
    inner = ra @ sb @ ra
    vals = np.linalg.eigvalsh((inner + inner.T) / 2.0)
    if vals.min() < -1e-8 * max(vals.max(), 1.0):
        raise ValueError("cross-covariance product is not PSD even after shrinkage")
    cross = np.sqrt(np.clip(vals, 0.0, None)).sum()
    d2 = float(np.sum((mu_a - mu_b) ** 2) + np.trace(sa) + np.trace(sb) - 2.0 * cross)
    return max(d2, 0.0)


class VideoFeatureExtractor:
    """Pooled per-video statistics standing in for a video feature network."""

    dim = 8

    def __init__(self, suite: ExtractorSuite | None = None, seed: int = 99):
        self.suite = suite or default_suite()
        self._proj = rng_for(("video-feature", seed)).normal(size=(4, 32)) / np.sqrt(32)

    def __call__(self, video: VideoTensor) -> np.ndarray:
        emb = np.mean([self.suite.id_embed(video.frames[t]) for t in range(video.length)], axis=0)
        chan = video.frames.mean(axis=(0, 1, 2))
        if video.length > 1:
            rough = float(np.abs(np.diff(video.frames, axis=0)).mean())
        else:
            rough = 0.0
        return np.concatenate([self._proj @ emb, chan, [rough]])


def video_feature_set(videos, extractor: VideoFeatureExtractor | None = None) -> np.ndarray:
    ex = extractor or VideoFeatureExtractor()
    return np.stack([ex(v) for v in videos])


def average_rank(table: dict, directions: dict | None = None) -> dict:
    """Fractional ranks per metric (1 = best), averaged across metrics.

    ``table`` maps method -> {metric: value}. Ties share the mean of their
    ranks. Every method must report every metric.
    """
    directions = directions or DIRECTIONS
    methods = sorted(table)
    if not methods:
        raise ValueError("empty report table")
    metrics = sorted(table[methods[0]])
    for m in methods:
        if sorted(table[m]) != metrics:
            raise ValueError(f"method {m!r} is missing metric cells")
    ranks = {m: [] for m in methods}
    for metric in metrics:
        col = np.array([table[m][metric] for m in methods], dtype=np.float64)
        direction = directions.get(metric, "lower")
        keyed = -col if direction == "higher" else col
        r = scipy.stats.rankdata(keyed, method="average")
        for m, rank in zip(methods, r):
            ranks[m].append(float(rank))
    return {m: float(np.mean(r)) for m, r in ranks.items()}


@dataclass
class MetricReport:
    """Per-method metric rows plus the derived average rank."""

    rows: dict                      # method -> {metric: value}
    directions: dict = field(default_factory=lambda: dict(DIRECTIONS))
    n_videos: dict = field(default_factory=dict)
    avg_rank: dict = field(default_factory=dict)

    def __post_init__(self):
        for method, row in self.rows.items():
            for key in ("id_sim", "gaze_sim"):
                if key in row and not -1.0 - 1e-9 <= row[key] <= 1.0 + 1e-9:
                    raise ValueError(f"{method}: {key}={row[key]} outside [-1,1]")
            for key in ("expr_err", "light_err", "pose_err", "fvd"):
                if key in row and row[key] < -1e-9:
                    raise ValueError(f"{method}: {key}={row[key]} negative")
        if not self.avg_rank and len(self.rows) > 0:
            try:
                self.avg_rank = average_rank(self.rows, self.directions)
            except ValueError:
                self.avg_rank = {}

    def to_json(self) -> str:
        return json.dumps({
            "rows": self.rows,
            "directions": self.directions,
            "n_videos": self.n_videos,
            "avg_rank": self.avg_rank,
        }, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        data = json.loads(text)
        return cls(rows=data["rows"], directions=data.get("directions", dict(DIRECTIONS)),
                   n_videos=data.get("n_videos", {}), avg_rank=data.get("avg_rank", {}))


def evaluate_video(result: VideoTensor, source: VideoTensor, target_image: np.ndarray,
                   suite: ExtractorSuite, k: int = 10, rng=None) -> dict:
    """Image-level metrics for one swapped video against its source/target."""
    rng = rng or rng_for(("eval-frames", 0))
    k = min(k, result.length)
    idx = sample_eval_frames(result, k, rng)
    res_obs = _obs(result, idx)
    src_obs = _obs(source, idx)
    return {
        "id_sim": id_similarity(res_obs, target_image, suite),
        "expr_err": coeff_l2(res_obs, src_obs, "expression", suite),
        "light_err": coeff_l2(res_obs, src_obs, "lighting", suite),
        "gaze_sim": gaze_similarity(res_obs, src_obs, suite),
        "pose_err": pose_error(res_obs, src_obs, suite),
    }


def evaluate_method(results, sources, target_images, suite: ExtractorSuite | None = None,
                    k: int = 10, seed: int = 0) -> dict:
    """Aggregate image-level metrics over videos plus one set-level fvd."""
    suite = suite or default_suite()
    if not (len(results) == len(sources) == len(target_images)):
        raise ValueError("results, sources and targets must align")
    rows = []
    for i, (res, src, tgt) in enumerate(zip(results, sources, target_images)):
        rows.append(evaluate_video(res, src, tgt, suite, k=k, rng=rng_for(("eval", seed, i))))
    agg = {key: float(np.mean([r[key] for r in rows])) for key in rows[0]}
    ex = VideoFeatureExtractor(suite)
    agg["fvd"] = frechet_distance(video_feature_set(results, ex), video_feature_set(sources, ex))
    return agg
