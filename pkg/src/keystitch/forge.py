"""Paired training data by role reversal, similarity splits, and benchmark
construction.

A training pair starts from a pristine rendered video. A per-frame swapper
(exact or deliberately flawed) pushes it toward a donor identity; the swapped
video becomes the model *input* while the untouched original supplies the
keyframes, the target identity image and the ground-truth supervision. The
reference side of every pair is therefore artifact-free by construction no
matter how bad the swapper is.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import videoio
from .extractors import ExtractorSuite, default_suite
from .metrics import aligned_id_similarity
from .seeding import rng_for
from .stitching import KeyframeSet, select_keyframes
from .synth import (IdentitySpec, NuisanceTrack, VideoTensor, editable_mask_video,
                    identity_portrait, make_noisy_swapper, make_oracle_swapper,
                    render_video, swap_video)


class PairRejected(RuntimeError):
    """The swapper failed on (nearly) every frame; the pair is unusable."""


@dataclass
class SwapPair:
    """One role-reversed training sample."""

    pair_id: str
    input_video: VideoTensor       # per-frame swapped; carries the donor label
    gt_video: VideoTensor          # pristine original
    keyframes: KeyframeSet         # gt frames at the selected indices
    target_image: np.ndarray       # gt first frame
    mask_video: np.ndarray         # (T,H,W) binary editable region
    similarity_score: float        # mean frame-wise id cosine input vs gt
    gt_seed: int
    donor_seed: int
    swap_failures: int = 0

    def __post_init__(self):
        t = self.gt_video.length
        if self.input_video.length != t or self.mask_video.shape[0] != t:
            raise ValueError("pair components have mismatched lengths")
        if not -1.0 - 1e-9 <= self.similarity_score <= 1.0 + 1e-9:
            raise ValueError(f"similarity score {self.similarity_score} outside [-1,1]")


# failure policy: drop pairs where the swapper failed on more than this
# fraction of frames
MAX_FAILED_FRACTION = 0.9


def forge_pair(original_video: VideoTensor, donor_identity: IdentitySpec, swapper,
               kf_budget: int, rng=None, pair_id: str = "pair",
               suite: ExtractorSuite | None = None,
               kf_strategy: str = "uniform") -> SwapPair:
    """Build one role-reversed pair from a pristine video and a donor identity."""
    if original_video.identity is None or original_video.nuisance is None:
        raise ValueError("forge_pair needs a rendered video with ground-truth metadata")
    suite = suite or default_suite()
    swapped, ok = swap_video(original_video, donor_identity, swapper)
    n_failed = int((~ok).sum())
    if n_failed > MAX_FAILED_FRACTION * original_video.length:
        raise PairRejected(f"{pair_id}: swapper failed on {n_failed}/{original_video.length} frames")
    kfs = select_keyframes(original_video, kf_budget, kf_strategy)
    kfs = KeyframeSet(kfs.indices, kfs.length,
                      {k: original_video.frames[k - 1].copy() for k in kfs.indices})
    h, w = original_video.frames.shape[1:3]
    mask = editable_mask_video([original_video.identity, donor_identity],
                               original_video.nuisance, h, w)
    score = aligned_id_similarity(swapped, original_video, suite)
    return SwapPair(
        pair_id=pair_id,
        input_video=swapped,
        gt_video=original_video,
        keyframes=kfs,
        target_image=original_video.frames[0].copy(),
        mask_video=mask,
        similarity_score=score,
        gt_seed=original_video.identity.seed,
        donor_seed=donor_identity.seed,
        swap_failures=n_failed,
    )


def _score_key(item):
    if isinstance(item, SwapPair):
        return (item.similarity_score, item.pair_id)
    if isinstance(item, dict):
        return (item["similarity"], item["pair_id"])
    return (item.similarity_score, item.pair_id)


def split_by_similarity(pairs, fraction: float):
    """Sort ascending by similarity and return (lower, upper) slices.

    Each side holds ceil(fraction * n) items; with fraction > 0.5 the sides
    overlap in the middle. Ties break by pair id, so splits are deterministic.
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must be in (0,1), got {fraction}")
    items = sorted(pairs, key=_score_key)
    if not items:
        raise ValueError("cannot split an empty pair list")
    k = int(np.ceil(fraction * len(items)))
    return items[:k], items[len(items) - k:]


@dataclass
class BenchCase:
    """One benchmark entry: a source video plus easy and hard target images."""

    source: VideoTensor
    easy_identity: IdentitySpec
    hard_identity: IdentitySpec
    easy_image: np.ndarray
    hard_image: np.ndarray
    easy_score: float
    hard_score: float

    def __post_init__(self):
        if self.easy_score < self.hard_score:
            raise ValueError("easy similarity must be >= hard similarity")


def select_easy_hard(source_video: VideoTensor, identity_pool,
                     suite: ExtractorSuite | None = None) -> BenchCase:
    """Pick the most and least identity-similar pool entries for a source.

    Similarity scores a pool identity's neutral portrait against the mean
    source-frame embedding. Ties resolve to the lowest pool index.
    """
    pool = list(identity_pool)
    if len(pool) < 2:
        raise ValueError("identity pool must hold at least 2 identities")
    suite = suite or default_suite()
    h, w = source_video.frames.shape[1:3]
    src = np.mean([suite.id_embed(source_video.frames[t]) for t in range(source_video.length)], axis=0)
    portraits = [identity_portrait(ident, h, w) for ident in pool]
    scores = [float(suite.id_embed(p) @ src) for p in portraits]
    easy_i = int(np.argmax(scores))
    hard_i = int(np.argmin(scores))
    return BenchCase(
        source=source_video,
        easy_identity=pool[easy_i], hard_identity=pool[hard_i],
        easy_image=portraits[easy_i], hard_image=portraits[hard_i],
        easy_score=scores[easy_i], hard_score=scores[hard_i],
    )


@dataclass
class ForgeConfig:
    n_pairs: int = 8
    frames: int = 41
    height: int = 32
    width: int = 32
    seed: int = 0
    kf_budget: int = 6
    kf_strategy: str = "uniform"
    swapper: str = "oracle"          # "oracle" | "noisy"
    failure_prob: float = 0.3
    artifact_strength: float = 0.1

    def validate(self):
        if self.n_pairs < 1:
            raise ValueError("n_pairs must be positive")
        if self.kf_budget < 2 or self.kf_budget > self.frames:
            raise ValueError("keyframe budget must be in [2, frames]")
        if self.swapper not in ("oracle", "noisy"):
            raise ValueError(f"unknown swapper kind: {self.swapper!r}")
        if not 0.0 <= self.failure_prob <= 1.0:
            raise ValueError("failure_prob must be in [0,1]")


def make_swapper(cfg: ForgeConfig):
    if cfg.swapper == "oracle":
        return make_oracle_swapper()
    return make_noisy_swapper(cfg.failure_prob, cfg.artifact_strength, seed=cfg.seed)


def forge_pair_by_index(cfg: ForgeConfig, index: int,
                        suite: ExtractorSuite | None = None) -> SwapPair:
    """Deterministically render and forge pair ``index`` of a config."""
    rng = rng_for(("forge", cfg.seed, index))
    gt_seed = int(rng.integers(2 ** 31))
    donor_seed = int(rng.integers(2 ** 31))
    track = NuisanceTrack.random(("track", cfg.seed, index), cfg.frames)
    original = render_video(IdentitySpec.from_seed(gt_seed), track, cfg.height, cfg.width)
    donor = IdentitySpec.from_seed(donor_seed)
    return forge_pair(original, donor, make_swapper(cfg), cfg.kf_budget,
                      pair_id=f"p{index:04d}", suite=suite, kf_strategy=cfg.kf_strategy)


def pair_record(pair: SwapPair, cfg: ForgeConfig, rel_dir: str = "pairs") -> dict:
    return {
        "pair_id": pair.pair_id,
        "input": f"{rel_dir}/{pair.pair_id}_input.fvt",
        "gt": f"{rel_dir}/{pair.pair_id}_gt.fvt",
        "mask": f"{rel_dir}/{pair.pair_id}_mask.fvt",
        "gt_seed": pair.gt_seed,
        "donor_seed": pair.donor_seed,
        "similarity": pair.similarity_score,
        "kf_indices": list(pair.keyframes.indices),
        "swap_failures": pair.swap_failures,
        "swapper": {"kind": cfg.swapper, "failure_prob": cfg.failure_prob,
                    "artifact_strength": cfg.artifact_strength},
    }


def build_dataset(cfg: ForgeConfig, out_dir) -> Path:
    """Forge the configured pairs, write FVT files and the manifest.

    Per-item failures are reported and skipped; the run continues. The
    manifest is a JSON-lines file with one header record plus one record per
    surviving pair, fully reproducible from the config seed.
    """
    cfg.validate()
    out = Path(out_dir)
    (out / "pairs").mkdir(parents=True, exist_ok=True)
    records, errors = [], []
    for i in range(cfg.n_pairs):
        try:
            pair = forge_pair_by_index(cfg, i)
            rec = pair_record(pair, cfg)
            videoio.write_video(out / rec["input"], pair.input_video)
            videoio.write_video(out / rec["gt"], pair.gt_video)
            videoio.write_fvt_array(out / rec["mask"], pair.mask_video[..., None])
            records.append(rec)
        except PairRejected as exc:
            errors.append(str(exc))
        except OSError as exc:
            errors.append(f"p{i:04d}: io failure: {exc}")
    header = {
        "kind": "forge-manifest",
        "config": {k: getattr(cfg, k) for k in vars(cfg)},
        "n_requested": cfg.n_pairs,
        "n_pairs": len(records),
        "rejected": errors,
    }
    manifest = out / "manifest.jsonl"
    with open(manifest, "w") as f:
        f.write(json.dumps(header, sort_keys=True) + "\n")
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    return manifest


def load_manifest(path):
    """Returns (header, records)."""
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise ValueError(f"{path}: empty manifest")
    header = json.loads(lines[0])
    records = [json.loads(line) for line in lines[1:] if line.strip()]
    return header, records


def load_pair(manifest_path, record: dict) -> SwapPair:
    """Rehydrate a SwapPair from manifest record + stored files."""
    root = Path(manifest_path).parent
    input_video = videoio.read_video(root / record["input"])
    gt_video = videoio.read_video(root / record["gt"])
    mask = videoio.read_fvt_array(root / record["mask"])[..., 0]
    kf = KeyframeSet(list(record["kf_indices"]), gt_video.length,
                     {k: gt_video.frames[k - 1].copy() for k in record["kf_indices"]})
    return SwapPair(
        pair_id=record["pair_id"], input_video=input_video, gt_video=gt_video,
        keyframes=kf, target_image=gt_video.frames[0].copy(), mask_video=mask,
        similarity_score=record["similarity"], gt_seed=record["gt_seed"],
        donor_seed=record["donor_seed"], swap_failures=record.get("swap_failures", 0),
    )


@dataclass
class BenchConfig:
    n_cases: int = 4
    pool_size: int = 100
    frames: int = 41
    height: int = 32
    width: int = 32
    seed: int = 0

    def validate(self):
        if self.n_cases < 1 or self.pool_size < 2:
            raise ValueError("benchmark needs >= 1 case and a pool of >= 2 identities")


def build_benchmark(cfg: BenchConfig, out_dir) -> Path:
    """Render sources, pick easy/hard targets from a seeded identity pool."""
    cfg.validate()
    out = Path(out_dir)
    (out / "cases").mkdir(parents=True, exist_ok=True)
    pool_rng = rng_for(("bench-pool", cfg.seed))
    pool = [IdentitySpec.from_seed(int(s)) for s in pool_rng.integers(2 ** 31, size=cfg.pool_size)]
    suite = default_suite()
    records = []
    for i in range(cfg.n_cases):
        src_rng = rng_for(("bench-src", cfg.seed, i))
        ident = IdentitySpec.from_seed(int(src_rng.integers(2 ** 31)))
        track = NuisanceTrack.random(("bench-track", cfg.seed, i), cfg.frames)
        source = render_video(ident, track, cfg.height, cfg.width)
        case = select_easy_hard(source, pool, suite)
        rec = {
            "case_id": f"c{i:04d}",
            "source": f"cases/c{i:04d}_source.fvt",
            "easy_image": f"cases/c{i:04d}_easy.fvt",
            "hard_image": f"cases/c{i:04d}_hard.fvt",
            "source_seed": ident.seed,
            "easy_seed": case.easy_identity.seed,
            "hard_seed": case.hard_identity.seed,
            "easy_score": case.easy_score,
            "hard_score": case.hard_score,
        }
        videoio.write_video(out / rec["source"], source)
        videoio.write_fvt_array(out / rec["easy_image"], case.easy_image[None])
        videoio.write_fvt_array(out / rec["hard_image"], case.hard_image[None])
        records.append(rec)
    header = {"kind": "bench-manifest",
              "config": {k: getattr(cfg, k) for k in vars(cfg)},
              "n_cases": len(records)}
    manifest = out / "bench.jsonl"
    with open(manifest, "w") as f:
        f.write(json.dumps(header, sort_keys=True) + "\n")
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    return manifest
