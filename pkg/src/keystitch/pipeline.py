"""End-to-end orchestration: detect -> crop -> swap -> paste, plus the
training driver. Every stage persists its outputs under the run directory
before the next stage reads them, and failures carry the stage name."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.ndimage

from . import rf, videoio
from .codec import CodecConfig, LinearCodec
from .conditioning import (ConditionedVelocityModel, ModelConfig, build_pack,
                           load_checkpoint, save_checkpoint)
from .config import RunConfig, save_config
from .extractors import default_suite
from .forge import ForgeConfig, load_manifest, load_pair
from .metrics import (MetricReport, aligned_id_similarity, evaluate_video,
                      frechet_distance, video_feature_set)
from .seeding import rng_for
from .stitching import (ChunkPlan, KeyframeSet, SwapStack, format_plan,
                        labor_reduction, plan_chunks, select_keyframes, stitch)
from .synth import (IdentitySpec, VideoTensor, editable_mask_frame,
                    editable_mask_video, identity_portrait, oracle_swap)


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


@dataclass
class FaceRegion:
    """Per-frame face boxes (y0, x0, y1, x1; end-exclusive) plus feather margin."""

    boxes: np.ndarray      # (T, 4) int
    feather: int = 2

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.int64)
        if self.boxes.ndim != 2 or self.boxes.shape[1] != 4:
            raise ValueError("boxes must be (T, 4)")


def build_codec(cfg: RunConfig) -> LinearCodec:
    return LinearCodec(CodecConfig(cfg.patch, cfg.latent_dim, cfg.codec_seed, cfg.codec_center))


def build_model(cfg: RunConfig) -> ConditionedVelocityModel:
    mc = ModelConfig(cfg.latent_dim, cfg.model_width, cfg.model_depth,
                     cfg.model_heads, cfg.enc_blocks)
    return ConditionedVelocityModel(mc, seed=cfg.seed)


def make_stack(cfg: RunConfig, model: ConditionedVelocityModel,
               codec: LinearCodec | None = None) -> SwapStack:
    return SwapStack(model=model, codec=codec or build_codec(cfg),
                     sample_steps=cfg.sample_steps, init=cfg.sampler_init,
                     copy_guidance=cfg.copy_guidance, mode=cfg.mode,
                     target_position=cfg.target_position,
                     grayscale_keyframes=cfg.grayscale_keyframes)


def detect_regions(video: VideoTensor, detector=None, smooth: int = 5) -> FaceRegion:
    """One face box per frame, temporally smoothed by a moving average.

    The toy detector reads the analytic blob geometry when the video carries
    metadata; without metadata (and without a custom detector) it falls back to
    the full frame with a warning.
    """
    t, h, w = video.frames.shape[:3]
    if detector is None:
        if video.identity is not None and video.nuisance is not None:
            def detector(frame, i):
                m = editable_mask_frame([video.identity], video.nuisance.state(i), h, w)
                ys, xs = np.nonzero(m > 0.5)
                if ys.size == 0:
                    return (0, 0, h, w)
                return (int(ys.min()), int(xs.min()), int(ys.max()) + 1, int(xs.max()) + 1)
        else:
            warnings.warn("no face metadata and no detector: falling back to full-frame regions")
            def detector(frame, i):
                return (0, 0, h, w)
    raw = np.array([detector(video.frames[i], i) for i in range(t)], dtype=np.float64)
    if raw.shape != (t, 4):
        raise ValueError("detector must return one (y0,x0,y1,x1) box per frame")
    kernel = np.ones(min(smooth, t)) / min(smooth, t)
    smoothed = np.stack([np.convolve(raw[:, c], kernel, mode="same") /
                         np.convolve(np.ones(t), kernel, mode="same") for c in range(4)], axis=1)
    boxes = np.round(smoothed).astype(np.int64)
    boxes[:, 0] = boxes[:, 0].clip(0, h - 1)
    boxes[:, 1] = boxes[:, 1].clip(0, w - 1)
    boxes[:, 2] = boxes[:, 2].clip(1, h)
    boxes[:, 3] = boxes[:, 3].clip(1, w)
    return FaceRegion(boxes=boxes)


def feather_weights(mask: np.ndarray, feather: int) -> np.ndarray:
    """Blend weights: 1 inside the mask, linear falloff over ``feather`` px."""
    m = np.asarray(mask, dtype=np.float32)
    if feather <= 0:
        return (m > 0.5).astype(np.float32)
    dist = scipy.ndimage.distance_transform_edt(m <= 0.5)
    return np.clip(1.0 - dist / float(feather), 0.0, 1.0).astype(np.float32)


def paste_back(original: VideoTensor, crops: np.ndarray, regions: FaceRegion,
               mask: np.ndarray, feather: int | None = None) -> VideoTensor:
    """Blend swapped crops into the original frames.

    Pixels outside the feather-dilated mask keep their original bits exactly;
    inside the mask the crop wins; the feather band blends linearly.
    """
    frames = original.frames.copy()
    t = original.length
    mask = np.asarray(mask, dtype=np.float32)
    if mask.ndim == 4:
        mask = mask[..., 0]
    if feather is None:
        feather = regions.feather
    if len(crops) != t or mask.shape[0] != t:
        raise ValueError("crops/mask length must match the video")
    for i in range(t):
        y0, x0, y1, x1 = regions.boxes[i]
        crop = np.asarray(crops[i], dtype=np.float32)
        if crop.shape != (y1 - y0, x1 - x0, 3):
            raise ValueError(f"frame {i}: crop {crop.shape} does not fit box "
                             f"({y1 - y0}, {x1 - x0}, 3)")
        w = feather_weights(mask[i, y0:y1, x0:x1], feather)[..., None]
        region = frames[i, y0:y1, x0:x1]
        blended = w * crop + (1.0 - w) * region
        frames[i, y0:y1, x0:x1] = np.where(w > 0, blended, region)
    return VideoTensor(np.clip(frames, 0.0, 1.0), fps=original.fps,
                       identity=original.identity, nuisance=original.nuisance)


def fit_crop_box(regions: FaceRegion, frame_h: int, frame_w: int,
                 crop_size: int, inflate: float, snap: int) -> tuple:
    """One fixed crop window covering the (inflated) union of all boxes."""
    y0 = int(regions.boxes[:, 0].min())
    x0 = int(regions.boxes[:, 1].min())
    y1 = int(regions.boxes[:, 2].max())
    x1 = int(regions.boxes[:, 3].max())
    cy, cx = (y0 + y1) / 2.0, (x0 + x1) / 2.0
    need_h = (y1 - y0) * (1.0 + inflate)
    need_w = (x1 - x0) * (1.0 + inflate)
    if crop_size <= 0 or crop_size >= min(frame_h, frame_w):
        return (0, 0, frame_h, frame_w)
    if need_h > crop_size or need_w > crop_size:
        raise ValueError(f"inflated face region ({need_h:.0f}x{need_w:.0f}) exceeds "
                         f"crop size {crop_size}")
    by = int(round(cy - crop_size / 2.0))
    bx = int(round(cx - crop_size / 2.0))
    by = min(max(by, 0), frame_h - crop_size)
    bx = min(max(bx, 0), frame_w - crop_size)
    by = (by // snap) * snap
    bx = (bx // snap) * snap
    return (by, bx, by + crop_size, bx + crop_size)


def default_keyframe_editor(target_identity: IdentitySpec):
    """Full-frame identity edit via the exact swapper; needs nuisance metadata."""

    def editor(frame, state, index):
        if state is None:
            raise ValueError("default keyframe editor requires nuisance metadata")
        return oracle_swap(frame, state, target_identity)

    return editor


def _write_regions(path, regions: FaceRegion, crop_box):
    with open(path, "w") as f:
        f.write(f"# y0 x0 y1 x1 per frame; feather={regions.feather}\n")
        f.write(f"crop_box={','.join(str(v) for v in crop_box)}\n")
        for i, b in enumerate(regions.boxes):
            f.write(f"{i + 1} {b[0]} {b[1]} {b[2]} {b[3]}\n")


def run_swap(cfg: RunConfig, source_video: VideoTensor, target_identity: IdentitySpec,
             out_dir, model: ConditionedVelocityModel, keyframe_editor=None,
             detector=None):
    """Swap a source video toward a target identity and evaluate the result.

    Stages: detect -> crop -> keyframe edit -> plan -> stitch -> paste ->
    evaluate. Every intermediate lands under ``out_dir``; a stage failure
    raises StageError with the stage name, leaving earlier artifacts in place.
    Hand-refined keyframes dropped into ``out_dir/keyframes_override/kf_<t>.fvt``
    (crop-sized) override the editor's output for frame t.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.txt")
    codec = build_codec(cfg)
    stack = make_stack(cfg, model, codec)
    suite = default_suite()
    t, fh, fw = source_video.frames.shape[:3]

    stage = "detect"
    try:
        regions = detect_regions(source_video, detector=detector)
        regions.feather = cfg.feather
        crop_box = fit_crop_box(regions, fh, fw, cfg.crop_size, cfg.crop_inflate, cfg.patch)
        _write_regions(out / "regions.txt", regions, crop_box)

        stage = "crop"
        y0, x0, y1, x1 = crop_box
        ch, cw = y1 - y0, x1 - x0
        if (ch, cw) != (cfg.height, cfg.width):
            raise ValueError(f"crop {ch}x{cw} does not match model dims "
                             f"{cfg.height}x{cfg.width}; adjust crop_size")
        if source_video.identity is not None and source_video.nuisance is not None:
            full_mask = editable_mask_video([source_video.identity, target_identity],
                                            source_video.nuisance, fh, fw)
        else:
            full_mask = np.ones((t, fh, fw), dtype=np.float32)
        crop_frames = source_video.frames[:, y0:y1, x0:x1].copy()
        crop_mask = full_mask[:, y0:y1, x0:x1].copy()
        crop_video = VideoTensor(crop_frames, source_video.fps,
                                 source_video.identity, source_video.nuisance)

        stage = "keyframes"
        kfs = select_keyframes(crop_video, cfg.kf_budget, cfg.kf_strategy)
        editor = keyframe_editor or default_keyframe_editor(target_identity)
        override_dir = out / "keyframes_override"
        kf_dir = out / "keyframes"
        kf_dir.mkdir(exist_ok=True)
        kf_frames = {}
        for k in kfs.indices:
            override = override_dir / f"kf_{k:04d}.fvt"
            if override.exists():
                edited = videoio.read_fvt_array(override)[0]
                if edited.shape != (ch, cw, 3):
                    raise ValueError(f"override keyframe {k} has shape {edited.shape}, "
                                     f"expected ({ch}, {cw}, 3)")
            else:
                state = (source_video.nuisance.state(k - 1)
                         if source_video.nuisance is not None else None)
                edited = editor(source_video.frames[k - 1], state, k)[y0:y1, x0:x1]
            kf_frames[k] = np.asarray(edited, dtype=np.float32)
            videoio.write_fvt_array(kf_dir / f"kf_{k:04d}.fvt", kf_frames[k][None])
        kfs = kfs.with_frames(kf_frames)

        stage = "plan"
        plan = plan_chunks(t, kfs, cfg.window)
        (out / "plan.txt").write_text(format_plan(plan))

        stage = "stitch"
        chunk_dir = out / "chunks"
        chunk_dir.mkdir(exist_ok=True)

        def on_chunk(num, chunk, frames):
            videoio.write_fvt_array(chunk_dir / f"chunk_{num:02d}.fvt", frames)

        target_img = identity_portrait(target_identity, ch, cw)
        result = stitch(stack, crop_video, kfs, plan, crop_mask,
                        target_image=target_img, seed=cfg.seed, on_chunk=on_chunk)
        videoio.write_video(out / "crop_result.fvt", result.video)

        stage = "paste"
        final = paste_back(source_video, result.frames,
                           FaceRegion(np.tile(np.array(crop_box), (t, 1)), cfg.feather),
                           full_mask, cfg.feather)
        videoio.write_video(out / "final.fvt", final)

        stage = "evaluate"
        row = evaluate_video(final, source_video, identity_portrait(target_identity, fh, fw),
                             suite, k=min(cfg.eval_frames, t), rng=rng_for(("swap-eval", cfg.seed)))
        row["id_sim_source"] = aligned_id_similarity(final, source_video, suite)
        row["fvd"] = frechet_distance(video_feature_set([final]), video_feature_set([source_video]))
        report = MetricReport(rows={"run": row},
                              n_videos={"run": 1})
        (out / "report.json").write_text(report.to_json())
    except StageError:
        raise
    except Exception as exc:
        raise StageError(stage, str(exc)) from exc

    return final, report, labor_reduction(plan)


@dataclass
class TrainResult:
    checkpoint: Path
    losses: list
    steps: int
    aborted: bool = False


def _training_batch(cfg: RunConfig, pairs, codec: LinearCodec, step: int):
    rng = rng_for(("train-step", cfg.seed, step))
    batch = []
    for _ in range(cfg.batch_size):
        pair = pairs[int(rng.integers(len(pairs)))]
        t_total = pair.gt_video.length
        if t_total < cfg.window:
            raise ValueError(f"pair {pair.pair_id} shorter than the training window")
        a = int(rng.integers(t_total - cfg.window + 1))
        sl = slice(a, a + cfg.window)
        gt = pair.gt_video.frames[sl]
        src = pair.input_video.frames[sl]
        mask = pair.mask_video[sl]
        pack = build_pack(codec, src, gt[0], gt[-1], mask,
                          target_image=pair.target_image, mode=cfg.mode,
                          target_position=cfg.target_position,
                          grayscale_keyframes=cfg.grayscale_keyframes)
        x1 = codec.encode(gt).tokens.reshape(-1, cfg.latent_dim)
        sample = rf.make_rf_sample(x1, rng, cfg.timestep_dist, cfg.logit_mu, cfg.logit_sigma)
        batch.append((sample, pack))
    return batch


def train(cfg: RunConfig, manifest_path, out_dir, resume=None,
          log_every: int = 50) -> TrainResult:
    """Train the conditioned velocity model on forged pairs.

    Deterministic given (config, manifest): every step derives its own RNG, so
    resuming from a checkpoint reproduces the continuous run step for step.
    On a non-finite loss the last good checkpoint is kept and the driver
    aborts.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    header, records = load_manifest(manifest_path)
    if not records:
        raise ValueError(f"{manifest_path}: no usable pairs")
    pairs = [load_pair(manifest_path, rec) for rec in records]
    codec = build_codec(cfg)

    start_step = 0
    if resume is not None:
        model, payload = load_checkpoint(resume)
        optimizer = rf.make_optimizer(model, cfg.lr, cfg.weight_decay)
        load_checkpoint(resume, optimizer)
        start_step = int(payload["step"])
    else:
        model = build_model(cfg)
        optimizer = rf.make_optimizer(model, cfg.lr, cfg.weight_decay)

    ckpt = out / "checkpoint.pt"
    losses = []
    aborted = False
    step = start_step
    for step in range(start_step, cfg.train_steps):
        batch = _training_batch(cfg, pairs, codec, step)
        try:
            loss = rf.train_step(model, batch, optimizer)
        except rf.TrainingError:
            # parameters were not updated by the failing step; retain them
            save_checkpoint(ckpt, model, optimizer, step=step, extra={"aborted_at": step})
            aborted = True
            break
        losses.append(loss)
        if log_every and (step + 1) % log_every == 0:
            save_checkpoint(ckpt, model, optimizer, step=step + 1)
    if not aborted:
        save_checkpoint(ckpt, model, optimizer, step=cfg.train_steps)

    curve = out / "loss_curve.csv"
    mode = "a" if (resume is not None and curve.exists()) else "w"
    with open(curve, mode, newline="") as f:
        writer = csv.writer(f)
        if mode == "w":
            writer.writerow(["step", "loss"])
        for i, loss in enumerate(losses):
            writer.writerow([start_step + i + 1, f"{loss:.8f}"])
    if aborted:
        raise rf.TrainingError(f"non-finite loss at step {step}; "
                               f"last good checkpoint kept at {ckpt}")
    return TrainResult(checkpoint=ckpt, losses=losses, steps=cfg.train_steps)


def train_mode_sweep(cfg: RunConfig, manifest_path, out_dir, modes=None) -> dict:
    """One checkpoint per conditioning mode from a single config."""
    from .conditioning import MODES

    out = Path(out_dir)
    results = {}
    for mode in modes or MODES:
        sub = RunConfig(**{k: getattr(cfg, k) for k in vars(cfg)})
        sub.mode = mode
        sub.validate()
        results[mode] = train(sub, manifest_path, out / mode)
    return results


def evaluate_bench(bench_manifest, result_dirs: dict, target_kind: str = "easy",
                   k: int = 10, seed: int = 0) -> MetricReport:
    """Score per-method result directories against a benchmark manifest.

    ``result_dirs`` maps method name -> directory holding ``<case_id>.fvt``.
    """
    if target_kind not in ("easy", "hard"):
        raise ValueError("target_kind must be 'easy' or 'hard'")
    header, records = load_manifest(bench_manifest)
    if header.get("kind") != "bench-manifest":
        raise ValueError(f"{bench_manifest}: not a benchmark manifest")
    root = Path(bench_manifest).parent
    suite = default_suite()
    sources = [videoio.read_video(root / rec["source"]) for rec in records]
    targets = [videoio.read_fvt_array(root / rec[f"{target_kind}_image"])[0] for rec in records]
    rows, counts = {}, {}
    for method, rdir in result_dirs.items():
        rdir = Path(rdir)
        results = []
        for rec in records:
            path = rdir / f"{rec['case_id']}.fvt"
            if not path.exists():
                raise FileNotFoundError(f"{method}: missing result {path}")
            results.append(videoio.read_video(path))
        from .metrics import evaluate_method
        rows[method] = evaluate_method(results, sources, targets, suite, k=k, seed=seed)
        counts[method] = len(results)
    return MetricReport(rows=rows, n_videos=counts)
