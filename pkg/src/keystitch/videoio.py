"""Binary video files ("FVT1") and their metadata sidecars.

FVT1 layout: 4-byte magic ``FVT1``, four little-endian uint32 (T, H, W, C),
then T*H*W*C little-endian float32 in row-major (t, h, w, c) order.

The sidecar ``<name>.meta`` is a flat ``key=value`` text file. Keys:

    fps             rational, e.g. ``12/1``
    identity_seed   int (identity regenerated from the seed)
    nuisance_pose   comma-separated floats, one per frame
    nuisance_illum / nuisance_expr / nuisance_tx / nuisance_ty  likewise

All keys are optional; absent metadata loads as None.
"""

from __future__ import annotations

import struct
from fractions import Fraction
from pathlib import Path

import numpy as np

from .synth import IdentitySpec, NuisanceTrack, VideoTensor

MAGIC = b"FVT1"


class FormatError(ValueError):
    """File does not parse as FVT1."""


def write_fvt_array(path, arr: np.ndarray) -> None:
    """Write any (T,H,W,C) float array (masks use C=1)."""
    arr = np.asarray(arr, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[..., None]
    if arr.ndim != 4:
        raise ValueError(f"expected (T,H,W,C) array, got shape {arr.shape}")
    t, h, w, c = arr.shape
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<4I", t, h, w, c))
        f.write(arr.astype("<f4").tobytes(order="C"))


def read_fvt_array(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        header = f.read(16)
        if len(header) != 16:
            raise FormatError(f"{path}: truncated header")
        t, h, w, c = struct.unpack("<4I", header)
        data = np.frombuffer(f.read(), dtype="<f4")
    if data.size != t * h * w * c:
        raise FormatError(f"{path}: payload holds {data.size} floats, header says {t*h*w*c}")
    return data.reshape(t, h, w, c).astype(np.float32)


def _format_floats(arr) -> str:
    return ",".join(repr(float(x)) for x in np.asarray(arr).ravel())


def _parse_floats(text: str) -> np.ndarray:
    return np.array([float(x) for x in text.split(",")], dtype=np.float64)


def write_sidecar(path, video: VideoTensor) -> None:
    lines = [f"fps={video.fps.numerator}/{video.fps.denominator}"]
    if video.identity is not None:
        lines.append(f"identity_seed={video.identity.seed}")
    if video.nuisance is not None:
        n = video.nuisance
        lines += [
            f"nuisance_pose={_format_floats(n.pose)}",
            f"nuisance_illum={_format_floats(n.illum)}",
            f"nuisance_expr={_format_floats(n.expr)}",
            f"nuisance_tx={_format_floats(n.tx)}",
            f"nuisance_ty={_format_floats(n.ty)}",
        ]
    Path(path).write_text("\n".join(lines) + "\n")


def read_sidecar(path):
    """Returns (fps, identity, nuisance); missing file gives defaults."""
    fps, identity, nuisance = Fraction(12, 1), None, None
    p = Path(path)
    if not p.exists():
        return fps, identity, nuisance
    kv = {}
    for line in p.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#") or "=" not in line:
            continue
        k, v = line.split("=", 1)
        kv[k.strip()] = v.strip()
    if "fps" in kv:
        num, _, den = kv["fps"].partition("/")
        fps = Fraction(int(num), int(den or 1))
    if "identity_seed" in kv:
        identity = IdentitySpec.from_seed(int(kv["identity_seed"]))
    fields = ["nuisance_pose", "nuisance_illum", "nuisance_expr", "nuisance_tx", "nuisance_ty"]
    if all(k in kv for k in fields):
        nuisance = NuisanceTrack(*(_parse_floats(kv[k]) for k in fields))
    return fps, identity, nuisance


def sidecar_path(path) -> Path:
    return Path(str(path) + ".meta")


def write_video(path, video: VideoTensor) -> None:
    write_fvt_array(path, video.frames)
    write_sidecar(sidecar_path(path), video)


def read_video(path) -> VideoTensor:
    arr = read_fvt_array(path)
    if arr.shape[-1] != 3:
        raise FormatError(f"{path}: video files need C=3, got C={arr.shape[-1]}")
    fps, identity, nuisance = read_sidecar(sidecar_path(path))
    return VideoTensor(np.clip(arr, 0.0, 1.0), fps=fps, identity=identity, nuisance=nuisance)


def dump_png_frames(video: VideoTensor, out_dir) -> None:
    """Optional PNG dump for eyeballing runs; requires Pillow."""
    from PIL import Image

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for t in range(video.length):
        img = (video.frames[t] * 255.0 + 0.5).astype(np.uint8)
        Image.fromarray(img).save(out / f"frame_{t:04d}.png")
