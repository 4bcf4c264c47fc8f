"""Synthetic moving-blob action videos, augmentation, and clip persistence.

Each class is a trajectory family: identical motion before the key frame,
class-specific motion after it. A class-correlated cue (area-preserving
blob aspect ratio) is planted before the climax so early prediction is
possible but invisible to plain per-frame intensity statistics.
"""
from __future__ import annotations

import csv
import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .autodiff import DimensionError, ParameterError
from .flow import bilinear_resize

CLIP_MAGIC = b"FLV1"

# desk-scale analogue of crop sizes {320,360,400} against a 480-wide source
DEFAULT_CROP_SIZES = (32, 36, 40)
DEFAULT_FRAME_DIMS = (16, 48, 48)

# post-key-frame velocity per class, as multiples of the base speed
CLASS_MOTIONS = [(1.0, 0.0), (-1.0, 0.0), (0.0, 1.0),
                 (0.0, -1.0), (1.0, 1.0), (0.0, 0.0)]
# pre-climax cue: area-preserving aspect ratio per class
CLASS_ASPECTS = [0.5, 0.72, 1.0, 1.4, 2.0, 2.8]


class ClipFormatError(ValueError):
    """Raised when a clip container file is malformed."""


@dataclass
class VideoClip:
    frames: np.ndarray              # (T, H, W, C), values in [0, 1]
    label: Optional[int] = None
    id: str = ""

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


@dataclass
class SynthConfig:
    n_classes: int = 6
    clips_per_class: int = 10
    frame_dims: tuple = DEFAULT_FRAME_DIMS   # (T, H, W)
    key_frame_fraction: float = 0.5
    noise_std: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if not (0.0 < self.key_frame_fraction < 1.0):
            raise ParameterError("key_frame_fraction must lie in (0, 1)")
        t, h, w = self.frame_dims
        if t < 2 or h < 8 or w < 8:
            raise DimensionError(f"frame_dims too small: {self.frame_dims}")
        if self.n_classes > len(CLASS_MOTIONS):
            raise ParameterError(
                f"at most {len(CLASS_MOTIONS)} classes supported")


def derive_seed(seed: int, name: str) -> int:
    """Stable per-item RNG seed so concurrency never changes output."""
    digest = hashlib.sha256(f"{seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def _render_blob(h, w, cy, cx, sigma, aspect):
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    sx = sigma * np.sqrt(aspect)
    sy = sigma / np.sqrt(aspect)
    return np.exp(-((xx - cx) ** 2 / (2 * sx ** 2)
                    + (yy - cy) ** 2 / (2 * sy ** 2)))


def synth_clip(cfg: SynthConfig, label: int, clip_id: str) -> VideoClip:
    """One clip of the given class, deterministic in (cfg.seed, clip_id)."""
    t, h, w = cfg.frame_dims
    rng = np.random.default_rng(derive_seed(cfg.seed, clip_id))
    key = int(cfg.key_frame_fraction * t)
    speed = 0.05 * w
    sigma = 0.09 * min(h, w) * (1.0 + 0.1 * rng.uniform(-1, 1))
    # identical pre-climax motion for all classes; jitter is class-blind
    cy = h * (0.5 + 0.12 * rng.uniform(-1, 1))
    cx = w * (0.2 + 0.05 * rng.uniform(-1, 1))
    vx, vy = speed, 0.0
    aspect = CLASS_ASPECTS[label]

    frames = np.empty((t, h, w, 3))
    for i in range(t):
        if i == key:
            mx, my = CLASS_MOTIONS[label]
            vx, vy = speed * mx, speed * my
        img = _render_blob(h, w, cy, cx, sigma, aspect)
        frames[i] = img[..., None]
        cx = float(np.clip(cx + vx, 2.0, w - 3.0))
        cy = float(np.clip(cy + vy, 2.0, h - 3.0))
    frames += rng.normal(0.0, cfg.noise_std, size=frames.shape)
    return VideoClip(np.clip(frames, 0.0, 1.0), label=label, id=clip_id)


def gen_dataset(cfg: SynthConfig) -> list[VideoClip]:
    """Balanced labeled clip set, fully deterministic given cfg.seed."""
    clips = []
    for label in range(cfg.n_classes):
        for k in range(cfg.clips_per_class):
            clip_id = f"c{label}_k{k}"
            clips.append(synth_clip(cfg, label, clip_id))
    return clips


# --------------------------------------------------------------------------
# Augmentation
# --------------------------------------------------------------------------

def random_clip(video: VideoClip, length: int,
                rng: np.random.Generator) -> VideoClip:
    """Contiguous window of `length` frames at a uniform random start."""
    t = video.n_frames
    if length > t:
        raise DimensionError(f"random_clip: length {length} > {t} frames")
    start = int(rng.integers(0, t - length + 1))
    return VideoClip(video.frames[start:start + length].copy(),
                     label=video.label, id=video.id)


def multiscale_crop(video: VideoClip, sizes: Sequence[int],
                    rng: np.random.Generator) -> list[VideoClip]:
    """Random square crop at a random scale, emitted alongside the original."""
    _, h, w, _ = video.frames.shape
    sizes = sorted(set(int(s) for s in sizes))
    if sizes[-1] > min(h, w):
        raise DimensionError(
            f"crop size {sizes[-1]} exceeds frame dims ({h}, {w})")
    size = int(rng.choice(sizes))
    y0 = int(rng.integers(0, h - size + 1))
    x0 = int(rng.integers(0, w - size + 1))
    crop = video.frames[:, y0:y0 + size, x0:x0 + size, :].copy()
    return [VideoClip(crop, label=video.label, id=video.id + "_crop"),
            VideoClip(video.frames.copy(), label=video.label, id=video.id)]


def resize(video: VideoClip, out_h: int, out_w: int) -> VideoClip:
    """Per-frame bilinear resize; values stay in [0, 1]."""
    if out_h < 1 or out_w < 1:
        raise DimensionError(f"resize target ({out_h}, {out_w})")
    t, h, w, c = video.frames.shape
    if (out_h, out_w) == (h, w):
        return VideoClip(video.frames.copy(), label=video.label, id=video.id)
    out = np.empty((t, out_h, out_w, c))
    for i in range(t):
        for ch in range(c):
            out[i, :, :, ch] = bilinear_resize(video.frames[i, :, :, ch],
                                               out_h, out_w)
    return VideoClip(np.clip(out, 0.0, 1.0), label=video.label, id=video.id)


def truncate_ratio(video: VideoClip, r: float) -> VideoClip:
    """First floor(r*T) frames — the partial-observation view."""
    if not (0.0 < r <= 1.0):
        raise ParameterError(f"ratio must lie in (0, 1], got {r}")
    n = int(r * video.n_frames)
    if n < 2:
        raise DimensionError(
            f"ratio {r} keeps {n} of {video.n_frames} frames (< 2)")
    return VideoClip(video.frames[:n].copy(), label=video.label, id=video.id)


# --------------------------------------------------------------------------
# Persistence
# --------------------------------------------------------------------------

def save_clip(clip: VideoClip, path) -> None:
    t, h, w, c = clip.frames.shape
    payload = clip.frames.astype("<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(CLIP_MAGIC)
        fh.write(struct.pack("<4I", t, h, w, c))
        fh.write(payload)


def load_clip(path, label: Optional[int] = None,
              clip_id: Optional[str] = None) -> VideoClip:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 20 or raw[:4] != CLIP_MAGIC:
        raise ClipFormatError(f"{path}: bad magic or truncated header")
    t, h, w, c = struct.unpack("<4I", raw[4:20])
    expect = 20 + 4 * t * h * w * c
    if len(raw) != expect:
        raise ClipFormatError(
            f"{path}: expected {expect} bytes for dims "
            f"({t},{h},{w},{c}), got {len(raw)}")
    frames = np.frombuffer(raw[20:], dtype="<f4").reshape(t, h, w, c)
    return VideoClip(frames.astype(np.float64), label=label,
                     id=clip_id or path.stem)


MANIFEST_NAME = "manifest.csv"


def save_dataset(clips: list[VideoClip], out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = out_dir / MANIFEST_NAME
    with open(manifest, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["clip_id", "path", "label", "n_frames"])
        for clip in clips:
            rel = f"{clip.id}.vid"
            save_clip(clip, out_dir / rel)
            writer.writerow([clip.id, rel,
                             "" if clip.label is None else clip.label,
                             clip.n_frames])
    return manifest


def load_dataset(data_dir) -> list[VideoClip]:
    data_dir = Path(data_dir)
    manifest = data_dir / MANIFEST_NAME
    if not manifest.exists():
        raise FileNotFoundError(f"no {MANIFEST_NAME} in {data_dir}")
    clips = []
    with open(manifest, newline="") as fh:
        for row in csv.DictReader(fh):
            label = int(row["label"]) if row["label"] != "" else None
            clips.append(load_clip(data_dir / row["path"], label=label,
                                   clip_id=row["clip_id"]))
    return clips


def train_test_split(clips: list[VideoClip], test_fraction: float,
                     seed: int) -> tuple[list[VideoClip], list[VideoClip]]:
    """Seeded per-class split keeping both sides class-balanced."""
    by_label: dict = {}
    for clip in clips:
        by_label.setdefault(clip.label, []).append(clip)
    train, test = [], []
    for label in sorted(by_label, key=lambda x: (x is None, x)):
        group = sorted(by_label[label], key=lambda c: c.id)
        rng = np.random.default_rng(derive_seed(seed, f"split_{label}"))
        order = rng.permutation(len(group))
        n_test = max(1, int(round(test_fraction * len(group))))
        test.extend(group[i] for i in order[:n_test])
        train.extend(group[i] for i in order[n_test:])
    return train, test
