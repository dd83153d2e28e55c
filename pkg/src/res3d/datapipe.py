"""Video datasets: manifest, frame files, clip sampling and augmentation.

Frames live on disk one file per frame in a tiny raw container::

    b"VF01" | uint32 LE height | uint32 LE width | H*W*3 bytes RGB

and each video is a directory of such files named ``000000.vf``,
``000001.vf``, ... A JSON manifest lists the videos, their labels, the
train/test split and the per-channel training mean.

All randomness for one training clip comes from a generator seeded with
``(seed, epoch, clip index)`` and is drawn in a fixed order: temporal
start, crop position, crop scale, flip.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from res3d.errors import ConfigurationError, DataError

MANIFEST_VERSION = 1
FRAME_MAGIC = b"VF01"
_HEADER = struct.Struct("<4sII")

CROP_POSITIONS = ("tl", "tr", "bl", "br", "c")
CROP_SCALES = (2 ** -0.25, 2 ** -0.5, 2 ** -0.75, 0.5)


# ---------------------------------------------------------------------------
# frame container
# ---------------------------------------------------------------------------


def encode_frame(rgb):
    rgb = np.asarray(rgb)
    if rgb.dtype != np.uint8 or rgb.ndim != 3 or rgb.shape[2] != 3:
        raise DataError(f"frames must be uint8 (H, W, 3), got {rgb.dtype} {rgb.shape}")
    h, w, _ = rgb.shape
    return _HEADER.pack(FRAME_MAGIC, h, w) + np.ascontiguousarray(rgb).tobytes()


def decode_frame(buf):
    if len(buf) < _HEADER.size:
        raise DataError("frame file shorter than its header")
    magic, h, w = _HEADER.unpack_from(buf)
    if magic != FRAME_MAGIC:
        raise DataError(f"bad frame magic {magic!r}")
    n = h * w * 3
    if len(buf) != _HEADER.size + n:
        raise DataError(f"frame payload is {len(buf) - _HEADER.size} bytes, expected {n}")
    return np.frombuffer(buf, dtype=np.uint8, offset=_HEADER.size).reshape(h, w, 3)


def write_frame(path, rgb):
    Path(path).write_bytes(encode_frame(rgb))


def read_frame(path):
    try:
        return decode_frame(Path(path).read_bytes())
    except OSError as e:
        raise DataError(f"cannot read frame {path}: {e}") from e


def frame_path(video_dir, index):
    return Path(video_dir) / f"{index:06d}.vf"


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------


@dataclass
class VideoEntry:
    id: str
    frame_count: int
    frame_size: tuple
    label: int
    uri: str

    def __post_init__(self):
        self.frame_size = tuple(int(v) for v in self.frame_size)
        if self.frame_count < 1:
            raise DataError(f"video {self.id!r} has no frames")


@dataclass
class DatasetManifest:
    videos: list
    class_names: list
    splits: dict
    channel_mean: tuple | None = None
    root: Path = field(default=Path("."), compare=False)

    def __post_init__(self):
        self.validate()

    def validate(self):
        ids = [v.id for v in self.videos]
        if len(set(ids)) != len(ids):
            raise DataError("duplicate video ids in manifest")
        for v in self.videos:
            if not 0 <= v.label < len(self.class_names):
                raise DataError(f"video {v.id!r} label {v.label} outside {len(self.class_names)} classes")
            if self.splits.get(v.id) not in ("train", "test"):
                raise DataError(f"video {v.id!r} has no train/test split tag")
        if self.channel_mean is not None and len(self.channel_mean) != 3:
            raise DataError("channel_mean must have 3 entries")

    @property
    def num_classes(self):
        return len(self.class_names)

    def split(self, name):
        return [v for v in self.videos if self.splits[v.id] == name]

    def video_dir(self, entry):
        return self.root / entry.uri

    def to_json(self):
        doc = {
            "manifest_version": MANIFEST_VERSION,
            "class_names": list(self.class_names),
            "channel_mean": None if self.channel_mean is None else [float(m) for m in self.channel_mean],
            "videos": [
                {
                    "id": v.id,
                    "frame_count": v.frame_count,
                    "frame_size": list(v.frame_size),
                    "label": v.label,
                    "uri": v.uri,
                }
                for v in self.videos
            ],
            "splits": {v.id: self.splits[v.id] for v in self.videos},
        }
        return json.dumps(doc, indent=2) + "\n"

    def save(self, path):
        path = Path(path)
        path.write_text(self.to_json())
        return path

    @classmethod
    def load(cls, path):
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise DataError(f"cannot read manifest {path}: {e}") from e
        if doc.get("manifest_version") != MANIFEST_VERSION:
            raise DataError(f"unsupported manifest_version {doc.get('manifest_version')!r}")
        try:
            videos = [VideoEntry(**v) for v in doc["videos"]]
            return cls(videos, doc["class_names"], doc["splits"], doc.get("channel_mean"),
                       root=path.parent)
        except (KeyError, TypeError) as e:
            raise DataError(f"malformed manifest {path}: {e}") from e


class FrameSource:
    """Reads frames for manifest entries, optionally keeping whole videos in memory."""

    def __init__(self, manifest, cache=True):
        self.manifest = manifest
        self.cache = cache
        self._videos = {}

    def frames(self, entry, indices):
        if self.cache:
            video = self._videos.get(entry.id)
            if video is None:
                video = self._videos[entry.id] = self._read(entry, range(entry.frame_count))
            return video[np.asarray(indices)]
        return self._read(entry, indices)

    def _read(self, entry, indices):
        d = self.manifest.video_dir(entry)
        frames = [read_frame(frame_path(d, int(i))) for i in indices]
        shapes = {f.shape for f in frames}
        if len(shapes) != 1 or shapes.pop()[:2] != entry.frame_size:
            raise DataError(f"video {entry.id!r} frames do not match frame_size {entry.frame_size}")
        return np.stack(frames)


# ---------------------------------------------------------------------------
# sampling and augmentation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentConfig:
    clip_len: int = 16
    crop_scales: tuple = CROP_SCALES
    crop_positions: tuple = CROP_POSITIONS
    flip_probability: float = 0.5
    output_size: int = 112

    def __post_init__(self):
        object.__setattr__(self, "crop_scales", tuple(float(s) for s in self.crop_scales))
        object.__setattr__(self, "crop_positions", tuple(self.crop_positions))
        if self.clip_len < 1 or self.output_size < 1:
            raise ConfigurationError("clip_len and output_size must be positive")
        if not self.crop_scales or not all(0 < s <= 1 for s in self.crop_scales):
            raise ConfigurationError(f"crop scales must lie in (0, 1], got {self.crop_scales}")
        bad = set(self.crop_positions) - set(CROP_POSITIONS)
        if bad or not self.crop_positions:
            raise ConfigurationError(f"unknown crop positions {sorted(bad)}")
        if not 0 <= self.flip_probability <= 1:
            raise ConfigurationError("flip_probability must lie in [0, 1]")


def clip_rng(seed, epoch, index):
    """Independent PCG64 stream for one clip."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, epoch, index])))


def loop_indices(start, frame_count, clip_len):
    return [(start + i) % frame_count for i in range(clip_len)]


def sample_training_clip(video, rng, clip_len=16):
    """Uniform temporal start, looping around short videos."""
    n = video.frame_count if isinstance(video, VideoEntry) else int(video)
    start = int(rng.integers(0, max(n - clip_len, 0) + 1))
    return loop_indices(start, n, clip_len)


@dataclass(frozen=True)
class CropBox:
    top: int
    left: int
    size: int
    position: str
    scale: float


def crop_box(height, width, scale, position):
    side = math.floor(scale * min(height, width) + 0.5)
    if side < 1:
        raise ConfigurationError(f"crop side {side} < 1 for scale {scale} on {height}x{width}")
    if position == "c":
        top, left = (height - side) // 2, (width - side) // 2
    else:
        top = 0 if position[0] == "t" else height - side
        left = 0 if position[1] == "l" else width - side
    return CropBox(top, left, side, position, scale)


def draw_crop(height, width, rng, cfg):
    position = cfg.crop_positions[int(rng.integers(len(cfg.crop_positions)))]
    scale = cfg.crop_scales[int(rng.integers(len(cfg.crop_scales)))]
    return crop_box(height, width, scale, position)


def apply_crop(frames, box):
    return frames[:, box.top:box.top + box.size, box.left:box.left + box.size]


def multiscale_crop(frames, rng, cfg):
    """One (position, scale) draw shared by every frame of the clip."""
    _, h, w = frames.shape[:3]
    if min(h, w) < 2:
        raise ConfigurationError(f"frames too small to crop: {h}x{w}")
    box = draw_crop(h, w, rng, cfg)
    return apply_crop(frames, box), box


def _bilinear_taps(n_in, n_out):
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, (src - i0).astype(np.float32)


def spatial_resize(frames, size):
    """Bilinear resize of (T, H, W, C) frames to (T, size, size, C), half-pixel centres."""
    frames = np.asarray(frames)
    _, h, w = frames.shape[:3]
    if h == size and w == size:
        return frames.astype(np.float32)
    x = frames.astype(np.float32)
    r0, r1, fr = _bilinear_taps(h, size)
    fr = fr[None, :, None, None]
    x = x[:, r0] * (1 - fr) + x[:, r1] * fr
    c0, c1, fc = _bilinear_taps(w, size)
    fc = fc[None, None, :, None]
    return x[:, :, c0] * (1 - fc) + x[:, :, c1] * fc


def flip_frames(frames):
    return frames[:, :, ::-1]


def horizontal_flip(frames, rng, p=0.5):
    """One draw per clip; returns (frames, flipped)."""
    flipped = bool(rng.random() < p)
    return (flip_frames(frames) if flipped else frames), flipped


def to_channels_first(frames):
    """(T, H, W, 3) -> (3, T, H, W) float32."""
    return np.ascontiguousarray(np.moveaxis(frames, -1, 0), dtype=np.float32)


def mean_subtract(clip, channel_mean):
    mean = np.asarray(channel_mean, dtype=np.float32)
    if mean.shape != (clip.shape[0],):
        raise ConfigurationError(f"channel_mean needs {clip.shape[0]} entries, got {mean.shape}")
    return clip - mean.reshape((-1,) + (1,) * (clip.ndim - 1))


def eval_clips(video, clip_len=16):
    """Non-overlapping windows from frame 0; the last one loops to fill."""
    n = video.frame_count if isinstance(video, VideoEntry) else int(video)
    return [loop_indices(s, n, clip_len) for s in range(0, n, clip_len)]


def compute_channel_mean(manifest, source=None, split="train"):
    """Per-channel mean over every pixel of every frame in ``split``."""
    videos = manifest.split(split)
    if not videos:
        raise DataError(f"split {split!r} is empty")
    source = source or FrameSource(manifest, cache=False)
    total = np.zeros(3, dtype=np.float64)
    count = 0
    for v in videos:
        frames = source.frames(v, range(v.frame_count))
        total += frames.reshape(-1, 3).sum(axis=0, dtype=np.float64)
        count += frames.shape[0] * frames.shape[1] * frames.shape[2]
    return tuple(float(m) for m in total / count)


@dataclass
class ClipProvenance:
    video_id: str
    start: int
    crop: CropBox
    flipped: bool


@dataclass
class ClipBatch:
    data: np.ndarray
    labels: np.ndarray
    provenance: list


def _require_mean(manifest):
    if manifest.channel_mean is None:
        raise DataError("manifest has no channel_mean; compute it before training")
    return manifest.channel_mean


def training_clip(entry, source, cfg, channel_mean, rng):
    """Full training pipeline for one clip: sample, crop, resize, flip, mean-subtract."""
    indices = sample_training_clip(entry, rng, cfg.clip_len)
    frames = source.frames(entry, indices)
    frames, box = multiscale_crop(frames, rng, cfg)
    frames = spatial_resize(frames, cfg.output_size)
    frames, flipped = horizontal_flip(frames, rng, cfg.flip_probability)
    clip = mean_subtract(to_channels_first(frames), channel_mean)
    return clip, ClipProvenance(entry.id, indices[0], box, flipped)


def eval_clip(entry, window, source, cfg, channel_mean):
    """Deterministic evaluation preprocessing: centre crop at scale 1, resize, no flip."""
    frames = source.frames(entry, window)
    box = crop_box(frames.shape[1], frames.shape[2], 1.0, "c")
    frames = spatial_resize(apply_crop(frames, box), cfg.output_size)
    clip = mean_subtract(to_channels_first(frames), channel_mean)
    return clip, ClipProvenance(entry.id, window[0], box, False)


def training_batch(manifest, source, entries, cfg, seed, epoch, first_index):
    """Clips for ``entries``; clip ``i`` uses the stream (seed, epoch, first_index + i)."""
    mean = _require_mean(manifest)
    clips, prov = [], []
    for i, entry in enumerate(entries):
        clip, p = training_clip(entry, source, cfg, mean, clip_rng(seed, epoch, first_index + i))
        clips.append(clip)
        prov.append(p)
    labels = np.array([e.label for e in entries], dtype=np.int64)
    return ClipBatch(np.stack(clips), labels, prov)


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------


def _class_motion(k, num_classes):
    """Plaid orientation and drift speed (radians per frame) for class ``k``."""
    theta = (k + 0.5) * (math.pi / 2) / num_classes
    omega = 0.35 + 0.9 * k / max(num_classes - 1, 1)
    return theta, omega


def _render_video(k, num_classes, frames, height, width, rng):
    theta, omega = _class_motion(k, num_classes)
    period = min(height, width) / 5.0
    kmag = 2 * math.pi / period
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    proj1 = kmag * (xx * math.cos(theta) + yy * math.sin(theta))
    proj2 = kmag * (-xx * math.cos(theta) + yy * math.sin(theta))
    phase1, phase2 = rng.uniform(0, 2 * math.pi, 2)
    offset = rng.uniform(-25, 25) + rng.uniform(-10, 10, 3)
    contrast = rng.uniform(45, 65)
    out = np.empty((frames, height, width, 3), dtype=np.uint8)
    for t in range(frames):
        pattern = 0.5 * (np.cos(proj1 - omega * t + phase1) + np.cos(proj2 - omega * t + phase2))
        img = 128.0 + contrast * pattern[..., None] + offset
        img = img + rng.normal(0, 8, (height, width, 3))
        out[t] = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return out


def generate_synthetic_dataset(out_dir, num_classes=5, videos_per_class=10, frames_per_video=48,
                               frame_size=(240, 320), seed=0, train_fraction=0.6):
    """Write a reproducible dataset of drifting plaid patterns and return its manifest.

    Each class has its own plaid orientation and drift speed; videos differ
    by phase, brightness, colour cast, contrast and pixel noise. The plaid
    is mirror-symmetric, so horizontal flips keep the class cue intact.
    """
    if min(num_classes, videos_per_class, frames_per_video) < 1:
        raise ConfigurationError("class, video and frame counts must be positive")
    if num_classes < 2:
        raise ConfigurationError("need at least 2 classes")
    height, width = (int(v) for v in frame_size)
    if min(height, width) < 2:
        raise ConfigurationError(f"frame size {frame_size} too small")
    out_dir = Path(out_dir)
    n_train = int(math.floor(train_fraction * videos_per_class + 0.5))
    videos, splits = [], {}
    try:
        for k in range(num_classes):
            for j in range(videos_per_class):
                vid = f"c{k:03d}_v{j:03d}"
                rng = np.random.default_rng([seed, k, j])
                uri = f"videos/{vid}"
                d = out_dir / uri
                d.mkdir(parents=True, exist_ok=True)
                for t, frame in enumerate(_render_video(k, num_classes, frames_per_video, height, width, rng)):
                    write_frame(frame_path(d, t), frame)
                videos.append(VideoEntry(vid, frames_per_video, (height, width), k, uri))
                splits[vid] = "train" if j < n_train else "test"
        manifest = DatasetManifest(videos, [f"class_{k:03d}" for k in range(num_classes)], splits,
                                   root=out_dir)
        if manifest.split("train"):
            manifest.channel_mean = compute_channel_mean(manifest)
        manifest.save(out_dir / "manifest.json")
    except OSError as e:
        raise DataError(f"cannot write synthetic dataset to {out_dir}: {e}") from e
    return manifest
