"""Frame-directory datasets: manifest, clip loading and the seeded synthetic set.

A dataset is a directory holding `manifest.json` and one sub-directory of
numbered image files per clip. A single-frame clip is an image.
"""
import json
import logging
import os
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import cv2
import numpy as np
from marshmallow import EXCLUDE, Schema, ValidationError, fields, post_load, validate
from PIL import Image

from difftok.errors import ClipLoadError, DataError
from difftok.models import SPATIAL_FACTOR, TEMPORAL_FACTOR, VideoTensor
from difftok.record_utils import fields as log_fields

logger = logging.getLogger(__name__)

MANIFEST_NAME = 'manifest.json'
MANIFEST_VERSION = 1
FRAME_EXTENSIONS = ('.png', '.jpg', '.jpeg', '.bmp')


@dataclass(frozen=True)
class PreprocessSpec:
    """`frames=None` keeps the longest 1 + 4k prefix; `crop=None` crops to multiples of 8."""

    frames: Optional[int] = None
    crop: Optional[int] = None
    resize: Optional[int] = None
    stride: int = 1
    start: int = 0


@dataclass(frozen=True)
class ClipEntry:
    path: str
    frames: int
    height: int
    width: int
    split: str = 'train'
    fps: Optional[float] = None
    velocity: Optional[Tuple[int, int]] = None

    @property
    def name(self) -> str:
        return os.path.basename(os.path.normpath(self.path))


@dataclass
class DatasetManifest:
    root: str
    entries: List[ClipEntry] = field(default_factory=list)
    preprocess: PreprocessSpec = field(default_factory=PreprocessSpec)

    def split(self, name: str) -> List[ClipEntry]:
        return [e for e in self.entries if e.split == name]


class PreprocessSchema(Schema):
    frames = fields.Int(allow_none=True, validate=validate.Range(min=1))
    crop = fields.Int(allow_none=True, validate=validate.Range(min=SPATIAL_FACTOR))
    resize = fields.Int(allow_none=True, validate=validate.Range(min=1))
    stride = fields.Int(validate=validate.Range(min=1))
    start = fields.Int(validate=validate.Range(min=0))

    @post_load
    def make(self, data, **kwargs):
        return PreprocessSpec(**data)


class ClipEntrySchema(Schema):
    class Meta:
        unknown = EXCLUDE

    path = fields.Str(required=True)
    frames = fields.Int(required=True, validate=validate.Range(min=1))
    height = fields.Int(required=True, validate=validate.Range(min=1))
    width = fields.Int(required=True, validate=validate.Range(min=1))
    split = fields.Str(load_default='train')
    fps = fields.Float(allow_none=True, load_default=None)
    velocity = fields.Tuple((fields.Int(), fields.Int()), allow_none=True, load_default=None)

    @post_load
    def make(self, data, **kwargs):
        return ClipEntry(**data)


class ManifestSchema(Schema):
    format_version = fields.Int(load_default=MANIFEST_VERSION, validate=validate.Equal(MANIFEST_VERSION))
    preprocess = fields.Nested(PreprocessSchema, load_default=None)
    clips = fields.List(fields.Nested(ClipEntrySchema), required=True)


def frame_files(directory: str) -> List[str]:
    try:
        names = sorted(n for n in os.listdir(directory) if n.lower().endswith(FRAME_EXTENSIONS))
    except OSError as e:
        raise ClipLoadError(f'cannot list clip directory {directory}: {e}', path=directory) from e
    return [os.path.join(directory, n) for n in names]


def read_frame(path: str) -> np.ndarray:
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert('RGB'), dtype=np.uint8)
    except (OSError, ValueError) as e:
        raise ClipLoadError(f'unreadable frame {path}: {e}', path=path) from e


def resize_shorter_side(frame: np.ndarray, size: int) -> np.ndarray:
    h, w = frame.shape[:2]
    if min(h, w) == size:
        return frame
    scale = size / min(h, w)
    new_w, new_h = max(size, round(w * scale)), max(size, round(h * scale))
    return cv2.resize(frame, (new_w, new_h), interpolation=cv2.INTER_LINEAR)


def center_crop(frame: np.ndarray, crop_h: int, crop_w: int) -> np.ndarray:
    h, w = frame.shape[:2]
    if crop_h > h or crop_w > w:
        raise ClipLoadError(f'frame {h}x{w} is smaller than the {crop_h}x{crop_w} crop',
                            height=h, width=w, crop=crop_h)
    top, left = (h - crop_h) // 2, (w - crop_w) // 2
    return frame[top:top + crop_h, left:left + crop_w]


def select_indices(available: int, spec: PreprocessSpec) -> List[int]:
    """Frame indices for `spec`, truncated to 1 + 4k."""
    if spec.frames is None:
        usable = (available - 1 - spec.start) // spec.stride + 1 if available > spec.start else 0
        count = 1 + (usable - 1) // TEMPORAL_FACTOR * TEMPORAL_FACTOR if usable >= 1 else 0
    else:
        count = 1 + (spec.frames - 1) // TEMPORAL_FACTOR * TEMPORAL_FACTOR
    indices = [spec.start + i * spec.stride for i in range(count)]
    if not indices or indices[-1] >= available:
        raise ClipLoadError(f'clip has {available} frames, needs {indices[-1] + 1 if indices else 1}',
                            available=available, frames=spec.frames, stride=spec.stride, start=spec.start)
    return indices


class DatasetService:
    def load_manifest(self, path: str) -> DatasetManifest:
        if os.path.isdir(path):
            path = os.path.join(path, MANIFEST_NAME)
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except (OSError, json.JSONDecodeError) as e:
            raise DataError(f'cannot read dataset manifest {path}: {e}', path=path) from e
        try:
            data = ManifestSchema().load(raw)
        except ValidationError as e:
            raise DataError(f'invalid dataset manifest {path}', path=path, fields=e.messages) from e

        manifest = DatasetManifest(os.path.dirname(os.path.abspath(path)), data['clips'],
                                   data['preprocess'] or PreprocessSpec())
        logger.info(f'✅ manifest loaded: {len(manifest.entries)} clips',
                    extra=log_fields(path=path, clips=len(manifest.entries)))
        return manifest

    def save_manifest(self, manifest: DatasetManifest, path: Optional[str] = None) -> str:
        path = path or os.path.join(manifest.root, MANIFEST_NAME)
        payload = ManifestSchema().dump({'format_version': MANIFEST_VERSION,
                                         'preprocess': manifest.preprocess,
                                         'clips': manifest.entries})
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, 'w') as fh:
            json.dump(payload, fh, indent=2)
        return path

    def load_clip(self, entry: ClipEntry, spec: PreprocessSpec, root: Optional[str] = None) -> VideoTensor:
        directory = entry.path if root is None or os.path.isabs(entry.path) else os.path.join(root, entry.path)
        files = frame_files(directory)
        indices = select_indices(len(files), spec)

        frames = []
        for index in indices:
            frame = read_frame(files[index])
            if spec.resize:
                frame = resize_shorter_side(frame, spec.resize)
            h, w = frame.shape[:2]
            if spec.crop:
                crop_h = crop_w = spec.crop
            else:
                crop_h, crop_w = h // SPATIAL_FACTOR * SPATIAL_FACTOR, w // SPATIAL_FACTOR * SPATIAL_FACTOR
            if crop_h < SPATIAL_FACTOR or crop_w < SPATIAL_FACTOR:
                raise ClipLoadError(f'frame {h}x{w} is too small', path=files[index])
            frames.append(center_crop(frame, crop_h, crop_w))

        shapes = {f.shape for f in frames}
        if len(shapes) != 1:
            raise ClipLoadError('frames in one clip differ in size', path=directory, shapes=sorted(shapes))
        fps = entry.fps / spec.stride if entry.fps else None
        return VideoTensor.from_uint8(np.stack(frames), fps=fps)

    def make_synthetic_dataset(self, root: str, seed: int = 0, n_clips: int = 32, resolution: int = 64,
                               frames: int = 17, val_fraction: float = 0.125, max_speed: int = 2,
                               fps: float = 8.0) -> DatasetManifest:
        """Gradients and squares drifting with a constant integer velocity per clip."""
        rng = np.random.default_rng(seed)
        n_val = int(round(n_clips * val_fraction))
        entries = []
        for i in range(n_clips):
            velocity = _draw_velocity(rng, max_speed)
            clip = synthesize_clip(rng, resolution, frames, velocity)
            name = f'clip_{i:05d}'
            directory = os.path.join(root, name)
            os.makedirs(directory, exist_ok=True)
            for k, frame in enumerate(clip):
                Image.fromarray(frame).save(os.path.join(directory, f'{k:05d}.png'))
            split = 'val' if i >= n_clips - n_val else 'train'
            entries.append(ClipEntry(name, frames, resolution, resolution, split, fps, velocity))

        manifest = DatasetManifest(os.path.abspath(root), entries, PreprocessSpec(frames=frames, crop=resolution))
        self.save_manifest(manifest)
        logger.info(f'✅ synthetic dataset written: {n_clips} clips',
                    extra=log_fields(root=root, seed=seed, clips=n_clips, resolution=resolution, frames=frames))
        return manifest


def _draw_velocity(rng: np.random.Generator, max_speed: int) -> Tuple[int, int]:
    while True:
        vy, vx = (int(v) for v in rng.integers(-max_speed, max_speed + 1, size=2))
        if vy or vx:
            return vy, vx


def synthesize_clip(rng: np.random.Generator, resolution: int, frames: int,
                    velocity: Tuple[int, int]) -> np.ndarray:
    """(frames, H, W, 3) uint8; frame k is the base canvas rolled by k·velocity."""
    yy, xx = np.mgrid[0:resolution, 0:resolution].astype(np.float64) / resolution
    canvas = np.empty((resolution, resolution, 3))
    for c in range(3):
        fy, fx = rng.integers(1, 3, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        canvas[..., c] = 0.5 + 0.35 * np.sin(2 * np.pi * (fy * yy + fx * xx) + phase)

    for _ in range(int(rng.integers(2, 5))):
        size = int(rng.integers(resolution // 8, resolution // 3 + 1))
        top, left = (int(v) for v in rng.integers(0, resolution - size + 1, size=2))
        canvas[top:top + size, left:left + size] = rng.uniform(0.0, 1.0, size=3)

    base = np.clip(np.rint(canvas * 255), 0, 255).astype(np.uint8)
    vy, vx = velocity
    return np.stack([np.roll(base, (k * vy, k * vx), axis=(0, 1)) for k in range(frames)])


dataset_service = DatasetService()


def load_clip(entry: ClipEntry, spec: PreprocessSpec, root: Optional[str] = None) -> VideoTensor:
    return dataset_service.load_clip(entry, spec, root)


def make_synthetic_dataset(root: str, seed: int = 0, n_clips: int = 32, resolution: int = 64,
                           frames: int = 17, **kwargs) -> DatasetManifest:
    return dataset_service.make_synthetic_dataset(root, seed, n_clips, resolution, frames, **kwargs)
