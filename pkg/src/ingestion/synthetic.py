"""
Synthetic moving-shadow videos

Dark ellipses / polygons translate and deform over a smooth random texture.
Inside a shape the frame luminance is multiplied by a darkening factor, so the
mask delimits exactly the darkened pixels.
"""
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
from PIL import Image, ImageDraw
from scipy import ndimage

from src.ingestion.clips import Video, VideoClip, check_size, make_clips
from src.ingestion.dataset_loader import encode_frame_file, encode_mask_file
from src.utils import get_logger
from src.utils.exceptions import DataIngestionError, ValidationError

logger = get_logger(__name__)

SHAPE_KINDS = ("ellipse", "polygon")


@dataclass
class ShapeSpec:
    """One shadow caster. Positions are (row, col) in pixels, velocity in px/frame."""

    kind: str = "ellipse"
    center: Tuple[float, float] = (32.0, 32.0)
    radii: Tuple[float, float] = (10.0, 14.0)
    velocity: Tuple[float, float] = (0.0, 0.0)
    deform: float = 0.0  # relative radius change per frame
    darkening: float = 0.45
    vertices: int = 5
    rotation: float = 0.0

    def __post_init__(self):
        if self.kind not in SHAPE_KINDS:
            raise ValidationError(f"Unknown shape kind '{self.kind}'")
        if not 0.3 <= self.darkening <= 0.6:
            raise ValidationError(
                f"darkening must lie in [0.3, 0.6], got {self.darkening}"
            )
        if self.kind == "polygon" and self.vertices < 3:
            raise ValidationError("A polygon needs at least 3 vertices")


@dataclass
class MotionSpec:
    shapes: List[ShapeSpec] = field(default_factory=lambda: [ShapeSpec()])
    texture_sigma: float = 3.0


def random_motion(rng: np.random.Generator, size: Tuple[int, int]) -> MotionSpec:
    """Draw a motion spec with one or two shapes"""
    height, width = size
    shapes = []
    for _ in range(int(rng.integers(1, 3))):
        shapes.append(
            ShapeSpec(
                kind=SHAPE_KINDS[int(rng.integers(0, 2))],
                center=(
                    float(rng.uniform(0.3, 0.7) * height),
                    float(rng.uniform(0.3, 0.7) * width),
                ),
                radii=(
                    float(rng.uniform(0.12, 0.25) * height),
                    float(rng.uniform(0.12, 0.25) * width),
                ),
                velocity=(
                    float(rng.integers(-2, 3)),
                    float(rng.integers(-2, 3)),
                ),
                deform=float(rng.uniform(-0.03, 0.03)),
                darkening=float(rng.uniform(0.3, 0.6)),
                vertices=int(rng.integers(3, 8)),
                rotation=float(rng.uniform(0, 2 * np.pi)),
            )
        )
    return MotionSpec(shapes=shapes)


def _texture(rng: np.random.Generator, size: Tuple[int, int], sigma: float) -> np.ndarray:
    noise = rng.random((3,) + tuple(size))
    smooth = ndimage.gaussian_filter(noise, sigma=(0, sigma, sigma), mode="wrap")
    low, high = smooth.min(), smooth.max()
    smooth = (smooth - low) / max(high - low, 1e-12)
    return (0.2 + 0.7 * smooth).astype(np.float32)


def _rasterize(shape: ShapeSpec, frame_index: int, size: Tuple[int, int]) -> np.ndarray:
    height, width = size
    cy = shape.center[0] + shape.velocity[0] * frame_index
    cx = shape.center[1] + shape.velocity[1] * frame_index
    grow = max(1.0 + shape.deform * frame_index, 0.05)
    ry, rx = shape.radii[0] * grow, shape.radii[1] * grow

    if shape.kind == "ellipse":
        yy, xx = np.mgrid[0:height, 0:width]
        return (((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0).astype(np.uint8)

    angles = shape.rotation + 2 * np.pi * np.arange(shape.vertices) / shape.vertices
    points = [(cx + rx * np.cos(a), cy + ry * np.sin(a)) for a in angles]
    canvas = Image.new("L", (width, height), 0)
    ImageDraw.Draw(canvas).polygon(points, fill=1)
    return np.asarray(canvas, dtype=np.uint8)


def generate_synthetic_video(
    seed: int,
    length: int,
    size: Tuple[int, int] = (64, 64),
    motion: Optional[MotionSpec] = None,
    video_id: Optional[str] = None,
) -> Video:
    """
    Render a synthetic video

    Args:
        seed: Seed for texture (and motion when ``motion`` is None)
        length: Number of frames (>= 1)
        size: (H, W), multiples of 32
        motion: Shapes and their motion; drawn from the seed if omitted

    Returns:
        Video with frames in [0, 1] and binary masks
    """
    check_size(*size)
    if length < 1:
        raise ValidationError(f"length must be >= 1, got {length}")

    rng = np.random.default_rng(seed)
    if motion is None:
        motion = random_motion(rng, size)
    background = _texture(rng, size, motion.texture_sigma)

    frames = np.empty((length, 3) + tuple(size), dtype=np.float32)
    masks = np.zeros((length,) + tuple(size), dtype=np.uint8)
    for i in range(length):
        shade = np.ones(size, dtype=np.float32)
        for shape in motion.shapes:
            region = _rasterize(shape, i, size).astype(bool)
            shade[region] *= shape.darkening
            masks[i] |= region.astype(np.uint8)
        frames[i] = background * shade

    return Video(
        video_id=video_id or f"synthetic_{seed:04d}",
        frames=frames,
        masks=masks,
        names=[f"{i:05d}" for i in range(length)],
    )


def generate_synthetic_clip(
    seed: int,
    length: int,
    size: Tuple[int, int] = (64, 64),
    motion: Optional[MotionSpec] = None,
) -> VideoClip:
    """A single clip covering a whole synthetic video"""
    video = generate_synthetic_video(seed, length, size, motion)
    return make_clips(video, clip_len=length, stride=length)[0]


def synthetic_videos(
    videos: int, frames: int, size: Tuple[int, int], seed: int
) -> List[Video]:
    """``videos`` synthetic videos seeded ``seed``, ``seed + 1``, ..."""
    return [
        generate_synthetic_video(seed + i, frames, size, video_id=f"video_{i:03d}")
        for i in range(videos)
    ]


def write_synthetic_dataset(
    out_dir: Union[str, Path],
    videos: int,
    frames: int,
    size: Tuple[int, int] = (64, 64),
    seed: int = 0,
) -> Path:
    """
    Write a synthetic dataset in the directory layout read by VideoDatasetLoader

    ``<out>/<video_id>/frames/*.png``, ``<out>/<video_id>/masks/*.png`` and a
    ``meta.json`` manifest with the video list, size and seeds.
    """
    out_dir = Path(out_dir)
    check_size(*size)
    manifest = {
        "generator": "synthetic",
        "size": list(size),
        "frames": frames,
        "seed": seed,
        "videos": [],
    }

    try:
        for i, video in enumerate(synthetic_videos(videos, frames, size, seed)):
            frames_dir = out_dir / video.video_id / "frames"
            masks_dir = out_dir / video.video_id / "masks"
            frames_dir.mkdir(parents=True, exist_ok=True)
            masks_dir.mkdir(parents=True, exist_ok=True)
            for name, frame, mask in zip(video.names, video.frames, video.masks):
                encode_frame_file(frame, frames_dir / f"{name}.png")
                encode_mask_file(mask, masks_dir / f"{name}.png")
            manifest["videos"].append(
                {"video_id": video.video_id, "seed": seed + i, "frames": len(video)}
            )
        (out_dir / "meta.json").write_text(
            json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8"
        )
    except OSError as e:
        logger.error(f"Failed to write synthetic dataset to {out_dir}: {str(e)}")
        raise DataIngestionError(f"Failed to write synthetic dataset: {str(e)}") from e

    logger.info(f"Wrote {videos} synthetic videos ({frames} frames, {size}) to {out_dir}")
    return out_dir
