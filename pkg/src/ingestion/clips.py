"""
Clip assembly: videos, boundary masks, fixed-length clips and timeline partitions
"""
from dataclasses import dataclass, field, replace
from typing import List, Optional

import numpy as np
from scipy import ndimage

from src.utils import get_logger
from src.utils.exceptions import ConfigurationError, ValidationError

logger = get_logger(__name__)

# 4-neighbourhood
_CROSS = ndimage.generate_binary_structure(2, 1)


@dataclass
class Video:
    """A full annotated video held in memory"""

    video_id: str
    frames: np.ndarray  # [N, 3, H, W] float32 in [0, 1]
    masks: np.ndarray  # [N, H, W] uint8 in {0, 1}
    names: List[str] = field(default_factory=list)

    def __post_init__(self):
        if self.frames.ndim != 4 or self.frames.shape[1] != 3:
            raise ValidationError(
                f"Video '{self.video_id}': frames must be [N, 3, H, W], "
                f"got {tuple(self.frames.shape)}"
            )
        if self.masks.shape != (self.frames.shape[0],) + self.frames.shape[2:]:
            raise ValidationError(
                f"Video '{self.video_id}': masks {tuple(self.masks.shape)} do not "
                f"match frames {tuple(self.frames.shape)}"
            )
        if not self.names:
            self.names = [f"{i:05d}" for i in range(len(self))]

    def __len__(self) -> int:
        return int(self.frames.shape[0])

    @property
    def size(self):
        return tuple(self.frames.shape[2:])


@dataclass
class VideoClip:
    """Consecutive frames with aligned shadow and boundary masks"""

    frames: np.ndarray  # [L, 3, H, W]
    masks: np.ndarray  # [L, H, W]
    boundaries: np.ndarray  # [L, H, W]
    video_id: str
    start_index: int
    valid_length: Optional[int] = None
    names: List[str] = field(default_factory=list)

    def __post_init__(self):
        if self.valid_length is None:
            self.valid_length = len(self)

    def __len__(self) -> int:
        return int(self.frames.shape[0])

    @property
    def size(self):
        return tuple(self.frames.shape[2:])


@dataclass(frozen=True)
class TimelinePartition:
    center: int
    short_term: List[int]
    long_term: List[int]


def check_size(height: int, width: int) -> None:
    """Frame sizes must be positive multiples of 32"""
    if height <= 0 or width <= 0 or height % 32 or width % 32:
        raise ConfigurationError(
            f"Frame size {height}x{width} must be positive multiples of 32"
        )


def extract_boundary(mask: np.ndarray) -> np.ndarray:
    """
    Boundary of a binary shadow mask

    A pixel is on the boundary when it is shadow and has at least one
    non-shadow 4-neighbour. Pixels outside the image count as shadow, so an
    all-one mask has no boundary.
    """
    mask = np.asarray(mask).astype(bool)
    if mask.ndim != 2:
        raise ValidationError(f"extract_boundary expects [H, W], got {mask.shape}")
    interior = ndimage.binary_erosion(mask, structure=_CROSS, border_value=1)
    return (mask & ~interior).astype(np.uint8)


def extract_boundaries(masks: np.ndarray) -> np.ndarray:
    boundaries = np.zeros(masks.shape, dtype=np.uint8)
    for i, mask in enumerate(masks):
        boundaries[i] = extract_boundary(mask)
    return boundaries


def _window(video: Video, start: int, clip_len: int) -> VideoClip:
    n = len(video)
    indices = [min(start + k, n - 1) for k in range(clip_len)]
    masks = video.masks[indices].astype(np.uint8)
    return VideoClip(
        frames=video.frames[indices].astype(np.float32),
        masks=masks,
        boundaries=extract_boundaries(masks),
        video_id=video.video_id,
        start_index=start,
        valid_length=min(clip_len, n - start),
        names=[video.names[i] for i in indices],
    )


def make_clips(video: Video, clip_len: int, stride: int) -> List[VideoClip]:
    """
    Slice a video into fixed-length clips

    Full windows start at multiples of ``stride``. If the last frame is not
    covered by a full window, one more window is emitted starting one stride
    after the last full one, padded by repeating the final frame.
    """
    if clip_len < 1 or stride < 1:
        raise ValidationError(
            f"clip_len and stride must be >= 1, got {clip_len} and {stride}"
        )
    n = len(video)
    if n == 0:
        return []

    clips = []
    start = 0
    while start + clip_len <= n:
        clips.append(_window(video, start, clip_len))
        start += stride

    last_covered = clips[-1].start_index + clip_len - 1 if clips else -1
    if last_covered < n - 1:
        pad_start = start if clips else 0
        clips.append(_window(video, pad_start, clip_len))

    logger.debug(f"Video '{video.video_id}': {n} frames -> {len(clips)} clips")
    return clips


def long_term_span(clip_len: int) -> int:
    """Largest long-term offset for a clip length"""
    return max(2, (clip_len - 1) // 2)


def partition_timeline(clip_len: int, center: int) -> TimelinePartition:
    """
    Short-term (adjacent) and long-term (interval) frames around ``center``

    Out-of-range indices are clamped to the clip, i.e. an edge frame copies
    itself as its neighbour. Clamped duplicates are kept.
    """
    if clip_len < 1:
        raise ValidationError(f"clip_len must be >= 1, got {clip_len}")
    if not 0 <= center < clip_len:
        raise ValidationError(
            f"center {center} out of range for clip length {clip_len}"
        )

    def clamp(i: int) -> int:
        return min(max(i, 0), clip_len - 1)

    span = long_term_span(clip_len)
    short_term = [clamp(center - 1), clamp(center + 1)]
    offsets = list(range(-span, -1)) + list(range(2, span + 1))
    long_term = [clamp(center + o) for o in offsets]
    return TimelinePartition(center=center, short_term=short_term, long_term=long_term)


def flip_clip(clip: VideoClip, horizontal: bool, vertical: bool) -> VideoClip:
    """Flip every frame, mask and boundary of a clip the same way"""
    frames, masks, boundaries = clip.frames, clip.masks, clip.boundaries
    if horizontal:
        frames, masks, boundaries = frames[..., ::-1], masks[..., ::-1], boundaries[..., ::-1]
    if vertical:
        frames = frames[..., ::-1, :]
        masks = masks[..., ::-1, :]
        boundaries = boundaries[..., ::-1, :]
    return replace(
        clip,
        frames=np.ascontiguousarray(frames),
        masks=np.ascontiguousarray(masks),
        boundaries=np.ascontiguousarray(boundaries),
        names=list(clip.names),
    )


def augment_clip(clip: VideoClip, seed: int, flip_prob: float = 0.5) -> VideoClip:
    """Random horizontal / vertical flip, one decision for the whole clip"""
    rng = np.random.default_rng(seed)
    horizontal = bool(rng.random() < flip_prob)
    vertical = bool(rng.random() < flip_prob)
    if not (horizontal or vertical):
        return clip
    return flip_clip(clip, horizontal, vertical)
