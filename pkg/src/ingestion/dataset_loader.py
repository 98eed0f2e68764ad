"""
Directory dataset ingestion

Layout: ``<root>/<video_id>/frames/*.png|jpg`` and ``<root>/<video_id>/masks/*.png``,
paired by sorted file stem. Masks are 8-bit grayscale with shadow=255.
"""
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple, Union

import numpy as np
from PIL import Image, UnidentifiedImageError

from src.ingestion.clips import Video
from src.utils import get_logger
from src.utils.exceptions import DataIngestionError

logger = get_logger(__name__)

FRAME_EXTENSIONS = {".png", ".jpg", ".jpeg"}
MASK_EXTENSIONS = {".png"}
MASK_THRESHOLD = 128


def _open(path: Path) -> Image.Image:
    try:
        with Image.open(path) as image:
            image.load()
            return image.copy()
    except (OSError, UnidentifiedImageError) as e:
        logger.error(f"Cannot read image {path}: {str(e)}")
        raise DataIngestionError(f"Unreadable image: {path}") from e


def read_frame(
    path: Union[str, Path], size: Optional[Tuple[int, int]] = None
) -> np.ndarray:
    """Read an RGB frame as float32 [3, H, W] in [0, 1], optionally resized to (H, W)"""
    image = _open(Path(path)).convert("RGB")
    if size is not None and image.size != (size[1], size[0]):
        image = image.resize((size[1], size[0]), Image.Resampling.BILINEAR)
    return (np.asarray(image, dtype=np.float32) / 255.0).transpose(2, 0, 1).copy()


def decode_mask_file(
    path: Union[str, Path], size: Optional[Tuple[int, int]] = None
) -> np.ndarray:
    """Read an 8-bit mask image as uint8 {0, 1}, binarized at 128"""
    image = _open(Path(path)).convert("L")
    if size is not None and image.size != (size[1], size[0]):
        image = image.resize((size[1], size[0]), Image.Resampling.NEAREST)
    return (np.asarray(image) >= MASK_THRESHOLD).astype(np.uint8)


def encode_mask_file(mask: np.ndarray, path: Union[str, Path]) -> Path:
    """Write a binary mask as an 8-bit PNG with shadow=255"""
    path = Path(path)
    values = (np.asarray(mask) > 0).astype(np.uint8) * 255
    Image.fromarray(values).save(path, format="PNG")
    return path


def encode_frame_file(frame: np.ndarray, path: Union[str, Path]) -> Path:
    """Write a [3, H, W] frame in [0, 1] as an 8-bit RGB PNG"""
    path = Path(path)
    values = np.clip(np.rint(np.asarray(frame) * 255.0), 0, 255).astype(np.uint8)
    image = Image.fromarray(np.ascontiguousarray(values.transpose(1, 2, 0)))
    image.save(path, format="PNG")
    return path


def list_images(directory: Path, extensions: set) -> List[Path]:
    return sorted(
        p for p in directory.iterdir() if p.is_file() and p.suffix.lower() in extensions
    )


def read_frames_dir(
    frames_dir: Union[str, Path], size: Optional[Tuple[int, int]] = None
) -> Tuple[np.ndarray, List[str], Tuple[int, int]]:
    """
    Read every frame of a directory (no ground truth)

    Returns:
        (frames [N, 3, H, W], file stems, original (H, W) of the first frame)
    """
    frames_dir = Path(frames_dir)
    if not frames_dir.is_dir():
        raise DataIngestionError(f"Frames directory not found: {frames_dir}")
    paths = list_images(frames_dir, FRAME_EXTENSIONS)
    if not paths:
        raise DataIngestionError(f"No frame images found in {frames_dir}")

    first = _open(paths[0])
    source_size = (first.size[1], first.size[0])
    frames = [read_frame(p, size) for p in paths]
    shapes = {f.shape for f in frames}
    if len(shapes) > 1:
        raise DataIngestionError(
            f"Frames in {frames_dir} have differing sizes: {sorted(shapes)}"
        )
    return np.stack(frames), [p.stem for p in paths], source_size


@dataclass
class VideoEntry:
    video_id: str
    frame_paths: List[Path]
    mask_paths: List[Path]


class VideoDataset:
    """Lazily decoded videos of a dataset directory"""

    def __init__(self, entries: List[VideoEntry], size: Optional[Tuple[int, int]] = None):
        self.entries = entries
        self.size = size

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, index: int) -> Video:
        entry = self.entries[index]
        frames = [read_frame(p, self.size) for p in entry.frame_paths]
        masks = [decode_mask_file(p, self.size) for p in entry.mask_paths]
        for frame_path, frame, mask_path, mask in zip(
            entry.frame_paths, frames, entry.mask_paths, masks
        ):
            if frame.shape[1:] != mask.shape:
                raise DataIngestionError(
                    f"Mask {mask_path} size {mask.shape} does not match frame "
                    f"{frame_path} size {frame.shape[1:]}"
                )
        if len({f.shape for f in frames}) > 1:
            raise DataIngestionError(
                f"Frames of video '{entry.video_id}' have differing sizes"
            )
        return Video(
            video_id=entry.video_id,
            frames=np.stack(frames),
            masks=np.stack(masks),
            names=[p.stem for p in entry.frame_paths],
        )

    def __iter__(self) -> Iterator[Video]:
        for index in range(len(self)):
            yield self[index]

    @property
    def video_ids(self) -> List[str]:
        return [entry.video_id for entry in self.entries]


class VideoDatasetLoader:
    """Video dataset loader with validation of the directory layout"""

    def __init__(self, frames_dir: str = "frames", masks_dir: str = "masks"):
        self.frames_dir = frames_dir
        self.masks_dir = masks_dir
        self.frame_extensions = FRAME_EXTENSIONS
        self.mask_extensions = MASK_EXTENSIONS
        logger.debug("VideoDatasetLoader initialized")

    def load(
        self, root: Union[str, Path], size: Optional[Tuple[int, int]] = None
    ) -> VideoDataset:
        """
        Index a dataset directory

        Args:
            root: Dataset root containing one directory per video
            size: Optional (H, W) to resize frames (bilinear) and masks (nearest)

        Returns:
            VideoDataset decoding images on access

        Raises:
            DataIngestionError: If the root is missing, a video lacks its
                frames/masks directories, or frame and mask files do not pair up
        """
        root = Path(root)
        if not root.is_dir():
            raise DataIngestionError(f"Dataset root not found: {root}")

        entries = [
            self._index_video(video_dir)
            for video_dir in sorted(p for p in root.iterdir() if p.is_dir())
        ]
        logger.info(f"Indexed {len(entries)} videos under {root}")
        return VideoDataset(entries, size)

    def _index_video(self, video_dir: Path) -> VideoEntry:
        frames_dir = video_dir / self.frames_dir
        masks_dir = video_dir / self.masks_dir
        for directory in (frames_dir, masks_dir):
            if not directory.is_dir():
                raise DataIngestionError(f"Missing directory: {directory}")

        frame_paths = list_images(frames_dir, self.frame_extensions)
        mask_paths = list_images(masks_dir, self.mask_extensions)
        self._validate_pairing(video_dir.name, frame_paths, mask_paths)
        return VideoEntry(video_dir.name, frame_paths, mask_paths)

    def _validate_pairing(
        self, video_id: str, frame_paths: List[Path], mask_paths: List[Path]
    ) -> None:
        """Equal counts and matching sorted stems"""
        if len(frame_paths) != len(mask_paths):
            frame_stems = {p.stem for p in frame_paths}
            mask_stems = {p.stem for p in mask_paths}
            unpaired = sorted(
                [p for p in frame_paths if p.stem not in mask_stems]
                + [p for p in mask_paths if p.stem not in frame_stems]
            )
            offender = unpaired[0] if unpaired else (frame_paths or mask_paths)[-1]
            raise DataIngestionError(
                f"Video '{video_id}': {len(frame_paths)} frames but "
                f"{len(mask_paths)} masks (unpaired file: {offender})"
            )
        for frame_path, mask_path in zip(frame_paths, mask_paths):
            if frame_path.stem != mask_path.stem:
                raise DataIngestionError(
                    f"Video '{video_id}': frame {frame_path} has no matching mask "
                    f"(found {mask_path})"
                )

    def get_dataset_info(self, root: Union[str, Path]) -> Dict:
        """
        Summarize a dataset directory without decoding every image

        Args:
            root: Dataset root

        Returns:
            Dictionary with video count, per-video frame counts and image size
        """
        dataset = self.load(root)
        size = None
        if dataset.entries and dataset.entries[0].frame_paths:
            width, height = _open(dataset.entries[0].frame_paths[0]).size
            size = (height, width)
        frames = {e.video_id: len(e.frame_paths) for e in dataset.entries}
        return {
            "root": str(Path(root)),
            "videos": len(dataset),
            "frames": frames,
            "total_frames": sum(frames.values()),
            "size": size,
        }


def load_dataset(
    root: Union[str, Path], size: Optional[Tuple[int, int]] = None
) -> VideoDataset:
    return VideoDatasetLoader().load(root, size)
