"""
Evaluation, inference and profiling of trained checkpoints
"""
import time
from pathlib import Path
from typing import Dict, Iterable, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from PIL import Image

from config.settings import RunConfig, architecture_of, build_config
from src.evaluation.metrics import MetricAccumulator, MetricReport
from src.ingestion.clips import Video, make_clips
from src.ingestion.dataset_loader import encode_mask_file, read_frames_dir
from src.models.network import TBGDiff
from src.orchestration.checkpoint import Checkpoint, load_checkpoint
from src.orchestration.trainer import DTYPES, load_videos
from src.utils import get_logger
from src.utils.exceptions import ConfigurationError, DataIngestionError

logger = get_logger(__name__)

CheckpointLike = Union[Checkpoint, str, Path]
METRICS_CSV = "metrics.csv"


def _as_checkpoint(checkpoint: CheckpointLike) -> Checkpoint:
    return checkpoint if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint)


def config_from_checkpoint(
    checkpoint: CheckpointLike, overrides: Sequence[str] = ()
) -> RunConfig:
    """
    Rebuild the run configuration stored in a checkpoint

    Args:
        checkpoint: Checkpoint or path
        overrides: ``key=value`` strings applied on top of the stored config

    Raises:
        ConfigurationError: If the checkpoint carries no config snapshot
    """
    checkpoint = _as_checkpoint(checkpoint)
    if not checkpoint.config:
        raise ConfigurationError(
            "Checkpoint carries no configuration; pass --config to describe the network"
        )
    return build_config(checkpoint.config, overrides)


def resolve(
    config: Optional[RunConfig], checkpoint: Optional[CheckpointLike]
) -> Tuple[RunConfig, Optional[Checkpoint]]:
    """The run config (from the checkpoint when not given) and the loaded checkpoint"""
    loaded = _as_checkpoint(checkpoint) if checkpoint is not None else None
    if config is None:
        config = config_from_checkpoint(loaded) if loaded is not None else RunConfig()
    return config, loaded


def load_model(
    config: Optional[RunConfig] = None, checkpoint: Optional[CheckpointLike] = None
) -> TBGDiff:
    """
    Build the network for ``config`` and load the checkpoint parameters

    Without ``config`` the network is rebuilt from the checkpoint's own config.

    Raises:
        ConfigurationError: If the checkpoint was trained with another architecture
            or diffusion setup, or its parameters do not fit the network
    """
    config, checkpoint = resolve(config, checkpoint)
    model = TBGDiff(config).to(DTYPES[config.dtype])
    if checkpoint is not None:
        if checkpoint.config and architecture_of(checkpoint.config) != architecture_of(config):
            raise ConfigurationError(
                "Checkpoint architecture does not match the configuration: "
                f"{architecture_of(checkpoint.config)} vs {architecture_of(config)}"
            )
        try:
            model.load_state_dict(checkpoint.parameters)
        except RuntimeError as e:
            logger.error(f"Checkpoint parameters do not fit the network: {str(e)}")
            raise ConfigurationError(
                "Checkpoint parameters do not fit the network built from the configuration"
            ) from e
    model.eval()
    return model


def _clip_tensor(frames: np.ndarray, dtype: torch.dtype) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(frames)).to(dtype).unsqueeze(0)


def evaluate(
    config: Optional[RunConfig],
    checkpoint: Optional[CheckpointLike] = None,
    videos: Optional[Iterable[Video]] = None,
    output_dir: Optional[Union[str, Path]] = None,
    model: Optional[TBGDiff] = None,
) -> MetricReport:
    """
    Sample every frame of every video and score it against the ground truth

    Videos are cut into clips of ``clip_len`` with stride ``clip_len``; padded
    frames of a final short clip are not scored. Writes ``metrics.csv`` and
    ``predictions/<video_id>/<frame>.png`` when ``output_dir`` is given.
    """
    config, checkpoint = resolve(config, checkpoint)
    model = model if model is not None else load_model(config, checkpoint)
    model.eval()
    videos = load_videos(config) if videos is None else videos
    accumulator = MetricAccumulator(
        config.metrics.threshold, config.metrics.beta2, config.metrics.empty_class_policy
    )
    out = Path(output_dir) if output_dir is not None else None
    expected = (config.resolution, config.resolution)

    for video in videos:
        if video.size != expected:
            raise ConfigurationError(
                f"Video '{video.video_id}' has size {video.size}; "
                f"the checkpoint expects {expected}"
            )
        for clip in make_clips(video, config.clip_len, config.clip_len):
            masks, probabilities = model.sample_clip(
                _clip_tensor(clip.frames, model.dtype), seed=config.seed
            )
            for k in range(clip.valid_length):
                accumulator.add(video.video_id, probabilities[0, k], clip.masks[k])
                if out is not None:
                    target = out / "predictions" / video.video_id
                    target.mkdir(parents=True, exist_ok=True)
                    encode_mask_file(masks[0, k].numpy(), target / f"{clip.names[k]}.png")
        logger.debug(f"Evaluated video '{video.video_id}' ({len(video)} frames)")

    report = accumulator.report()
    if out is not None:
        report.write_csv(out / METRICS_CSV)
    overall = report.overall
    logger.info(
        f"Evaluated {overall.frames} frames: MAE {overall.mae:.4f} IoU {overall.iou:.4f} "
        f"F {overall.fbeta:.4f} BER {overall.ber:.2f}"
    )
    return report


def infer(
    config: Optional[RunConfig],
    checkpoint: Optional[CheckpointLike],
    frames_dir: Union[str, Path],
    out_dir: Union[str, Path],
    model: Optional[TBGDiff] = None,
) -> Dict[str, Path]:
    """
    Predict a mask PNG (shadow=255) for every frame of a directory

    Frames are resized to the run resolution and the masks back to the source
    size. Output files mirror the input file stems. Without ``config`` the network
    and sampler settings come from the checkpoint.

    Returns:
        Mapping of frame stem to written mask path
    """
    config, checkpoint = resolve(config, checkpoint)
    model = model if model is not None else load_model(config, checkpoint)
    size = (config.resolution, config.resolution)
    frames, stems, source_size = read_frames_dir(frames_dir, size)
    video = Video(
        video_id=Path(frames_dir).name,
        frames=frames,
        masks=np.zeros((len(stems),) + size, dtype=np.uint8),
        names=stems,
    )

    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        logger.error(f"Cannot create output directory {out}: {str(e)}")
        raise DataIngestionError(f"Cannot create output directory {out}") from e

    written: Dict[str, Path] = {}
    for clip in make_clips(video, config.clip_len, config.clip_len):
        masks, _ = model.sample_clip(_clip_tensor(clip.frames, model.dtype), seed=config.seed)
        for k in range(clip.valid_length):
            mask = masks[0, k].numpy()
            if mask.shape != source_size:
                image = Image.fromarray(mask * 255).resize(
                    (source_size[1], source_size[0]), Image.Resampling.NEAREST
                )
                mask = (np.asarray(image) > 0).astype(np.uint8)
            written[clip.names[k]] = encode_mask_file(mask, out / f"{clip.names[k]}.png")

    logger.info(f"Wrote {len(written)} masks to {out}")
    return written


def profile_model(
    config: Optional[RunConfig],
    checkpoint: Optional[CheckpointLike] = None,
    repeats: int = 1,
) -> Dict[str, object]:
    """
    Parameter counts per module, parameter size and sampling throughput

    Returns:
        Dictionary with ``parameters`` (per module), ``total_parameters``,
        ``size_mb`` and ``fps`` (frames sampled per second on one clip)
    """
    config, checkpoint = resolve(config, checkpoint)
    model = load_model(config, checkpoint)
    per_module = model.parameter_report()
    size_bytes = sum(p.numel() * p.element_size() for p in model.parameters())

    frames = torch.rand(
        (1, config.clip_len, 3, config.resolution, config.resolution),
        generator=torch.Generator().manual_seed(config.seed),
        dtype=model.dtype,
    )
    start = time.perf_counter()
    for _ in range(repeats):
        model.sample_clip(frames, seed=config.seed)
    elapsed = time.perf_counter() - start

    return {
        "parameters": per_module,
        "total_parameters": sum(per_module.values()),
        "size_mb": size_bytes / (1024 * 1024),
        "fps": repeats * config.clip_len / elapsed if elapsed > 0 else float("inf"),
    }
