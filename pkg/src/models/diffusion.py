"""
Bit-analog mask diffusion

Masks are mapped to analog values +-scale, corrupted by the forward process
and recovered with a deterministic DDIM sampler. The denoiser predicts mask
logits; the sampler re-encodes sigmoid(logits) as the clean estimate.
"""
import math
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from src.utils import get_logger
from src.utils.exceptions import ConfigurationError, ValidationError

logger = get_logger(__name__)

COSINE_OFFSET = 0.008
LINEAR_BETA_RANGE = (1e-4, 0.02)
MAX_BETA = 0.999

TimeLike = Union[int, torch.Tensor]


@dataclass
class NoiseSchedule:
    kind: str
    t_train: int
    alphabar: torch.Tensor  # float64 [t_train + 1], alphabar[0] == 1

    def at(self, t: TimeLike, like: Optional[torch.Tensor] = None) -> torch.Tensor:
        """alphabar(t), broadcastable against ``like`` (batch on dim 0)"""
        if isinstance(t, torch.Tensor):
            t_min, t_max = int(t.min()), int(t.max())
        else:
            t_min = t_max = int(t)
        if t_min < 0 or t_max > self.t_train:
            raise ValidationError(
                f"Timestep out of range [0, {self.t_train}]: {t_min}..{t_max}"
            )
        value = self.alphabar[t if isinstance(t, torch.Tensor) else int(t)]
        if like is None:
            return value
        value = value.to(dtype=like.dtype, device=like.device)
        if value.dim() == 1:
            value = value.reshape(-1, *([1] * (like.dim() - 1)))
        return value


def build_schedule(kind: str, t_train: int) -> NoiseSchedule:
    """
    Cumulative signal retention for ``t_train`` steps

    cosine: alphabar(t) = f(t) / f(0), f(t) = cos^2(((t / T) + s) / (1 + s) * pi / 2)
    linear: betas evenly spaced over [1e-4, 0.02] * (1000 / T), clipped at 0.999
    """
    kind = getattr(kind, "value", kind)
    if t_train < 1:
        raise ConfigurationError(f"t_train must be >= 1, got {t_train}")

    if kind == "cosine":
        steps = torch.arange(t_train + 1, dtype=torch.float64) / t_train
        f = torch.cos((steps + COSINE_OFFSET) / (1 + COSINE_OFFSET) * math.pi / 2) ** 2
        alphabar = f / f[0]
    elif kind == "linear":
        scale = 1000.0 / t_train
        betas = torch.linspace(
            LINEAR_BETA_RANGE[0] * scale,
            LINEAR_BETA_RANGE[1] * scale,
            t_train,
            dtype=torch.float64,
        ).clamp(max=MAX_BETA)
        alphabar = torch.cat(
            [torch.ones(1, dtype=torch.float64), torch.cumprod(1 - betas, dim=0)]
        )
    else:
        raise ConfigurationError(f"Unknown noise schedule '{kind}' (cosine, linear)")

    logger.debug(f"{kind} schedule: T={t_train}, alphabar(T)={alphabar[-1].item():.3e}")
    return NoiseSchedule(kind=kind, t_train=t_train, alphabar=alphabar)


@dataclass
class AnalogMask:
    values: torch.Tensor
    scale: float


def bit_encode(mask: torch.Tensor, scale: float) -> AnalogMask:
    """{0, 1} or [0, 1] values -> (2 * value - 1) * scale"""
    if scale <= 0:
        raise ConfigurationError(f"Analog scale must be positive, got {scale}")
    if not torch.is_floating_point(mask):
        mask = mask.to(torch.float32)
    return AnalogMask(values=(2 * mask - 1) * scale, scale=float(scale))


def bit_decode(analog: Union[AnalogMask, torch.Tensor]) -> torch.Tensor:
    """1 where the analog value is positive, else 0 (ties go to non-shadow)"""
    values = analog.values if isinstance(analog, AnalogMask) else analog
    return (values > 0).to(torch.uint8)


def forward_diffuse(
    y0: AnalogMask, t: TimeLike, eps: torch.Tensor, schedule: NoiseSchedule
) -> AnalogMask:
    """sqrt(alphabar(t)) * y0 + sqrt(1 - alphabar(t)) * eps"""
    if eps.shape != y0.values.shape:
        raise ValidationError(
            f"Noise shape {tuple(eps.shape)} does not match mask {tuple(y0.values.shape)}"
        )
    ab = schedule.at(t, like=y0.values)
    values = ab.sqrt() * y0.values + (1 - ab).sqrt() * eps
    return AnalogMask(values=values, scale=y0.scale)


@dataclass
class DenoiserState:
    y_t: AnalogMask
    t: int
    frame_index: int = 0


def logits_to_analog(logits: torch.Tensor, scale: float) -> torch.Tensor:
    """Clean estimate y0_hat = (2 * sigmoid(logits) - 1) * scale"""
    return (2 * torch.sigmoid(logits) - 1) * scale


def predict_noise(
    y_t: torch.Tensor, y0_hat: torch.Tensor, alphabar_t: torch.Tensor
) -> torch.Tensor:
    """Invert the forward process for the noise given a clean estimate"""
    return (y_t - alphabar_t.sqrt() * y0_hat) / (1 - alphabar_t).sqrt()


def ddim_update(
    y_t: torch.Tensor,
    y0_hat: torch.Tensor,
    alphabar_t: torch.Tensor,
    alphabar_next: torch.Tensor,
) -> torch.Tensor:
    eps_hat = predict_noise(y_t, y0_hat, alphabar_t)
    return alphabar_next.sqrt() * y0_hat + (1 - alphabar_next).sqrt() * eps_hat


def ddim_step(
    state: DenoiserState,
    predicted_logits: torch.Tensor,
    t_next: int,
    schedule: NoiseSchedule,
) -> DenoiserState:
    """
    One deterministic (eta = 0) DDIM step from ``state.t`` to ``t_next``

    At ``t_next == 0`` the clean estimate itself is returned.
    """
    if t_next >= state.t:
        raise ValidationError(f"t_next ({t_next}) must be below t ({state.t})")
    if t_next < 0:
        raise ValidationError(f"t_next must be >= 0, got {t_next}")

    y_t = state.y_t.values
    y0_hat = logits_to_analog(predicted_logits.to(y_t.dtype), state.y_t.scale)
    if t_next == 0:
        values = y0_hat
    else:
        values = ddim_update(
            y_t, y0_hat, schedule.at(state.t, like=y_t), schedule.at(t_next, like=y_t)
        )
    return DenoiserState(
        y_t=AnalogMask(values=values, scale=state.y_t.scale),
        t=t_next,
        frame_index=state.frame_index,
    )


def sampling_timesteps(t_train: int, steps: int) -> List[int]:
    """Evenly spaced descending ladder t_i = round(T * (steps - i) / steps), i < steps"""
    if steps < 1:
        raise ValidationError(f"steps must be >= 1, got {steps}")
    if steps > t_train:
        raise ValidationError(f"steps ({steps}) must not exceed t_train ({t_train})")
    return [int(np.floor(t_train * (steps - i) / steps + 0.5)) for i in range(steps)]


def sinusoidal_embedding(t: torch.Tensor, dim: int = 128, max_period: int = 10000) -> torch.Tensor:
    """[N] timesteps -> [N, dim] cos/sin features"""
    half = dim // 2
    freqs = torch.exp(
        -math.log(max_period) * torch.arange(half, dtype=torch.float64) / half
    )
    args = t.to(torch.float64).unsqueeze(-1) * freqs
    embedding = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        embedding = torch.cat([embedding, torch.zeros_like(embedding[:, :1])], dim=-1)
    return embedding


DenoiseFn = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]


def initial_noise(
    shape: Sequence[int], seed: int, dtype: torch.dtype = torch.float32
) -> torch.Tensor:
    generator = torch.Generator().manual_seed(int(seed))
    return torch.randn(tuple(shape), generator=generator, dtype=dtype)


@torch.no_grad()
def sample(
    denoise_fn: DenoiseFn,
    shape: Sequence[int],
    schedule: NoiseSchedule,
    *,
    steps: int,
    scale: float,
    seed: Optional[int] = None,
    noise: Optional[torch.Tensor] = None,
    dtype: torch.dtype = torch.float32,
    frame_index: int = 0,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Reverse diffusion from y_T ~ N(0, 1) over ``steps`` DDIM steps

    Args:
        denoise_fn: (y_t [N, H, W], t [N]) -> mask logits [N, H, W]
        shape: [N, H, W]
        seed: Seed of the initial noise (ignored when ``noise`` is given)

    Returns:
        (binary mask [N, H, W] uint8, sigmoid of the last predicted logits)
    """
    if noise is None:
        if seed is None:
            raise ValidationError("sample needs a seed or explicit noise")
        noise = initial_noise(shape, seed, dtype)
    ladder = sampling_timesteps(schedule.t_train, steps)

    state = DenoiserState(
        y_t=AnalogMask(values=noise.to(dtype), scale=scale),
        t=ladder[0],
        frame_index=frame_index,
    )
    probabilities = None
    for t, t_next in zip(ladder, ladder[1:] + [0]):
        t_batch = torch.full((shape[0],), t, dtype=torch.long)
        logits = denoise_fn(state.y_t.values, t_batch)
        probabilities = torch.sigmoid(logits)
        state = ddim_step(state, logits, t_next, schedule)
    return bit_decode(state.y_t), probabilities
