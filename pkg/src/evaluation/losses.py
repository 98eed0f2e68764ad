"""
Training objective: BCE + Lovasz hinge on the denoiser logits, plus the
auxiliary BCE on pseudo-mask and boundary logits
"""
from dataclasses import dataclass
from typing import Sequence, Union

import torch
import torch.nn.functional as F

from src.utils.exceptions import ValidationError

TensorOrList = Union[torch.Tensor, Sequence[torch.Tensor]]


@dataclass
class LossTerms:
    total: torch.Tensor
    bce: torch.Tensor
    hinge: torch.Tensor
    aux: torch.Tensor

    def as_floats(self) -> dict:
        return {
            "loss": float(self.total.detach()),
            "bce": float(self.bce.detach()),
            "hinge": float(self.hinge.detach()),
            "aux": float(self.aux.detach()),
        }


def bce_loss(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean binary cross entropy in logit form"""
    if logits.shape != targets.shape:
        raise ValidationError(
            f"bce_loss shape mismatch: logits {tuple(logits.shape)}, "
            f"targets {tuple(targets.shape)}"
        )
    return F.binary_cross_entropy_with_logits(logits, targets.to(logits.dtype))


def lovasz_grad(gt_sorted: torch.Tensor) -> torch.Tensor:
    """Gradient of the Lovasz extension of the Jaccard loss w.r.t. sorted errors"""
    gts = gt_sorted.sum()
    intersection = gts - gt_sorted.cumsum(0)
    union = gts + (1 - gt_sorted).cumsum(0)
    jaccard = 1.0 - intersection / union
    if gt_sorted.numel() > 1:
        jaccard[1:] = jaccard[1:] - jaccard[:-1].clone()
    return jaccard


def lovasz_hinge_flat(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Lovasz hinge of one image given flat logits and {0, 1} targets"""
    if logits.numel() == 0:
        return logits.sum() * 0.0
    signs = 2.0 * targets - 1.0
    errors = 1.0 - logits * signs
    # foreground first among equal errors
    order = torch.argsort(-targets, stable=True)
    errors, targets = errors[order], targets[order]
    errors_sorted, perm = torch.sort(errors, descending=True, stable=True)
    grad = lovasz_grad(targets[perm])
    return torch.dot(F.relu(errors_sorted), grad)


def lovasz_hinge_loss(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """
    Lovasz hinge averaged over images

    Args:
        logits: [N, ...] per-image logits
        targets: binary, same shape
    """
    if logits.shape != targets.shape:
        raise ValidationError(
            f"lovasz_hinge_loss shape mismatch: {tuple(logits.shape)} vs {tuple(targets.shape)}"
        )
    targets = targets.to(logits.dtype)
    if not torch.all((targets == 0) | (targets == 1)):
        raise ValidationError("lovasz_hinge_loss needs binary targets")
    if logits.dim() < 2:
        logits, targets = logits.unsqueeze(0), targets.unsqueeze(0)
    losses = [
        lovasz_hinge_flat(image_logits.reshape(-1), image_targets.reshape(-1))
        for image_logits, image_targets in zip(logits, targets)
    ]
    return torch.stack(losses).mean()


def _frames(values: TensorOrList) -> list:
    if isinstance(values, torch.Tensor):
        # [B, L, H, W] -> frame-major list of [B, H, W]
        return list(values.unbind(dim=1)) if values.dim() == 4 else list(values)
    return list(values)


def aux_loss(
    pseudo_logits: TensorOrList,
    boundary_logits: TensorOrList,
    masks: TensorOrList,
    boundaries: TensorOrList,
) -> torch.Tensor:
    """
    Mean over frames of bce(boundary) + bce(pseudo mask)

    Tensors are [B, L, H, W] (frames on dim 1); lists hold one entry per frame.
    """
    pseudo, boundary = _frames(pseudo_logits), _frames(boundary_logits)
    mask_list, boundary_list = _frames(masks), _frames(boundaries)
    if not (len(pseudo) == len(boundary) == len(mask_list) == len(boundary_list)):
        raise ValidationError(
            f"aux_loss length mismatch: {len(pseudo)} pseudo, {len(boundary)} boundary, "
            f"{len(mask_list)} masks, {len(boundary_list)} boundaries"
        )
    if not pseudo:
        raise ValidationError("aux_loss needs at least one frame")
    per_frame = [
        bce_loss(b_logits, b) + bce_loss(p_logits, m)
        for p_logits, b_logits, m, b in zip(pseudo, boundary, mask_list, boundary_list)
    ]
    return torch.stack(per_frame).mean()


def total_loss(
    final_logits: torch.Tensor, targets: torch.Tensor, aux: torch.Tensor
) -> LossTerms:
    """Unweighted sum bce + lovasz hinge + aux"""
    bce = bce_loss(final_logits, targets)
    hinge = lovasz_hinge_loss(final_logits, targets)
    return LossTerms(total=bce + hinge + aux, bce=bce, hinge=hinge, aux=aux)
