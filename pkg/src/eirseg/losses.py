"""Training objectives.

All tensors are channel-first: probabilities ``N x K x H x W``, labels
``N x H x W``. Channel ``k`` is class ``k``; channel 0 is background.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .model import to_tensor
from .placement import instance_canvas
from .protocol import BACKGROUND

EPS = 1e-7


@dataclass
class LossBreakdown:
    mbce_instance: torch.Tensor
    mbce_image: torch.Tensor
    rskd: torch.Tensor
    total: torch.Tensor
    alpha: float

    def floats(self) -> dict[str, float]:
        return {"mbce_inst": float(self.mbce_instance.detach()), "mbce_img": float(self.mbce_image.detach()),
                "rskd": float(self.rskd.detach()), "total": float(self.total.detach())}


def mbce(per_class_probs: torch.Tensor, targets: torch.Tensor, valid_mask: torch.Tensor | None = None,
         class_reduction: str = "mean") -> torch.Tensor:
    """Binary cross-entropy averaged over valid pixels.

    With ``class_reduction="mean"`` the class channels are averaged too;
    with ``"sum"`` each pixel contributes the sum over its class channels,
    so the value is K times larger. Targets may be soft. Probabilities are
    clamped to [EPS, 1 - EPS].
    """
    if per_class_probs.shape != targets.shape:
        raise ValueError(f"probs {tuple(per_class_probs.shape)} vs targets {tuple(targets.shape)}")
    p = per_class_probs.clamp(EPS, 1.0 - EPS)
    t = targets.to(p.dtype)
    bce = -(t * torch.log(p) + (1.0 - t) * torch.log1p(-p))
    return _reduce_bce(bce, valid_mask, class_reduction)


def mbce_from_scores(scores: torch.Tensor, targets: torch.Tensor, valid_mask: torch.Tensor | None = None,
                     class_reduction: str = "mean") -> torch.Tensor:
    """``mbce(sigmoid(scores), ...)`` without the clamp's dead gradient.

    Equal to the clamped form wherever ``sigmoid(scores)`` lies inside
    [EPS, 1 - EPS]; saturated wrong predictions keep a gradient.
    """
    if scores.shape != targets.shape:
        raise ValueError(f"scores {tuple(scores.shape)} vs targets {tuple(targets.shape)}")
    t = targets.to(scores.dtype)
    bce = -(t * F.logsigmoid(scores) + (1.0 - t) * F.logsigmoid(-scores))
    return _reduce_bce(bce, valid_mask, class_reduction)


def _reduce_bce(bce: torch.Tensor, valid_mask, class_reduction: str) -> torch.Tensor:
    if class_reduction not in ("mean", "sum"):
        raise ValueError(f"class_reduction must be 'mean' or 'sum', got {class_reduction!r}")
    grid = bce.shape[:1] + bce.shape[2:]
    if valid_mask is None:
        valid_mask = torch.ones(grid, dtype=torch.bool, device=bce.device)
    if valid_mask.shape != grid:
        raise ValueError("valid mask does not match the pixel grid")
    w = valid_mask.to(bce.dtype).unsqueeze(1)
    n = w.sum() * (bce.shape[1] if class_reduction == "mean" else 1)
    if n == 0:
        return bce.sum() * 0.0
    return (bce * w).sum() / n


def rskd(old_probs: torch.Tensor, new_probs: torch.Tensor, hard_label: torch.Tensor,
         old_classes, new_classes) -> torch.Tensor:
    """Region-specific distillation, as a non-negative cross-entropy.

    Pixels labelled background or old: ``-sum_{c in A} p_old[c] log p_new[c]``
    with ``A`` = background + old classes. Pixels labelled new:
    ``-p_old[bg] log(sum_{k in new + bg} p_new[k])``. Summed per image,
    divided by H*W, averaged over the batch. Ignore pixels contribute nothing.
    """
    A, B = _branch_sets(old_classes, new_classes)
    _check_rskd_shapes(old_probs, new_probs, hard_label, A, B)
    logp = torch.log(new_probs.clamp_min(EPS))
    log_nb = torch.log(new_probs[:, B + [BACKGROUND]].sum(dim=1).clamp_min(EPS))
    return _rskd_core(old_probs, logp, log_nb, hard_label, A, B)


def rskd_from_scores(old_probs: torch.Tensor, new_scores: torch.Tensor, hard_label: torch.Tensor,
                     old_classes, new_classes) -> torch.Tensor:
    """``rskd`` with the new model given as raw scores (log-softmax inside).

    Matches ``rskd(old, softmax(scores), ...)`` while every new-model
    probability it reads is at least EPS, and keeps gradients below that.
    """
    A, B = _branch_sets(old_classes, new_classes)
    _check_rskd_shapes(old_probs, new_scores, hard_label, A, B)
    logp = torch.log_softmax(new_scores, dim=1)
    log_nb = torch.logsumexp(logp[:, B + [BACKGROUND]], dim=1)
    return _rskd_core(old_probs, logp, log_nb, hard_label, A, B)


def _branch_sets(old_classes, new_classes):
    A = sorted({BACKGROUND} | {int(c) for c in old_classes})
    B = sorted(int(c) for c in new_classes)
    if set(A) & set(B):
        raise ValueError(f"old and new class sets overlap: {sorted(set(A) & set(B))}")
    return A, B


def _check_rskd_shapes(old, new, hard_label, A, B):
    if old.shape[1] != len(A) or new.shape[1] != len(A) + len(B):
        raise ValueError(f"channel counts {old.shape[1]}/{new.shape[1]} do not match "
                         f"{len(A)} old+bg and {len(B)} new classes")
    if hard_label.shape != new.shape[:1] + new.shape[2:]:
        raise ValueError("label does not match the pixel grid")


def _rskd_core(old_probs, logp, log_nb, hard_label, A, B):
    N, _, H, W = logp.shape
    a_term = -(old_probs * logp[:, A]).sum(dim=1)
    b_term = -old_probs[:, BACKGROUND] * log_nb
    lut = torch.zeros(256, dtype=torch.long, device=hard_label.device)
    lut[torch.tensor(A)] = 1
    if B:
        lut[torch.tensor(B)] = 2
    branch = lut[hard_label.long()]
    per_pixel = torch.where(branch == 1, a_term, torch.zeros_like(a_term))
    per_pixel = torch.where(branch == 2, b_term, per_pixel)
    return per_pixel.sum() / (N * H * W)


def combine(mbce_instance, mbce_image, rskd_value, alpha: float) -> LossBreakdown:
    total = mbce_instance + mbce_image + alpha * rskd_value
    return LossBreakdown(mbce_instance, mbce_image, rskd_value, total, alpha)


def _targets(items, dtype) -> tuple[torch.Tensor, torch.Tensor]:
    soft = torch.from_numpy(np.stack([f.soft_label for f in items])).permute(0, 3, 1, 2).to(dtype)
    valid = torch.from_numpy(np.stack([f.valid for f in items]))
    return soft, valid


def canvas_size(records, H: int, W: int, multiple: int = 8) -> tuple[int, int]:
    """Smallest multiple-of-8 canvas holding every crop, capped at H x W."""
    if not records:
        return H, W
    h = max(r.shape[0] for r in records)
    w = max(r.shape[1] for r in records)
    return min(H, -(-h // multiple) * multiple), min(W, -(-w // multiple) * multiple)


def total_loss(fused, instance_batch, model, old_snapshot=None, alpha: float = 5.0,
               old_classes=(), new_classes=(), use_rskd: bool = True,
               class_reduction: str = "sum") -> LossBreakdown:
    """Instance term + fused-image term + ``alpha`` * distillation term.

    ``fused`` is a list of FusedSample; ``instance_batch`` holds the raw
    InstanceRecords, each trained alone on a black canvas just big enough
    for the largest crop.
    Without an old model the distillation term is 0. The binary terms sum
    over class channels by default so that ``alpha`` weighs the
    distillation against whole per-pixel detector losses.
    """
    H, W = fused[0].label.shape
    K = model.num_outputs
    ch, cw = canvas_size(instance_batch, H, W)
    canvases = [instance_canvas(r, ch, cw, K) for r in instance_batch]
    dtype = next(model.parameters()).dtype
    x_img = to_tensor([f.image for f in fused]).to(dtype)
    scores = model(x_img)
    zero = scores.sum() * 0.0

    soft, valid = _targets(fused, dtype)
    mbce_img = mbce_from_scores(scores, soft, valid, class_reduction)
    if canvases:
        inst_scores = model(to_tensor([c.image for c in canvases]).to(dtype))
        mbce_inst = mbce_from_scores(inst_scores, *_targets(canvases, dtype), class_reduction)
    else:
        mbce_inst = zero
    if use_rskd and old_snapshot is not None:
        old_dtype = next(old_snapshot.model.parameters()).dtype
        old_p = old_snapshot.probs(x_img.to(old_dtype)).to(dtype)
        hard = torch.from_numpy(np.stack([f.hard_target() for f in fused]).astype(np.int64))
        kd = rskd_from_scores(old_p, scores, hard, old_classes, new_classes)
    else:
        kd = zero
    return combine(mbce_inst, mbce_img, kd, alpha)
