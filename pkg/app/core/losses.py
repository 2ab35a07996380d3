"""Supervised loss: per class, half Dice plus half binary cross-entropy, masked for half labels."""
import logging
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Set, Tuple

import torch

from app.core.errors import ShapeMismatchError, VesselSegError

logger = logging.getLogger(__name__)

DICE_EPS = 1e-5
CE_DELTA = 1e-7


@dataclass
class LossReport:
  total: torch.Tensor
  per_class: Dict[int, Tuple[float, float]] = field(default_factory=dict)
  masked_classes: Set[int] = field(default_factory=set)

  def as_record(self) -> Dict:
    return {
      'loss': float(self.total.detach()),
      'per_class': {str(k): {'dice': d, 'ce': c} for k, (d, c) in sorted(self.per_class.items())},
      'masked_classes': sorted(self.masked_classes)
    }


def _check_shapes(probabilities: torch.Tensor, target: torch.Tensor) -> None:
  if probabilities.shape != target.shape:
    raise ShapeMismatchError(
      f"Prediction {tuple(probabilities.shape)} and target {tuple(target.shape)} differ in shape"
    )


def dice_loss(probabilities: torch.Tensor, target: torch.Tensor, eps: float = DICE_EPS) -> torch.Tensor:
  """1 - (2 Σ P·Y + ε) / (Σ P + Σ Y + ε) over all given elements"""
  _check_shapes(probabilities, target)
  target = target.to(probabilities.dtype)
  intersection = (probabilities * target).sum()
  denominator = probabilities.sum() + target.sum()
  return 1.0 - (2.0 * intersection + eps) / (denominator + eps)


def ce_loss(probabilities: torch.Tensor, target: torch.Tensor, delta: float = CE_DELTA) -> torch.Tensor:
  """Mean binary cross-entropy with probabilities clamped to [δ, 1-δ]"""
  _check_shapes(probabilities, target)
  target = target.to(probabilities.dtype)
  p = probabilities.clamp(delta, 1.0 - delta)
  return -(target * torch.log(p) + (1.0 - target) * torch.log(1.0 - p)).mean()


def sup_loss(
  probabilities: torch.Tensor,
  labels: torch.Tensor,
  supervised: torch.Tensor,
  spatial: Optional[torch.Tensor] = None
) -> LossReport:
  """
  Average of ½(dice + ce) over supervised classes and batch items.

  Args:
      probabilities: P of shape (B, K, X, Y, Z); channel k-1 holds class k
      labels: Integer labels (B, X, Y, Z)
      supervised: Boolean (B, K), True where class k is supervised for item b
      spatial: Optional boolean (B, X, Y, Z) loss domain; voxels outside are excluded

  Returns:
      LossReport whose total only depends on supervised classes inside the domain
  """
  if probabilities.dim() != 5 or labels.shape != probabilities.shape[:1] + probabilities.shape[2:]:
    raise ShapeMismatchError(
      f"sup_loss expects P (B, K, X, Y, Z) and labels (B, X, Y, Z), got {tuple(probabilities.shape)} and {tuple(labels.shape)}"
    )
  batch, num_classes = probabilities.shape[:2]
  if supervised.shape != (batch, num_classes):
    raise ShapeMismatchError(f"supervised must be ({batch}, {num_classes}), got {tuple(supervised.shape)}")
  if not bool(supervised.any()):
    raise VesselSegError("sup_loss: no supervised classes in batch")

  item_losses = []
  terms: Dict[int, list] = {}
  for b in range(batch):
    domain = spatial[b] if spatial is not None else None
    if domain is not None and not bool(domain.any()):
      continue
    class_losses = []
    for index in range(num_classes):
      if not bool(supervised[b, index]):
        continue
      k = index + 1
      p = probabilities[b, index]
      y = labels[b] == k
      if domain is not None:
        p = p[domain]
        y = y[domain]
      dice = dice_loss(p, y)
      ce = ce_loss(p, y)
      class_losses.append(0.5 * (dice + ce))
      terms.setdefault(k, []).append((float(dice.detach()), float(ce.detach())))
    if class_losses:
      item_losses.append(torch.stack(class_losses).mean())

  if item_losses:
    total = torch.stack(item_losses).mean()
  else:
    # every item's loss domain was empty
    total = probabilities.sum() * 0.0

  per_class = {
    k: (sum(d for d, _ in values) / len(values), sum(c for _, c in values) / len(values))
    for k, values in terms.items()
  }
  masked = {k for k in range(1, num_classes + 1) if k not in per_class}
  return LossReport(total=total, per_class=per_class, masked_classes=masked)


def mask_tensors(masks: Sequence, num_classes: int, shape: Sequence[int]) -> Tuple[torch.Tensor, Optional[torch.Tensor]]:
  """Stack SupervisionMasks into the (B, K) and (B, X, Y, Z) tensors sup_loss takes"""
  supervised = torch.zeros(len(masks), num_classes, dtype=torch.bool)
  for b, mask in enumerate(masks):
    for k in mask.supervised_classes:
      supervised[b, k - 1] = True
  if all(mask.spatial_mask is None for mask in masks):
    return supervised, None
  spatial = torch.stack([torch.tensor(mask.dense(shape), dtype=torch.bool) for mask in masks])
  return supervised, spatial
