"""Overlap and surface-distance metrics, and the evaluation report."""
import json
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy import ndimage

from app.core.errors import ShapeMismatchError

logger = logging.getLogger(__name__)

STRUCTURES = {1: 'artery', 2: 'vein'}
FIVE_CLASS_NAMES = {1: 'left_artery', 2: 'left_vein', 3: 'right_artery', 4: 'right_vein'}
METRIC_NAMES = ('dsc', 'jaccard', 'nsd', 'hd95')

_SIX_CONNECTED = ndimage.generate_binary_structure(3, 1)


def _pair(pred: np.ndarray, gt: np.ndarray):
  pred = np.asarray(pred).astype(bool)
  gt = np.asarray(gt).astype(bool)
  if pred.shape != gt.shape:
    raise ShapeMismatchError(f"Prediction {pred.shape} and ground truth {gt.shape} differ in shape")
  return pred, gt


def dsc(pred: np.ndarray, gt: np.ndarray) -> float:
  """Dice similarity in percent; 100 when both masks are empty"""
  pred, gt = _pair(pred, gt)
  total = int(pred.sum()) + int(gt.sum())
  if total == 0:
    return 100.0
  return 100.0 * 2.0 * int(np.logical_and(pred, gt).sum()) / total


def jaccard(pred: np.ndarray, gt: np.ndarray) -> float:
  """Intersection over union in percent; 100 when both masks are empty"""
  pred, gt = _pair(pred, gt)
  union = int(np.logical_or(pred, gt).sum())
  if union == 0:
    return 100.0
  return 100.0 * int(np.logical_and(pred, gt).sum()) / union


def surface(mask: np.ndarray) -> np.ndarray:
  """Border voxels: foreground voxels with a 6-neighbour outside the mask or the volume"""
  mask = np.asarray(mask).astype(bool)
  if not mask.any():
    return mask
  eroded = ndimage.binary_erosion(mask, structure=_SIX_CONNECTED, border_value=0)
  return mask & ~eroded


def surface_distances(pred: np.ndarray, gt: np.ndarray, spacing: Sequence[float]) -> np.ndarray:
  """
  Pooled symmetric surface distances in mm.

  Each border voxel of one mask contributes its Euclidean distance to the
  nearest border voxel of the other.
  """
  pred_surface = surface(pred)
  gt_surface = surface(gt)
  to_gt = ndimage.distance_transform_edt(~gt_surface, sampling=spacing)
  to_pred = ndimage.distance_transform_edt(~pred_surface, sampling=spacing)
  return np.concatenate([to_gt[pred_surface], to_pred[gt_surface]])


def _diagonal(shape: Sequence[int], spacing: Sequence[float]) -> float:
  return float(np.sqrt(sum((s * d) ** 2 for s, d in zip(shape, spacing))))


def hd95(pred: np.ndarray, gt: np.ndarray, spacing: Sequence[float] = (1.0, 1.0, 1.0)) -> float:
  """
  95th percentile of pooled surface distances in mm (linear interpolation).

  0 when both masks are empty; the physical diagonal of the volume when only one is.
  """
  pred, gt = _pair(pred, gt)
  if not pred.any() and not gt.any():
    return 0.0
  if not pred.any() or not gt.any():
    return _diagonal(pred.shape, spacing)
  return float(np.percentile(surface_distances(pred, gt, spacing), 95))


def nsd(pred: np.ndarray, gt: np.ndarray, tau: float = 1.0, spacing: Sequence[float] = (1.0, 1.0, 1.0)) -> float:
  """Fraction of pooled border voxels within tau mm of the opposing surface"""
  pred, gt = _pair(pred, gt)
  if not pred.any() and not gt.any():
    return 1.0
  if not pred.any() or not gt.any():
    return 0.0
  distances = surface_distances(pred, gt, spacing)
  return float(np.mean(distances <= tau))


def mask_metrics(
  pred: np.ndarray,
  gt: np.ndarray,
  spacing: Sequence[float],
  tau: float = 1.0,
  domain: Optional[np.ndarray] = None
) -> Dict[str, float]:
  """All four metrics for one binary pair, optionally restricted to a spatial domain"""
  pred, gt = _pair(pred, gt)
  if domain is not None:
    pred = pred & domain
    gt = gt & domain
  return {
    'dsc': dsc(pred, gt),
    'jaccard': jaccard(pred, gt),
    'nsd': nsd(pred, gt, tau, spacing),
    'hd95': hd95(pred, gt, spacing)
  }


@dataclass
class MetricsReport:
  """Per-case records plus aggregates, serialisable as JSON lines with stable key order."""
  records: List[Dict] = field(default_factory=list)
  metadata: Dict = field(default_factory=dict)

  def add_case(self, case_id: str, labeling: str, kind: str, name: str, values: Dict[str, float]) -> None:
    record = {'case': case_id, 'labeling': labeling, 'kind': kind, 'name': name}
    record.update({m: float(values[m]) for m in METRIC_NAMES})
    self.records.append(record)

  def aggregate(self, kind: str = 'structure') -> Dict[str, Dict[str, float]]:
    """Mean of every metric per name, plus a 'mean' entry averaging the names"""
    names = sorted({r['name'] for r in self.records if r['kind'] == kind})
    summary = {}
    for name in names:
      rows = [r for r in self.records if r['kind'] == kind and r['name'] == name]
      summary[name] = {m: float(np.mean([r[m] for r in rows])) for m in METRIC_NAMES}
    if names:
      summary['mean'] = {m: float(np.mean([summary[n][m] for n in names])) for m in METRIC_NAMES}
    return summary

  def summary(self) -> Dict:
    return {
      'kind': 'summary',
      'cases': len({r['case'] for r in self.records}),
      'structure': self.aggregate('structure'),
      'class': self.aggregate('class'),
      'metadata': self.metadata
    }

  def write(self, path: str) -> None:
    with open(path, 'w') as f:
      for record in self.records:
        f.write(json.dumps(record, sort_keys=True) + '\n')
      f.write(json.dumps(self.summary(), sort_keys=True) + '\n')
    logger.info(f"Wrote metrics report with {len(self.records)} records to {path}")
