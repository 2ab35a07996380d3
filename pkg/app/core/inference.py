"""Sliding-window prediction and checkpoint evaluation."""
import logging
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn

from app.core.config import TrainConfig
from app.core.errors import ManifestError, ShapeMismatchError
from app.core.fusion import merge_predictions
from app.core.metrics import FIVE_CLASS_NAMES, STRUCTURES, MetricsReport, mask_metrics
from app.core.model import load_checkpoint
from app.core.preprocess import (
  build_input_channels, collapse_labels, left_side_map, remap_labels, resolve_side_split
)
from app.core.volume_io import (
  DatasetManifest, Labeling, LabelScheme, LabelVolume, Volume, load_labels, load_volume, read_manifest
)

logger = logging.getLogger(__name__)


def window_starts(size: int, patch: int, stride: int) -> List[int]:
  """Window offsets along one axis; the last window is flush with the end"""
  if size <= patch:
    return [0]
  starts = list(range(0, size - patch + 1, stride))
  if starts[-1] != size - patch:
    starts.append(size - patch)
  return starts


@torch.no_grad()
def sliding_window_probabilities(
  model: nn.Module,
  image: np.ndarray,
  patch_size: Sequence[int],
  overlap: float = 0.5
) -> np.ndarray:
  """
  Class probabilities for a whole (C, X, Y, Z) volume.

  Windows of patch_size overlap by the given fraction; each voxel's
  probability is the mean over the windows covering it. Volumes smaller than
  a patch are zero-padded and cropped back.

  Returns:
      Array of shape (K, X, Y, Z)
  """
  if not 0.0 <= overlap < 1.0:
    raise ShapeMismatchError(f"overlap must lie in [0, 1), got {overlap}")
  if image.ndim != 4:
    raise ShapeMismatchError(f"Expected a (C, X, Y, Z) image, got shape {image.shape}")
  model.eval()
  spatial = image.shape[1:]
  patch_size = tuple(int(p) for p in patch_size)
  padded_shape = tuple(max(s, p) for s, p in zip(spatial, patch_size))
  padded = np.zeros((image.shape[0],) + padded_shape, dtype=np.float32)
  padded[(slice(None),) + tuple(slice(0, s) for s in spatial)] = image

  strides = [max(1, int(round(p * (1.0 - overlap)))) for p in patch_size]
  axes = [window_starts(s, p, st) for s, p, st in zip(padded_shape, patch_size, strides)]

  totals = None
  counts = np.zeros(padded_shape, dtype=np.float32)
  for x in axes[0]:
    for y in axes[1]:
      for z in axes[2]:
        region = (slice(x, x + patch_size[0]), slice(y, y + patch_size[1]), slice(z, z + patch_size[2]))
        window = torch.from_numpy(np.ascontiguousarray(padded[(slice(None),) + region]))[None]
        probabilities = model(window)[0].cpu().numpy()
        if totals is None:
          totals = np.zeros((probabilities.shape[0],) + padded_shape, dtype=np.float32)
        totals[(slice(None),) + region] += probabilities
        counts[region] += 1.0

  averaged = totals / counts[None]
  return averaged[(slice(None),) + tuple(slice(0, s) for s in spatial)]


def _model_input(volume: Union[Volume, np.ndarray], config: TrainConfig) -> Tuple[np.ndarray, tuple, tuple]:
  if isinstance(volume, Volume):
    return build_input_channels(volume, config.preprocess), volume.spacing, volume.origin
  image = np.asarray(volume, dtype=np.float32)
  if image.ndim == 3:
    image = image[None]
  return image, (1.0, 1.0, 1.0), (0.0, 0.0, 0.0)


def predict(
  checkpoint: Union[str, Tuple[nn.Module, TrainConfig]],
  volume: Union[Volume, np.ndarray]
) -> LabelVolume:
  """
  Label a volume with a trained segmenter.

  Args:
      checkpoint: Checkpoint path, or an already loaded (model, config) pair
      volume: Raw CT Volume (preprocessed like training), or a ready (C, X, Y, Z) input array

  Returns:
      LabelVolume in the model's label scheme, with the input's shape and spacing
  """
  if isinstance(checkpoint, str):
    model, config, _ = load_checkpoint(checkpoint)
  else:
    model, config = checkpoint
  image, spacing, origin = _model_input(volume, config)
  if image.shape[0] != model.in_channels:
    raise ShapeMismatchError(
      f"Input has {image.shape[0]} channels, the checkpoint expects {model.in_channels}"
    )
  probabilities = sliding_window_probabilities(
    model, image, config.preprocess.patch_size, config.sliding_overlap
  )
  labels = merge_predictions(list(probabilities), config.merge_threshold)
  return LabelVolume(labels, LabelScheme(config.preprocess.label_scheme), spacing, origin)


def evaluate_case(
  prediction: LabelVolume,
  ground_truth: LabelVolume,
  labeling: Union[Labeling, str] = Labeling.FULL,
  side_split=None,
  tau: float = 1.0
) -> List[Tuple[str, str, Dict[str, float]]]:
  """
  Metrics for one case as (kind, name, values) rows.

  Structure rows compare artery and vein after collapsing both sides. Class
  rows compare the four left/right classes and are only produced for
  five-class predictions. Half-labeled cases are scored on the annotated
  side only.
  """
  if prediction.shape != ground_truth.shape:
    raise ShapeMismatchError(f"Prediction {prediction.shape} and ground truth {ground_truth.shape} differ in shape")
  labeling = Labeling(labeling)
  spacing = ground_truth.spacing
  domain = None
  if labeling is not Labeling.FULL:
    left = left_side_map(ground_truth.shape, side_split)
    domain = left if labeling is Labeling.HALF_LEFT else ~left

  pred_three = prediction if prediction.scheme is LabelScheme.THREE_CLASS else collapse_labels(prediction)
  gt_three = ground_truth if ground_truth.scheme is LabelScheme.THREE_CLASS else collapse_labels(ground_truth)
  rows = []
  for label, name in STRUCTURES.items():
    values = mask_metrics(pred_three.data == label, gt_three.data == label, spacing, tau, domain)
    rows.append(('structure', name, values))

  if prediction.scheme is LabelScheme.FIVE_CLASS:
    gt_five = ground_truth if ground_truth.scheme is LabelScheme.FIVE_CLASS else remap_labels(ground_truth, side_split)
    annotated = {
      Labeling.FULL: (1, 2, 3, 4),
      Labeling.HALF_LEFT: (1, 2),
      Labeling.HALF_RIGHT: (3, 4)
    }[labeling]
    for label in annotated:
      values = mask_metrics(prediction.data == label, gt_five.data == label, spacing, tau, domain)
      rows.append(('class', FIVE_CLASS_NAMES[label], values))
  return rows


def evaluate(
  checkpoint: str,
  manifest: Union[str, DatasetManifest],
  tau: Optional[float] = None,
  output: Optional[str] = None
) -> MetricsReport:
  """Predict and score every case of a manifest; optionally write the report as JSON lines"""
  model, config, payload = load_checkpoint(checkpoint)
  if isinstance(manifest, str):
    manifest = read_manifest(manifest)
  tau = config.nsd_tau if tau is None else tau

  report = MetricsReport(metadata={
    'checkpoint': checkpoint,
    'state_hash': payload.get('state_hash'),
    'config_hash': payload.get('config_hash'),
    'seed': config.seed,
    'epoch': payload.get('epoch'),
    'nsd_tau': tau
  })
  for entry in manifest.entries:
    if entry.label_path is None:
      raise ManifestError(f"Case {entry.case_id} has no ground truth to evaluate against")
    volume = load_volume(entry.volume_path)
    ground_truth = load_labels(entry.label_path)
    side_split = resolve_side_split(config.preprocess.side_split, volume.shape)
    prediction = predict((model, config), volume)
    for kind, name, values in evaluate_case(prediction, ground_truth, entry.labeling, side_split, tau):
      report.add_case(entry.case_id, entry.labeling.value, kind, name, values)
    logger.info(f"Evaluated {entry.case_id} ({entry.labeling.value})")

  summary = report.aggregate('structure')
  if summary:
    logger.info(f"Mean structure DSC over {len(manifest)} cases: {summary['mean']['dsc']:.2f}")
  if output:
    report.write(output)
  return report
