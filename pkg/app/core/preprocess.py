"""CT and label augmentation, supervision masks and patch sampling."""
import os
import logging
from dataclasses import dataclass, field
from typing import FrozenSet, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

from app.core.config import PreprocessConfig
from app.core.errors import LabelSchemeError, PreprocessError
from app.core.volume_io import (
  ChannelTag, DatasetManifest, Labeling, LabelScheme, LabelVolume, ManifestEntry, Volume,
  load_labels, load_volume, save_volume, write_manifest
)

logger = logging.getLogger(__name__)

# A sagittal plane index on axis 0 (x < plane is left) or a boolean map that is True on the left.
SideSplit = Union[int, np.ndarray, None]

HESSIAN_MIN_SIZE = 5


@dataclass
class SupervisionMask:
  supervised_classes: FrozenSet[int]
  spatial_mask: Optional[np.ndarray] = None

  def dense(self, shape: Sequence[int]) -> np.ndarray:
    """Spatial mask as a boolean array, all True when absent"""
    if self.spatial_mask is None:
      return np.ones(tuple(shape), dtype=bool)
    return self.spatial_mask


@dataclass
class Patch:
  image: np.ndarray
  labels: np.ndarray
  mask: SupervisionMask
  source_id: str = ''
  corner: Tuple[int, int, int] = (0, 0, 0)
  centered_on_foreground: bool = False
  meta: dict = field(default_factory=dict)


def window_hu(volume: Volume, lo: float = -700.0, hi: float = 300.0) -> Volume:
  """Clamp raw HU to [lo, hi] and map affinely onto [0, 1]"""
  if lo >= hi:
    raise PreprocessError(f"Invalid HU window: lo={lo} must be below hi={hi}")
  if volume.channel_tag is ChannelTag.NORMALIZED:
    return Volume(volume.data.copy(), volume.spacing, volume.origin, ChannelTag.NORMALIZED)
  if volume.channel_tag is not ChannelTag.RAW_HU:
    raise PreprocessError(f"window_hu expects a raw_hu volume, got {volume.channel_tag.value}")

  data = np.clip(volume.data.astype(np.float32), lo, hi)
  data = (data - np.float32(lo)) / np.float32(hi - lo)
  data = np.clip(data, 0.0, 1.0)
  return Volume(data, volume.spacing, volume.origin, ChannelTag.NORMALIZED)


def hessian_matrix(data: np.ndarray, sigma: float = 1.0) -> np.ndarray:
  """
  Per-voxel 3x3 Hessian of the Gaussian-smoothed intensity.

  Second derivatives are repeated central differences in voxel units over an
  edge-replicated border. Returns an array of shape (X, Y, Z, 3, 3).
  """
  if sigma < 0:
    raise PreprocessError(f"sigma must be non-negative, got {sigma}")
  if min(data.shape) < HESSIAN_MIN_SIZE:
    raise PreprocessError(
      f"Volume {data.shape} is smaller than the {HESSIAN_MIN_SIZE}-voxel Hessian stencil"
    )
  smoothed = data.astype(np.float64)
  if sigma > 0:
    smoothed = ndimage.gaussian_filter(smoothed, sigma=sigma, mode='nearest')

  padded = np.pad(smoothed, 2, mode='edge')
  first = np.gradient(padded)
  hessian = np.empty(data.shape + (3, 3), dtype=np.float64)
  inner = (slice(2, -2),) * 3
  for i in range(3):
    second = np.gradient(first[i])
    for j in range(i, 3):
      hessian[..., i, j] = second[j][inner]
      hessian[..., j, i] = hessian[..., i, j]
  return hessian


def hessian_eigenvalues(data: np.ndarray, sigma: float = 1.0) -> np.ndarray:
  """Eigenvalues of the Hessian at every voxel, ascending, shape (X, Y, Z, 3)"""
  return np.linalg.eigvalsh(hessian_matrix(data, sigma))


def largest_magnitude(eigenvalues: np.ndarray) -> np.ndarray:
  index = np.argmax(np.abs(eigenvalues), axis=-1)
  return np.take_along_axis(eigenvalues, index[..., None], axis=-1)[..., 0]


def rescale_unit(data: np.ndarray) -> np.ndarray:
  lo, hi = float(data.min()), float(data.max())
  if hi - lo <= 0:
    return np.zeros_like(data, dtype=np.float32)
  return ((data - lo) / (hi - lo)).astype(np.float32)


def hessian_eigen_channel(volume: Volume, sigma: float = 1.0, mode: str = 'largest') -> Union[Volume, List[Volume]]:
  """
  Hessian eigenvalue channel(s) of a normalized volume, rescaled to [0, 1].

  With mode='largest' the channel is the negated eigenvalue of largest magnitude,
  so bright tubular structures on a dark background respond high. With
  mode='all' the three ascending eigenvalues are returned as separate channels.
  """
  if volume.channel_tag is not ChannelTag.NORMALIZED:
    raise PreprocessError(f"hessian_eigen_channel expects a normalized volume, got {volume.channel_tag.value}")
  eigenvalues = hessian_eigenvalues(volume.data, sigma)
  if mode == 'largest':
    response = -largest_magnitude(eigenvalues)
    return Volume(rescale_unit(response), volume.spacing, volume.origin, ChannelTag.HESSIAN_EIG)
  if mode == 'all':
    return [
      Volume(rescale_unit(-eigenvalues[..., i]), volume.spacing, volume.origin, ChannelTag.HESSIAN_EIG)
      for i in range(3)
    ]
  raise PreprocessError(f"Unknown Hessian eigenvalue mode: {mode}")


def build_input_channels(volume: Volume, config: PreprocessConfig) -> np.ndarray:
  """Network input (C, X, Y, Z) from a raw or normalized CT volume"""
  lo, hi = config.hu_window
  windowed = window_hu(volume, lo, hi)
  channels = [windowed.data]
  if config.hessian_channel:
    hessian = hessian_eigen_channel(windowed, config.hessian_sigma, config.hessian_eigen)
    hessian = hessian if isinstance(hessian, list) else [hessian]
    if config.hessian_mode == 'replace':
      channels = []
    elif config.hessian_mode != 'append':
      raise PreprocessError(f"Unknown hessian_mode: {config.hessian_mode}")
    channels.extend(h.data for h in hessian)
  return np.stack(channels).astype(np.float32)


def left_side_map(shape: Sequence[int], side_split: SideSplit = None) -> np.ndarray:
  """Boolean map that is True on the left side"""
  shape = tuple(shape)
  if side_split is None:
    side_split = shape[0] // 2
  if isinstance(side_split, np.ndarray):
    if side_split.shape != shape:
      raise PreprocessError(f"Side map shape {side_split.shape} does not match volume {shape}")
    return side_split.astype(bool)
  left = np.zeros(shape, dtype=bool)
  left[:int(side_split)] = True
  return left


def resolve_side_split(setting: str, shape: Sequence[int]) -> SideSplit:
  """Turn the side_split config value (midplane | map:<path>) into a SideSplit"""
  if setting in (None, '', 'midplane'):
    return shape[0] // 2
  if setting.startswith('map:'):
    side_map = load_labels(setting[len('map:'):]).data > 0
    if side_map.shape != tuple(shape):
      raise PreprocessError(f"Side map {setting} has shape {side_map.shape}, expected {tuple(shape)}")
    return side_map
  raise PreprocessError(f"Unknown side_split: {setting}")


def remap_labels(labels: LabelVolume, side_split: SideSplit = None) -> LabelVolume:
  """Three-class artery/vein labels to the five-class left/right scheme"""
  if labels.scheme is not LabelScheme.THREE_CLASS:
    raise LabelSchemeError(f"remap_labels expects three_class labels, got {labels.scheme.value}")
  data = labels.data
  if data.size and (data.min() < 0 or data.max() > 2):
    raise LabelSchemeError("three_class labels must lie in {0, 1, 2}")
  right = ~left_side_map(data.shape, side_split)
  out = data.astype(np.uint8)
  out[(data > 0) & right] += 2
  return LabelVolume(out, LabelScheme.FIVE_CLASS, labels.spacing, labels.origin)


def collapse_labels(labels: LabelVolume) -> LabelVolume:
  """Five-class labels back to artery (1) / vein (2)"""
  if labels.scheme is not LabelScheme.FIVE_CLASS:
    raise LabelSchemeError(f"collapse_labels expects five_class labels, got {labels.scheme.value}")
  data = labels.data
  if data.size and (data.min() < 0 or data.max() > 4):
    raise LabelSchemeError("five_class labels must lie in {0..4}")
  out = data.astype(np.uint8)
  out[out > 2] -= 2
  return LabelVolume(out, LabelScheme.THREE_CLASS, labels.spacing, labels.origin)


def supervision_mask(
  labeling: Union[Labeling, str],
  shape: Sequence[int],
  side_split: SideSplit = None,
  scheme: LabelScheme = LabelScheme.FIVE_CLASS
) -> SupervisionMask:
  """
  Which classes and voxels a case supervises.

  Half-labeled cases restrict every loss term to the annotated side. Under the
  three-class scheme both classes stay supervised there.
  """
  labeling = Labeling(labeling)
  scheme = LabelScheme(scheme)
  all_classes = frozenset(range(1, scheme.max_label + 1))
  if labeling is Labeling.FULL:
    return SupervisionMask(all_classes, None)

  left = left_side_map(shape, side_split)
  spatial = left if labeling is Labeling.HALF_LEFT else ~left
  if scheme is LabelScheme.THREE_CLASS:
    return SupervisionMask(all_classes, spatial)
  classes = frozenset({1, 2}) if labeling is Labeling.HALF_LEFT else frozenset({3, 4})
  return SupervisionMask(classes, spatial)


def derive_seed(seed: int, index: int) -> int:
  """Independent per-sample seed from (global seed, sample index)"""
  return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1)[0])


def _pad_to(array: np.ndarray, size: Sequence[int]) -> np.ndarray:
  spatial = array.shape[-3:]
  pads = [(0, max(0, s - d)) for d, s in zip(spatial, size)]
  if not any(p[1] for p in pads):
    return array
  pads = [(0, 0)] * (array.ndim - 3) + pads
  return np.pad(array, pads, mode='constant')


def sample_patch(
  image: np.ndarray,
  labels: np.ndarray,
  size: Sequence[int],
  seed: int,
  fg_bias: float = 0.5,
  mask: Optional[SupervisionMask] = None,
  source_id: str = ''
) -> Patch:
  """
  Crop a patch from a (C, X, Y, Z) image and its labels.

  With probability fg_bias the patch is centred on a uniformly chosen
  foreground voxel, otherwise on a uniformly chosen voxel; the corner is then
  clamped into the volume. Volumes smaller than the patch are zero-padded.
  """
  size = tuple(int(s) for s in size)
  if len(size) != 3 or any(s <= 0 for s in size):
    raise PreprocessError(f"Patch size must be three positive integers, got {list(size)}")
  if not 0.0 <= fg_bias <= 1.0:
    raise PreprocessError(f"fg_bias must lie in [0, 1], got {fg_bias}")
  if image.ndim == 3:
    image = image[None]
  if image.shape[-3:] != labels.shape:
    raise PreprocessError(f"Image {image.shape[-3:]} and labels {labels.shape} differ in shape")
  mask = mask or SupervisionMask(frozenset(), None)

  image = _pad_to(image, size)
  labels = _pad_to(labels, size)
  spatial = mask.spatial_mask
  if spatial is not None:
    spatial = _pad_to(spatial, size)
  shape = labels.shape

  rng = np.random.default_rng(seed)
  want_foreground = rng.random() < fg_bias
  foreground = np.flatnonzero(labels > 0) if want_foreground else np.empty(0, dtype=np.int64)
  if want_foreground and foreground.size:
    center = np.unravel_index(foreground[rng.integers(foreground.size)], shape)
    on_foreground = True
  else:
    center = tuple(int(rng.integers(d)) for d in shape)
    on_foreground = False

  corner = tuple(
    int(min(max(c - s // 2, 0), d - s)) for c, s, d in zip(center, size, shape)
  )
  slices = tuple(slice(c, c + s) for c, s in zip(corner, size))
  cropped_mask = SupervisionMask(
    mask.supervised_classes,
    None if spatial is None else spatial[slices].copy()
  )
  return Patch(
    image=image[(slice(None),) + slices].copy(),
    labels=labels[slices].copy(),
    mask=cropped_mask,
    source_id=source_id,
    corner=corner,
    centered_on_foreground=on_foreground,
    meta={'center': tuple(int(c) for c in center)}
  )


def export_preprocessed(manifest: DatasetManifest, config: PreprocessConfig, out_dir: str) -> str:
  """
  Write the windowed CT, Hessian channel(s) and training-scheme labels of every case.

  The written manifest points at the windowed volumes, so it can be trained on
  directly; the Hessian files sit next to them for inspection.

  Returns:
      Path of the written manifest
  """
  os.makedirs(out_dir, exist_ok=True)
  scheme = LabelScheme(config.label_scheme)
  lo, hi = config.hu_window
  entries = []
  for entry in manifest.entries:
    volume = load_volume(entry.volume_path)
    windowed = window_hu(volume, lo, hi)
    ct_path = os.path.join(out_dir, f"{entry.case_id}_ct.nii.gz")
    save_volume(windowed, ct_path)

    if config.hessian_channel:
      hessian = hessian_eigen_channel(windowed, config.hessian_sigma, config.hessian_eigen)
      hessian = hessian if isinstance(hessian, list) else [hessian]
      for i, channel in enumerate(hessian):
        suffix = '' if len(hessian) == 1 else str(i)
        save_volume(channel, os.path.join(out_dir, f"{entry.case_id}_hessian{suffix}.nii.gz"))

    label_path = None
    if entry.label_path is not None:
      labels = load_labels(entry.label_path)
      if labels.scheme is not scheme:
        split = resolve_side_split(config.side_split, labels.shape)
        labels = remap_labels(labels, split) if scheme is LabelScheme.FIVE_CLASS else collapse_labels(labels)
      label_path = os.path.join(out_dir, f"{entry.case_id}_label.nii.gz")
      save_volume(labels, label_path)
    entries.append(ManifestEntry(ct_path, label_path, entry.labeling))
    logger.info(f"Exported {entry.case_id} to {out_dir}")

  manifest_path = os.path.join(out_dir, 'manifest.jsonl')
  write_manifest(DatasetManifest(entries=entries, seed=manifest.seed), manifest_path)
  return manifest_path
