"""Synthetic vascular phantoms: branching artery/vein tube trees per lung side,
unlabeled airway-like distractors, Gaussian noise."""
import os
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.core.errors import LabelSchemeError, PhantomError
from app.core.preprocess import collapse_labels
from app.core.volume_io import (
  ChannelTag, DatasetManifest, Labeling, LabelScheme, LabelVolume, ManifestEntry, Volume,
  save_volume, write_manifest
)

logger = logging.getLogger(__name__)

HU_RANGE = (-1024.0, 3071.0)

# label, side (0 = left, 1 = right), intensity key
STRUCTURES = (
  (1, 0, 'artery'),
  (2, 0, 'vein'),
  (3, 1, 'artery'),
  (4, 1, 'vein')
)


@dataclass
class PhantomConfig:
  shape: Tuple[int, int, int] = (64, 64, 64)
  spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
  tubes_per_structure: int = 2
  radius_range: Tuple[float, float] = (1.5, 3.0)
  branching_depth: int = 2
  segment_length: float = 14.0
  radius_decay: float = 0.8
  angle_jitter: float = 0.6
  distractor_tubes: int = 2
  artery_hu: Tuple[float, float] = (120.0, 220.0)
  vein_hu: Tuple[float, float] = (60.0, 160.0)
  background_hu: Tuple[float, float] = (-860.0, -820.0)
  airway_hu: Tuple[float, float] = (-990.0, -950.0)
  noise_std: float = 25.0
  seed: int = 0

  @classmethod
  def from_dict(cls, section: Dict) -> 'PhantomConfig':
    known = {k: v for k, v in section.items() if k in cls.__dataclass_fields__}
    for key in ('shape', 'spacing', 'radius_range', 'artery_hu', 'vein_hu', 'background_hu', 'airway_hu'):
      if key in known:
        known[key] = tuple(known[key])
    return cls(**known)

  def validate(self) -> None:
    lo, hi = self.radius_range
    if lo < 1.0 or hi < lo:
      raise PhantomError(f"radius_range {list(self.radius_range)} must satisfy 1 <= min <= max")
    for key in ('artery_hu', 'vein_hu', 'background_hu', 'airway_hu'):
      a, b = getattr(self, key)
      if a > b or a < HU_RANGE[0] or b > HU_RANGE[1]:
        raise PhantomError(f"{key} {[a, b]} must be an ordered range inside {list(HU_RANGE)} HU")
    if self.noise_std < 0:
      raise PhantomError("noise_std must be non-negative")
    if self.tubes_per_structure > 0 or self.distractor_tubes > 0:
      margin = 2 * int(np.ceil(hi)) + 2
      if self.shape[0] // 2 < margin or min(self.shape[1:]) < 2 * margin:
        raise PhantomError(f"Shape {list(self.shape)} is too small for tube radius {hi}")


def rasterize_cylinder(shape: Sequence[int], start: np.ndarray, end: np.ndarray, radius: float) -> np.ndarray:
  """Voxels whose centre lies within radius of the segment start-end, flat-ended"""
  start = np.asarray(start, dtype=np.float64)
  end = np.asarray(end, dtype=np.float64)
  lo = np.maximum(np.floor(np.minimum(start, end) - radius), 0).astype(int)
  hi = np.minimum(np.ceil(np.maximum(start, end) + radius) + 1, shape).astype(int)
  mask = np.zeros(tuple(shape), dtype=bool)
  if np.any(hi <= lo):
    return mask

  grid = np.stack(np.meshgrid(*[np.arange(a, b) for a, b in zip(lo, hi)], indexing='ij'), axis=-1)
  axis = end - start
  length_sq = float(axis @ axis)
  offset = grid - start
  if length_sq == 0:
    inside = np.sum(offset ** 2, axis=-1) <= radius ** 2
  else:
    t = offset @ axis / length_sq
    closest = offset - t[..., None] * axis
    inside = (t >= 0) & (t <= 1) & (np.sum(closest ** 2, axis=-1) <= radius ** 2)
  mask[tuple(slice(a, b) for a, b in zip(lo, hi))] = inside
  return mask


def rasterize_ball(shape: Sequence[int], center: np.ndarray, radius: float) -> np.ndarray:
  return rasterize_cylinder(shape, center, center, radius)


@dataclass
class _Segment:
  start: np.ndarray
  end: np.ndarray
  radius: float


def _random_direction(rng: np.random.Generator) -> np.ndarray:
  v = rng.standard_normal(3)
  return v / np.linalg.norm(v)


def _grow(rng, start, direction, radius, length, depth, config: PhantomConfig, segments: list) -> None:
  end = start + direction * length
  segments.append(_Segment(start, end, radius))
  if depth <= 0 or radius * config.radius_decay < 1.0:
    return
  for _ in range(2):
    jitter = rng.normal(0.0, config.angle_jitter, 3)
    child = direction + jitter
    child /= np.linalg.norm(child)
    _grow(rng, end, child, radius * config.radius_decay, length * config.radius_decay, depth - 1, config, segments)


def _side_bounds(shape: Sequence[int], side: int) -> Tuple[int, int]:
  mid = shape[0] // 2
  return (0, mid) if side == 0 else (mid, shape[0])


def _tube_tree(rng, shape, side, config: PhantomConfig) -> np.ndarray:
  """Rasterised tree rooted inside one side's half, clipped to that half"""
  x_lo, x_hi = _side_bounds(shape, side)
  radius = rng.uniform(*config.radius_range)
  margin = config.radius_range[1] + 1
  root = np.array([
    rng.uniform(x_lo + margin, x_hi - margin),
    rng.uniform(margin, shape[1] - margin),
    rng.uniform(margin, shape[2] - margin)
  ])
  segments: List[_Segment] = []
  _grow(rng, root, _random_direction(rng), radius, config.segment_length, config.branching_depth, config, segments)

  mask = np.zeros(tuple(shape), dtype=bool)
  for segment in segments:
    mask |= rasterize_cylinder(shape, segment.start, segment.end, segment.radius)
    mask |= rasterize_ball(shape, segment.end, segment.radius)
  mask |= rasterize_ball(shape, root, radius)
  side_mask = np.zeros(tuple(shape), dtype=bool)
  side_mask[x_lo:x_hi] = True
  return mask & side_mask


def generate_phantom(config: PhantomConfig) -> Tuple[Volume, LabelVolume]:
  """Paired raw-HU volume and five-class labels, deterministic per seed"""
  config.validate()
  shape = tuple(config.shape)
  rng = np.random.default_rng(config.seed)

  intensity = np.full(shape, rng.uniform(*config.background_hu), dtype=np.float64)
  labels = np.zeros(shape, dtype=np.uint8)

  for _ in range(config.distractor_tubes):
    airway = _tube_tree(rng, shape, int(rng.integers(2)), config)
    intensity[airway] = rng.uniform(*config.airway_hu)

  ranges = {'artery': config.artery_hu, 'vein': config.vein_hu}
  for label, side, kind in STRUCTURES:
    for _ in range(config.tubes_per_structure):
      tube = _tube_tree(rng, shape, side, config)
      intensity[tube] = rng.uniform(*ranges[kind])
      labels[tube] = label

  intensity += rng.normal(0.0, config.noise_std, shape)
  intensity = np.clip(intensity, *HU_RANGE).astype(np.float32)
  return (
    Volume(intensity, config.spacing, (0.0, 0.0, 0.0), ChannelTag.RAW_HU),
    LabelVolume(labels, LabelScheme.FIVE_CLASS, config.spacing, (0.0, 0.0, 0.0))
  )


def make_half_labeled(labels: LabelVolume, side: str) -> Tuple[LabelVolume, Labeling]:
  """Drop the annotations of the side that is not kept"""
  if labels.scheme is not LabelScheme.FIVE_CLASS:
    raise LabelSchemeError("make_half_labeled expects five_class labels")
  data = labels.data.copy()
  if side == 'left':
    data[data >= 3] = 0
    tag = Labeling.HALF_LEFT
  elif side == 'right':
    data[(data == 1) | (data == 2)] = 0
    tag = Labeling.HALF_RIGHT
  else:
    raise PhantomError(f"side must be 'left' or 'right', got {side!r}")
  return LabelVolume(data, LabelScheme.FIVE_CLASS, labels.spacing, labels.origin), tag


def write_phantom_dataset(
  out_dir: str,
  count: int,
  config: Optional[PhantomConfig] = None,
  half_fraction: float = 0.5
) -> str:
  """
  Write count phantom cases and a manifest.

  Labels are stored three-class (artery/vein), like clinical annotations; a
  half_fraction share of the cases is half-labeled, alternating sides.

  Returns:
      Path of the written manifest
  """
  config = config or PhantomConfig()
  if count < 1:
    raise PhantomError(f"count must be at least 1, got {count}")
  os.makedirs(out_dir, exist_ok=True)
  n_half = int(round(count * half_fraction))
  entries = []
  for index in range(count):
    case_config = PhantomConfig(**{**config.__dict__, 'seed': config.seed * 100003 + index})
    volume, labels = generate_phantom(case_config)
    labeling = Labeling.FULL
    if index < n_half:
      labels, labeling = make_half_labeled(labels, 'left' if index % 2 == 0 else 'right')

    image_path = os.path.join(out_dir, f"case_{index:03d}_image.nii.gz")
    label_path = os.path.join(out_dir, f"case_{index:03d}_label.nii.gz")
    save_volume(volume, image_path)
    save_volume(collapse_labels(labels), label_path)
    entries.append(ManifestEntry(image_path, label_path, labeling))
    logger.info(f"Wrote phantom case {index} ({labeling.value}) to {image_path}")

  manifest_path = os.path.join(out_dir, 'manifest.jsonl')
  write_manifest(DatasetManifest(entries=entries, seed=config.seed), manifest_path)
  return manifest_path
