"""Volume and label I/O, dataset manifests and deterministic splits.

Volumes are stored as NIfTI-1 (.nii.gz). The channel tag of a Volume and the
label scheme of a LabelVolume travel in the header's ``descrip`` field; the
full/half labeling tag lives in the manifest because NIfTI has no field for it.
"""
import os
import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple, Union

import nibabel as nib
import numpy as np

from app.core.errors import (
  LabelSchemeError, ManifestError, SplitError, VolumeFormatError, VolumeWriteError
)

logger = logging.getLogger(__name__)


class ChannelTag(str, Enum):
  RAW_HU = 'raw_hu'
  NORMALIZED = 'normalized'
  HESSIAN_EIG = 'hessian_eig'


class LabelScheme(str, Enum):
  THREE_CLASS = 'three_class'
  FIVE_CLASS = 'five_class'

  @property
  def max_label(self) -> int:
    return 2 if self is LabelScheme.THREE_CLASS else 4


class Labeling(str, Enum):
  FULL = 'full'
  HALF_LEFT = 'half_left'
  HALF_RIGHT = 'half_right'


Spacing = Tuple[float, float, float]


def _check_spacing(spacing: Sequence[float], where: str) -> Spacing:
  spacing = tuple(float(s) for s in spacing)
  if len(spacing) != 3 or any(not np.isfinite(s) or s <= 0 for s in spacing):
    raise VolumeFormatError(where, f"non-positive spacing {list(spacing)}")
  return spacing


@dataclass
class Volume:
  data: np.ndarray
  spacing: Spacing = (1.0, 1.0, 1.0)
  origin: Tuple[float, float, float] = (0.0, 0.0, 0.0)
  channel_tag: ChannelTag = ChannelTag.RAW_HU

  def __post_init__(self):
    self.channel_tag = ChannelTag(self.channel_tag)
    if self.data.ndim != 3 or min(self.data.shape) < 1:
      raise VolumeFormatError('<memory>', f"not a 3D volume: shape {self.data.shape}")
    self.spacing = _check_spacing(self.spacing, '<memory>')
    self.origin = tuple(float(o) for o in self.origin)
    if self.channel_tag is ChannelTag.NORMALIZED and self.data.size:
      if self.data.min() < 0.0 or self.data.max() > 1.0:
        raise VolumeFormatError('<memory>', "normalized volume has values outside [0, 1]")

  @property
  def shape(self) -> Tuple[int, int, int]:
    return tuple(self.data.shape)


@dataclass
class LabelVolume:
  data: np.ndarray
  scheme: LabelScheme = LabelScheme.FIVE_CLASS
  spacing: Spacing = (1.0, 1.0, 1.0)
  origin: Tuple[float, float, float] = (0.0, 0.0, 0.0)

  def __post_init__(self):
    self.scheme = LabelScheme(self.scheme)
    if self.data.ndim != 3:
      raise VolumeFormatError('<memory>', f"not a 3D volume: shape {self.data.shape}")
    if not np.issubdtype(self.data.dtype, np.integer):
      raise VolumeFormatError('<memory>', f"labels must be integers, got {self.data.dtype}")
    self.spacing = _check_spacing(self.spacing, '<memory>')
    self.origin = tuple(float(o) for o in self.origin)
    if self.data.size and (self.data.min() < 0 or self.data.max() > self.scheme.max_label):
      raise LabelSchemeError(
        f"labels outside {{0..{self.scheme.max_label}}} for scheme {self.scheme.value}"
      )

  @property
  def shape(self) -> Tuple[int, int, int]:
    return tuple(self.data.shape)


@dataclass(frozen=True)
class ManifestEntry:
  volume_path: str
  label_path: Optional[str]
  labeling: Labeling = Labeling.FULL

  @property
  def case_id(self) -> str:
    name = os.path.basename(self.volume_path)
    for suffix in ('.nii.gz', '.nii'):
      if name.endswith(suffix):
        return name[:-len(suffix)]
    return name


@dataclass
class DatasetManifest:
  entries: List[ManifestEntry] = field(default_factory=list)
  seed: int = 0

  def __post_init__(self):
    seen = set()
    for entry in self.entries:
      if entry.labeling is None:
        raise ManifestError(f"Missing labeling tag for {entry.volume_path}")
      for path in (entry.volume_path, entry.label_path):
        if path is None:
          continue
        if path in seen:
          raise ManifestError(f"Duplicate path in manifest: {path}")
        seen.add(path)

  def __len__(self) -> int:
    return len(self.entries)


def _affine(spacing: Spacing, origin: Sequence[float]) -> np.ndarray:
  affine = np.diag([spacing[0], spacing[1], spacing[2], 1.0])
  affine[:3, 3] = origin
  return affine


def _read_image(path: str):
  if not os.path.exists(path):
    raise VolumeFormatError(path, "file not found")
  try:
    image = nib.load(path)
    data = np.asanyarray(image.dataobj)
  except Exception as e:
    raise VolumeFormatError(path, f"cannot parse as NIfTI: {str(e)}")
  if data.ndim != 3:
    raise VolumeFormatError(path, f"not a 3D volume: shape {data.shape}")
  zooms = image.header.get_zooms()[:3]
  spacing = _check_spacing(zooms, path)
  origin = tuple(float(o) for o in image.affine[:3, 3])
  descrip = image.header['descrip'].tobytes().split(b'\x00')[0].decode('ascii', 'ignore')
  return data, spacing, origin, _parse_descrip(descrip)


def _parse_descrip(descrip: str) -> Dict[str, str]:
  fields = {}
  for token in descrip.split(';'):
    key, sep, value = token.partition('=')
    if sep:
      fields[key.strip()] = value.strip()
  return fields


def load_volume(path: str) -> Volume:
  """Load an intensity volume; data are returned unmodified"""
  data, spacing, origin, fields = _read_image(str(path))
  tag = fields.get('channel', ChannelTag.RAW_HU.value)
  try:
    tag = ChannelTag(tag)
  except ValueError:
    tag = ChannelTag.RAW_HU
  return Volume(data=data, spacing=spacing, origin=origin, channel_tag=tag)


def load_labels(path: str, scheme: Optional[Union[LabelScheme, str]] = None) -> LabelVolume:
  """Load a label volume; the scheme comes from the argument, the header or the label range"""
  data, spacing, origin, fields = _read_image(str(path))
  if not np.issubdtype(data.dtype, np.integer):
    rounded = np.rint(data)
    if not np.array_equal(rounded, data):
      raise VolumeFormatError(str(path), "label volume contains non-integer values")
    data = rounded.astype(np.uint8)
  if scheme is None:
    scheme = fields.get('scheme')
  if scheme is None:
    scheme = LabelScheme.THREE_CLASS if data.size == 0 or data.max() <= 2 else LabelScheme.FIVE_CLASS
  return LabelVolume(data=data, scheme=LabelScheme(scheme), spacing=spacing, origin=origin)


def save_volume(volume: Union[Volume, LabelVolume], path: str) -> None:
  """Write a Volume or LabelVolume as NIfTI-1; load(save(v)) reproduces the data exactly"""
  path = str(path)
  parent = os.path.dirname(os.path.abspath(path))
  if not os.path.isdir(parent):
    raise VolumeWriteError(path, "parent directory does not exist")

  data = np.asarray(volume.data)
  if data.dtype == np.bool_:
    data = data.astype(np.uint8)
  if isinstance(volume, LabelVolume):
    descrip = f"scheme={volume.scheme.value}"
  else:
    descrip = f"channel={volume.channel_tag.value}"

  image = nib.Nifti1Image(data, _affine(volume.spacing, volume.origin), dtype=data.dtype)
  image.header['descrip'] = descrip.encode('ascii')
  try:
    nib.save(image, path)
  except OSError as e:
    raise VolumeWriteError(path, str(e))
  logger.debug(f"Saved {descrip} volume {data.shape} to {path}")


def read_manifest(path: str) -> DatasetManifest:
  """
  Read a manifest: one JSON record per line.

  Records carry ``volume``, ``label`` and ``labeling``; an optional leading
  ``{"seed": N}`` record sets the manifest seed. Relative paths resolve
  against the manifest's directory.
  """
  if not os.path.exists(path):
    raise ManifestError(f"Manifest not found: {path}", status_code=404)
  base = os.path.dirname(os.path.abspath(path))
  entries = []
  seed = 0
  with open(path, 'r') as f:
    for number, line in enumerate(f, start=1):
      line = line.strip()
      if not line:
        continue
      try:
        record = json.loads(line)
      except json.JSONDecodeError as e:
        raise ManifestError(f"{path}:{number}: invalid record: {str(e)}")
      if set(record) == {'seed'}:
        seed = int(record['seed'])
        continue
      if 'volume' not in record or 'labeling' not in record:
        raise ManifestError(f"{path}:{number}: record needs 'volume' and 'labeling'")
      try:
        labeling = Labeling(record['labeling'])
      except ValueError:
        raise ManifestError(f"{path}:{number}: unknown labeling tag {record['labeling']!r}")
      label = record.get('label')
      entries.append(ManifestEntry(
        volume_path=os.path.join(base, record['volume']),
        label_path=os.path.join(base, label) if label else None,
        labeling=labeling
      ))
  return DatasetManifest(entries=entries, seed=seed)


def write_manifest(manifest: DatasetManifest, path: str) -> None:
  """Write a manifest; paths under the manifest's directory are stored relative to it"""
  base = os.path.dirname(os.path.abspath(path))

  def _rel(p: Optional[str]) -> Optional[str]:
    if p is None:
      return None
    p = os.path.abspath(p)
    return os.path.relpath(p, base) if p.startswith(base + os.sep) else p

  with open(path, 'w') as f:
    f.write(json.dumps({'seed': manifest.seed}) + '\n')
    for entry in manifest.entries:
      f.write(json.dumps({
        'volume': _rel(entry.volume_path),
        'label': _rel(entry.label_path),
        'labeling': entry.labeling.value
      }, sort_keys=True) + '\n')


def largest_remainder(n: int, ratios: Sequence[float]) -> List[int]:
  """Integer shares of n proportional to ratios; leftovers go to the largest fractional parts"""
  quotas = [n * r for r in ratios]
  sizes = [int(np.floor(q + 1e-9)) for q in quotas]
  remainders = [q - s for q, s in zip(quotas, sizes)]
  leftover = n - sum(sizes)
  # stable sort keeps the earlier split on ties
  order = sorted(range(len(ratios)), key=lambda i: -remainders[i])
  for i in order[:leftover]:
    sizes[i] += 1
  return sizes


def split_manifest(
  manifest: DatasetManifest,
  ratios: Sequence[float] = (0.7, 0.1, 0.2),
  seed: Optional[int] = None
) -> Tuple[DatasetManifest, DatasetManifest, DatasetManifest]:
  """
  Partition a manifest into train/val/test.

  Args:
      manifest: Manifest to split
      ratios: (train, val, test) shares, positive and summing to 1
      seed: Shuffle seed; defaults to the manifest's own seed

  Returns:
      Three disjoint manifests covering every entry
  """
  ratios = tuple(float(r) for r in ratios)
  if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
    raise SplitError(f"Invalid split ratios {list(ratios)}: need three positive values summing to 1")
  n = len(manifest.entries)
  if n < 3:
    raise SplitError(f"Need at least 3 entries to split, got {n}")

  seed = manifest.seed if seed is None else seed
  order = np.random.default_rng(seed).permutation(n)
  sizes = largest_remainder(n, ratios)

  parts = []
  start = 0
  for size in sizes:
    picked = [manifest.entries[i] for i in order[start:start + size]]
    parts.append(DatasetManifest(entries=picked, seed=seed))
    start += size
  logger.info(f"Split {n} entries into train/val/test = {sizes[0]}/{sizes[1]}/{sizes[2]}")
  return tuple(parts)
