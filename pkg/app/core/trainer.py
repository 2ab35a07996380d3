"""Training loop: deterministic patch pipeline, AdamW optimisation, validation-based
model selection and structured step/epoch records."""
import os
import json
import time
import random
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
from torch.utils.data import DataLoader, Dataset

from app.core.config import TrainConfig
from app.core.errors import DivergenceError, ManifestError, VesselSegError
from app.core.fusion import merge_predictions
from app.core.inference import evaluate, sliding_window_probabilities
from app.core.losses import LossReport, mask_tensors, sup_loss
from app.core.metrics import METRIC_NAMES, dsc
from app.core.model import LanguageGuidedSegmenter, build_model, count_trainable, save_checkpoint
from app.core.preprocess import (
  build_input_channels, collapse_labels, derive_seed, remap_labels, resolve_side_split,
  sample_patch, supervision_mask
)
from app.core.volume_io import (
  DatasetManifest, LabelScheme, LabelVolume, load_labels, load_volume, read_manifest, split_manifest
)
from app.utils.logging import JsonLinesWriter

logger = logging.getLogger(__name__)


def seed_everything(seed: int) -> None:
  random.seed(seed)
  np.random.seed(seed % 2 ** 32)
  torch.manual_seed(seed)
  torch.use_deterministic_algorithms(True, warn_only=True)


def to_scheme(labels: LabelVolume, scheme: LabelScheme, side_split) -> LabelVolume:
  """Bring stored labels into the training label scheme"""
  scheme = LabelScheme(scheme)
  if labels.scheme is scheme:
    return labels
  if scheme is LabelScheme.FIVE_CLASS:
    return remap_labels(labels, side_split)
  return collapse_labels(labels)


@dataclass
class Case:
  """One manifest entry, preprocessed and ready for patch sampling."""
  case_id: str
  image: np.ndarray
  labels: np.ndarray
  labeling: str
  side_split: object
  spacing: tuple


def load_case(entry, config: TrainConfig) -> Case:
  if entry.label_path is None:
    raise ManifestError(f"Case {entry.case_id} has no ground truth")
  volume = load_volume(entry.volume_path)
  image = build_input_channels(volume, config.preprocess)
  side_split = resolve_side_split(config.preprocess.side_split, volume.shape)
  labels = to_scheme(load_labels(entry.label_path), config.preprocess.label_scheme, side_split)
  if labels.shape != volume.shape:
    raise ManifestError(f"Case {entry.case_id}: labels {labels.shape} do not match volume {volume.shape}")
  return Case(entry.case_id, image, labels.data.astype(np.int64), entry.labeling.value, side_split, volume.spacing)


class PatchDataset(Dataset):
  """
  Patches drawn from a manifest, one per sample index.

  Sample i of epoch e is a pure function of (seed, e * samples_per_epoch + i),
  so the batch sequence does not depend on the number of loader workers.
  """

  def __init__(self, manifest: DatasetManifest, config: TrainConfig, samples_per_epoch: int, seed: int):
    if len(manifest) == 0:
      raise ManifestError("Cannot sample patches from an empty manifest")
    self.manifest = manifest
    self.config = config
    self.samples_per_epoch = samples_per_epoch
    self.seed = seed
    self.epoch = 0
    self._cache: Dict[int, Case] = {}

  def __len__(self) -> int:
    return self.samples_per_epoch

  def set_epoch(self, epoch: int) -> None:
    self.epoch = epoch

  def case(self, index: int) -> Case:
    if index not in self._cache:
      self._cache[index] = load_case(self.manifest.entries[index], self.config)
    return self._cache[index]

  def __getitem__(self, index: int) -> Dict[str, torch.Tensor]:
    global_index = self.epoch * self.samples_per_epoch + index
    rng = np.random.default_rng(derive_seed(self.seed, global_index))
    case_index = int(rng.integers(len(self.manifest)))
    case = self.case(case_index)

    scheme = LabelScheme(self.config.preprocess.label_scheme)
    mask = supervision_mask(case.labeling, case.labels.shape, case.side_split, scheme)
    patch = sample_patch(
      case.image, case.labels, self.config.preprocess.patch_size,
      seed=int(rng.integers(2 ** 32)), fg_bias=self.config.preprocess.fg_bias,
      mask=mask, source_id=case.case_id
    )
    supervised, spatial = mask_tensors([patch.mask], scheme.max_label, patch.labels.shape)
    if spatial is None:
      spatial = torch.ones(1, *patch.labels.shape, dtype=torch.bool)
    return {
      'image': torch.from_numpy(patch.image),
      'labels': torch.from_numpy(patch.labels),
      'supervised': supervised[0],
      'spatial': spatial[0]
    }


@dataclass
class TrainResult:
  best_checkpoint: str
  last_checkpoint: str
  log_path: str
  best_val_dsc: float
  step_losses: List[float] = field(default_factory=list)
  val_history: List[float] = field(default_factory=list)


class Trainer:
  def __init__(self, config: TrainConfig, model: Optional[LanguageGuidedSegmenter] = None):
    config.validate()
    self.config = config
    seed_everything(config.seed)
    self.model = build_model(config) if model is None else model
    self.optimizer = torch.optim.AdamW(
      [p for p in self.model.parameters() if p.requires_grad],
      lr=config.lr,
      betas=(config.beta1, 0.999),
      weight_decay=config.weight_decay
    )
    self.step = 0
    self.log = JsonLinesWriter(os.path.join(config.out_dir, 'train_log.jsonl'))
    logger.info(f"Trainer ready: {count_trainable(self.model)} trainable parameters, out_dir={config.out_dir}")

  def train_step(self, batch: Dict[str, torch.Tensor]) -> LossReport:
    """One optimizer step on a collated batch; raises DivergenceError on a non-finite loss"""
    self.model.train()
    probabilities = self.model(batch['image'])
    spatial = batch.get('spatial')
    report = sup_loss(probabilities, batch['labels'], batch['supervised'], spatial)
    if not torch.isfinite(report.total):
      terms = {'loss': float(report.total.detach())}
      for k, (dice, ce) in report.per_class.items():
        terms[f"dice_{k}"] = dice
        terms[f"ce_{k}"] = ce
      raise DivergenceError(self.step, terms)

    self.optimizer.zero_grad()
    report.total.backward()
    self.optimizer.step()
    self.step += 1
    return report

  @torch.no_grad()
  def validate(self, cases: Sequence[Case]) -> float:
    """Mean foreground DSC (percent) over validation cases, annotated side only for half labels"""
    self.model.eval()
    scheme = LabelScheme(self.config.preprocess.label_scheme)
    scores = []
    for case in cases:
      probabilities = sliding_window_probabilities(
        self.model, case.image, self.config.preprocess.patch_size, self.config.sliding_overlap
      )
      prediction = merge_predictions(list(probabilities), self.config.merge_threshold)
      mask = supervision_mask(case.labeling, case.labels.shape, case.side_split, scheme)
      domain = mask.dense(case.labels.shape)
      for k in sorted(mask.supervised_classes):
        scores.append(dsc((prediction == k) & domain, (case.labels == k) & domain))
    return float(np.mean(scores)) if scores else 0.0

  def fit(self, train_manifest: DatasetManifest, val_manifest: DatasetManifest) -> TrainResult:
    config = self.config
    samples = config.steps_per_epoch * config.batch_size
    dataset = PatchDataset(train_manifest, config, samples, config.seed)
    generator = torch.Generator()
    generator.manual_seed(config.seed)
    loader = DataLoader(
      dataset, batch_size=config.batch_size, shuffle=False,
      num_workers=config.num_workers, generator=generator
    )
    val_cases = [load_case(entry, config) for entry in val_manifest.entries]

    best_path = os.path.join(config.out_dir, 'best.pt')
    last_path = os.path.join(config.out_dir, 'last.pt')
    best = -1.0
    step_losses: List[float] = []
    val_history: List[float] = []

    for epoch in range(config.max_epochs):
      dataset.set_epoch(epoch)
      epoch_losses = []
      for batch in loader:
        report = self.train_step(batch)
        loss = float(report.total.detach())
        epoch_losses.append(loss)
        step_losses.append(loss)
        self.log.write({'kind': 'step', 'epoch': epoch, 'step': self.step, **report.as_record()})

      val_dsc = self.validate(val_cases)
      val_history.append(val_dsc)
      improved = val_dsc > best
      extra = {
        'optimizer_state': self.optimizer.state_dict(),
        'epoch': epoch,
        'val_dsc': val_dsc,
        'best_val_dsc': max(best, val_dsc)
      }
      if improved:
        best = val_dsc
        save_checkpoint(best_path, self.model, config, **extra)
      save_checkpoint(last_path, self.model, config, **extra)
      self.log.write({
        'kind': 'epoch',
        'epoch': epoch,
        'train_loss': float(np.mean(epoch_losses)) if epoch_losses else None,
        'val_dsc': val_dsc,
        'best': improved
      })
      logger.info(f"Epoch {epoch}: train_loss={np.mean(epoch_losses):.4f} val_dsc={val_dsc:.2f} best={best:.2f}")

    return TrainResult(best_path, last_path, self.log.path, best, step_losses, val_history)


def split_for_training(manifest: DatasetManifest, config: TrainConfig):
  """(train, val, test) manifests; tiny manifests train and validate on every case"""
  if len(manifest) < 3:
    logger.warning(f"Only {len(manifest)} cases: training and validating on all of them")
    return manifest, manifest, DatasetManifest(entries=[], seed=manifest.seed)
  return split_manifest(manifest, config.split_ratios, manifest.seed)


def train(config: TrainConfig, manifest: Optional[DatasetManifest] = None) -> TrainResult:
  """Train on the configured manifest and keep the best checkpoint by validation DSC"""
  if manifest is None:
    if not config.manifest:
      raise ManifestError("No manifest configured (data.manifest or --manifest)")
    manifest = read_manifest(config.manifest)
  train_part, val_part, test_part = split_for_training(manifest, config)
  os.makedirs(config.out_dir, exist_ok=True)
  logger.info(
    f"Training seed={config.seed} on {len(train_part)} cases, validating on {len(val_part)}, "
    f"config={config.config_hash()[:12]}"
  )
  return Trainer(config).fit(train_part, val_part)


def run_seeds(config: TrainConfig, seeds: Sequence[int], manifest: Optional[DatasetManifest] = None) -> Dict:
  """
  Train once per seed and score each best checkpoint on the held-out split.
  Reports mean and standard deviation of the structure-averaged metrics, the best
  validation DSC and the wall time of every seed; the JSON part lands in
  <out_dir>/seeds_summary.json.
  """
  if not seeds:
    raise VesselSegError("run_seeds needs at least one seed")
  if manifest is None:
    if not config.manifest:
      raise ManifestError("No manifest configured (data.manifest or --manifest)")
    manifest = read_manifest(config.manifest)

  results, reports, wall_time, per_seed = {}, {}, {}, {}
  for seed in seeds:
    seed = int(seed)
    run_config = TrainConfig.from_dict(config.to_dict())
    run_config.seed = seed
    run_config.out_dir = os.path.join(config.out_dir, f"seed_{seed}")
    started = time.perf_counter()
    results[seed] = train(run_config, manifest)
    _, val_part, test_part = split_for_training(manifest, run_config)
    held_out = test_part if len(test_part) else val_part
    reports[seed] = evaluate(
      results[seed].best_checkpoint, held_out, output=os.path.join(run_config.out_dir, 'test_metrics.jsonl')
    )
    wall_time[seed] = time.perf_counter() - started
    per_seed[seed] = reports[seed].aggregate('structure').get('mean', {})
    logger.info(
      f"Seed {seed}: held-out DSC {per_seed[seed].get('dsc', float('nan')):.2f} on {len(held_out)} cases "
      f"in {wall_time[seed]:.0f}s"
    )

  metrics = {
    m: {
      'mean': float(np.mean([per_seed[s].get(m, np.nan) for s in results])),
      'std': float(np.std([per_seed[s].get(m, np.nan) for s in results]))
    }
    for m in METRIC_NAMES
  }
  val_scores = [r.best_val_dsc for r in results.values()]
  summary = {
    'seeds': list(results),
    'mean': metrics['dsc']['mean'],
    'std': metrics['dsc']['std'],
    'metrics': metrics,
    'per_seed': per_seed,
    'val_mean': float(np.mean(val_scores)),
    'val_std': float(np.std(val_scores)),
    'wall_time': wall_time
  }
  os.makedirs(config.out_dir, exist_ok=True)
  with open(os.path.join(config.out_dir, 'seeds_summary.json'), 'w') as f:
    json.dump(summary, f, indent=2, sort_keys=True)
  logger.info(f"Seeds {list(results)}: held-out DSC {summary['mean']:.2f} ± {summary['std']:.2f}")
  summary['runs'] = results
  summary['reports'] = reports
  return summary
