import os
import json
import hashlib
import logging
from dataclasses import dataclass, field, asdict
from typing import Dict, Any, Optional, Tuple

from app.core.errors import ConfigError

logger = logging.getLogger(__name__)

OUT_DIR_ENV = 'VESSELSEG_OUT_DIR'


class Config:
  def __init__(self, config_path: Optional[str] = None):
    self.config_path = config_path or os.getenv('CONFIG_PATH', 'config/config.json')
    self._config = self._load_config()

  def _load_config(self) -> Dict:
    """Load configuration from file"""
    try:
      with open(self.config_path, 'r') as f:
        config = json.load(f)
      logger.info(f"Configuration loaded from {self.config_path}")
      return config
    except Exception as e:
      logger.error(f"Error loading configuration from {self.config_path}: {str(e)}")
      return {}

  def get_config(self) -> Dict:
    """Get the entire configuration"""
    return self._config

  def get(self, section: str, default: Any = None) -> Any:
    """Get a specific section of the configuration"""
    return self._config.get(section, default)


def _as_dict(config: Any) -> Dict:
  if isinstance(config, Config):
    return config.get_config()
  return dict(config or {})


def _triple(value: Any) -> Tuple[int, int, int]:
  if isinstance(value, int):
    return (value, value, value)
  values = tuple(int(v) for v in value)
  if len(values) != 3:
    raise ConfigError(f"Expected three values, got {list(values)}")
  return values


@dataclass
class PreprocessConfig:
  hu_window: Tuple[float, float] = (-700.0, 300.0)
  hessian_channel: bool = True
  hessian_sigma: float = 1.0
  # append | replace
  hessian_mode: str = 'append'
  # largest | all
  hessian_eigen: str = 'largest'
  patch_size: Tuple[int, int, int] = (32, 32, 32)
  fg_bias: float = 0.5
  # midplane | map:<path>
  side_split: str = 'midplane'
  label_scheme: str = 'five_class'

  @classmethod
  def from_dict(cls, section: Dict) -> 'PreprocessConfig':
    return cls(
      hu_window=tuple(float(v) for v in section.get('hu_window', [-700, 300])),
      hessian_channel=bool(section.get('hessian_channel', True)),
      hessian_sigma=float(section.get('hessian_sigma', 1.0)),
      hessian_mode=section.get('hessian_mode', 'append'),
      hessian_eigen=section.get('hessian_eigen', 'largest'),
      patch_size=_triple(section.get('patch_size', 32)),
      fg_bias=float(section.get('fg_bias', 0.5)),
      side_split=section.get('side_split', 'midplane'),
      label_scheme=section.get('label_scheme', 'five_class')
    )

  @property
  def in_channels(self) -> int:
    """Number of network input channels produced by this configuration"""
    if not self.hessian_channel:
      return 1
    hessian = 3 if self.hessian_eigen == 'all' else 1
    if self.hessian_mode == 'replace':
      return hessian
    return 1 + hessian

  @property
  def num_classes(self) -> int:
    return 4 if self.label_scheme == 'five_class' else 2


@dataclass
class ModelConfig:
  embed_dim: int = 512
  unet_depth: int = 3
  base_channels: int = 8
  norm: str = 'instance'
  adapter_ratio: int = 4
  adapter_residual: bool = False
  use_adapters: bool = True
  c_mid: int = 8
  attention_heads: int = 1
  # cross_attention | plus
  fusion_mode: str = 'cross_attention'
  prompt_template: str = 'v4'
  # file:<path> | stub:<seed>
  embed_provider: str = 'stub:0'
  pretrained_backbone: Optional[str] = None

  @classmethod
  def from_dict(cls, section: Dict) -> 'ModelConfig':
    return cls(
      embed_dim=int(section.get('embed_dim', 512)),
      unet_depth=int(section.get('unet_depth', 3)),
      base_channels=int(section.get('base_channels', 8)),
      norm=section.get('norm', 'instance'),
      adapter_ratio=int(section.get('adapter_ratio', 4)),
      adapter_residual=bool(section.get('adapter_residual', False)),
      use_adapters=bool(section.get('use_adapters', True)),
      c_mid=int(section.get('c_mid', 8)),
      attention_heads=int(section.get('attention_heads', 1)),
      fusion_mode=section.get('fusion_mode', 'cross_attention'),
      prompt_template=section.get('prompt_template', 'v4'),
      embed_provider=section.get('embed_provider', 'stub:0'),
      pretrained_backbone=section.get('pretrained_backbone')
    )


@dataclass
class TrainConfig:
  """Everything a training run needs, with the ablation flags already applied."""
  preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
  model: ModelConfig = field(default_factory=ModelConfig)
  batch_size: int = 4
  lr: float = 8e-4
  beta1: float = 0.9
  weight_decay: float = 1e-5
  max_epochs: int = 20
  steps_per_epoch: int = 25
  seed: int = 0
  num_workers: int = 0
  ablation: Dict[str, bool] = field(default_factory=lambda: {'DA': True, 'AAP': True})
  split_ratios: Tuple[float, float, float] = (0.7, 0.1, 0.2)
  manifest: Optional[str] = None
  out_dir: str = 'runs/default'
  sliding_overlap: float = 0.5
  merge_threshold: float = 0.5
  nsd_tau: float = 1.0

  @classmethod
  def from_config(cls, config: Any) -> 'TrainConfig':
    """Build from a Config (or a plain dict with the same sections)"""
    raw = _as_dict(config)
    preprocess = PreprocessConfig.from_dict(raw.get('preprocess', {}))
    model = ModelConfig.from_dict(raw.get('model', {}))
    training = raw.get('training', {})
    data = raw.get('data', {})
    inference = raw.get('inference', {})
    evaluation = raw.get('evaluation', {})

    ablation = {'DA': True, 'AAP': True}
    ablation.update({k: bool(v) for k, v in training.get('ablation', {}).items()})

    train_config = cls(
      preprocess=preprocess,
      model=model,
      batch_size=int(training.get('batch_size', 4)),
      lr=float(training.get('lr', 8e-4)),
      beta1=float(training.get('beta1', 0.9)),
      weight_decay=float(training.get('weight_decay', 1e-5)),
      max_epochs=int(training.get('max_epochs', 20)),
      steps_per_epoch=int(training.get('steps_per_epoch', 25)),
      seed=int(training.get('seed', 0)),
      num_workers=int(training.get('num_workers', 0)),
      ablation=ablation,
      split_ratios=tuple(float(r) for r in data.get('split_ratios', [0.7, 0.1, 0.2])),
      manifest=data.get('manifest'),
      out_dir=os.getenv(OUT_DIR_ENV) or training.get('out_dir', 'runs/default'),
      sliding_overlap=float(inference.get('overlap', 0.5)),
      merge_threshold=float(inference.get('merge_threshold', 0.5)),
      nsd_tau=float(evaluation.get('nsd_tau', 1.0))
    )
    train_config.apply_ablation()
    train_config.validate()
    return train_config

  @classmethod
  def from_dict(cls, data: Dict) -> 'TrainConfig':
    """Inverse of to_dict; used when restoring a checkpoint"""
    data = dict(data)
    preprocess = PreprocessConfig.from_dict(data.pop('preprocess', {}))
    model = ModelConfig.from_dict(data.pop('model', {}))
    if 'split_ratios' in data:
      data['split_ratios'] = tuple(data['split_ratios'])
    return cls(preprocess=preprocess, model=model, **data)

  def apply_ablation(self) -> None:
    if not self.ablation.get('DA', True):
      self.preprocess.hessian_channel = False
      self.preprocess.label_scheme = 'three_class'
    if not self.ablation.get('AAP', True):
      self.model.fusion_mode = 'plus'
      self.model.use_adapters = False

  def validate(self) -> None:
    if self.lr <= 0:
      raise ConfigError(f"lr must be positive, got {self.lr}")
    if self.batch_size < 1:
      raise ConfigError(f"batch_size must be at least 1, got {self.batch_size}")
    factor = 2 ** (self.model.unet_depth - 1)
    if any(p % factor for p in self.preprocess.patch_size):
      raise ConfigError(
        f"patch_size {list(self.preprocess.patch_size)} must be divisible by {factor} for depth {self.model.unet_depth}"
      )
    if self.model.fusion_mode not in ('cross_attention', 'plus'):
      raise ConfigError(f"Unknown fusion_mode: {self.model.fusion_mode}")
    if self.model.embed_dim % self.model.attention_heads:
      raise ConfigError("embed_dim must be divisible by attention_heads")

  @property
  def num_classes(self) -> int:
    return self.preprocess.num_classes

  def to_dict(self) -> Dict:
    data = asdict(self)
    data['preprocess']['hu_window'] = list(self.preprocess.hu_window)
    data['preprocess']['patch_size'] = list(self.preprocess.patch_size)
    data['split_ratios'] = list(self.split_ratios)
    return data

  def config_hash(self) -> str:
    """SHA-256 over the canonical JSON rendering; the output directory is not part of it"""
    data = self.to_dict()
    data.pop('out_dir', None)
    canonical = json.dumps(data, sort_keys=True)
    return hashlib.sha256(canonical.encode('utf-8')).hexdigest()


def load_train_config(config_path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> TrainConfig:
  """Load the JSON configuration and apply dotted-key overrides such as {'training.max_epochs': 2}"""
  raw = json.loads(json.dumps(Config(config_path).get_config()))
  for key, value in (overrides or {}).items():
    if value is None:
      continue
    section, _, name = key.partition('.')
    raw.setdefault(section, {})[name] = value
  return TrainConfig.from_config(raw)
