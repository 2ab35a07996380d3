"""3D U-Net backbone, image adapter and class-axis duplication."""
import logging
from typing import List, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from app.core.errors import CheckpointError, ConfigError, ShapeMismatchError

logger = logging.getLogger(__name__)


def _norm(kind: str, channels: int) -> nn.Module:
  if kind == 'instance':
    return nn.InstanceNorm3d(channels, affine=True)
  if kind == 'batch':
    return nn.BatchNorm3d(channels)
  if kind == 'none':
    return nn.Identity()
  raise ConfigError(f"Unknown norm: {kind}")


class ConvBlock(nn.Sequential):
  def __init__(self, in_channels: int, out_channels: int, norm: str = 'instance'):
    super().__init__(
      nn.Conv3d(in_channels, out_channels, 3, padding=1),
      _norm(norm, out_channels),
      nn.LeakyReLU(0.01, inplace=True),
      nn.Conv3d(out_channels, out_channels, 3, padding=1),
      _norm(norm, out_channels),
      nn.LeakyReLU(0.01, inplace=True)
    )


class UNet3D(nn.Module):
  """
  Encoder/decoder with skip connections.

  Level i has base_channels * 2**i channels; the bottleneck V sits at level
  depth-1 and the decoder output F has base_channels channels at input resolution.
  """

  def __init__(self, in_channels: int = 1, base_channels: int = 16, depth: int = 4, norm: str = 'instance'):
    super().__init__()
    if depth < 1:
      raise ConfigError(f"depth must be at least 1, got {depth}")
    self.in_channels = in_channels
    self.base_channels = base_channels
    self.depth = depth
    widths = [base_channels * 2 ** i for i in range(depth)]

    self.encoders = nn.ModuleList()
    previous = in_channels
    for width in widths:
      self.encoders.append(ConvBlock(previous, width, norm))
      previous = width

    self.upsamples = nn.ModuleList()
    self.decoders = nn.ModuleList()
    for level in reversed(range(depth - 1)):
      self.upsamples.append(nn.Conv3d(widths[level + 1], widths[level], 1))
      self.decoders.append(ConvBlock(widths[level] * 2, widths[level], norm))

  @property
  def bottleneck_channels(self) -> int:
    return self.base_channels * 2 ** (self.depth - 1)

  @property
  def decoder_channels(self) -> int:
    return self.base_channels

  def check_input(self, x: torch.Tensor) -> None:
    if x.dim() != 5 or x.shape[1] != self.in_channels:
      raise ShapeMismatchError(
        f"Expected input (B, {self.in_channels}, X, Y, Z), got {tuple(x.shape)}"
      )
    factor = 2 ** (self.depth - 1)
    if any(s % factor for s in x.shape[2:]):
      raise ShapeMismatchError(
        f"Spatial dims {tuple(x.shape[2:])} must be divisible by {factor} for depth {self.depth}"
      )

  def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    self.check_input(x)
    skips: List[torch.Tensor] = []
    for level, encoder in enumerate(self.encoders):
      if level > 0:
        x = F.max_pool3d(x, 2)
      x = encoder(x)
      skips.append(x)
    bottleneck = x

    for upsample, decoder, skip in zip(self.upsamples, self.decoders, reversed(skips[:-1])):
      x = F.interpolate(x, size=skip.shape[2:], mode='trilinear', align_corners=False)
      x = decoder(torch.cat([upsample(x), skip], dim=1))
    return bottleneck, x


def unet_forward(net: UNet3D, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
  """(V, F): bottleneck features and full-resolution decoder features"""
  return net(x)


def load_backbone_weights(net: UNet3D, path: str) -> None:
  """Drop in pretrained backbone weights; unmatched keys are logged, not fatal"""
  try:
    state = torch.load(path, map_location='cpu')
  except Exception as e:
    raise CheckpointError(f"Cannot read backbone weights {path}: {str(e)}")
  if isinstance(state, dict) and 'model_state' in state:
    state = {
      k[len('backbone.'):]: v for k, v in state['model_state'].items() if k.startswith('backbone.')
    }
  own = net.state_dict()
  compatible = {k: v for k, v in state.items() if k in own and own[k].shape == v.shape}
  result = net.load_state_dict(compatible, strict=False)
  logger.info(
    f"Loaded {len(compatible)} backbone tensors from {path}; "
    f"missing={len(result.missing_keys)} skipped={len(state) - len(compatible)}"
  )


class ImageAdapter(nn.Module):
  """Global average pooling, then an MLP from C_bottleneck to D (one hidden layer of width D).

  With hidden=False the MLP is a single linear projection, used when adapters are ablated.
  """

  def __init__(self, in_channels: int, dim: int, hidden: bool = True):
    super().__init__()
    self.in_channels = in_channels
    self.dim = dim
    if hidden:
      self.mlp = nn.Sequential(nn.Linear(in_channels, dim), nn.ReLU(inplace=True), nn.Linear(dim, dim))
    else:
      self.mlp = nn.Linear(in_channels, dim)

  def pool(self, features: torch.Tensor) -> torch.Tensor:
    if features.dim() != 5 or features.shape[1] != self.in_channels:
      raise ShapeMismatchError(
        f"Image adapter expects (B, {self.in_channels}, h, w, l), got {tuple(features.shape)}"
      )
    return features.mean(dim=(2, 3, 4))

  def forward(self, features: torch.Tensor) -> torch.Tensor:
    return self.mlp(self.pool(features))


def image_adapter_forward(adapter: ImageAdapter, features: torch.Tensor) -> torch.Tensor:
  return adapter(features)


def rep(embeddings: torch.Tensor, k: int) -> torch.Tensor:
  """Duplicate (B, D) along a new class axis: (B, k, D)"""
  if k < 1:
    raise ShapeMismatchError(f"rep needs k >= 1, got {k}")
  if embeddings.dim() != 2:
    raise ShapeMismatchError(f"rep expects (B, D), got {tuple(embeddings.shape)}")
  return embeddings.unsqueeze(1).expand(-1, k, -1)
