"""Cross-attention fusion of text and image embeddings, dynamic head parameter
generation and the per-class 1x1x1 convolution head."""
import math
import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from app.core.errors import ShapeMismatchError

logger = logging.getLogger(__name__)


def scaled_dot_product_attention(
  queries: torch.Tensor,
  keys: torch.Tensor,
  values: torch.Tensor,
  num_heads: int = 1
) -> Tuple[torch.Tensor, torch.Tensor]:
  """
  softmax(Q Kᵀ / sqrt(d_k)) V over the second-to-last axis.

  Args:
      queries, keys, values: (..., N, D) tensors
      num_heads: Heads to split D into; d_k = D / num_heads

  Returns:
      (output (..., N, D), weights (..., heads, N, N))
  """
  *lead, n, dim = queries.shape
  head_dim = dim // num_heads

  def _split(x):
    return x.reshape(*lead, n, num_heads, head_dim).transpose(-3, -2)

  q, k, v = _split(queries), _split(keys), _split(values)
  scores = torch.matmul(q, k.transpose(-2, -1)) / math.sqrt(head_dim)
  weights = torch.softmax(scores, dim=-1)
  out = torch.matmul(weights, v).transpose(-3, -2).reshape(*lead, n, dim)
  return out, weights


class CrossAttentionFusion(nn.Module):
  """Text embeddings query, their sum with image embeddings keys, image embeddings value."""

  def __init__(self, dim: int, num_heads: int = 1):
    super().__init__()
    if dim % num_heads:
      raise ShapeMismatchError(f"dim {dim} is not divisible by {num_heads} heads")
    self.dim = dim
    self.num_heads = num_heads
    self.query_projection = nn.Linear(dim, dim)
    self.key_projection = nn.Linear(dim, dim)
    self.value_projection = nn.Linear(dim, dim)

  def forward(self, text: torch.Tensor, image: torch.Tensor, return_attention: bool = False):
    if text.shape != image.shape or text.dim() != 3 or text.shape[-1] != self.dim:
      raise ShapeMismatchError(
        f"cross_attention expects matching (B, K, {self.dim}) inputs, got {tuple(text.shape)} and {tuple(image.shape)}"
      )
    fused, weights = scaled_dot_product_attention(
      self.query_projection(text),
      self.key_projection(text + image),
      self.value_projection(image),
      self.num_heads
    )
    if return_attention:
      return fused, weights
    return fused


def cross_attention(fusion: CrossAttentionFusion, text: torch.Tensor, image: torch.Tensor) -> torch.Tensor:
  return fusion(text, image)


def plus_fusion(text: torch.Tensor, image: torch.Tensor) -> torch.Tensor:
  """Direct elementwise sum, the baseline the attention fusion replaces"""
  if text.shape != image.shape:
    raise ShapeMismatchError(f"plus fusion needs equal shapes, got {tuple(text.shape)} and {tuple(image.shape)}")
  return text + image


def head_param_count(c_dec: int, c_mid: int) -> int:
  return (c_dec * c_mid + c_mid) + (c_mid * c_mid + c_mid) + (c_mid + 1)


@dataclass
class HeadParameters:
  """Weights and biases of the three head layers, with leading (B, K) axes."""
  w1: torch.Tensor  # (B, K, c_mid, c_dec)
  b1: torch.Tensor  # (B, K, c_mid)
  w2: torch.Tensor  # (B, K, c_mid, c_mid)
  b2: torch.Tensor  # (B, K, c_mid)
  w3: torch.Tensor  # (B, K, 1, c_mid)
  b3: torch.Tensor  # (B, K, 1)

  def for_class(self, k: int) -> 'HeadParameters':
    return HeadParameters(*(t[:, k] for t in (self.w1, self.b1, self.w2, self.b2, self.w3, self.b3)))


def split_theta(flat: torch.Tensor, c_dec: int, c_mid: int) -> HeadParameters:
  """Partition flat (..., P) vectors into layer weights then biases, in layer order"""
  expected = head_param_count(c_dec, c_mid)
  if flat.shape[-1] != expected:
    raise ShapeMismatchError(f"Generator width {flat.shape[-1]} does not match head size {expected}")
  lead = flat.shape[:-1]
  sizes = [c_dec * c_mid, c_mid, c_mid * c_mid, c_mid, c_mid, 1]
  w1, b1, w2, b2, w3, b3 = torch.split(flat, sizes, dim=-1)
  return HeadParameters(
    w1=w1.reshape(*lead, c_mid, c_dec),
    b1=b1,
    w2=w2.reshape(*lead, c_mid, c_mid),
    b2=b2,
    w3=w3.reshape(*lead, 1, c_mid),
    b3=b3
  )


class ThetaGenerator(nn.Module):
  """Two-layer MLP from a fused class embedding to the flat dynamic head parameters."""

  def __init__(self, dim: int, c_dec: int, c_mid: int = 8, hidden: Optional[int] = None):
    super().__init__()
    self.c_dec = c_dec
    self.c_mid = c_mid
    hidden = hidden or dim
    self.layers = nn.Sequential(
      nn.Linear(dim, hidden),
      nn.ReLU(inplace=True),
      nn.Linear(hidden, head_param_count(c_dec, c_mid))
    )

  @property
  def out_features(self) -> int:
    return self.layers[-1].out_features

  def forward(self, fused: torch.Tensor) -> torch.Tensor:
    return self.layers(fused)


def generate_theta(generator: ThetaGenerator, fused: torch.Tensor) -> HeadParameters:
  flat = generator(fused)
  return split_theta(flat, generator.c_dec, generator.c_mid)


def _grouped_conv(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
  # x: (B, C_in, X, Y, Z); weight: (B, C_out, C_in); bias: (B, C_out)
  batch, c_in = x.shape[:2]
  c_out = weight.shape[1]
  out = F.conv3d(
    x.reshape(1, batch * c_in, *x.shape[2:]),
    weight.reshape(batch * c_out, c_in, 1, 1, 1),
    bias.reshape(batch * c_out),
    groups=batch
  )
  return out.reshape(batch, c_out, *x.shape[2:])


def dynamic_head(features: torch.Tensor, params: HeadParameters) -> torch.Tensor:
  """
  Three 1x1x1 convolutions filled with one class's generated parameters.

  Args:
      features: Decoder output F of shape (B, C_dec, X, Y, Z)
      params: HeadParameters for a single class, leading axis B

  Returns:
      Class probability map of shape (B, 1, X, Y, Z) in [0, 1]
  """
  if features.dim() != 5:
    raise ShapeMismatchError(f"Decoder features must be (B, C, X, Y, Z), got {tuple(features.shape)}")
  batch, c_dec = features.shape[:2]
  if params.w1.shape[0] != batch or params.w1.shape[-1] != c_dec:
    raise ShapeMismatchError(
      f"Head parameters {tuple(params.w1.shape)} do not match features {tuple(features.shape)}"
    )
  x = F.relu(_grouped_conv(features, params.w1, params.b1))
  x = F.relu(_grouped_conv(x, params.w2, params.b2))
  return torch.sigmoid(_grouped_conv(x, params.w3, params.b3))


def dynamic_heads(features: torch.Tensor, params: HeadParameters) -> torch.Tensor:
  """All K class maps, shape (B, K, X, Y, Z)"""
  num_classes = params.w1.shape[1]
  return torch.cat([dynamic_head(features, params.for_class(k)) for k in range(num_classes)], dim=1)


def merge_predictions(probabilities: Sequence[np.ndarray], threshold: float = 0.5) -> np.ndarray:
  """
  Merge K class probability maps into one label map.

  A voxel takes 1 + the index of its most probable class when the maximum reaches the threshold,
  background otherwise; ties go to the smallest class index.
  """
  if len(probabilities) == 0:
    raise ShapeMismatchError("merge_predictions needs at least one class map")
  maps = [np.asarray(p) for p in probabilities]
  if any(m.shape != maps[0].shape for m in maps):
    raise ShapeMismatchError(f"Class maps differ in shape: {[m.shape for m in maps]}")
  stacked = np.stack(maps)
  best = np.argmax(stacked, axis=0)
  peak = np.max(stacked, axis=0)
  return np.where(peak >= threshold, best + 1, 0).astype(np.uint8)
