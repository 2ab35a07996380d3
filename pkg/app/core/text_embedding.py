"""Prompt rendering, frozen text embeddings and the per-class text adapters."""
import os
import json
import hashlib
import logging
from dataclasses import dataclass
from typing import Dict, List, Sequence, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from app.core.errors import EmbeddingProviderError, ShapeMismatchError
from app.core.fusion import scaled_dot_product_attention

logger = logging.getLogger(__name__)

PLACEHOLDER = '{category}'

PROMPT_TEMPLATES = {
  'v1': 'A photo of a {category}',
  'v2': 'A computerized tomography of a {category}',
  'v3': 'There is a {category} in this computerized tomography',
  'v4': 'A computerized tomography of a {category} with small branches'
}

CLASS_NAMES = {
  'five_class': [
    'left pulmonary artery',
    'left pulmonary vein',
    'right pulmonary artery',
    'right pulmonary vein'
  ],
  'three_class': [
    'pulmonary artery',
    'pulmonary vein'
  ]
}


@dataclass(frozen=True)
class PromptTemplate:
  id: str
  template: str

  def __post_init__(self):
    if self.template.count(PLACEHOLDER) != 1:
      raise EmbeddingProviderError(f"Template {self.id!r} must contain exactly one {PLACEHOLDER} placeholder")

  @classmethod
  def named(cls, template_id: str) -> 'PromptTemplate':
    if template_id not in PROMPT_TEMPLATES:
      raise EmbeddingProviderError(f"Unknown prompt template: {template_id}")
    return cls(template_id, PROMPT_TEMPLATES[template_id])


def render_prompts(template: PromptTemplate, class_names: Sequence[str]) -> List[str]:
  if len(class_names) < 1:
    raise EmbeddingProviderError("render_prompts needs at least one class name")
  return [template.template.replace(PLACEHOLDER, name) for name in class_names]


class EmbeddingProvider:
  """Frozen prompt encoder; exposes no trainable parameters."""
  dim: int

  def embed_one(self, prompt: str) -> np.ndarray:
    raise NotImplementedError


class StubEmbeddingProvider(EmbeddingProvider):
  """Deterministic unit-norm vectors derived from a hash of (seed, prompt)."""

  def __init__(self, seed: int = 0, dim: int = 512):
    self.seed = int(seed)
    self.dim = int(dim)

  def embed_one(self, prompt: str) -> np.ndarray:
    digest = hashlib.sha256(f"{self.seed}:{prompt}".encode('utf-8')).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], 'little'))
    vector = rng.standard_normal(self.dim)
    return vector / np.linalg.norm(vector)


class FileEmbeddingProvider(EmbeddingProvider):
  """Table of precomputed embeddings, one JSON record {"prompt", "embedding"} per line."""

  def __init__(self, path: str):
    self.path = path
    self.table = self._load(path)
    widths = {len(v) for v in self.table.values()}
    if len(widths) != 1:
      raise EmbeddingProviderError(f"Embedding table {path} has inconsistent widths {sorted(widths)}")
    self.dim = widths.pop()

  @staticmethod
  def _load(path: str) -> Dict[str, np.ndarray]:
    if not os.path.exists(path):
      raise EmbeddingProviderError(f"Embedding table not found: {path}")
    table = {}
    with open(path, 'r') as f:
      for line in f:
        line = line.strip()
        if not line:
          continue
        record = json.loads(line)
        table[record['prompt']] = np.asarray(record['embedding'], dtype=np.float64)
    if not table:
      raise EmbeddingProviderError(f"Embedding table {path} is empty")
    logger.info(f"Loaded {len(table)} prompt embeddings from {path}")
    return table

  def embed_one(self, prompt: str) -> np.ndarray:
    if prompt not in self.table:
      raise EmbeddingProviderError(f"Prompt missing from embedding table {self.path}: {prompt!r}", prompt=prompt)
    return self.table[prompt]


def make_provider(source: str, dim: int = 512) -> EmbeddingProvider:
  """Build a provider from 'stub:<seed>' or 'file:<path>'"""
  kind, _, value = source.partition(':')
  if kind == 'stub':
    return StubEmbeddingProvider(int(value or 0), dim)
  if kind == 'file':
    provider = FileEmbeddingProvider(value)
    if provider.dim != dim:
      raise EmbeddingProviderError(f"Embedding table width {provider.dim} does not match embed_dim {dim}")
    return provider
  raise EmbeddingProviderError(f"Unknown embedding provider: {source}")


def embed_prompts(provider: EmbeddingProvider, prompts: Sequence[str]) -> torch.Tensor:
  """K x D frozen embedding matrix; identical prompts give bit-identical rows"""
  rows = [provider.embed_one(p) for p in prompts]
  matrix = torch.as_tensor(np.stack(rows), dtype=torch.float32)
  return matrix.requires_grad_(False)


def write_embedding_table(path: str, prompts: Sequence[str], matrix: Union[np.ndarray, torch.Tensor]) -> None:
  """Write embeddings computed offline by a frozen text encoder"""
  matrix = np.asarray(matrix.detach().cpu() if isinstance(matrix, torch.Tensor) else matrix, dtype=np.float64)
  if matrix.shape[0] != len(prompts):
    raise ShapeMismatchError(f"{len(prompts)} prompts but {matrix.shape[0]} embedding rows")
  with open(path, 'w') as f:
    for prompt, row in zip(prompts, matrix):
      f.write(json.dumps({'prompt': prompt, 'embedding': row.tolist()}) + '\n')


class TextAdapter(nn.Module):
  """
  K bottleneck adapters (down, ReLU, up), batch norm over the class rows and
  single-head self-attention across the K class positions.
  """

  def __init__(self, num_classes: int, dim: int, ratio: int = 4, residual: bool = False):
    super().__init__()
    self.num_classes = num_classes
    self.dim = dim
    self.residual = residual
    hidden = max(1, dim // ratio)
    self.projections = nn.ModuleList([
      nn.Sequential(nn.Linear(dim, hidden), nn.ReLU(inplace=True), nn.Linear(hidden, dim))
      for _ in range(num_classes)
    ])
    self.norm = nn.BatchNorm1d(dim)
    self.query = nn.Linear(dim, dim)
    self.key = nn.Linear(dim, dim)
    self.value = nn.Linear(dim, dim)
    self.out = nn.Linear(dim, dim)

  def _normalize(self, x: torch.Tensor) -> torch.Tensor:
    # batch statistics are undefined for a single class row
    if self.training and x.shape[0] == 1:
      return F.batch_norm(
        x, self.norm.running_mean, self.norm.running_var,
        self.norm.weight, self.norm.bias, training=False, eps=self.norm.eps
      )
    return self.norm(x)

  def forward(self, embeddings: torch.Tensor, return_attention: bool = False):
    if embeddings.shape != (self.num_classes, self.dim):
      raise ShapeMismatchError(
        f"Text adapter expects ({self.num_classes}, {self.dim}), got {tuple(embeddings.shape)}"
      )
    x = torch.stack([proj(embeddings[k]) for k, proj in enumerate(self.projections)])
    x = self._normalize(x)
    attended, weights = scaled_dot_product_attention(self.query(x), self.key(x), self.value(x))
    out = x + self.out(attended)
    if self.residual:
      out = out + embeddings
    if return_attention:
      return out, weights[0]
    return out


def text_adapter_forward(adapter: nn.Module, embeddings: torch.Tensor) -> torch.Tensor:
  return adapter(embeddings)
