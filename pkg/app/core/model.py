"""The full text-guided segmenter: frozen prompt embeddings, adapters, U-Net,
fusion, parameter generator and dynamic heads."""
import os
import hashlib
import logging
from typing import Dict, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn

from app.core.backbone import ImageAdapter, UNet3D, load_backbone_weights, rep
from app.core.config import ModelConfig, TrainConfig
from app.core.errors import CheckpointError, ShapeMismatchError
from app.core.fusion import CrossAttentionFusion, ThetaGenerator, dynamic_heads, generate_theta, plus_fusion
from app.core.text_embedding import (
  CLASS_NAMES, PromptTemplate, TextAdapter, embed_prompts, make_provider, render_prompts
)

logger = logging.getLogger(__name__)


class LanguageGuidedSegmenter(nn.Module):
  def __init__(self, model_config: ModelConfig, in_channels: int, text_embeddings: torch.Tensor):
    super().__init__()
    self.model_config = model_config
    num_classes, dim = text_embeddings.shape
    if dim != model_config.embed_dim:
      raise ShapeMismatchError(f"Text embeddings have width {dim}, config expects {model_config.embed_dim}")
    self.num_classes = num_classes
    self.dim = dim

    # frozen: a buffer, never a parameter
    self.register_buffer('text_embeddings', text_embeddings.detach().clone())

    self.text_adapter = (
      TextAdapter(num_classes, dim, model_config.adapter_ratio, model_config.adapter_residual)
      if model_config.use_adapters else nn.Identity()
    )
    self.backbone = UNet3D(in_channels, model_config.base_channels, model_config.unet_depth, model_config.norm)
    self.image_adapter = ImageAdapter(self.backbone.bottleneck_channels, dim, hidden=model_config.use_adapters)
    self.fusion = (
      CrossAttentionFusion(dim, model_config.attention_heads)
      if model_config.fusion_mode == 'cross_attention' else None
    )
    self.generator = ThetaGenerator(dim, self.backbone.decoder_channels, model_config.c_mid)

  @property
  def in_channels(self) -> int:
    return self.backbone.in_channels

  def fuse(self, bottleneck: torch.Tensor) -> torch.Tensor:
    """Fused class embeddings for a batch of bottleneck features, shape (B, K, D)"""
    batch = bottleneck.shape[0]
    text = self.text_adapter(self.text_embeddings)
    text = text.unsqueeze(0).expand(batch, -1, -1)
    image = rep(self.image_adapter(bottleneck), self.num_classes)
    if self.fusion is None:
      return plus_fusion(text, image)
    return self.fusion(text, image)

  def forward(self, x: torch.Tensor) -> torch.Tensor:
    """Per-class probabilities, shape (B, K, X, Y, Z)"""
    bottleneck, features = self.backbone(x)
    params = generate_theta(self.generator, self.fuse(bottleneck))
    return dynamic_heads(features, params)


def text_embeddings_for(config: TrainConfig) -> torch.Tensor:
  template = PromptTemplate.named(config.model.prompt_template)
  prompts = render_prompts(template, CLASS_NAMES[config.preprocess.label_scheme])
  provider = make_provider(config.model.embed_provider, config.model.embed_dim)
  return embed_prompts(provider, prompts)


def build_model(config: TrainConfig, text_embeddings: Optional[torch.Tensor] = None) -> LanguageGuidedSegmenter:
  if text_embeddings is None:
    text_embeddings = text_embeddings_for(config)
  model = LanguageGuidedSegmenter(config.model, config.preprocess.in_channels, text_embeddings)
  if config.model.pretrained_backbone:
    load_backbone_weights(model.backbone, config.model.pretrained_backbone)
  logger.info(
    f"Built segmenter: K={model.num_classes} D={model.dim} in_channels={model.in_channels} "
    f"fusion={config.model.fusion_mode} adapters={config.model.use_adapters} "
    f"trainable={count_trainable(model)}"
  )
  return model


def count_trainable(module: nn.Module) -> int:
  return sum(p.numel() for p in module.parameters() if p.requires_grad)


def state_hash(state: Dict[str, torch.Tensor]) -> str:
  """SHA-256 over tensors in name order"""
  digest = hashlib.sha256()
  for name in sorted(state):
    tensor = state[name]
    digest.update(name.encode('utf-8'))
    if isinstance(tensor, torch.Tensor):
      digest.update(np.ascontiguousarray(tensor.detach().cpu().numpy()).tobytes())
    else:
      digest.update(repr(tensor).encode('utf-8'))
  return digest.hexdigest()


def save_checkpoint(path: str, model: LanguageGuidedSegmenter, config: TrainConfig, **extra) -> Dict:
  """Write model state, config and any extra fields (optimizer state, epoch, scores)"""
  model_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
  payload = {
    'model_state': model_state,
    'config': config.to_dict(),
    'config_hash': config.config_hash(),
    'state_hash': state_hash(model_state)
  }
  payload.update(extra)
  parent = os.path.dirname(path)
  if parent:
    os.makedirs(parent, exist_ok=True)
  try:
    torch.save(payload, path)
  except OSError as e:
    raise CheckpointError(f"Cannot write checkpoint {path}: {str(e)}")
  logger.info(f"Saved checkpoint {path} (epoch={extra.get('epoch')}, state={payload['state_hash'][:12]})")
  return payload


def load_checkpoint(path: str) -> Tuple[LanguageGuidedSegmenter, TrainConfig, Dict]:
  """
  Rebuild the model stored in a checkpoint.

  The frozen text embeddings come from the checkpoint itself, so the embedding
  provider that trained the model does not have to be available.

  Returns:
      (model in eval mode, its TrainConfig, the raw checkpoint payload)
  """
  if not os.path.isfile(path):
    raise CheckpointError(f"Checkpoint not found: {path}")
  try:
    payload = torch.load(path, map_location='cpu', weights_only=False)
  except Exception as e:
    raise CheckpointError(f"Cannot read checkpoint {path}: {str(e)}")
  if 'model_state' not in payload or 'config' not in payload:
    raise CheckpointError(f"{path} is not a segmenter checkpoint")

  config = TrainConfig.from_dict(payload['config'])
  state = payload['model_state']
  model = LanguageGuidedSegmenter(config.model, config.preprocess.in_channels, state['text_embeddings'])
  try:
    model.load_state_dict(state, strict=True)
  except RuntimeError as e:
    raise CheckpointError(f"Checkpoint {path} does not match its own config: {str(e)}")
  model.eval()
  return model, config, payload
