"""
Feature projection, modality aligner, transformer encoder and saliency head
"""

import logging
from typing import Tuple

import torch
from torch import nn

from attention import CrossAttentionBlock, LinearLayer, MLP, SelfAttentionBlock
from spans import FrameIndexSpan

logger = logging.getLogger(__name__)

PROB_EPS = 1e-7


class FeatureProjection(nn.Module):
    """Two-layer MLPs mapping raw video (D_v) and word (D_q) features to D"""

    def __init__(self, video_dim: int, text_dim: int, hidden_dim: int, dropout: float = 0.1):
        super().__init__()
        self.video_dim = video_dim
        self.text_dim = text_dim
        self.video_proj = nn.Sequential(
            LinearLayer(video_dim, hidden_dim, layer_norm=True, dropout=dropout, relu=True),
            LinearLayer(hidden_dim, hidden_dim, layer_norm=True, dropout=dropout, relu=False),
        )
        self.text_proj = nn.Sequential(
            LinearLayer(text_dim, hidden_dim, layer_norm=True, dropout=dropout, relu=True),
            LinearLayer(hidden_dim, hidden_dim, layer_norm=True, dropout=dropout, relu=False),
        )

    def project_video(self, frames: torch.Tensor) -> torch.Tensor:
        if frames.shape[-1] != self.video_dim:
            raise ValueError(f"video features have dim {frames.shape[-1]}, expected {self.video_dim}")
        return self.video_proj(frames)

    def project_text(self, words: torch.Tensor) -> torch.Tensor:
        if words.shape[-1] != self.text_dim:
            raise ValueError(f"word features have dim {words.shape[-1]}, expected {self.text_dim}")
        return self.text_proj(words)

    def forward(self, frames: torch.Tensor, words: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        return self.project_video(frames), self.project_text(words)


class ModalityAligner(nn.Module):
    """N_ma cross-attention blocks; enhanced frames attend to enhanced words"""

    def __init__(self, hidden_dim: int, num_heads: int, num_layers: int, dropout: float = 0.1):
        super().__init__()
        self.blocks = nn.ModuleList(
            CrossAttentionBlock(hidden_dim, num_heads, dropout) for _ in range(num_layers)
        )

    def forward(self, frames: torch.Tensor, words: torch.Tensor, word_mask: torch.Tensor) -> torch.Tensor:
        for block in self.blocks:
            frames = block(frames, words, word_mask)
        return frames


class TransformerEncoder(nn.Module):
    """Self-attention stack over the aligned frames"""

    def __init__(self, hidden_dim: int, num_heads: int, num_layers: int, dropout: float = 0.1):
        super().__init__()
        self.layers = nn.ModuleList(
            SelfAttentionBlock(hidden_dim, num_heads, dropout) for _ in range(num_layers)
        )

    def forward(self, x: torch.Tensor, mask: torch.Tensor, pos: torch.Tensor = None) -> torch.Tensor:
        for layer in self.layers:
            x = layer(x, mask, pos)
        return x


class SaliencyHead(nn.Module):
    """2-layer MLP + sigmoid giving per-frame scores s in (0, 1)"""

    def __init__(self, hidden_dim: int):
        super().__init__()
        self.mlp = MLP(hidden_dim, hidden_dim, 1, num_layers=2)

    def forward(self, encoded: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.mlp(encoded).squeeze(-1))


def saliency_labels(frame_span: FrameIndexSpan) -> torch.Tensor:
    """y_j = 1 exactly for l_s <= j <= l_e"""
    labels = torch.zeros(frame_span.num_frames)
    labels[frame_span.l_s:frame_span.l_e + 1] = 1.0
    return labels


def loss_enc(scores: torch.Tensor, labels: torch.Tensor, frame_mask: torch.Tensor) -> torch.Tensor:
    """
    Binary cross-entropy over valid frames, averaged per video then over the batch

    Scores are clamped to [1e-7, 1 - 1e-7].
    """
    if scores.shape != labels.shape or scores.shape != frame_mask.shape:
        raise ValueError(f"shape mismatch: scores {tuple(scores.shape)}, labels {tuple(labels.shape)}")
    counts = frame_mask.sum(dim=-1)
    if bool((counts == 0).any()):
        raise ValueError("loss_enc needs at least one valid frame per video")
    s = scores.clamp(PROB_EPS, 1 - PROB_EPS)
    bce = -(labels * torch.log(s) + (1 - labels) * torch.log(1 - s))
    bce = torch.where(frame_mask, bce, torch.zeros_like(bce))
    return (bce.sum(dim=-1) / counts.to(bce.dtype)).mean()
