"""
Frame-word level enhancement

One stack of cross-attention blocks serves two passes:
- enhance_video: frames as query, words as key/value -> F_v^enh
- reconstruct_words: masked words as query, frames as key/value -> word
  distributions for the masked-word loss

Both passes read the same block parameters, so what the reconstruction task
learns carries over to the enhanced frames.
"""

import logging
from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn

from attention import CrossAttentionBlock

logger = logging.getLogger(__name__)

MLM_SCOPES = ("all_words", "masked_only")


class FrameWordMesm(nn.Module):
    """
    Weight-shared cross-attention stack, mask embedding and MLM head

    Args:
        hidden_dim: common dimension D
        num_heads: attention heads
        num_layers: N_fw; 0 makes both passes the identity
        vocab_size: N_vocab of the MLM head
        dropout: dropout inside the blocks
    """

    def __init__(self, hidden_dim: int, num_heads: int, num_layers: int, vocab_size: int,
                 dropout: float = 0.1):
        super().__init__()
        self.blocks = nn.ModuleList(
            CrossAttentionBlock(hidden_dim, num_heads, dropout) for _ in range(num_layers)
        )
        self.mask_embedding = nn.Parameter(torch.randn(hidden_dim) * 0.02)
        self.mlm_head = nn.Linear(hidden_dim, vocab_size)

    def _run(self, queries: torch.Tensor, keys_values: torch.Tensor, kv_mask: torch.Tensor) -> torch.Tensor:
        for block in self.blocks:
            queries = block(queries, keys_values, kv_mask)
        return queries

    def enhance_video(self, frames: torch.Tensor, words: torch.Tensor,
                      word_mask: torch.Tensor) -> torch.Tensor:
        """F_v + MLP(softmax(QK^T / sqrt(d)) V) per block; (B, L_v, D)"""
        return self._run(frames, words, word_mask)

    def mask_words(self, words: torch.Tensor, mlm_mask: torch.Tensor) -> torch.Tensor:
        """Replace masked rows with the learnable mask embedding"""
        return torch.where(mlm_mask[..., None], self.mask_embedding.to(words.dtype), words)

    def reconstruct_logits(self, masked_words: torch.Tensor, frames: torch.Tensor,
                           frame_mask: torch.Tensor) -> torch.Tensor:
        """Exchanged inputs through the same blocks, then the MLM head; (B, L_w, N_vocab)"""
        return self.mlm_head(self._run(masked_words, frames, frame_mask))

    def reconstruct_words(self, masked_words: torch.Tensor, frames: torch.Tensor,
                          frame_mask: torch.Tensor) -> torch.Tensor:
        """Word distributions P; rows sum to 1"""
        return self.reconstruct_logits(masked_words, frames, frame_mask).softmax(dim=-1)


def loss_fw(log_probs: torch.Tensor, token_ids: torch.Tensor, word_mask: torch.Tensor,
            mlm_mask: Optional[torch.Tensor] = None, scope: str = "all_words") -> torch.Tensor:
    """
    Masked-word reconstruction loss

    Mean of -log P_j[z_j] over the supervised positions of each sentence,
    averaged over the batch.

    Args:
        log_probs: (B, L_w, N_vocab) log-probabilities
        token_ids: (B, L_w) labels z
        word_mask: (B, L_w) valid words
        mlm_mask: (B, L_w) masked positions, required for scope="masked_only"
        scope: "all_words" (every valid word) or "masked_only"
    """
    if scope not in MLM_SCOPES:
        raise ValueError(f"unknown supervision scope {scope!r}, expected one of {MLM_SCOPES}")
    supervised = word_mask
    if scope == "masked_only":
        if mlm_mask is None:
            raise ValueError("masked_only supervision needs the mlm mask")
        supervised = word_mask & mlm_mask
    counts = supervised.sum(dim=-1)
    if bool((counts == 0).any()):
        raise ValueError("empty supervision set: a sentence has no supervised words")

    picked = log_probs.gather(-1, token_ids.clamp(min=0)[..., None]).squeeze(-1)
    picked = torch.where(supervised, picked, torch.zeros_like(picked))
    per_sentence = -picked.sum(dim=-1) / counts.to(log_probs.dtype)
    return per_sentence.mean()


def mlm_log_probs(logits: torch.Tensor) -> torch.Tensor:
    return F.log_softmax(logits, dim=-1)
