"""
Segment-sentence level enhancement

The current sentence of a video is replaced by a learnable [MASK] token in the
set of pooled sentences; cross-attention against the frames regenerates it,
and the regenerated row is prepended to the query words as a complement
token. A multi-positive contrastive loss against pooled ground-truth segments
supervises it; positives are batch elements whose ground-truth spans overlap
above gamma.
"""

import logging
from typing import List, Sequence, Tuple

import torch
import torch.nn.functional as F
from torch import nn

from attention import QueryBlock
from spans import TemporalSpan, iou_1d

logger = logging.getLogger(__name__)


class SegmentSentenceMesm(nn.Module):
    """[MASK] token plus N_ss blocks (sentence set as query, frames as key/value)"""

    def __init__(self, hidden_dim: int, num_heads: int, num_layers: int, dropout: float = 0.1,
                 context_grad: bool = True):
        super().__init__()
        self.mask_token = nn.Parameter(torch.randn(hidden_dim) * 0.02)
        self.blocks = nn.ModuleList(
            QueryBlock(hidden_dim, num_heads, dropout) for _ in range(num_layers)
        )
        self.context_grad = context_grad

    def generate_complement(self, pooled: torch.Tensor, sentence_mask: torch.Tensor,
                            current: torch.Tensor, frames: torch.Tensor,
                            frame_mask: torch.Tensor) -> torch.Tensor:
        """
        Regenerate the current sentence from the video and its context sentences

        Args:
            pooled: (B, K, D) pooled sentences
            sentence_mask: (B, K) valid sentences
            current: (B,) index of the sentence being grounded
            frames: (B, L_v, D)
            frame_mask: (B, L_v)

        Returns:
            (B, D) generated complement token
        """
        batch, k, _ = pooled.shape
        if bool(((current < 0) | (current >= sentence_mask.sum(dim=1))).any()):
            raise IndexError(f"current sentence index out of range: {current.tolist()}")
        if not self.context_grad:
            pooled = pooled.detach()
        is_current = torch.arange(k, device=pooled.device)[None, :] == current[:, None]
        sentences = torch.where(is_current[..., None], self.mask_token.to(pooled.dtype), pooled)
        for block in self.blocks:
            sentences = block(sentences, sentence_mask, frames, frame_mask)
        return sentences[torch.arange(batch, device=pooled.device), current]


def pool_sentences(sentence_feats: torch.Tensor, sentence_word_mask: torch.Tensor,
                   sentence_mask: torch.Tensor = None) -> torch.Tensor:
    """
    Mean of the valid word vectors of each sentence

    sentence_feats: (..., L_w, D); sentence_word_mask: (..., L_w).
    Padded sentences (sentence_mask False) pool to zeros.
    """
    counts = sentence_word_mask.sum(dim=-1)
    expected = sentence_mask if sentence_mask is not None else torch.ones_like(counts, dtype=torch.bool)
    if bool(((counts == 0) & expected).any()):
        raise ValueError("cannot pool a sentence with no valid words")
    feats = torch.where(sentence_word_mask[..., None], sentence_feats, torch.zeros_like(sentence_feats))
    return feats.sum(dim=-2) / counts.clamp(min=1)[..., None].to(sentence_feats.dtype)


def concat_complement(token: torch.Tensor, words: torch.Tensor,
                      word_mask: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """Prepend the complement token as row 0; the mask gains one valid slot"""
    if token.shape[-1] != words.shape[-1]:
        raise ValueError(f"token dim {token.shape[-1]} != word dim {words.shape[-1]}")
    enhanced = torch.cat([token[:, None, :], words], dim=1)
    mask = torch.cat([torch.ones_like(word_mask[:, :1]), word_mask], dim=1)
    return enhanced, mask


def pool_segment(frames: torch.Tensor, frame_spans: torch.Tensor) -> torch.Tensor:
    """
    S = (1 / (l_e + 1 - l_s)) * sum_{j=l_s..l_e} (F_v)_j

    frames: (B, L_v, D); frame_spans: (B, 2) inclusive (l_s, l_e)
    """
    idx = torch.arange(frames.shape[1], device=frames.device)[None, :]
    inside = (idx >= frame_spans[:, :1]) & (idx <= frame_spans[:, 1:])
    summed = torch.where(inside[..., None], frames, torch.zeros_like(frames)).sum(dim=1)
    length = (frame_spans[:, 1] + 1 - frame_spans[:, 0]).to(frames.dtype)
    return summed / length[:, None]


def build_positive_set(spans: Sequence[Tuple[float, float]], video_ids: Sequence[str],
                       gamma: float, cross_video: bool = False) -> torch.Tensor:
    """
    (N_b, N_b) bool; j is positive for i iff IoU(gt_i, gt_j) > gamma

    Only same-video pairs are compared unless cross_video is set. Every
    element is its own positive.
    """
    n = len(spans)
    if len(video_ids) != n:
        raise ValueError("spans and video_ids differ in length")
    as_spans: List[TemporalSpan] = [TemporalSpan.of(s, e) for s, e in spans]
    positive = torch.eye(n, dtype=torch.bool)
    for i in range(n):
        for j in range(i + 1, n):
            if not cross_video and video_ids[i] != video_ids[j]:
                continue
            if iou_1d(as_spans[i], as_spans[j]) > gamma:
                positive[i, j] = positive[j, i] = True
    return positive


def segment_similarity(query_tokens: torch.Tensor, token_mask: torch.Tensor, segments: torch.Tensor,
                       tau: float, normalize: bool = True, mean_over_tokens: bool = True) -> torch.Tensor:
    """
    sim(i, j) = sum_k <(F_q^enh_i)_k, S_j> / tau over valid token rows

    query_tokens: (B, L, D); token_mask: (B, L); segments: (B, D) -> (B, B)
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if normalize:
        query_tokens = F.normalize(query_tokens, dim=-1)
        segments = F.normalize(segments, dim=-1)
    tokens = torch.where(token_mask[..., None], query_tokens, torch.zeros_like(query_tokens))
    summed = tokens.sum(dim=1)
    if mean_over_tokens:
        summed = summed / token_mask.sum(dim=1, keepdim=True).to(summed.dtype)
    return summed @ segments.T / tau


def multi_positive_nce(sim: torch.Tensor, positive: torch.Tensor) -> torch.Tensor:
    """
    -(1/N_b) sum_i log( sum_{j in pos(i)} exp(sim_ij) / sum_j exp(sim_ij) )

    Stabilized with log-sum-exp.
    """
    pos_logits = sim.masked_fill(~positive, float('-inf'))
    per_row = torch.logsumexp(sim, dim=1) - torch.logsumexp(pos_logits, dim=1)
    return per_row.mean()


def loss_ss(query_tokens: torch.Tensor, token_mask: torch.Tensor, segments: torch.Tensor,
            positive: torch.Tensor, tau: float, normalize: bool = True,
            mean_over_tokens: bool = True) -> torch.Tensor:
    """Contrastive loss between enhanced queries and pooled ground-truth segments"""
    if query_tokens.shape[0] < 1:
        raise ValueError("loss_ss needs a non-empty batch")
    sim = segment_similarity(query_tokens, token_mask, segments, tau, normalize, mean_over_tokens)
    return multi_positive_nce(sim, positive.to(sim.device))
