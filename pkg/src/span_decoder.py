"""
Span decoder, moment-retrieval loss and the weighted total loss

The decoder keeps N_span learnable anchors (center, width) in logit space.
Each layer cross-attends the span queries to the encoder memory, predicts an
additive (d_center, d_width) refinement in logit space and a foreground logit.
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional

import torch
import torch.nn.functional as F
from torch import nn

from attention import MLP, QueryBlock, span_position_encoding
from matcher import Assignment, match
from spans import (PredictionSet, WIDTH_EPS, clamp_start_end, inverse_sigmoid,
                   pairwise_generalized_iou, span_cw_to_se)

logger = logging.getLogger(__name__)


class NonFiniteLossError(FloatingPointError):
    """A loss component went NaN/inf"""

    def __init__(self, component: str, value: float = float('nan')):
        super().__init__(f"loss component {component} is not finite ({value})")
        self.component = component


@dataclass
class DecoderOutput:
    spans_cw: List[torch.Tensor]  # per layer (B, N_span, 2) center/width
    logits: List[torch.Tensor]  # per layer (B, N_span) foreground logits

    @property
    def final_spans_cw(self) -> torch.Tensor:
        return self.spans_cw[-1]

    @property
    def final_logits(self) -> torch.Tensor:
        return self.logits[-1]

    def final_start_end(self) -> torch.Tensor:
        """(B, N_span, 2) normalized start/end, clamped into [0, 1]"""
        return clamp_start_end(span_cw_to_se(self.final_spans_cw))


class SpanDecoder(nn.Module):
    """
    DETR-style decoder over learnable spans

    Args:
        hidden_dim: D
        num_heads: attention heads
        num_layers: N_dec
        num_spans: N_span
        dropout: block dropout
    """

    def __init__(self, hidden_dim: int, num_heads: int, num_layers: int, num_spans: int,
                 dropout: float = 0.1):
        super().__init__()
        self.hidden_dim = hidden_dim
        anchors = torch.rand(num_spans, 2)
        anchors[:, 1] = anchors[:, 1] * 0.5 + 0.05
        self.anchor_logits = nn.Parameter(inverse_sigmoid(anchors))
        self.query_content = nn.Parameter(torch.zeros(num_spans, hidden_dim))
        self.query_pos_proj = MLP(hidden_dim, hidden_dim, hidden_dim, num_layers=2)
        self.layers = nn.ModuleList(
            QueryBlock(hidden_dim, num_heads, dropout) for _ in range(num_layers)
        )
        self.refine_heads = nn.ModuleList(
            MLP(hidden_dim, hidden_dim, 2, num_layers=3) for _ in range(num_layers)
        )
        self.class_heads = nn.ModuleList(nn.Linear(hidden_dim, 1) for _ in range(num_layers))
        for head in self.refine_heads:
            nn.init.zeros_(head.layers[-1].weight)
            nn.init.zeros_(head.layers[-1].bias)
        prior = 0.1
        for head in self.class_heads:
            nn.init.constant_(head.bias, -math.log((1 - prior) / prior))

    def anchors(self) -> torch.Tensor:
        """(N_span, 2) anchors after sigmoid, inside (0, 1)^2"""
        return self.anchor_logits.sigmoid()

    def forward(self, memory: torch.Tensor, memory_mask: torch.Tensor) -> DecoderOutput:
        batch = memory.shape[0]
        num_spans = self.anchor_logits.shape[0]
        tgt = self.query_content.to(memory.dtype)[None].expand(batch, -1, -1)
        ref_logits = self.anchor_logits.to(memory.dtype)[None].expand(batch, -1, -1)
        query_mask = torch.ones(batch, num_spans, dtype=torch.bool, device=memory.device)

        spans, logits = [], []
        for layer, refine, classify in zip(self.layers, self.refine_heads, self.class_heads):
            ref = ref_logits.sigmoid()
            query_pos = self.query_pos_proj(span_position_encoding(ref, self.hidden_dim))
            tgt = layer(tgt, query_mask, memory, memory_mask, query_pos=query_pos)
            ref_logits = ref_logits + refine(tgt)
            cw = ref_logits.sigmoid()
            cw = torch.stack([cw[..., 0], cw[..., 1].clamp(min=WIDTH_EPS)], dim=-1)
            spans.append(cw)
            logits.append(classify(tgt).squeeze(-1))
            # next layer refines from a detached reference
            ref_logits = ref_logits.detach()
        return DecoderOutput(spans_cw=spans, logits=logits)


def _gt_cw(gt: torch.Tensor) -> torch.Tensor:
    return torch.stack([(gt[:, 0] + gt[:, 1]) / 2, gt[:, 1] - gt[:, 0]], dim=-1)


def loss_vmr_single(spans_cw: torch.Tensor, logits: torch.Tensor, gt_spans: List[torch.Tensor],
                    assignments: List[Assignment], w_l1: float, w_iou: float, w_ce: float,
                    bg_weight: float) -> Dict[str, torch.Tensor]:
    """
    Loss of one decoder layer

    Matched pairs give L1 on center/width (summed over the two coordinates)
    and 1 - gIoU, averaged over all ground truths of the batch. Every span
    gives a binary cross-entropy (matched -> foreground, weight 1; rest ->
    background, weight bg_weight), summed over spans and averaged over the
    batch.
    """
    l1_terms, giou_terms = [], []
    targets = torch.zeros_like(logits)
    for b, (gt, assignment) in enumerate(zip(gt_spans, assignments)):
        if not assignment.span_idx:
            continue
        src = torch.as_tensor(assignment.span_idx, device=logits.device)
        tgt = torch.as_tensor(assignment.gt_idx, device=logits.device)
        pred = spans_cw[b, src]
        target = _gt_cw(gt.to(spans_cw.device, spans_cw.dtype))[tgt]
        l1_terms.append((pred - target).abs().sum(dim=-1))
        giou = pairwise_generalized_iou(span_cw_to_se(pred), span_cw_to_se(target)).diagonal()
        giou_terms.append(1 - giou)
        targets[b, src] = 1.0

    zero = spans_cw.sum() * 0
    l1 = torch.cat(l1_terms).mean() if l1_terms else zero
    giou = torch.cat(giou_terms).mean() if giou_terms else zero
    weights = torch.where(targets > 0, torch.ones_like(targets), torch.full_like(targets, bg_weight))
    ce = (F.binary_cross_entropy_with_logits(logits, targets, reduction='none') * weights).sum(dim=1).mean()
    total = w_l1 * l1 + w_iou * giou + w_ce * ce
    return {'l1': l1, 'giou': giou, 'ce': ce, 'total': total}


def loss_vmr(output: DecoderOutput, gt_spans: List[torch.Tensor], w_l1: float = 10.0,
             w_iou: float = 1.0, w_ce: float = 4.0, bg_weight: float = 0.1,
             deep_supervision: bool = True,
             assignments: Optional[List[Assignment]] = None) -> Dict[str, torch.Tensor]:
    """
    Moment-retrieval loss, summed over decoder layers under deep supervision

    Each layer is matched on its own unless assignments are given (those are
    then used for the final layer).
    """
    layers = range(len(output.spans_cw)) if deep_supervision else [len(output.spans_cw) - 1]
    totals = {'l1': 0.0, 'giou': 0.0, 'ce': 0.0, 'total': 0.0}
    last = len(output.spans_cw) - 1
    for layer in layers:
        spans_cw, logits = output.spans_cw[layer], output.logits[layer]
        layer_assign = assignments if (assignments is not None and layer == last) else \
            match(spans_cw, logits, gt_spans, w_l1, w_iou, w_ce)
        parts = loss_vmr_single(spans_cw, logits, gt_spans, layer_assign, w_l1, w_iou, w_ce, bg_weight)
        for key in totals:
            totals[key] = totals[key] + parts[key]
    return totals


def total_loss(l_fw: torch.Tensor, l_ss: torch.Tensor, l_enc: torch.Tensor, l_vmr: torch.Tensor,
               lambda_fw: float = 1.0, lambda_ss: float = 1.0,
               lambda_enc: float = 1.0) -> Dict[str, torch.Tensor]:
    """
    lambda_fw * L_fw + lambda_ss * L_ss + lambda_enc * L_enc + L_vmr

    Raises:
        NonFiniteLossError naming the first non-finite component
    """
    components = {'l_fw': l_fw, 'l_ss': l_ss, 'l_enc': l_enc, 'l_vmr': l_vmr}
    for name, value in components.items():
        value = torch.as_tensor(value)
        if not bool(torch.isfinite(value).all()):
            raise NonFiniteLossError(name, float(value.detach().reshape(-1)[0]))
    total = lambda_fw * l_fw + lambda_ss * l_ss + lambda_enc * l_enc + l_vmr
    if logger.isEnabledFor(logging.DEBUG):
        logger.debug("losses: " + ", ".join(f"{k}={torch.as_tensor(v).detach().item():.4f}"
                                            for k, v in components.items()))
    return {**components, 'total': total}


@torch.no_grad()
def to_prediction_sets(output: DecoderOutput, durations: torch.Tensor, qids: List[str]) -> List[PredictionSet]:
    """Final-layer spans in seconds with foreground probabilities"""
    se = output.final_start_end().double().cpu()
    probs = output.final_logits.double().sigmoid().cpu()
    predictions = []
    for b, qid in enumerate(qids):
        duration = float(durations[b])
        spans = [(float(s) * duration, float(e) * duration) for s, e in se[b].tolist()]
        predictions.append(PredictionSet(qid=qid, spans=spans, scores=probs[b].tolist()))
    return predictions
