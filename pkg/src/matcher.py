"""
One-to-one matching between predicted spans and ground-truth moments

cost(p, g) = w_l1 * |p - g|_1 (center/width) + w_iou * (1 - gIoU(p, g)) + w_ce * (-p_fg)

Below EXHAUSTIVE_LIMIT ground truths the minimum is found by enumerating every
injection; above it the Hungarian algorithm (scipy) is used. Ties resolve to
the lexicographically smallest span sequence taken in gt order.
"""

import itertools
import logging
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

from spans import pairwise_generalized_iou, span_cw_to_se

logger = logging.getLogger(__name__)

EXHAUSTIVE_LIMIT = 6
_TIE_TOL = 1e-12


@dataclass(frozen=True)
class Assignment:
    """span_idx[k] is matched to gt_idx[k]; sorted by gt index"""
    span_idx: Tuple[int, ...]
    gt_idx: Tuple[int, ...]
    cost: float


def match_cost_matrix(pred_cw: torch.Tensor, pred_prob: torch.Tensor, gt_cw: torch.Tensor,
                      w_l1: float, w_iou: float, w_ce: float) -> torch.Tensor:
    """(N_span, N_gt) matching costs"""
    l1 = torch.cdist(pred_cw, gt_cw, p=1)
    giou = pairwise_generalized_iou(span_cw_to_se(pred_cw), span_cw_to_se(gt_cw))
    return w_l1 * l1 + w_iou * (1 - giou) + w_ce * (-pred_prob[:, None])


def _exhaustive(cost: np.ndarray) -> Tuple[Tuple[int, ...], float]:
    n_span, n_gt = cost.shape
    best, best_cost = None, np.inf
    cols = np.arange(n_gt)
    for perm in itertools.permutations(range(n_span), n_gt):
        total = float(cost[list(perm), cols].sum())
        if total < best_cost - _TIE_TOL:
            best, best_cost = perm, total
    return tuple(best), best_cost


def _optimal_cost(cost: np.ndarray) -> float:
    if cost.shape[1] == 0:
        return 0.0
    gt_rows, span_cols = linear_sum_assignment(cost.T)
    return float(cost[span_cols, gt_rows].sum())


def _hungarian(cost: np.ndarray) -> Tuple[Tuple[int, ...], float]:
    """
    Hungarian optimum, then the lexicographically smallest optimal injection

    Each gt in turn takes the lowest free span that still allows the optimal
    total for the remaining gts.
    """
    n_span, n_gt = cost.shape
    gt_rows, span_cols = linear_sum_assignment(cost.T)
    fallback = tuple(int(s) for s in span_cols[np.argsort(gt_rows)])
    best = float(cost[list(fallback), np.arange(n_gt)].sum())
    tol = _TIE_TOL * max(1.0, abs(best)) * n_gt

    spans: List[int] = []
    fixed = 0.0
    for g in range(n_gt):
        free = [s for s in range(n_span) if s not in spans]
        chosen = fallback[g] if fallback[g] in free else free[0]
        for s in free:
            rest = [r for r in free if r != s]
            total = fixed + cost[s, g] + _optimal_cost(cost[np.ix_(rest, range(g + 1, n_gt))])
            if total <= best + tol:
                chosen = s
                break
        spans.append(chosen)
        fixed += cost[chosen, g]
    spans = tuple(spans)
    return spans, float(cost[list(spans), np.arange(n_gt)].sum())


def solve_assignment(cost: np.ndarray, method: str = "auto") -> Assignment:
    """
    Minimum-cost injection of gts (columns) into spans (rows)

    Args:
        cost: (N_span, N_gt)
        method: "auto", "exhaustive" or "hungarian"
    """
    cost = np.asarray(cost, dtype=np.float64)
    n_span, n_gt = cost.shape
    if n_gt > n_span:
        raise ValueError(f"{n_gt} ground truths cannot be matched to {n_span} spans")
    if n_gt == 0:
        return Assignment(span_idx=(), gt_idx=(), cost=0.0)
    if method == "auto":
        method = "exhaustive" if n_gt < EXHAUSTIVE_LIMIT else "hungarian"
    if method == "exhaustive":
        spans, total = _exhaustive(cost)
    elif method == "hungarian":
        spans, total = _hungarian(cost)
    else:
        raise ValueError(f"unknown assignment method {method!r}")
    return Assignment(span_idx=spans, gt_idx=tuple(range(n_gt)), cost=total)


@torch.no_grad()
def match(pred_cw: torch.Tensor, pred_logits: torch.Tensor, gt_spans: List[torch.Tensor],
          w_l1: float = 10.0, w_iou: float = 1.0, w_ce: float = 4.0,
          method: str = "auto") -> List[Assignment]:
    """
    Match every query of a batch

    Args:
        pred_cw: (B, N_span, 2) predicted center/width
        pred_logits: (B, N_span) foreground logits
        gt_spans: per element (n_gt, 2) normalized start/end
    """
    assignments = []
    for b, gt in enumerate(gt_spans):
        gt_cw = torch.stack([(gt[:, 0] + gt[:, 1]) / 2, gt[:, 1] - gt[:, 0]], dim=-1)
        cost = match_cost_matrix(pred_cw[b].double(), pred_logits[b].double().sigmoid(),
                                 gt_cw.to(pred_cw.device).double(), w_l1, w_iou, w_ce)
        assignments.append(solve_assignment(cost.cpu().numpy(), method))
    return assignments
