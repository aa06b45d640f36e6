"""
Brute-force evaluator used to cross-check eval_metrics

Shares only the EvalReport schema with eval_metrics. The arithmetic is plain
loops over Python floats, AP as the mean over gts of the best precision at or
after the rank where each gt got claimed.
"""

from typing import List, Mapping, Sequence, Tuple

from eval_metrics import EvalReport

MAX_QUERIES = 20
MAX_PREDICTIONS = 20


def _iou(a: Tuple[float, float], b: Tuple[float, float]) -> float:
    inter = min(a[1], b[1]) - max(a[0], b[0])
    if inter < 0:
        inter = 0.0
    union = (a[1] - a[0]) + (b[1] - b[0]) - inter
    return inter / union if union > 0 else 0.0


def _rank(spans, scores) -> List[Tuple[float, float]]:
    order = list(range(len(scores)))
    # stable sort keeps index order among equal scores
    order.sort(key=lambda k: -scores[k])
    return [tuple(spans[k]) for k in order]


def _ap(ranked: List[Tuple[float, float]], gts: List[Tuple[float, float]], mu: float) -> float:
    unclaimed = list(range(len(gts)))
    hits = []
    for rank, span in enumerate(ranked, start=1):
        best, best_iou = None, -1.0
        for g in unclaimed:
            value = _iou(span, gts[g])
            if value > best_iou:
                best, best_iou = g, value
        if best is not None and best_iou >= mu:
            unclaimed.remove(best)
            hits.append(rank)
    total = 0.0
    for k, rank in enumerate(hits):
        best_precision = 0.0
        for later_k in range(k, len(hits)):
            best_precision = max(best_precision, (later_k + 1) / hits[later_k])
        total += best_precision
    return total / len(gts)


def oracle_evaluate(predictions: Sequence, gts: Mapping[str, Sequence[Tuple[float, float]]],
                    recall_thresholds: Sequence[float],
                    map_thresholds: Sequence[float]) -> EvalReport:
    """
    Same report shape as eval_metrics.evaluate, without per-query diagnostics

    Raises:
        ValueError above MAX_QUERIES queries or MAX_PREDICTIONS predictions per query
    """
    if not predictions:
        raise ValueError("cannot evaluate an empty query set")
    if len(predictions) > MAX_QUERIES:
        raise ValueError(f"oracle handles at most {MAX_QUERIES} queries, got {len(predictions)}")

    top1 = []
    aps = {mu: [] for mu in map_thresholds}
    for pred in predictions:
        if len(pred.spans) > MAX_PREDICTIONS:
            raise ValueError(f"oracle handles at most {MAX_PREDICTIONS} predictions per query")
        truth = [tuple(g) for g in gts[pred.qid]]
        ranked = _rank(pred.spans, pred.scores)
        top1.append(max(_iou(ranked[0], g) for g in truth))
        for mu in map_thresholds:
            aps[mu].append(_ap(ranked, truth, mu))

    n = len(predictions)
    recall = {f"R1@{mu:g}": sum(1 for v in top1 if v >= mu) / n for mu in recall_thresholds}
    mean_ap = {f"mAP@{mu:.2f}": sum(aps[mu]) / n for mu in map_thresholds}
    return EvalReport(
        num_queries=n,
        recall=recall,
        mean_ap=mean_ap,
        mAP_avg=sum(mean_ap.values()) / len(map_thresholds),
        mIoU=sum(top1) / n,
    )
