"""
Moment-retrieval metrics: R1@mu, mIoU, mAP@mu, mAP_avg

Predictions are PredictionSets ranked by score (ties by span index);
ground truth maps qid -> list of (start, end) in seconds.
"""

import json
import logging
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field

from spans import PredictionSet, segment_iou_np

logger = logging.getLogger(__name__)

MAP_THRESHOLDS = tuple(round(0.5 + 0.05 * k, 2) for k in range(10))
RECALL_THRESHOLDS = (0.3, 0.5, 0.7)

GroundTruth = Mapping[str, Sequence[Tuple[float, float]]]


class QueryDiagnostics(BaseModel):
    qid: str
    top1: Tuple[float, float]
    top1_score: float
    top1_iou: float
    num_gt: int
    ap: Dict[str, float] = Field(description="AP per mAP threshold")


class EvalReport(BaseModel):
    """Every value lies in [0, 1]; mAP_avg is the mean of the mAP columns"""
    num_queries: int
    recall: Dict[str, float] = Field(description="R1@mu keyed 'R1@0.5'")
    mean_ap: Dict[str, float] = Field(description="mAP@mu keyed 'mAP@0.50'")
    mAP_avg: float
    mIoU: float
    per_query: List[QueryDiagnostics] = Field(default_factory=list)

    def headline(self) -> Dict[str, float]:
        """Flat metric row in the usual column order"""
        row = dict(self.recall)
        row['mIoU'] = self.mIoU
        row['mAP_avg'] = self.mAP_avg
        return row

    def metrics(self) -> Dict[str, float]:
        """Every scalar metric keyed by column name"""
        return {**self.recall, **self.mean_ap, 'mAP_avg': self.mAP_avg, 'mIoU': self.mIoU}


def recall_key(mu: float) -> str:
    return f"R1@{mu:g}"


def map_key(mu: float) -> str:
    return f"mAP@{mu:.2f}"


def _check_inputs(predictions: Sequence[PredictionSet], gts: GroundTruth):
    if not predictions:
        raise ValueError("cannot evaluate an empty query set")
    for pred in predictions:
        if pred.qid not in gts or len(gts[pred.qid]) == 0:
            raise ValueError(f"query {pred.qid} has no ground truth")
        if not pred.spans:
            raise ValueError(f"query {pred.qid} has no predictions")


def _gt_array(gts: GroundTruth, qid: str) -> np.ndarray:
    return np.asarray(gts[qid], dtype=np.float64).reshape(-1, 2)


def top1_iou(pred: PredictionSet, gt: np.ndarray) -> float:
    start, end, _ = pred.ranked()[0]
    return float(segment_iou_np((start, end), gt).max())


def recall_at(predictions: Sequence[PredictionSet], gts: GroundTruth, mu: float) -> float:
    """Fraction of queries whose top-1 span reaches IoU >= mu with some gt"""
    _check_inputs(predictions, gts)
    hits = [top1_iou(p, _gt_array(gts, p.qid)) >= mu for p in predictions]
    return float(np.mean(hits))


def miou(predictions: Sequence[PredictionSet], gts: GroundTruth) -> float:
    _check_inputs(predictions, gts)
    return float(np.mean([top1_iou(p, _gt_array(gts, p.qid)) for p in predictions]))


def interpolated_prec_rec(prec: np.ndarray, rec: np.ndarray) -> float:
    """All-point interpolated area under the precision-recall curve"""
    mprec = np.hstack([[0], prec, [0]])
    mrec = np.hstack([[0], rec, [1]])
    for i in range(len(mprec) - 1)[::-1]:
        mprec[i] = max(mprec[i], mprec[i + 1])
    idx = np.where(mrec[1::] != mrec[0:-1])[0] + 1
    return float(np.sum((mrec[idx] - mrec[idx - 1]) * mprec[idx]))


def average_precision(pred: PredictionSet, gt: np.ndarray, mu: float) -> float:
    """
    AP of one query at threshold mu

    Walking down the ranking, a prediction is a true positive when its best
    IoU over the still-unclaimed gts is >= mu; it then claims that gt.
    """
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 2)
    ranked = pred.ranked()
    claimed = np.zeros(len(gt), dtype=bool)
    tp = np.zeros(len(ranked))
    for rank, (start, end, _) in enumerate(ranked):
        ious = segment_iou_np((start, end), gt)
        ious[claimed] = -1.0
        best = int(np.argmax(ious))
        if ious[best] >= mu:
            claimed[best] = True
            tp[rank] = 1.0
    tp_cum = np.cumsum(tp)
    precision = tp_cum / np.arange(1, len(ranked) + 1)
    recall = tp_cum / len(gt)
    return interpolated_prec_rec(precision, recall)


def map_at(predictions: Sequence[PredictionSet], gts: GroundTruth, mu: float) -> float:
    _check_inputs(predictions, gts)
    return float(np.mean([average_precision(p, _gt_array(gts, p.qid), mu) for p in predictions]))


def map_avg(predictions: Sequence[PredictionSet], gts: GroundTruth,
            thresholds: Sequence[float] = MAP_THRESHOLDS) -> float:
    return float(np.mean([map_at(predictions, gts, mu) for mu in thresholds]))


def evaluate(predictions: Sequence[PredictionSet], gts: GroundTruth,
             recall_thresholds: Sequence[float] = RECALL_THRESHOLDS,
             map_thresholds: Sequence[float] = MAP_THRESHOLDS,
             diagnostics: bool = True) -> EvalReport:
    """Compute the full report in one pass over the queries"""
    _check_inputs(predictions, gts)
    top1 = []
    ap_table = np.zeros((len(predictions), len(map_thresholds)))
    per_query = []
    for q, pred in enumerate(predictions):
        gt = _gt_array(gts, pred.qid)
        iou = top1_iou(pred, gt)
        top1.append(iou)
        for t, mu in enumerate(map_thresholds):
            ap_table[q, t] = average_precision(pred, gt, mu)
        if diagnostics:
            start, end, score = pred.ranked()[0]
            per_query.append(QueryDiagnostics(
                qid=pred.qid, top1=(start, end), top1_score=score, top1_iou=iou, num_gt=len(gt),
                ap={map_key(mu): float(ap_table[q, t]) for t, mu in enumerate(map_thresholds)},
            ))

    top1 = np.asarray(top1)
    mean_ap = {map_key(mu): float(ap_table[:, t].mean()) for t, mu in enumerate(map_thresholds)}
    return EvalReport(
        num_queries=len(predictions),
        recall={recall_key(mu): float(np.mean(top1 >= mu)) for mu in recall_thresholds},
        mean_ap=mean_ap,
        mAP_avg=float(np.mean(list(mean_ap.values()))),
        mIoU=float(top1.mean()),
        per_query=per_query,
    )


# ============================================================================
# FILES
# ============================================================================

def write_predictions(predictions: Sequence[PredictionSet], path) -> None:
    """One JSON object per line: {qid, spans: [[start_s, end_s, score], ...]} in rank order"""
    with open(path, 'w', encoding='utf-8') as f:
        for pred in predictions:
            ranked = [[start, end, score] for start, end, score in pred.ranked()]
            f.write(json.dumps({'qid': pred.qid, 'spans': ranked}) + "\n")
    logger.info(f"✅ Wrote {len(predictions)} prediction sets to {path}")


def read_predictions(path) -> List[PredictionSet]:
    predictions = []
    with open(path, encoding='utf-8') as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            record = json.loads(line)
            rows = record.get('spans', [])
            if any(len(row) != 3 for row in rows):
                raise ValueError(f"{path}:{lineno}: prediction without a score")
            predictions.append(PredictionSet(
                qid=record['qid'],
                spans=[(row[0], row[1]) for row in rows],
                scores=[row[2] for row in rows],
            ))
    return predictions


def write_report(report: EvalReport, path, include_queries: bool = True) -> None:
    exclude = None if include_queries else {'per_query'}
    Path(path).write_text(report.model_dump_json(indent=2, exclude=exclude) + "\n")


def report_from_file(path) -> EvalReport:
    return EvalReport.model_validate_json(Path(path).read_text())


def ground_truth_from_samples(samples) -> Dict[str, List[Tuple[float, float]]]:
    return {s.query.qid: [(span.start, span.end) for span in s.query.spans] for s in samples}


def format_report(report: EvalReport, scale: float = 100.0) -> str:
    """One-line table body in percent: R1 columns, mIoU, mAP_avg"""
    row = report.headline()
    header = "  ".join(f"{k:>9}" for k in row)
    values = "  ".join(f"{v * scale:>9.2f}" for v in row.values())
    return f"{header}\n{values}"


def threshold_list(raw: Optional[str]) -> Tuple[float, ...]:
    """Parse '0.3,0.5,0.7'"""
    if not raw:
        return RECALL_THRESHOLDS
    values = tuple(float(x) for x in raw.split(',') if x.strip())
    if any(not 0.0 <= v <= 1.0 for v in values):
        raise ValueError(f"thresholds must lie in [0, 1]: {raw}")
    return values
