"""
Temporal span types and 1-D interval algebra

Scalar helpers work on Python floats (double precision) and are used by the
metrics, the positive-set builder and the oracles. The tensor helpers at the
bottom are the batched versions used inside the losses and the matcher.
"""

import math
from enum import Enum
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field, model_validator

# Minimum normalized width; keeps gIoU and L1 finite on degenerate predictions
WIDTH_EPS = 1e-4
_TOL = 1e-9


class SpanUnit(str, Enum):
    SECONDS = "seconds"
    NORMALIZED = "normalized"


class TemporalSpan(BaseModel):
    """Closed interval [start, end] on a video timeline"""
    model_config = ConfigDict(frozen=True)

    start: float = Field(description="Start in seconds, or fraction of duration")
    end: float = Field(description="End, same unit as start")
    unit: SpanUnit = Field(default=SpanUnit.SECONDS)

    @model_validator(mode="after")
    def _check_order(self):
        if not (math.isfinite(self.start) and math.isfinite(self.end)):
            raise ValueError(f"span bounds must be finite, got ({self.start}, {self.end})")
        if self.start > self.end:
            raise ValueError(f"span start {self.start} is after end {self.end}")
        if self.unit == SpanUnit.NORMALIZED and (self.start < -_TOL or self.end > 1 + _TOL):
            raise ValueError(f"normalized span ({self.start}, {self.end}) leaves [0, 1]")
        return self

    @classmethod
    def of(cls, start: float, end: float, unit: SpanUnit = SpanUnit.SECONDS) -> "TemporalSpan":
        return cls(start=float(start), end=float(end), unit=unit)

    @property
    def length(self) -> float:
        return self.end - self.start


class CenterWidthSpan(BaseModel):
    """Normalized (center, width) form used by the span decoder"""
    model_config = ConfigDict(frozen=True)

    center: float = Field(ge=0.0, le=1.0)
    width: float = Field(gt=0.0, le=1.0)


class FrameIndexSpan(BaseModel):
    """Inclusive frame-feature indices [l_s, l_e] of a moment"""
    model_config = ConfigDict(frozen=True)

    l_s: int
    l_e: int
    num_frames: int = Field(ge=1, description="L_v of the video the indices refer to")

    @model_validator(mode="after")
    def _check_range(self):
        if not (0 <= self.l_s <= self.l_e < self.num_frames):
            raise ValueError(
                f"frame span ({self.l_s}, {self.l_e}) invalid for {self.num_frames} frames"
            )
        return self

    @property
    def length(self) -> int:
        return self.l_e + 1 - self.l_s

    @classmethod
    def from_seconds(cls, span: TemporalSpan, duration: float, num_frames: int) -> "FrameIndexSpan":
        """
        l_s = floor(t_s / duration * L_v)
        l_e = min(L_v - 1, ceil(t_e / duration * L_v) - 1)
        """
        if duration <= 0:
            raise ValueError(f"duration must be positive, got {duration}")
        l_s = int(math.floor(_snap(span.start / duration * num_frames)))
        l_s = min(max(l_s, 0), num_frames - 1)
        l_e = int(math.ceil(_snap(span.end / duration * num_frames))) - 1
        l_e = min(num_frames - 1, max(l_e, l_s))
        return cls(l_s=l_s, l_e=l_e, num_frames=num_frames)


def _snap(x: float) -> float:
    """Absorb float noise around integer frame boundaries"""
    nearest = round(x)
    return float(nearest) if abs(x - nearest) < _TOL else x


def _check_units(a: TemporalSpan, b: TemporalSpan):
    if a.unit != b.unit:
        raise ValueError(f"cannot compare spans in {a.unit.value} and {b.unit.value}")


def iou_1d(a: TemporalSpan, b: TemporalSpan) -> float:
    """|a ∩ b| / |a ∪ b|, 0 when the union has zero length"""
    _check_units(a, b)
    inter = max(0.0, min(a.end, b.end) - max(a.start, b.start))
    union = a.length + b.length - inter
    if union <= 0:
        return 0.0
    return inter / union


def giou_1d(a: TemporalSpan, b: TemporalSpan) -> float:
    """IoU minus the fraction of the enclosing span covered by neither span"""
    _check_units(a, b)
    enclosing = max(a.end, b.end) - min(a.start, b.start)
    if enclosing <= 0:
        # both spans zero-length and coincident
        return 1.0
    inter = max(0.0, min(a.end, b.end) - max(a.start, b.start))
    union = a.length + b.length - inter
    iou = inter / union if union > 0 else 0.0
    return iou - (enclosing - union) / enclosing


def to_center_width(span: TemporalSpan, duration: float) -> CenterWidthSpan:
    if duration <= 0:
        raise ValueError(f"duration must be positive, got {duration}")
    if span.start < -_TOL or span.end > duration + _TOL:
        raise ValueError(f"span ({span.start}, {span.end}) outside [0, {duration}]")
    center = (span.start + span.end) / (2.0 * duration)
    width = max((span.end - span.start) / duration, WIDTH_EPS)
    return CenterWidthSpan(center=min(max(center, 0.0), 1.0), width=min(width, 1.0))


def from_center_width(span: CenterWidthSpan, duration: float) -> TemporalSpan:
    if duration <= 0:
        raise ValueError(f"duration must be positive, got {duration}")
    start = (span.center - span.width / 2.0) * duration
    end = (span.center + span.width / 2.0) * duration
    return TemporalSpan.of(max(start, 0.0), min(end, duration))


class PredictionSet(BaseModel):
    """
    Ranked moment predictions for one query

    spans are (start, end) in seconds; ranking is by score descending,
    ties broken by original span index.
    """
    model_config = ConfigDict(frozen=True)

    qid: str
    spans: List[Tuple[float, float]]
    scores: List[float]

    @model_validator(mode="after")
    def _check_scores(self):
        if len(self.spans) != len(self.scores):
            raise ValueError(f"{self.qid}: {len(self.spans)} spans but {len(self.scores)} scores")
        if any(not math.isfinite(s) for s in self.scores):
            raise ValueError(f"{self.qid}: non-finite prediction score")
        return self

    def ranked(self) -> List[Tuple[float, float, float]]:
        order = sorted(range(len(self.scores)), key=lambda k: (-self.scores[k], k))
        return [(self.spans[k][0], self.spans[k][1], self.scores[k]) for k in order]


# ============================================================================
# TENSOR HELPERS
# ============================================================================

def span_cw_to_se(cw: torch.Tensor) -> torch.Tensor:
    """(..., 2) center/width -> (..., 2) start/end"""
    center, width = cw.unbind(-1)
    return torch.stack([center - 0.5 * width, center + 0.5 * width], dim=-1)


def span_se_to_cw(se: torch.Tensor) -> torch.Tensor:
    """(..., 2) start/end -> (..., 2) center/width"""
    start, end = se.unbind(-1)
    return torch.stack([(start + end) / 2, end - start], dim=-1)


def pairwise_temporal_iou(spans1: torch.Tensor, spans2: torch.Tensor):
    """
    spans1: (N, 2), spans2: (M, 2) start/end

    Returns (iou, union), both (N, M)
    """
    areas1 = spans1[:, 1] - spans1[:, 0]
    areas2 = spans2[:, 1] - spans2[:, 0]
    left = torch.max(spans1[:, None, 0], spans2[None, :, 0])
    right = torch.min(spans1[:, None, 1], spans2[None, :, 1])
    inter = (right - left).clamp(min=0)
    union = areas1[:, None] + areas2[None, :] - inter
    iou = inter / union.clamp(min=1e-12)
    return iou, union


def pairwise_generalized_iou(spans1: torch.Tensor, spans2: torch.Tensor) -> torch.Tensor:
    """Generalized temporal IoU, (N, M); inputs start/end with positive width"""
    iou, union = pairwise_temporal_iou(spans1, spans2)
    left = torch.min(spans1[:, None, 0], spans2[None, :, 0])
    right = torch.max(spans1[:, None, 1], spans2[None, :, 1])
    enclosing = (right - left).clamp(min=1e-12)
    return iou - (enclosing - union) / enclosing


def segment_iou_np(target: Sequence[float], candidates: np.ndarray) -> np.ndarray:
    """IoU of one (start, end) against an (N, 2) array, float64"""
    candidates = np.asarray(candidates, dtype=np.float64).reshape(-1, 2)
    left = np.maximum(target[0], candidates[:, 0])
    right = np.minimum(target[1], candidates[:, 1])
    inter = (right - left).clip(0)
    union = (candidates[:, 1] - candidates[:, 0]) + (target[1] - target[0]) - inter
    out = np.zeros(len(candidates), dtype=np.float64)
    positive = union > 0
    out[positive] = inter[positive] / union[positive]
    return out


def inverse_sigmoid(x: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    x = x.clamp(min=0, max=1)
    return torch.log(x.clamp(min=eps) / (1 - x).clamp(min=eps))


def clamp_start_end(se: torch.Tensor, min_width: Optional[float] = WIDTH_EPS) -> torch.Tensor:
    """Clip to [0, 1] and keep end >= start + min_width where room allows"""
    start = se[..., 0].clamp(0.0, 1.0 - min_width)
    end = torch.max(se[..., 1].clamp(0.0, 1.0), start + min_width)
    return torch.stack([start, end], dim=-1)
