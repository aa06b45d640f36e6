"""
Subspace similarity probe

How much of the text features' row space lies inside the segment features'
row space: top-i right singular vectors of the text matrix against every
(non-negligible) right singular vector of the segment matrix,
||V_A[:, :i]^T V_B||_F^2 / i.
"""

import logging
from typing import Dict, List, Tuple

import numpy as np
import pandas as pd
import torch
from pydantic import BaseModel, Field
from scipy import linalg

logger = logging.getLogger(__name__)

RELATIVE_RANK_TOL = 1e-10

TEXT_VARIANTS = ('text', 'text_enh')
SEGMENT_VARIANTS = ('segment', 'segment_enh')


def right_singular_vectors(matrix: np.ndarray, center: bool = False) -> np.ndarray:
    """(D, r) orthonormal row-space basis, singular values above 1e-10 * sigma_max"""
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[0] == 0:
        raise ValueError(f"expected a non-empty 2-D matrix, got shape {matrix.shape}")
    if not np.isfinite(matrix).all():
        raise ValueError("matrix has non-finite entries")
    if center:
        matrix = matrix - matrix.mean(axis=0, keepdims=True)
    _, sigma, vh = linalg.svd(matrix, full_matrices=False)
    if sigma.size == 0 or sigma[0] == 0:
        return np.zeros((matrix.shape[1], 0))
    keep = sigma > RELATIVE_RANK_TOL * sigma[0]
    return vh[keep].T


def _numerators(a: np.ndarray, b: np.ndarray, center: bool) -> Tuple[np.ndarray, int]:
    """Cumulative ||V_A[:, :i]^T V_B||_F^2 for i = 1..rank(A), and rank(A)"""
    v_a = right_singular_vectors(a, center)
    v_b = right_singular_vectors(b, center)
    overlap = (v_a.T @ v_b) ** 2
    return np.cumsum(overlap.sum(axis=1)), v_a.shape[1]


def subspace_similarity(a, b, i: int, center: bool = False) -> float:
    """
    Similarity in [0, 1] of the top-i text directions with the segment space

    Args:
        a: (n, D) text features
        b: (m, D) segment features
        i: 1 <= i <= min(n, D); past rank(a) the missing directions count as zero

    Raises:
        ValueError for i out of range or mismatched feature dims
    """
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"feature dims differ: {a.shape[1]} vs {b.shape[1]}")
    if not 1 <= i <= min(a.shape):
        raise ValueError(f"i={i} outside [1, {min(a.shape)}]")
    cumulative, rank = _numerators(a, b, center)
    if rank == 0:
        return 0.0
    value = cumulative[min(i, rank) - 1] / i
    return float(min(max(value, 0.0), 1.0))


def similarity_curve(a, b, center: bool = False) -> Tuple[List[float], List[bool]]:
    """Similarity for every i in 1..min(n, D), with a flag where i exceeds rank(a)"""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    limit = min(a.shape)
    cumulative, rank = _numerators(a, b, center)
    values, flags = [], []
    for i in range(1, limit + 1):
        numerator = cumulative[min(i, rank) - 1] if rank else 0.0
        values.append(float(min(max(numerator / i, 0.0), 1.0)))
        flags.append(i > rank)
    return values, flags


class SubspaceReport(BaseModel):
    qid: str
    center: bool = False
    curves: Dict[str, List[float]] = Field(description="pair name -> similarity for i = 1..")
    rank_deficient: Dict[str, List[bool]] = Field(description="pair name -> i exceeds the text rank")

    def to_frame(self) -> pd.DataFrame:
        length = max(len(v) for v in self.curves.values())
        frame = pd.DataFrame({'i': range(1, length + 1)})
        for name, values in self.curves.items():
            frame[name] = values + [np.nan] * (length - len(values))
        return frame


def pair_name(text: str, segment: str) -> str:
    return f"{text}~{segment}"


@torch.no_grad()
def probe_features(output, batch, index: int = 0) -> Dict[str, np.ndarray]:
    """
    The four probe matrices of one batch element

    text: projected words; text_enh: words with the complement token;
    segment / segment_enh: ground-truth frames before and after enhancement.
    """
    l_s, l_e = (int(x) for x in batch.frame_spans[index])
    word_mask = batch.word_mask[index]
    query_mask = output.query_mask[index]
    return {
        'text': output.words[index][word_mask].double().cpu().numpy(),
        'text_enh': output.query_tokens[index][query_mask].double().cpu().numpy(),
        'segment': output.frames[index, l_s:l_e + 1].double().cpu().numpy(),
        'segment_enh': output.frames_enh[index, l_s:l_e + 1].double().cpu().numpy(),
    }


def probe_report(features: Dict[str, np.ndarray], qid: str, center: bool = False) -> SubspaceReport:
    curves, flags = {}, {}
    for text in TEXT_VARIANTS:
        for segment in SEGMENT_VARIANTS:
            name = pair_name(text, segment)
            curves[name], flags[name] = similarity_curve(features[text], features[segment], center)
            if any(flags[name]):
                logger.info(f"⚠️ {qid} {name}: text features rank-deficient past "
                            f"i={flags[name].index(True)}")
    return SubspaceReport(qid=qid, center=center, curves=curves, rank_deficient=flags)


def format_curves(report: SubspaceReport, scale: float = 100.0) -> str:
    frame = report.to_frame()
    for name in report.curves:
        frame[name] = (frame[name] * scale).round(2)
    return frame.to_string(index=False)
