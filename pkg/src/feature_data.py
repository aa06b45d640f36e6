"""
Feature dataset ingestion and batching

Manifest: one JSON object per line describing a video and its queries.
Feature files: raw little-endian float32, row-major, shape declared in the
manifest. Vocabulary: one token string per line, line number = token id.
"""

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np
import torch
from pydantic import BaseModel, Field, ValidationError, model_validator

from spans import FrameIndexSpan, TemporalSpan

logger = logging.getLogger(__name__)

FEATURE_DTYPE = np.dtype('<f4')


class DatasetLoadError(ValueError):
    """A manifest record or feature file failed validation"""


# ============================================================================
# MANIFEST SCHEMA
# ============================================================================

class QueryEntry(BaseModel):
    qid: str
    tokens: List[int] = Field(description="Vocabulary ids, one per word")
    token_strings: List[str] = Field(default_factory=list)
    feature_file: str
    L_w: int = Field(ge=1)
    D_q: int = Field(ge=1)
    spans: List[Tuple[float, float]] = Field(min_length=1, description="Ground truth in seconds")

    @model_validator(mode="after")
    def _check_tokens(self):
        if len(self.tokens) != self.L_w:
            raise ValueError(f"query {self.qid}: {len(self.tokens)} tokens but L_w={self.L_w}")
        if self.token_strings and len(self.token_strings) != self.L_w:
            raise ValueError(f"query {self.qid}: token_strings length differs from L_w")
        if any(t < 0 for t in self.tokens):
            raise ValueError(f"query {self.qid}: negative token id")
        return self


class VideoEntry(BaseModel):
    video_id: str
    duration_s: float = Field(gt=0)
    feature_file: str
    L_v: int = Field(ge=1)
    D_v: int = Field(ge=1)
    queries: List[QueryEntry] = Field(default_factory=list)


# ============================================================================
# DOMAIN TYPES
# ============================================================================

@dataclass(frozen=True)
class VideoFeatures:
    id: str
    frames: np.ndarray  # (L_v, D_v)
    duration: float

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


@dataclass(frozen=True)
class QueryRecord:
    qid: str
    tokens: np.ndarray  # (L_w,) int64
    features: np.ndarray  # (L_w, D_q)
    index: int  # sentence index within its video
    spans: Tuple[TemporalSpan, ...]
    token_strings: Tuple[str, ...] = ()

    @property
    def num_words(self) -> int:
        return self.features.shape[0]


@dataclass(frozen=True)
class Sample:
    """One query to ground, with every sentence of its video available"""
    video: VideoFeatures
    queries: Tuple[QueryRecord, ...]
    current: int  # 0-based index of the query to ground
    gt_frame_span: FrameIndexSpan

    @property
    def query(self) -> QueryRecord:
        return self.queries[self.current]


@dataclass
class Batch:
    """Padded batch; every padded position is False in its mask"""
    video_feats: torch.Tensor  # (B, L_v, D_v)
    video_mask: torch.Tensor  # (B, L_v) bool
    word_feats: torch.Tensor  # (B, L_w, D_q) current query
    word_mask: torch.Tensor  # (B, L_w) bool
    word_ids: torch.Tensor  # (B, L_w) long, 0 at padding
    mlm_mask: torch.Tensor  # (B, L_w) bool, positions replaced by the mask embedding
    sentence_feats: torch.Tensor  # (B, K, L_s, D_q) every sentence of the video
    sentence_word_mask: torch.Tensor  # (B, K, L_s) bool
    sentence_mask: torch.Tensor  # (B, K) bool
    current_index: torch.Tensor  # (B,) long
    frame_spans: torch.Tensor  # (B, 2) long, primary gt (l_s, l_e) inclusive
    saliency_labels: torch.Tensor  # (B, L_v) float
    durations: torch.Tensor  # (B,) float64
    gt_spans: List[torch.Tensor] = field(default_factory=list)  # per element (n_gt, 2) normalized start/end
    gt_seconds: List[List[Tuple[float, float]]] = field(default_factory=list)
    video_ids: List[str] = field(default_factory=list)
    qids: List[str] = field(default_factory=list)

    def __len__(self) -> int:
        return self.video_feats.shape[0]

    def to(self, device) -> "Batch":
        moved = {}
        for name, value in vars(self).items():
            if isinstance(value, torch.Tensor):
                moved[name] = value.to(device)
            elif name == 'gt_spans':
                moved[name] = [t.to(device) for t in value]
            else:
                moved[name] = value
        return Batch(**moved)

    def float_tensors(self, dtype: torch.dtype) -> "Batch":
        """Cast the feature tensors (e.g. to float64 for gradient checks)"""
        cast = dict(vars(self))
        for name in ('video_feats', 'word_feats', 'sentence_feats', 'saliency_labels'):
            cast[name] = cast[name].to(dtype)
        cast['gt_spans'] = [t.to(dtype) for t in self.gt_spans]
        return Batch(**cast)


# ============================================================================
# LOADING
# ============================================================================

def read_features(path: Path, rows: int, cols: int, record: str) -> np.ndarray:
    """Read a raw float32 feature file and check it against the declared shape"""
    if not path.exists():
        raise DatasetLoadError(f"{record}: feature file not found: {path}")
    data = np.fromfile(path, dtype=FEATURE_DTYPE)
    if data.size != rows * cols:
        raise DatasetLoadError(
            f"{record}: {path.name} holds {data.size} values, manifest declares {rows}x{cols}"
        )
    data = data.reshape(rows, cols)
    if not np.isfinite(data).all():
        raise DatasetLoadError(f"{record}: non-finite values in {path.name}")
    return data


def write_features(path: Path, array: np.ndarray) -> None:
    np.ascontiguousarray(array, dtype=FEATURE_DTYPE).tofile(path)


def load_vocabulary(path) -> List[str]:
    path = Path(path)
    if not path.exists():
        raise DatasetLoadError(f"vocabulary file not found: {path}")
    return path.read_text(encoding='utf-8').splitlines()


def _load_video(entry: VideoEntry, root: Path, issues: Optional[list]) -> List[Sample]:
    frames = read_features(root / entry.feature_file, entry.L_v, entry.D_v, f"video {entry.video_id}")
    video = VideoFeatures(id=entry.video_id, frames=frames, duration=entry.duration_s)

    queries = []
    for index, q in enumerate(entry.queries):
        record = f"video {entry.video_id} query {q.qid}"
        feats = read_features(root / q.feature_file, q.L_w, q.D_q, record)
        spans = []
        for start, end in q.spans:
            if start > end:
                raise DatasetLoadError(f"{record}: span start {start} after end {end}")
            if start < 0 or end > entry.duration_s:
                message = (f"{record}: span ({start}, {end}) clamped to "
                           f"[0, {entry.duration_s}]")
                logger.warning(f"⚠️ {message}")
                if issues is not None:
                    issues.append(message)
                start = min(max(start, 0.0), entry.duration_s)
                end = min(max(end, start), entry.duration_s)
            spans.append(TemporalSpan.of(start, end))
        queries.append(QueryRecord(
            qid=q.qid,
            tokens=np.asarray(q.tokens, dtype=np.int64),
            features=feats,
            index=index,
            spans=tuple(spans),
            token_strings=tuple(q.token_strings),
        ))

    queries = tuple(queries)
    samples = []
    for index, query in enumerate(queries):
        frame_span = FrameIndexSpan.from_seconds(query.spans[0], video.duration, video.num_frames)
        samples.append(Sample(video=video, queries=queries, current=index, gt_frame_span=frame_span))
    return samples


def load_dataset(manifest_path, issues: Optional[list] = None) -> Iterator[Sample]:
    """
    Stream Samples from a manifest, grouped per video

    Args:
        manifest_path: JSON-lines manifest
        issues: optional list collecting non-fatal validation warnings

    Raises:
        DatasetLoadError naming the offending record
    """
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise DatasetLoadError(f"manifest not found: {manifest_path}")
    root = manifest_path.parent

    with open(manifest_path, encoding='utf-8') as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                entry = VideoEntry.model_validate_json(line)
            except ValidationError as e:
                raise DatasetLoadError(f"{manifest_path.name}:{lineno}: invalid record: {e}") from e
            yield from _load_video(entry, root, issues)


def dataset_vocab_size(samples: Sequence[Sample], vocab: Optional[List[str]] = None) -> int:
    max_id = max((int(q.tokens.max()) for s in samples for q in s.queries), default=-1)
    if vocab is not None:
        if max_id >= len(vocab):
            raise DatasetLoadError(f"token id {max_id} outside vocabulary of {len(vocab)}")
        return len(vocab)
    return max_id + 1


def dataset_hash(manifest_path) -> str:
    """SHA-256 over the manifest bytes and every feature file it references"""
    manifest_path = Path(manifest_path)
    digest = hashlib.sha256(manifest_path.read_bytes())
    root = manifest_path.parent
    files = set()
    for line in manifest_path.read_text(encoding='utf-8').splitlines():
        if not line.strip():
            continue
        record = json.loads(line)
        files.add(record['feature_file'])
        files.update(q['feature_file'] for q in record.get('queries', []))
    for name in sorted(files):
        path = root / name
        if path.exists():
            digest.update(name.encode('utf-8'))
            digest.update(path.read_bytes())
    return digest.hexdigest()


# ============================================================================
# MASKING
# ============================================================================

def num_masked(length: int, ratio: float) -> int:
    """ceil(L_w * ratio), at least 1, never all positions when L_w >= 2"""
    count = max(1, math.ceil(length * ratio - 1e-9))
    if length >= 2:
        count = min(count, length - 1)
    return min(count, length)


def select_mask_positions(length: int, seed: int, ratio: float = 1.0 / 3.0) -> np.ndarray:
    """Sorted positions chosen uniformly without replacement"""
    if length < 1:
        raise ValueError("cannot mask an empty query")
    rng = np.random.default_rng(seed)
    picked = rng.choice(length, size=num_masked(length, ratio), replace=False)
    return np.sort(picked)


def mask_words(query: QueryRecord, seed: int, mask_embedding: np.ndarray,
               ratio: float = 1.0 / 3.0) -> Tuple[np.ndarray, np.ndarray]:
    """
    Replace a ratio of the word rows with the mask embedding

    Returns:
        (masked word features, masked positions)
    """
    positions = select_mask_positions(query.num_words, seed, ratio)
    masked = query.features.copy()
    masked[positions] = mask_embedding
    return masked, positions


# ============================================================================
# BATCHING
# ============================================================================

def _saliency(frame_span: FrameIndexSpan, length: int) -> np.ndarray:
    labels = np.zeros(length, dtype=np.float32)
    labels[frame_span.l_s:frame_span.l_e + 1] = 1.0
    return labels


def make_batch(samples: Sequence[Sample], max_frames: Optional[int] = None,
               max_words: Optional[int] = None, mask_seed: Optional[int] = None,
               mask_ratio: float = 1.0 / 3.0) -> Batch:
    """
    Pad samples to per-batch maxima and build every mask

    Args:
        samples: at least one Sample
        max_frames / max_words: pad to at least these lengths
        mask_seed: seed for masked-word selection; element i uses mask_seed + i.
            None leaves mlm_mask empty (evaluation).
        mask_ratio: fraction of words masked
    """
    if not samples:
        raise ValueError("make_batch needs at least one sample")

    n = len(samples)
    d_v = samples[0].video.frames.shape[1]
    d_q = samples[0].query.features.shape[1]
    l_v = max(max(s.video.num_frames for s in samples), max_frames or 0)
    l_w = max(max(s.query.num_words for s in samples), max_words or 0)
    k_max = max(len(s.queries) for s in samples)
    l_s = max(q.num_words for s in samples for q in s.queries)

    video_feats = np.zeros((n, l_v, d_v), dtype=np.float32)
    video_mask = np.zeros((n, l_v), dtype=bool)
    word_feats = np.zeros((n, l_w, d_q), dtype=np.float32)
    word_mask = np.zeros((n, l_w), dtype=bool)
    word_ids = np.zeros((n, l_w), dtype=np.int64)
    mlm_mask = np.zeros((n, l_w), dtype=bool)
    sentence_feats = np.zeros((n, k_max, l_s, d_q), dtype=np.float32)
    sentence_word_mask = np.zeros((n, k_max, l_s), dtype=bool)
    sentence_mask = np.zeros((n, k_max), dtype=bool)
    current_index = np.zeros(n, dtype=np.int64)
    frame_spans = np.zeros((n, 2), dtype=np.int64)
    saliency = np.zeros((n, l_v), dtype=np.float32)
    durations = np.zeros(n, dtype=np.float64)
    gt_spans, gt_seconds, video_ids, qids = [], [], [], []

    for i, sample in enumerate(samples):
        frames = sample.video.frames
        query = sample.query
        video_feats[i, :frames.shape[0]] = frames
        video_mask[i, :frames.shape[0]] = True
        word_feats[i, :query.num_words] = query.features
        word_mask[i, :query.num_words] = True
        word_ids[i, :query.num_words] = query.tokens
        if mask_seed is not None:
            mlm_mask[i, select_mask_positions(query.num_words, mask_seed + i, mask_ratio)] = True
        for k, sentence in enumerate(sample.queries):
            sentence_feats[i, k, :sentence.num_words] = sentence.features
            sentence_word_mask[i, k, :sentence.num_words] = True
            sentence_mask[i, k] = True
        current_index[i] = sample.current
        frame_spans[i] = (sample.gt_frame_span.l_s, sample.gt_frame_span.l_e)
        saliency[i, :frames.shape[0]] = _saliency(sample.gt_frame_span, frames.shape[0])
        durations[i] = sample.video.duration

        seconds = [(s.start, s.end) for s in query.spans]
        gt_seconds.append(seconds)
        gt_spans.append(torch.tensor(seconds, dtype=torch.float32) / sample.video.duration)
        video_ids.append(sample.video.id)
        qids.append(query.qid)

    return Batch(
        video_feats=torch.from_numpy(video_feats),
        video_mask=torch.from_numpy(video_mask),
        word_feats=torch.from_numpy(word_feats),
        word_mask=torch.from_numpy(word_mask),
        word_ids=torch.from_numpy(word_ids),
        mlm_mask=torch.from_numpy(mlm_mask),
        sentence_feats=torch.from_numpy(sentence_feats),
        sentence_word_mask=torch.from_numpy(sentence_word_mask),
        sentence_mask=torch.from_numpy(sentence_mask),
        current_index=torch.from_numpy(current_index),
        frame_spans=torch.from_numpy(frame_spans),
        saliency_labels=torch.from_numpy(saliency),
        durations=torch.from_numpy(durations),
        gt_spans=gt_spans,
        gt_seconds=gt_seconds,
        video_ids=video_ids,
        qids=qids,
    )
