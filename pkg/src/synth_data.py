"""
Synthetic feature dataset generator

Each video is a run of segments; each segment carries a few concepts. Frame
features are the sum of the segment's concept vectors plus Gaussian noise,
word features are the concept vectors plus noise, and each query names its
segment's concepts with a fraction withheld, so a query describes its moment
only partially. Ground truth is the segment's span.
"""

import json
import logging
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from feature_data import QueryRecord, Sample, VideoFeatures, write_features
from spans import FrameIndexSpan, TemporalSpan

logger = logging.getLogger(__name__)


class SynthConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    num_videos: int = Field(default=10, ge=0, description="Training videos")
    val_videos: int = Field(default=0, ge=0, description="Validation videos (same concept table)")
    frames_per_video: int = Field(default=24, ge=1)
    segments_per_video: int = Field(default=3, ge=1)
    queries_per_video: int = Field(default=3, ge=1, description="K; each query grounds one segment")
    concept_vocab: int = Field(default=50, ge=1, description="Concept vocabulary size C")
    concepts_per_segment: int = Field(default=4, ge=1)
    video_dim: int = Field(default=64, ge=1)
    text_dim: int = Field(default=64, ge=1)
    noise: float = Field(default=0.1, ge=0.0, description="Gaussian noise sigma")
    withheld_fraction: float = Field(default=0.25, ge=0.0, lt=1.0)
    seconds_per_frame: float = Field(default=1.0, gt=0.0)

    @model_validator(mode="after")
    def _check_consistency(self):
        if self.concepts_per_segment > self.concept_vocab:
            raise ValueError(
                f"concepts_per_segment {self.concepts_per_segment} exceeds "
                f"concept_vocab {self.concept_vocab}"
            )
        if self.segments_per_video > self.frames_per_video:
            raise ValueError(
                f"{self.segments_per_video} segments cannot fit in {self.frames_per_video} frames"
            )
        if self.queries_per_video > self.segments_per_video:
            raise ValueError(
                f"queries_per_video {self.queries_per_video} exceeds "
                f"segments_per_video {self.segments_per_video}"
            )
        return self


def concept_tables(config: SynthConfig, rng: np.random.Generator):
    """Unit-norm concept vectors in video and text space; shared when dims match"""
    video_table = rng.standard_normal((config.concept_vocab, config.video_dim))
    video_table /= np.linalg.norm(video_table, axis=1, keepdims=True)
    if config.text_dim == config.video_dim:
        return video_table, video_table
    text_table = rng.standard_normal((config.concept_vocab, config.text_dim))
    text_table /= np.linalg.norm(text_table, axis=1, keepdims=True)
    return video_table, text_table


def _segment_bounds(config: SynthConfig, rng: np.random.Generator) -> List[tuple]:
    cuts = rng.choice(np.arange(1, config.frames_per_video), size=config.segments_per_video - 1,
                      replace=False) if config.segments_per_video > 1 else np.array([], dtype=int)
    edges = [0] + sorted(int(c) for c in cuts) + [config.frames_per_video]
    return [(edges[k], edges[k + 1]) for k in range(config.segments_per_video)]


def _segment_concepts(config: SynthConfig, rng: np.random.Generator) -> List[np.ndarray]:
    chosen, seen = [], set()
    for _ in range(config.segments_per_video):
        for _attempt in range(100):
            concepts = np.sort(rng.choice(config.concept_vocab, size=config.concepts_per_segment,
                                          replace=False))
            if tuple(concepts) not in seen:
                break
        seen.add(tuple(concepts))
        chosen.append(concepts)
    return chosen


def _write_split(config: SynthConfig, rng: np.random.Generator, tables, out_dir: Path,
                 split: str, num_videos: int) -> int:
    video_table, text_table = tables
    feature_dir = out_dir / 'features'
    manifest_path = out_dir / f'{split}.jsonl'
    num_queries = 0

    with open(manifest_path, 'w', encoding='utf-8') as manifest:
        for v in range(num_videos):
            video_id = f'{split}_v{v:05d}'
            bounds = _segment_bounds(config, rng)
            concepts = _segment_concepts(config, rng)

            frames = np.zeros((config.frames_per_video, config.video_dim))
            for (start, end), seg_concepts in zip(bounds, concepts):
                frames[start:end] = video_table[seg_concepts].sum(axis=0)
            frames += config.noise * rng.standard_normal(frames.shape)
            write_features(feature_dir / f'{video_id}.f32', frames)

            queries = []
            grounded = np.sort(rng.choice(config.segments_per_video, size=config.queries_per_video,
                                          replace=False))
            for q, segment in enumerate(grounded):
                seg_concepts = concepts[segment]
                withheld = int(np.floor(config.withheld_fraction * len(seg_concepts)))
                withheld = min(withheld, len(seg_concepts) - 1)
                kept = rng.permutation(seg_concepts)[:len(seg_concepts) - withheld]
                words = text_table[kept] + config.noise * rng.standard_normal((len(kept), config.text_dim))
                qid = f'{video_id}_q{q}'
                write_features(feature_dir / f'{qid}.f32', words)

                start, end = bounds[segment]
                queries.append({
                    'qid': qid,
                    'tokens': [int(c) for c in kept],
                    'token_strings': [f'concept_{int(c)}' for c in kept],
                    'feature_file': f'features/{qid}.f32',
                    'L_w': int(len(kept)),
                    'D_q': config.text_dim,
                    'spans': [[start * config.seconds_per_frame, end * config.seconds_per_frame]],
                })
                num_queries += 1

            record = {
                'video_id': video_id,
                'duration_s': config.frames_per_video * config.seconds_per_frame,
                'feature_file': f'features/{video_id}.f32',
                'L_v': config.frames_per_video,
                'D_v': config.video_dim,
                'queries': queries,
            }
            manifest.write(json.dumps(record) + '\n')

    logger.info(f"✅ Wrote {split}: {num_videos} videos, {num_queries} queries -> {manifest_path}")
    return num_queries


def synth_generate(config: SynthConfig, seed: int, out_dir) -> dict:
    """
    Generate the synthetic dataset on disk

    Writes train.jsonl, val.jsonl (when val_videos > 0), vocab.txt and
    features/. Regenerating with the same config and seed is byte-identical.

    Returns:
        dict with manifest paths and query counts
    """
    out_dir = Path(out_dir)
    (out_dir / 'features').mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    tables = concept_tables(config, rng)

    vocab = [f'concept_{c}' for c in range(config.concept_vocab)]
    (out_dir / 'vocab.txt').write_text('\n'.join(vocab) + '\n', encoding='utf-8')

    result = {
        'train': str(out_dir / 'train.jsonl'),
        'train_queries': _write_split(config, rng, tables, out_dir, 'train', config.num_videos),
        'vocab': str(out_dir / 'vocab.txt'),
    }
    if config.val_videos > 0:
        result['val'] = str(out_dir / 'val.jsonl')
        result['val_queries'] = _write_split(config, rng, tables, out_dir, 'val', config.val_videos)
    return result


def find_manifest(data_dir, split: str) -> Optional[Path]:
    path = Path(data_dir) / f'{split}.jsonl'
    return path if path.exists() else None


def random_samples(rng: np.random.Generator, num_videos: int = 2, queries_per_video: int = 2,
                   frame_range: Tuple[int, int] = (3, 6), word_range: Tuple[int, int] = (2, 5),
                   video_dim: int = 8, text_dim: int = 8, vocab_size: int = 7) -> List[Sample]:
    """
    Small in-memory samples with varied lengths (no files)

    Lengths are drawn from the inclusive ranges; one second per frame.
    """
    samples = []
    for v in range(num_videos):
        num_frames = int(rng.integers(frame_range[0], frame_range[1] + 1))
        video = VideoFeatures(id=f'mem_v{v}', frames=rng.standard_normal((num_frames, video_dim)).astype(np.float32),
                              duration=float(num_frames))
        queries = []
        for q in range(queries_per_video):
            num_words = int(rng.integers(word_range[0], word_range[1] + 1))
            start = float(rng.uniform(0, num_frames - 0.5))
            end = float(rng.uniform(start + 0.25, num_frames))
            queries.append(QueryRecord(
                qid=f'mem_v{v}_q{q}',
                tokens=rng.integers(0, vocab_size, size=num_words).astype(np.int64),
                features=rng.standard_normal((num_words, text_dim)).astype(np.float32),
                index=q,
                spans=(TemporalSpan.of(start, end),),
            ))
        queries = tuple(queries)
        for q, query in enumerate(queries):
            frame_span = FrameIndexSpan.from_seconds(query.spans[0], video.duration, num_frames)
            samples.append(Sample(video=video, queries=queries, current=q, gt_frame_span=frame_span))
    return samples
