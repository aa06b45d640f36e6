"""
Synthetic dataset generator: counts, determinism, round trip and construction
"""

import json
import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), 'src'))

from feature_data import load_dataset, load_vocabulary
from synth_data import SynthConfig, concept_tables, synth_generate


def small_config(**overrides):
    values = dict(num_videos=10, frames_per_video=12, segments_per_video=3, queries_per_video=3,
                  concept_vocab=20, concepts_per_segment=4, video_dim=16, text_dim=16)
    values.update(overrides)
    return SynthConfig(**values)


def test_query_count(tmp_path):
    result = synth_generate(small_config(), seed=0, out_dir=tmp_path)
    assert result['train_queries'] == 30
    lines = (tmp_path / 'train.jsonl').read_text().splitlines()
    assert len(lines) == 10
    assert sum(len(json.loads(line)['queries']) for line in lines) == 30
    assert len(load_vocabulary(tmp_path / 'vocab.txt')) == 20


def test_val_split_written(tmp_path):
    result = synth_generate(small_config(val_videos=2), seed=0, out_dir=tmp_path)
    assert result['val_queries'] == 6
    assert (tmp_path / 'val.jsonl').exists()


def test_regeneration_is_byte_identical(tmp_path):
    synth_generate(small_config(), seed=3, out_dir=tmp_path / 'one')
    synth_generate(small_config(), seed=3, out_dir=tmp_path / 'two')
    files = sorted(p.relative_to(tmp_path / 'one') for p in (tmp_path / 'one').rglob('*') if p.is_file())
    assert files
    for rel in files:
        assert (tmp_path / 'one' / rel).read_bytes() == (tmp_path / 'two' / rel).read_bytes()


def test_different_seed_changes_data(tmp_path):
    synth_generate(small_config(), seed=1, out_dir=tmp_path / 'one')
    synth_generate(small_config(), seed=2, out_dir=tmp_path / 'two')
    assert (tmp_path / 'one' / 'train.jsonl').read_bytes() != (tmp_path / 'two' / 'train.jsonl').read_bytes()


def test_load_round_trip(tmp_path):
    config = small_config(seconds_per_frame=0.5)
    synth_generate(config, seed=0, out_dir=tmp_path)
    samples = list(load_dataset(tmp_path / 'train.jsonl'))
    records = [json.loads(line) for line in (tmp_path / 'train.jsonl').read_text().splitlines()]
    assert len(samples) == 30
    by_qid = {q['qid']: (r, q) for r in records for q in r['queries']}
    for sample in samples:
        record, query = by_qid[sample.query.qid]
        assert sample.video.frames.shape == (12, 16)
        assert sample.video.duration == record['duration_s'] == 6.0
        assert [(s.start, s.end) for s in sample.query.spans] == [tuple(s) for s in query['spans']]
        start, end = query['spans'][0]
        assert (sample.gt_frame_span.l_s, sample.gt_frame_span.l_e) == (int(start / 0.5), int(end / 0.5) - 1)
        assert sample.query.tokens.tolist() == query['tokens']


def test_noise_free_words_point_at_their_segment(tmp_path):
    synth_generate(small_config(noise=0.0, withheld_fraction=0.0), seed=0, out_dir=tmp_path)
    for sample in load_dataset(tmp_path / 'train.jsonl'):
        frame_span = sample.gt_frame_span
        segment = sample.video.frames[frame_span.l_s:frame_span.l_e + 1].mean(axis=0)
        words = sample.query.features.mean(axis=0)
        cosine = float(segment @ words / (np.linalg.norm(segment) * np.linalg.norm(words)))
        assert cosine > 0.99


def test_withheld_concepts_shorten_queries(tmp_path):
    synth_generate(small_config(withheld_fraction=0.5), seed=0, out_dir=tmp_path)
    for sample in load_dataset(tmp_path / 'train.jsonl'):
        assert sample.query.num_words == 2


def test_concept_tables_unit_norm():
    video_table, text_table = concept_tables(small_config(text_dim=8), np.random.default_rng(0))
    assert np.allclose(np.linalg.norm(video_table, axis=1), 1.0)
    assert text_table.shape == (20, 8)


@pytest.mark.parametrize('overrides', [
    dict(concepts_per_segment=30),
    dict(segments_per_video=20),
    dict(queries_per_video=4),
])
def test_inconsistent_config_rejected_before_writing(tmp_path, overrides):
    with pytest.raises(ValueError):
        small_config(**overrides)
    assert not any(tmp_path.iterdir())
