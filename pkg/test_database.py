"""
Run registry (SQLite via SQLAlchemy)
"""

import os
import sys

import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), 'src'))

import database
from eval_metrics import evaluate
from spans import PredictionSet


@pytest.fixture
def registry(tmp_path):
    database.init_database(str(tmp_path / 'registry.db'))
    return database


def sample_report():
    predictions = [PredictionSet(qid='a', spans=[(0, 8)], scores=[0.9]),
                   PredictionSet(qid='b', spans=[(0, 5)], scores=[0.4])]
    return evaluate(predictions, {'a': [(0, 10)], 'b': [(0, 10)]})


def test_create_and_update_run(registry):
    run = registry.create_run({'command': 'train', 'config_hash': 'abc', 'seed': 3})
    assert run.id is not None and run.status == 'running'
    updated = registry.update_run(run.id, {'status': 'completed', 'steps': 12, 'final_loss': 0.5})
    assert updated.status == 'completed' and updated.steps == 12
    assert registry.get_run(run.id).final_loss == 0.5
    assert registry.update_run(9999, {'status': 'failed'}) is None


def test_filtering_runs(registry):
    registry.create_run({'command': 'train'})
    registry.create_run({'command': 'eval', 'status': 'completed'})
    registry.create_run({'command': 'train', 'status': 'aborted_nan'})
    assert len(registry.get_all_runs()) == 3
    assert [r.command for r in registry.get_all_runs(command='train')] == ['train', 'train']
    assert len(registry.get_all_runs(status='aborted_nan')) == 1
    assert registry.get_all_runs()[0].id > registry.get_all_runs()[-1].id


def test_record_eval(registry):
    run = registry.create_run({'command': 'eval'})
    stored = registry.record_eval(run.id, sample_report(), split='val', label='full')
    assert stored.r1_05 == 1.0 and stored.r1_07 == 0.5
    assert stored.miou == pytest.approx(0.65)
    assert 'per_query' not in stored.report
    assert registry.get_eval_results(run.id)[0].to_dict()['label'] == 'full'


def test_registry_stats(registry):
    run = registry.create_run({'command': 'train', 'status': 'completed'})
    registry.create_run({'command': 'train', 'status': 'aborted_nan'})
    registry.record_eval(run.id, sample_report())
    stats = registry.get_registry_stats()
    assert stats['total_runs'] == 2
    assert stats['completed'] == 1 and stats['aborted_nan'] == 1
    assert stats['evaluations'] == 1
    assert stats['best_map_avg'] == pytest.approx(sample_report().mAP_avg)


def test_run_to_dict(registry):
    run = registry.create_run({'command': 'probe', 'output_dir': '/tmp/x'})
    data = run.to_dict()
    assert data['command'] == 'probe' and data['output_dir'] == '/tmp/x'
