"""
MESM moment retrieval command line

Subcommands:
    synth     generate a synthetic feature dataset
    train     train a model, keep checkpoints and the metric log
    eval      evaluate a checkpoint on a split
    ablate    train/evaluate the module-ablation rows and print the grid
    probe     subspace-similarity probe of one query
    selftest  property / oracle / gradient suite

Exit codes: 0 success, 1 validation error, 2 non-finite loss abort.
"""

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path
from typing import List, Optional

sys.path.insert(0, os.path.join(os.path.dirname(__file__), 'src'))

import pandas as pd
import torch

import database
import trainer
from eval_metrics import format_report, write_report
from feature_data import DatasetLoadError, dataset_hash, make_batch
from plots import plot_loss_curves, plot_subspace_curves
from run_config import (DEVICE, LOG_LEVEL, OUTPUT_DIR, ConfigError, RunConfig, build_config,
                        config_hash, write_config_file)
from selftest import run_selftest
from span_decoder import NonFiniteLossError
from subspace import format_curves, probe_features, probe_report
from synth_data import SynthConfig, synth_generate

logger = logging.getLogger('cli')

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_NAN = 2


class UsageError(Exception):
    """Bad command line"""


class ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# ============================================================================
# HELPERS
# ============================================================================

def write_run_manifest(out_dir: Path, command: str, config_digest: str,
                       data_digest: Optional[str], seed: int) -> Path:
    """Inputs of a run; no timestamps so identical inputs give identical bytes"""
    manifest = {'command': command, 'config_hash': config_digest,
                'dataset_hash': data_digest, 'seed': seed}
    path = out_dir / 'run_manifest.json'
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _run_config(args) -> RunConfig:
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    return build_config(RunConfig, args.config, overrides)


def _out_dir(args, default_name: str) -> Path:
    out = Path(args.out) if args.out else Path(OUTPUT_DIR) / default_name
    out.mkdir(parents=True, exist_ok=True)
    return out


def _registry(args):
    database.init_database(args.registry)
    return database


def _pick_split(data_dir: str, split: Optional[str]) -> str:
    if split:
        return split
    return 'val' if (Path(data_dir) / 'val.jsonl').exists() else 'train'


# ============================================================================
# COMMANDS
# ============================================================================

def cmd_synth(args) -> int:
    config = build_config(SynthConfig, args.config, args.set or [])
    seed = args.seed if args.seed is not None else 0
    out = _out_dir(args, 'synth')
    result = synth_generate(config, seed, out)
    write_config_file(config, out / 'synth_config.txt')
    digest = hashlib.sha256(json.dumps(config.model_dump(), sort_keys=True).encode()).hexdigest()
    write_run_manifest(out, 'synth', digest, dataset_hash(result['train']), seed)
    print(f"✅ {result['train_queries']} train queries"
          + (f", {result['val_queries']} val queries" if 'val' in result else "")
          + f" written to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = _run_config(args)
    samples, manifest = trainer.load_samples(args.data, 'train')
    val_manifest = Path(args.data) / 'val.jsonl'
    val_samples = trainer.load_samples(args.data, 'val')[0] if val_manifest.exists() else None
    config = trainer.fill_dimensions(config, samples, Path(args.data) / 'vocab.txt')

    out = _out_dir(args, 'train')
    write_config_file(config, out / 'config.txt')
    data_digest = dataset_hash(manifest)
    write_run_manifest(out, 'train', config_hash(config), data_digest, config.seed)

    registry = _registry(args)
    run = registry.create_run({'command': 'train', 'config_hash': config_hash(config),
                               'dataset_hash': data_digest, 'seed': config.seed, 'output_dir': str(out)})
    device = trainer.resolve_device(args.device)
    try:
        result = trainer.train(config, samples, val_samples, out, device)
    except NonFiniteLossError as e:
        registry.update_run(run.id, {'status': 'aborted_nan', 'error_message': str(e)})
        raise
    except Exception as e:
        registry.update_run(run.id, {'status': 'failed', 'error_message': str(e)})
        raise

    plot_loss_curves(trainer.read_metric_log(out / 'metrics.jsonl'), out / 'loss_curves.png')
    registry.update_run(run.id, {'status': 'completed', 'steps': result.step,
                                 'final_loss': result.history[-1]['total'] if result.history else None})
    if result.best_report is not None:
        write_report(result.best_report, out / 'best_val_report.json')
        registry.record_eval(run.id, result.best_report, split='val')
        print(format_report(result.best_report))
    print(f"✅ Trained {result.step} steps; checkpoint {result.checkpoint_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    if not args.checkpoint:
        raise UsageError("eval needs --checkpoint")
    split = _pick_split(args.data, args.split)
    samples, manifest = trainer.load_samples(args.data, split)
    out = _out_dir(args, 'eval')
    device = trainer.resolve_device(args.device)
    model, _, _, config = trainer.load_checkpoint(args.checkpoint, device)
    report = trainer.evaluate_model(model, samples, config, device, out)

    data_digest = dataset_hash(manifest)
    write_run_manifest(out, 'eval', config_hash(config), data_digest, config.seed)
    registry = _registry(args)
    run = registry.create_run({'command': 'eval', 'config_hash': config_hash(config),
                               'dataset_hash': data_digest, 'seed': config.seed,
                               'output_dir': str(out), 'status': 'completed'})
    registry.record_eval(run.id, report, split=split)
    print(format_report(report))
    return EXIT_OK


def cmd_ablate(args) -> int:
    config = _run_config(args)
    samples, manifest = trainer.load_samples(args.data, 'train')
    split = _pick_split(args.data, args.split)
    eval_samples = samples if split == 'train' else trainer.load_samples(args.data, split)[0]
    config = trainer.fill_dimensions(config, samples, Path(args.data) / 'vocab.txt')

    rows = trainer.ABLATION_ROWS
    if args.rows:
        wanted = [r.strip() for r in args.rows.split(',') if r.strip()]
        unknown = [r for r in wanted if r not in rows]
        if unknown:
            raise ConfigError(f"unknown ablation rows: {', '.join(unknown)}; "
                              f"available: {', '.join(rows)}")
        rows = {r: rows[r] for r in wanted}
    if args.switches:
        rows = {args.switches: tuple(s for s in args.switches.split(',') if s.strip())}

    out = _out_dir(args, 'ablate')
    data_digest = dataset_hash(manifest)
    write_run_manifest(out, 'ablate', config_hash(config), data_digest, config.seed)
    registry = _registry(args)
    run = registry.create_run({'command': 'ablate', 'config_hash': config_hash(config),
                               'dataset_hash': data_digest, 'seed': config.seed, 'output_dir': str(out)})
    device = trainer.resolve_device(args.device)
    try:
        table = trainer.run_ablation_matrix(config, samples, eval_samples, rows, out, device)
    except NonFiniteLossError as e:
        registry.update_run(run.id, {'status': 'aborted_nan', 'error_message': str(e)})
        raise
    except Exception as e:
        registry.update_run(run.id, {'status': 'failed', 'error_message': str(e)})
        raise

    table.to_csv(out / 'ablation.csv', index=False)
    registry.update_run(run.id, {'status': 'completed'})
    shown = table.drop(columns=['config_hash'])
    metric_columns = [c for c in shown.columns if c.startswith(('R1@', 'mIoU', 'mAP'))]
    shown[metric_columns] = (shown[metric_columns] * 100).round(2)
    print(shown.to_string(index=False))
    return EXIT_OK


def cmd_probe(args) -> int:
    if not args.checkpoint:
        raise UsageError("probe needs --checkpoint")
    device = trainer.resolve_device(args.device)
    model, _, _, config = trainer.load_checkpoint(args.checkpoint, device)
    samples, manifest = trainer.load_samples(args.data, _pick_split(args.data, args.split))
    trainer.check_compatible(config, samples)

    if args.sample is None:
        sample = samples[0]
    else:
        matches = [s for s in samples if s.query.qid == args.sample]
        if not matches:
            raise ValueError(f"query {args.sample} not found in {manifest}")
        sample = matches[0]

    model.eval()
    batch = make_batch([sample], config.max_frames, config.max_words).to(device)
    with torch.no_grad():
        output = model(batch)
    report = probe_report(probe_features(output, batch, 0), sample.query.qid, center=args.center)

    out = _out_dir(args, 'probe')
    write_run_manifest(out, 'probe', config_hash(config), dataset_hash(manifest), config.seed)
    (out / 'subspace.json').write_text(report.model_dump_json(indent=2) + "\n")
    report.to_frame().to_csv(out / 'subspace.csv', index=False)
    plot_subspace_curves(report, out / 'subspace.png')
    print(format_curves(report))
    return EXIT_OK


def cmd_selftest(args) -> int:
    results = run_selftest()
    out = _out_dir(args, 'selftest')
    suite_digest = hashlib.sha256(json.dumps([r.name for r in results]).encode()).hexdigest()
    write_run_manifest(out, 'selftest', suite_digest, None, 0)
    pd.DataFrame([asdict(r) for r in results]).to_csv(out / 'selftest.csv', index=False)
    print("=" * 70)
    for r in results:
        status = "✅ PASS" if r.passed else "❌ FAIL"
        print(f"{status}  {r.name:<22} {r.seconds:7.2f}s  {r.detail}")
    print("=" * 70)
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return EXIT_OK if failed == 0 else EXIT_INVALID


COMMANDS = {
    'synth': cmd_synth,
    'train': cmd_train,
    'eval': cmd_eval,
    'ablate': cmd_ablate,
    'probe': cmd_probe,
    'selftest': cmd_selftest,
}


# ============================================================================
# ENTRY POINT
# ============================================================================

def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog='cli.py', description='MESM video moment retrieval')
    parser.add_argument('--log-level', default=LOG_LEVEL)
    sub = parser.add_subparsers(dest='command', parser_class=ArgumentParser)

    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument('--config', help='key = value config file')
        p.add_argument('--set', action='append', metavar='KEY=VALUE', help='override a config field')
        p.add_argument('--out', help='output directory')
        p.add_argument('--seed', type=int)
        p.add_argument('--device', choices=['cpu', 'gpu'], default='gpu' if DEVICE in ('gpu', 'cuda') else 'cpu')
        p.add_argument('--registry', help='SQLite run registry path')
        if name in ('train', 'eval', 'ablate', 'probe'):
            p.add_argument('--data', required=True, help='dataset directory with train.jsonl')
        if name in ('eval', 'ablate', 'probe'):
            p.add_argument('--split', help='train or val (default: val when present)')
        if name in ('eval', 'probe'):
            p.add_argument('--checkpoint')
        if name == 'ablate':
            p.add_argument('--rows', help='comma-separated ablation row names')
            p.add_argument('--switches', help='comma-separated switches for a single custom row')
        if name == 'probe':
            p.add_argument('--sample', help='qid to probe (default: first query)')
            p.add_argument('--center', action='store_true', help='mean-center before the SVD')
    return parser


def run(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"❌ {e}", file=sys.stderr)
        return EXIT_INVALID
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_INVALID

    logging.basicConfig(
        level=getattr(logging, str(args.log_level).upper(), logging.INFO),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )

    try:
        return COMMANDS[args.command](args)
    except NonFiniteLossError as e:
        logger.error(f"❌ Aborted: {e}")
        return EXIT_NAN
    except (UsageError, ConfigError, DatasetLoadError, ValueError, FileNotFoundError) as e:
        logger.error(f"❌ {e}")
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(run())
