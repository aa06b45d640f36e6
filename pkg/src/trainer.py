"""
Training, checkpointing, evaluation and ablation

One thread owns the parameters. Each step: make_batch (with masked words) ->
model forward -> compute_losses -> AdamW step with gradient-norm clipping.
Every loss component is appended to a JSON-lines metric log.
"""

import io
import json
import logging
import random
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple

import numpy as np
import pandas as pd
import torch

from eval_metrics import (EvalReport, evaluate as evaluate_predictions, ground_truth_from_samples,
                          write_predictions, write_report)
from feature_data import (Sample, dataset_vocab_size, load_dataset, load_vocabulary, make_batch)
from mesm_model import MesmModel, compute_losses
from run_config import ConfigError, RunConfig, config_hash
from span_decoder import NonFiniteLossError, to_prediction_sets
from spans import PredictionSet

logger = logging.getLogger(__name__)

METRIC_KEYS = ('l_fw', 'l_ss', 'l_enc', 'l_vmr', 'total')


@dataclass
class TrainResult:
    model: MesmModel
    optimizer: torch.optim.Optimizer
    step: int
    history: List[dict] = field(default_factory=list)
    eval_history: List[dict] = field(default_factory=list)
    best_report: Optional[EvalReport] = None
    checkpoint_path: Optional[Path] = None
    best_checkpoint_path: Optional[Path] = None
    trained_parameters: Set[str] = field(default_factory=set)


# ============================================================================
# SETUP
# ============================================================================

def set_seed(seed: int):
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)


def resolve_device(name: str) -> torch.device:
    if name in ('gpu', 'cuda'):
        if not torch.cuda.is_available():
            logger.warning("⚠️ GPU requested but CUDA is unavailable, using CPU")
            return torch.device('cpu')
        return torch.device('cuda')
    return torch.device(name)


def load_samples(data_dir, split: str = 'train') -> Tuple[List[Sample], Path]:
    """Load <data_dir>/<split>.jsonl, or a manifest path given directly"""
    path = Path(data_dir)
    manifest = path if path.is_file() else path / f'{split}.jsonl'
    samples = list(load_dataset(manifest))
    logger.info(f"✅ Loaded {len(samples)} queries from {manifest}")
    return samples, manifest


def fill_dimensions(config: RunConfig, samples: Sequence[Sample],
                    vocab_path: Optional[Path] = None) -> RunConfig:
    """Copy D_v, D_q and N_vocab from the dataset, or check them against a filled config"""
    if not samples:
        raise ValueError("dataset is empty")
    vocab = load_vocabulary(vocab_path) if vocab_path and Path(vocab_path).exists() else None
    found = {
        'video_dim': samples[0].video.frames.shape[1],
        'text_dim': samples[0].query.features.shape[1],
    }
    for sample in samples:
        dims = (sample.video.frames.shape[1], sample.query.features.shape[1])
        if dims != (found['video_dim'], found['text_dim']):
            raise ValueError(f"video {sample.video.id}: feature dims {dims} differ from "
                             f"{(found['video_dim'], found['text_dim'])}")
    vocab_size = dataset_vocab_size(samples, vocab)

    updates = {}
    for key, value in found.items():
        current = getattr(config, key)
        if current is None:
            updates[key] = value
        elif current != value:
            raise ValueError(f"config {key}={current} but dataset has {value}")
    if config.vocab_size is None:
        updates['vocab_size'] = vocab_size
    elif config.vocab_size < vocab_size:
        raise ValueError(f"config vocab_size={config.vocab_size} but dataset needs {vocab_size}")
    return config.model_copy(update=updates) if updates else config


def build_model(config: RunConfig, device='cpu') -> MesmModel:
    torch.manual_seed(config.seed)
    model = MesmModel(config).to(device)
    total = sum(p.numel() for p in model.parameters())
    logger.info(f"Model built: {total:,} parameters (hidden_dim={config.hidden_dim})")
    return model


def build_optimizer(model: MesmModel, config: RunConfig) -> torch.optim.Optimizer:
    return torch.optim.AdamW(model.parameters(), lr=config.lr, weight_decay=config.weight_decay,
                             betas=(config.adam_beta1, config.adam_beta2))


# ============================================================================
# CHECKPOINTS
# ============================================================================

# save -> load -> save reproduces the same bytes
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)
CHECKPOINT_FORMAT = 1


def _encode_tree(value, tensors: Dict[str, np.ndarray]):
    """JSON-able tree; tensors move to numbered archive members in sorted-key order"""
    if isinstance(value, torch.Tensor):
        member = f"tensors/{len(tensors):05d}.npy"
        tensors[member] = value.detach().cpu().numpy()
        return {'__tensor__': member}
    if isinstance(value, dict):
        if all(isinstance(k, str) for k in value):
            return {k: _encode_tree(value[k], tensors) for k in sorted(value)}
        return {'__items__': [[k, _encode_tree(value[k], tensors)] for k in sorted(value)]}
    if isinstance(value, tuple):
        return {'__tuple__': [_encode_tree(v, tensors) for v in value]}
    if isinstance(value, list):
        return [_encode_tree(v, tensors) for v in value]
    return value


def _decode_tree(value, tensors: Dict[str, torch.Tensor]):
    if isinstance(value, list):
        return [_decode_tree(v, tensors) for v in value]
    if not isinstance(value, dict):
        return value
    if '__tensor__' in value:
        return tensors[value['__tensor__']]
    if '__items__' in value:
        return {k: _decode_tree(v, tensors) for k, v in value['__items__']}
    if '__tuple__' in value:
        return tuple(_decode_tree(v, tensors) for v in value['__tuple__'])
    return {k: _decode_tree(v, tensors) for k, v in value.items()}


def _write_member(archive: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_ZIP_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    archive.writestr(info, data)


def write_checkpoint_archive(path, state: Dict) -> Path:
    """Write a state tree as state.json plus one .npy member per tensor"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays: Dict[str, np.ndarray] = {}
    tree = _encode_tree(state, arrays)
    header = json.dumps({'format': CHECKPOINT_FORMAT, 'state': tree}, sort_keys=True, indent=1)
    with zipfile.ZipFile(path, 'w') as archive:
        _write_member(archive, 'state.json', header.encode('utf-8'))
        for member, array in arrays.items():
            buffer = io.BytesIO()
            np.save(buffer, np.ascontiguousarray(array), allow_pickle=False)
            _write_member(archive, member, buffer.getvalue())
    return path


def read_checkpoint_archive(path, device='cpu') -> Dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        with zipfile.ZipFile(path) as archive:
            header = json.loads(archive.read('state.json'))
            tensors = {
                name: torch.from_numpy(np.array(np.load(io.BytesIO(archive.read(name)),
                                                        allow_pickle=False))).to(device)
                for name in archive.namelist() if name.startswith('tensors/')
            }
    except (zipfile.BadZipFile, KeyError, ValueError) as e:
        raise ConfigError(f"{path}: not a readable checkpoint ({e})") from e
    if header.get('format') != CHECKPOINT_FORMAT:
        raise ConfigError(f"{path}: unsupported checkpoint format {header.get('format')!r}")
    return _decode_tree(header['state'], tensors)


def save_checkpoint(path, model: MesmModel, optimizer: Optional[torch.optim.Optimizer], step: int,
                    config: RunConfig) -> Path:
    """Parameters by canonical name, optimizer state, step, config and its hash"""
    state = {
        'model': model.state_dict(),
        'optimizer': optimizer.state_dict() if optimizer is not None else None,
        'step': step,
        'config': config.model_dump(mode='json'),
        'config_hash': config_hash(config),
    }
    path = write_checkpoint_archive(path, state)
    logger.info(f"✅ Checkpoint saved: {path} (step {step})")
    return path


def load_checkpoint(path, device='cpu') -> Tuple[MesmModel, torch.optim.Optimizer, int, RunConfig]:
    path = Path(path)
    state = read_checkpoint_archive(path, device)
    config = RunConfig.model_validate(state['config'])
    if config_hash(config) != state['config_hash']:
        raise ConfigError(f"{path}: stored config does not match its hash")
    model = MesmModel(config).to(device)
    model.load_state_dict(state['model'])
    optimizer = build_optimizer(model, config)
    if state.get('optimizer') is not None:
        optimizer.load_state_dict(state['optimizer'])
    return model, optimizer, int(state['step']), config


# ============================================================================
# TRAINING
# ============================================================================

def _epoch_batches(samples: Sequence[Sample], batch_size: int, seed: int, epoch: int) -> Iterable[List[Sample]]:
    order = np.random.default_rng(seed + epoch).permutation(len(samples))
    for begin in range(0, len(order), batch_size):
        yield [samples[k] for k in order[begin:begin + batch_size]]


def _dump_nan_batch(out_dir: Optional[Path], step: int, error: NonFiniteLossError, batch) -> None:
    logger.error(f"❌ Step {step}: {error}; batch qids {batch.qids}")
    if out_dir is None:
        return
    payload = {'step': step, 'component': error.component,
               'video_ids': batch.video_ids, 'qids': batch.qids}
    (out_dir / 'nan_batch.json').write_text(json.dumps(payload, indent=2) + "\n")


def train(config: RunConfig, train_samples: Sequence[Sample],
          val_samples: Optional[Sequence[Sample]] = None, out_dir=None,
          device='cpu', audit_gradients: bool = False) -> TrainResult:
    """
    Optimize the full loss on train_samples

    Args:
        config: filled RunConfig (see fill_dimensions)
        val_samples: evaluated every eval_every_epochs epochs; the best
            mAP_avg checkpoint is kept as best.pt
        out_dir: receives metrics.jsonl, checkpoint.pt, best.pt, eval files
        audit_gradients: record every parameter that ever got a nonzero gradient

    Raises:
        NonFiniteLossError after dumping the offending batch ids
    """
    if not train_samples:
        raise ValueError("training split is empty")
    device = torch.device(device)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        metric_log = open(out_dir / 'metrics.jsonl', 'w', encoding='utf-8')
    else:
        metric_log = None

    set_seed(config.seed)
    model = build_model(config, device)
    optimizer = build_optimizer(model, config)
    result = TrainResult(model=model, optimizer=optimizer, step=0)
    best_score = -1.0
    step = 0

    try:
        for epoch in range(config.epochs):
            model.train()
            for chunk in _epoch_batches(train_samples, config.batch_size, config.seed, epoch):
                batch = make_batch(chunk, config.max_frames, config.max_words,
                                   mask_seed=config.seed + step * config.batch_size,
                                   mask_ratio=config.mask_ratio).to(device)
                try:
                    losses = compute_losses(model(batch), batch, config)
                except NonFiniteLossError as e:
                    _dump_nan_batch(out_dir, step, e, batch)
                    raise

                optimizer.zero_grad()
                losses['total'].backward()
                if config.grad_clip > 0:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
                if audit_gradients:
                    for name, param in model.named_parameters():
                        if param.grad is not None and bool((param.grad != 0).any()):
                            result.trained_parameters.add(name)
                optimizer.step()
                step += 1

                record = {'step': step}
                record.update({k: float(losses[k].detach()) for k in METRIC_KEYS})
                record['lr'] = optimizer.param_groups[0]['lr']
                result.history.append(record)
                if metric_log is not None:
                    metric_log.write(json.dumps(record) + "\n")
                logger.debug(f"step {step}: " + ", ".join(f"{k}={record[k]:.4f}" for k in METRIC_KEYS))

                if config.max_steps is not None and step >= config.max_steps:
                    break

            last = result.history[-1]
            logger.info(f"Epoch {epoch + 1}/{config.epochs}: step {step}, total={last['total']:.4f}")

            if val_samples and (epoch + 1) % config.eval_every_epochs == 0:
                report = evaluate_model(model, val_samples, config, device)
                result.eval_history.append({'epoch': epoch + 1, 'step': step, **report.headline()})
                logger.info(f"   val mAP_avg={report.mAP_avg:.4f} R1@0.7={report.recall.get('R1@0.7', 0):.4f}")
                if report.mAP_avg > best_score:
                    best_score = report.mAP_avg
                    result.best_report = report
                    if out_dir is not None:
                        result.best_checkpoint_path = save_checkpoint(
                            out_dir / 'best.pt', model, optimizer, step, config)

            if config.max_steps is not None and step >= config.max_steps:
                break
    finally:
        if metric_log is not None:
            metric_log.close()

    result.step = step
    if out_dir is not None:
        result.checkpoint_path = save_checkpoint(out_dir / 'checkpoint.pt', model, optimizer, step, config)
    logger.info(f"✅ Training finished after {step} steps")
    return result


def read_metric_log(path) -> pd.DataFrame:
    return pd.read_json(path, lines=True)


# ============================================================================
# EVALUATION
# ============================================================================

@torch.no_grad()
def predict(model: MesmModel, samples: Sequence[Sample], config: RunConfig,
            device='cpu') -> List[PredictionSet]:
    """Deterministic inference: dropout off, no word masking"""
    was_training = model.training
    model.eval()
    predictions = []
    for begin in range(0, len(samples), config.batch_size):
        chunk = samples[begin:begin + config.batch_size]
        batch = make_batch(chunk, config.max_frames, config.max_words).to(device)
        output = model(batch)
        predictions.extend(to_prediction_sets(output.decoder, batch.durations, batch.qids))
    model.train(was_training)
    return predictions


def check_compatible(config: RunConfig, samples: Sequence[Sample]):
    if not samples:
        raise ValueError("evaluation split is empty")
    sample = samples[0]
    dims = (sample.video.frames.shape[1], sample.query.features.shape[1])
    if dims != (config.video_dim, config.text_dim):
        raise ValueError(f"checkpoint expects feature dims {(config.video_dim, config.text_dim)}, "
                         f"dataset has {dims}")
    max_token = max(int(q.tokens.max()) for s in samples for q in s.queries)
    if max_token >= config.vocab_size:
        raise ValueError(f"token id {max_token} outside checkpoint vocabulary of {config.vocab_size}")


def evaluate_model(model: MesmModel, samples: Sequence[Sample], config: RunConfig,
                   device='cpu', out_dir=None) -> EvalReport:
    """
    Evaluate a loaded model; writes predictions.jsonl and eval_report.json into out_dir

    Raises:
        ValueError for an empty split or dims the model cannot read
    """
    check_compatible(config, samples)
    predictions = predict(model, samples, config, device)
    report = evaluate_predictions(predictions, ground_truth_from_samples(samples))
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_predictions(predictions, out_dir / 'predictions.jsonl')
        write_report(report, out_dir / 'eval_report.json')
    return report


def evaluate(checkpoint_path, samples: Sequence[Sample], out_dir=None, device='cpu') -> EvalReport:
    model, _, _, config = load_checkpoint(checkpoint_path, device)
    return evaluate_model(model, samples, config, device, out_dir)


# ============================================================================
# ABLATION
# ============================================================================

SWITCH_FLAGS = ('fw_off', 'ss_off', 'enc_loss_off', 'mlm_off')
SWITCH_SIZES = ('ss_layers', 'fw_layers', 'ma_layers')

# row name -> switches; mirrors the module-ablation table
ABLATION_ROWS: Dict[str, Tuple[str, ...]] = {
    'baseline': ('fw_off', 'ss_off', 'enc_loss_off'),
    '+FW': ('ss_off', 'enc_loss_off'),
    '+SS': ('fw_off', 'enc_loss_off'),
    '+L_enc': ('fw_off', 'ss_off'),
    'full': (),
    'full w/o MLM': ('mlm_off',),
    'MA x4, no FW': ('fw_off', 'ma_layers=4'),
}


def ablate(config: RunConfig, switches: Iterable[str]) -> RunConfig:
    """
    Return a copy of config with modules/losses disabled or resized

    Raises:
        ConfigError on an unknown switch or bad layer count
    """
    updates = {}
    for switch in switches:
        switch = switch.strip()
        if switch == 'fw_off':
            updates['fw_enabled'] = False
        elif switch == 'ss_off':
            updates['ss_enabled'] = False
        elif switch == 'enc_loss_off':
            updates['loss_enc'] = 0.0
        elif switch == 'mlm_off':
            updates['mlm_enabled'] = False
        elif '=' in switch and switch.split('=', 1)[0] in SWITCH_SIZES:
            key, raw = switch.split('=', 1)
            try:
                value = int(raw)
            except ValueError:
                raise ConfigError(f"switch {switch!r} needs an integer layer count")
            if value < 0:
                raise ConfigError(f"switch {switch!r} needs a non-negative layer count")
            updates[key] = value
        else:
            raise ConfigError(f"unknown ablation switch {switch!r}; expected one of "
                              f"{', '.join(SWITCH_FLAGS)} or {'/'.join(SWITCH_SIZES)}=n")
    return config.model_copy(update=updates)


def describe_switches(config: RunConfig) -> Dict[str, str]:
    return {
        'FW': '✓' if config.fw_enabled else '',
        'SS': '✓' if config.ss_enabled else '',
        'L_enc': '✓' if config.loss_enc > 0 else '',
        'MLM': '✓' if config.fw_enabled and config.mlm_enabled else '',
    }


def run_ablation_matrix(config: RunConfig, train_samples: Sequence[Sample],
                        eval_samples: Sequence[Sample], rows: Optional[Dict[str, Sequence[str]]] = None,
                        out_dir=None, device='cpu') -> pd.DataFrame:
    """Train and evaluate every row; one DataFrame row per configuration"""
    rows = rows if rows is not None else ABLATION_ROWS
    table = []
    for name, switches in rows.items():
        row_config = ablate(config, switches)
        row_dir = Path(out_dir) / _slug(name) if out_dir is not None else None
        logger.info(f"Ablation row '{name}': {', '.join(switches) or 'no switches'}")
        result = train(row_config, train_samples, None, row_dir, device)
        report = evaluate_model(result.model, eval_samples, row_config, device, row_dir)
        table.append({'row': name, **describe_switches(row_config), **report.headline(),
                      'config_hash': config_hash(row_config)})
    return pd.DataFrame(table)


def _slug(name: str) -> str:
    return ''.join(c if c.isalnum() else '_' for c in name).strip('_').lower() or 'row'
