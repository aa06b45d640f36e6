"""
Property, oracle and gradient checks run by `cli.py selftest`

Each check returns a short detail string and raises AssertionError on failure.
"""

import itertools
import logging
import math
import time
from dataclasses import dataclass
from typing import Callable, List, Tuple

import numpy as np
import torch
from torch.func import functional_call

from backbone import loss_enc
from eval_metrics import MAP_THRESHOLDS, evaluate, map_at, recall_at
from eval_oracle import oracle_evaluate
from feature_data import make_batch
from fw_mesm import FrameWordMesm, loss_fw, mlm_log_probs
from matcher import match, solve_assignment
from mesm_model import MesmModel, compute_losses
from run_config import RunConfig
from span_decoder import loss_vmr_single
from spans import PredictionSet, TemporalSpan, giou_1d, iou_1d, span_cw_to_se, span_se_to_cw
from ss_mesm import loss_ss, multi_positive_nce
from subspace import subspace_similarity
from synth_data import random_samples

logger = logging.getLogger(__name__)

GRID = 10_000
GRADCHECK_EPS = 1e-6


@dataclass
class CheckResult:
    name: str
    passed: bool
    seconds: float
    detail: str = ''


def micro_config(**overrides) -> RunConfig:
    """D=8, every layer count 1, N_span=3, dropout off"""
    values = dict(hidden_dim=8, num_heads=2, dropout=0.0, fw_layers=1, ss_layers=1, ma_layers=1,
                  enc_layers=1, dec_layers=1, num_spans=3, video_dim=8, text_dim=8, vocab_size=7,
                  batch_size=4, seed=7)
    values.update(overrides)
    return RunConfig(**values)


# ============================================================================
# GEOMETRY
# ============================================================================

def check_geometry(pairs: int = 1000, seed: int = 0) -> str:
    rng = np.random.default_rng(seed)
    cells = np.arange(GRID)
    worst = 0.0
    for _ in range(pairs):
        a = np.sort(rng.choice(GRID + 1, size=2, replace=False))
        b = np.sort(rng.choice(GRID + 1, size=2, replace=False))
        in_a = (cells >= a[0]) & (cells < a[1])
        in_b = (cells >= b[0]) & (cells < b[1])
        inter = np.count_nonzero(in_a & in_b)
        union = np.count_nonzero(in_a | in_b)
        enclosing = max(a[1], b[1]) - min(a[0], b[0])
        raster_iou = inter / union
        raster_giou = raster_iou - (enclosing - union) / enclosing

        span_a = TemporalSpan.of(a[0] / GRID, a[1] / GRID)
        span_b = TemporalSpan.of(b[0] / GRID, b[1] / GRID)
        worst = max(worst, abs(iou_1d(span_a, span_b) - raster_iou),
                    abs(giou_1d(span_a, span_b) - raster_giou))
    assert worst < 2e-4, f"max deviation from raster oracle {worst:.2e}"
    return f"{pairs} pairs, max deviation {worst:.1e}"


# ============================================================================
# GRADIENTS
# ============================================================================

def _gradcheck(fn, inputs, atol: float, rtol: float) -> bool:
    return torch.autograd.gradcheck(fn, inputs, eps=GRADCHECK_EPS, atol=atol, rtol=rtol, raise_exception=True)


def _assert_clear_of_kinks(pred_cw: torch.Tensor, gt_se: torch.Tensor, margin: float) -> None:
    """L1 and GIoU are piecewise; finite differences must not straddle a breakpoint"""
    pred_se = span_cw_to_se(pred_cw).reshape(-1)
    gaps = [(pred_se[:, None] - gt_se.reshape(-1)[None, :]).abs().min(),
            (pred_cw.reshape(-1, 2)[:, None, :] - span_se_to_cw(gt_se)[None, :, :]).abs().min()]
    closest = float(min(gaps))
    if closest <= margin:
        raise AssertionError(f"gradient fixture within {closest:.2e} of a breakpoint")


def check_loss_gradients(seed: int = 0) -> str:
    """Per-loss gradient checks in double precision"""
    gen = torch.Generator().manual_seed(seed)
    dt = torch.float64

    # masked-word loss wrt logits
    logits = torch.randn(2, 4, 7, generator=gen, dtype=dt, requires_grad=True)
    ids = torch.randint(0, 7, (2, 4), generator=gen)
    mask = torch.tensor([[True, True, True, False], [True, True, True, True]])
    _gradcheck(lambda x: loss_fw(mlm_log_probs(x), ids, mask), (logits,), 1e-6, 1e-4)

    # contrastive loss wrt query tokens and segments
    tokens = torch.randn(3, 4, 5, generator=gen, dtype=dt, requires_grad=True)
    segments = torch.randn(3, 5, generator=gen, dtype=dt, requires_grad=True)
    token_mask = torch.tensor([[True] * 4, [True, True, True, False], [True, True, False, False]])
    positive = torch.eye(3, dtype=torch.bool)
    positive[0, 1] = positive[1, 0] = True
    _gradcheck(lambda t, s: loss_ss(t, token_mask, s, positive, tau=0.5), (tokens, segments), 1e-6, 1e-4)

    # saliency loss wrt scores
    scores = torch.rand(2, 5, generator=gen, dtype=dt).mul(0.8).add(0.1).requires_grad_()
    labels = torch.tensor([[0, 1, 1, 0, 0], [1, 1, 0, 0, 0]], dtype=dt)
    frame_mask = torch.tensor([[True] * 5, [True, True, True, False, False]])
    _gradcheck(lambda s: loss_enc(s, labels, frame_mask), (scores,), 1e-6, 1e-4)

    # moment-retrieval loss wrt spans and logits, assignment held fixed
    cw = torch.tensor([[[0.3, 0.2], [0.6, 0.3], [0.5, 0.5]]], dtype=dt, requires_grad=True)
    span_logits = torch.randn(1, 3, generator=gen, dtype=dt, requires_grad=True)
    gt = [torch.tensor([[0.15, 0.47]], dtype=dt)]
    _assert_clear_of_kinks(cw.detach(), gt[0], 10 * GRADCHECK_EPS)
    assignments = match(cw.detach(), span_logits.detach(), gt)
    _gradcheck(lambda c, l: loss_vmr_single(c, l, gt, assignments, 10.0, 1.0, 4.0, 0.1)['total'],
               (cw, span_logits), 1e-6, 1e-4)
    return "L_fw, L_ss, L_enc, L_vmr within 1e-4"


def micro_batch(config: RunConfig, seed: int = 0, num_videos: int = 2, queries_per_video: int = 2):
    rng = np.random.default_rng(seed)
    samples = random_samples(rng, num_videos, queries_per_video, video_dim=config.video_dim,
                             text_dim=config.text_dim, vocab_size=config.vocab_size)
    return make_batch(samples, mask_seed=seed, mask_ratio=config.mask_ratio)


def check_model_gradient(seed: int = 0) -> str:
    """total_loss wrt a slice of every module's parameters, end to end"""
    config = micro_config()
    torch.manual_seed(seed)
    model = MesmModel(config).double()
    batch = micro_batch(config, seed).float_tensors(torch.float64)
    params = dict(model.named_parameters())
    names = ['projection.video_proj.0.net.1.bias', 'fw.blocks.0.attn.w_q.bias', 'fw.mlm_head.bias',
             'ss.mask_token', 'aligner.blocks.0.attn.w_v.bias', 'encoder.layers.0.mlp.fc2.bias',
             'saliency_head.mlp.layers.1.bias', 'decoder.anchor_logits', 'decoder.class_heads.0.bias']

    for name in names:
        def loss_of(value, name=name):
            overrides = dict(params)
            overrides[name] = value
            output = functional_call(model, overrides, (batch,))
            return compute_losses(output, batch, config)['total']
        point = params[name].detach().clone().requires_grad_()
        _gradcheck(loss_of, (point,), 1e-5, 1e-3)
    return f"{len(names)} parameter groups within 1e-3"


# ============================================================================
# WEIGHT SHARING
# ============================================================================

def check_weight_sharing(seed: int = 0) -> str:
    torch.manual_seed(seed)
    fw = FrameWordMesm(hidden_dim=8, num_heads=2, num_layers=2, vocab_size=7, dropout=0.0)
    frames = torch.randn(2, 5, 8)
    words = torch.randn(2, 4, 8)
    frame_mask = torch.ones(2, 5, dtype=torch.bool)
    word_mask = torch.ones(2, 4, dtype=torch.bool)
    mlm_mask = torch.tensor([[True, False, False, False], [False, True, False, False]])
    ids = torch.randint(0, 7, (2, 4))

    before = fw.enhance_video(frames, words, word_mask).detach()
    loss = loss_fw(mlm_log_probs(fw.reconstruct_logits(fw.mask_words(words, mlm_mask), frames, frame_mask)),
                   ids, word_mask)
    loss.backward()
    with torch.no_grad():
        for p in fw.parameters():
            if p.grad is not None:
                p -= 0.1 * p.grad
    after = fw.enhance_video(frames, words, word_mask).detach()
    delta = float((after - before).norm())
    assert delta > 0, "a step on the reconstruction loss left enhance_video unchanged"

    # one storage, two readers: mutate in place and both passes move
    enhanced = fw.enhance_video(frames, words, word_mask).detach()
    recon = fw.reconstruct_logits(words, frames, frame_mask).detach()
    with torch.no_grad():
        fw.blocks[0].attn.w_k.weight.add_(0.5)
    assert not torch.equal(enhanced, fw.enhance_video(frames, words, word_mask).detach())
    assert not torch.equal(recon, fw.reconstruct_logits(words, frames, frame_mask).detach())
    return f"|delta enhance_video| = {delta:.3e}"


# ============================================================================
# MASK CONTRACT
# ============================================================================

def _corrupt(batch):
    nan = float('nan')
    batch.video_feats = batch.video_feats.masked_fill(~batch.video_mask[..., None], nan)
    batch.word_feats = batch.word_feats.masked_fill(~batch.word_mask[..., None], nan)
    sentence_valid = batch.sentence_word_mask & batch.sentence_mask[..., None]
    batch.sentence_feats = batch.sentence_feats.masked_fill(~sentence_valid[..., None], nan)
    return batch


def check_mask_fuzz(shapes: int = 100, seed: int = 0) -> str:
    config = micro_config()
    torch.manual_seed(seed)
    model = MesmModel(config)
    rng = np.random.default_rng(seed)
    with torch.no_grad():
        for trial in range(shapes):
            samples = random_samples(rng, int(rng.integers(1, 4)), int(rng.integers(1, 4)),
                                     frame_range=(1, 9), word_range=(1, 6), vocab_size=7)
            batch = make_batch(samples, mask_seed=trial)
            clean = compute_losses(model(batch), batch, config)
            dirty_batch = _corrupt(make_batch(samples, mask_seed=trial))
            dirty = compute_losses(model(dirty_batch), dirty_batch, config)
            for key in ('l_fw', 'l_ss', 'l_enc', 'l_vmr', 'total'):
                assert torch.equal(clean[key], dirty[key]), \
                    f"trial {trial}: {key} changed under padding corruption"
    return f"{shapes} batch shapes, all losses bitwise equal"


# ============================================================================
# METRICS / MATCHING ORACLES
# ============================================================================

def random_instance(rng: np.random.Generator, max_queries: int = 20, max_predictions: int = 20,
                    max_gt: int = 3):
    predictions, gts = [], {}
    for q in range(int(rng.integers(1, max_queries + 1))):
        qid = f'q{q}'
        gts[qid] = []
        for _ in range(int(rng.integers(1, max_gt + 1))):
            start = float(rng.uniform(0, 20))
            gts[qid].append((start, start + float(rng.uniform(0.5, 10))))
        spans, scores = [], []
        for _ in range(int(rng.integers(1, max_predictions + 1))):
            if rng.random() < 0.3:
                base = gts[qid][int(rng.integers(len(gts[qid])))]
                start = base[0] + float(rng.normal(0, 0.5))
                spans.append((start, start + (base[1] - base[0]) + float(rng.normal(0, 0.5))))
            else:
                start = float(rng.uniform(0, 20))
                spans.append((start, start + float(rng.uniform(0.5, 10))))
            # coarse scores so ties occur
            scores.append(float(rng.integers(0, 5)) / 4)
        spans = [(s, max(e, s)) for s, e in spans]
        predictions.append(PredictionSet(qid=qid, spans=spans, scores=scores))
    return predictions, gts


def check_metrics_oracle(instances: int = 100, seed: int = 0) -> str:
    rng = np.random.default_rng(seed)
    recall_grid = tuple(round(0.05 * k, 2) for k in range(21))
    for k in range(instances):
        predictions, gts = random_instance(rng)
        report = evaluate(predictions, gts, recall_grid, MAP_THRESHOLDS, diagnostics=False)
        oracle = oracle_evaluate(predictions, gts, recall_grid, MAP_THRESHOLDS)
        assert oracle.num_queries == report.num_queries, f"instance {k}: query counts differ"
        fast = report.metrics()
        for key, value in oracle.metrics().items():
            assert abs(fast[key] - value) <= 1e-9, f"instance {k}: {key} fast={fast[key]} oracle={value}"
        recalls = [report.recall[f'R1@{mu:g}'] for mu in recall_grid]
        maps = [map_at(predictions, gts, mu) for mu in recall_grid]
        assert all(x >= y for x, y in zip(recalls, recalls[1:])), f"instance {k}: recall not monotone"
        assert all(x >= y - 1e-12 for x, y in zip(maps, maps[1:])), f"instance {k}: mAP not monotone"
        assert recalls[0] == recall_at(predictions, gts, 0.0) == 1.0
    return f"{instances} instances agree to 1e-9"


def check_matching_oracle(instances: int = 200, seed: int = 0) -> str:
    rng = np.random.default_rng(seed)
    for k in range(instances):
        n_gt = int(rng.integers(1, 6))
        n_span = int(rng.integers(n_gt, 8))
        cost = rng.standard_normal((n_span, n_gt))
        brute = min(itertools.permutations(range(n_span), n_gt),
                    key=lambda perm: sum(cost[s, g] for g, s in enumerate(perm)))
        exhaustive = solve_assignment(cost, 'exhaustive')
        hungarian = solve_assignment(cost, 'hungarian')
        assert exhaustive.span_idx == hungarian.span_idx == tuple(brute), \
            f"instance {k}: {hungarian.span_idx} vs brute force {brute}"
        assert exhaustive.cost == hungarian.cost
    return f"{instances} instances identical"


# ============================================================================
# ANALYTIC VALUES / SUBSPACE
# ============================================================================

def check_analytic_losses() -> str:
    vocab = 100
    uniform = torch.full((2, 5, vocab), -math.log(vocab), dtype=torch.float64)
    ids = torch.randint(0, vocab, (2, 5))
    mask = torch.ones(2, 5, dtype=torch.bool)
    assert abs(float(loss_fw(uniform, ids, mask)) - math.log(vocab)) < 1e-6

    scores = torch.full((3, 6), 0.5, dtype=torch.float64)
    labels = (torch.arange(6) < 2).to(torch.float64).expand(3, 6)
    assert abs(float(loss_enc(scores, labels, torch.ones(3, 6, dtype=torch.bool))) - math.log(2)) < 1e-6

    sim = torch.randn(4, 4, dtype=torch.float64)
    assert abs(float(multi_positive_nce(sim, torch.ones(4, 4, dtype=torch.bool)))) < 1e-6
    return "ln N_vocab, ln 2, 0 within 1e-6"


def check_subspace(trials: int = 20, seed: int = 0) -> str:
    rng = np.random.default_rng(seed)
    for _ in range(trials):
        a = rng.standard_normal((6, 10))
        b = rng.standard_normal((8, 10))
        assert abs(subspace_similarity(a, a, 4) - 1.0) < 1e-9
        basis = np.linalg.qr(rng.standard_normal((10, 10)))[0]
        left, right = rng.standard_normal((3, 5)) @ basis[:5], rng.standard_normal((4, 5)) @ basis[5:]
        assert abs(subspace_similarity(left, right, 2)) < 1e-9
        rotation = np.linalg.qr(rng.standard_normal((6, 6)))[0]
        base = subspace_similarity(a, b, 3)
        assert abs(subspace_similarity(rotation @ a, b, 3) - base) < 1e-9
        assert abs(subspace_similarity(3.7 * a, -0.2 * b, 3) - base) < 1e-9
    return f"{trials} randomized instances"


CHECKS: List[Tuple[str, Callable[[], str]]] = [
    ('geometry oracle', check_geometry),
    ('loss gradients', check_loss_gradients),
    ('model gradient', check_model_gradient),
    ('weight sharing', check_weight_sharing),
    ('mask contract fuzz', check_mask_fuzz),
    ('metrics oracle', check_metrics_oracle),
    ('matching oracle', check_matching_oracle),
    ('analytic losses', check_analytic_losses),
    ('subspace properties', check_subspace),
]


def run_selftest() -> List[CheckResult]:
    results = []
    for name, check in CHECKS:
        began = time.perf_counter()
        try:
            detail = check()
            passed = True
            logger.info(f"✅ {name}: {detail}")
        except Exception as e:
            detail = f"{type(e).__name__}: {e}"
            passed = False
            logger.error(f"❌ {name}: {detail}")
        results.append(CheckResult(name, passed, time.perf_counter() - began, detail))
    return results
