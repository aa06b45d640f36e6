"""
Full model: forward pass, module switches, loss composition and the selftest checks
"""

import os
import sys

import numpy as np
import pytest
import torch

sys.path.insert(0, os.path.join(os.path.dirname(__file__), 'src'))

from feature_data import make_batch
from mesm_model import MesmModel, compute_losses
from selftest import (CHECKS, _assert_clear_of_kinks, check_analytic_losses, check_geometry,
                      check_loss_gradients, check_mask_fuzz, check_matching_oracle, check_model_gradient,
                      check_subspace, check_weight_sharing, micro_batch, micro_config)
from subspace import probe_features, probe_report
from synth_data import random_samples

LOSS_KEYS = {'l_fw', 'l_ss', 'l_enc', 'l_vmr', 'total', 'vmr_l1', 'vmr_giou', 'vmr_ce'}


@pytest.fixture(autouse=True)
def seed():
    torch.manual_seed(0)


def test_forward_shapes():
    config = micro_config()
    batch = micro_batch(config)
    output = MesmModel(config)(batch)
    b, l_v = batch.video_mask.shape
    l_w = batch.word_mask.shape[1]
    assert output.saliency.shape == (b, l_v)
    assert output.decoder.final_spans_cw.shape == (b, config.num_spans, 2)
    assert output.query_tokens.shape == (b, l_w + 1, config.hidden_dim)
    assert output.mlm_log_probs.shape == (b, l_w, config.vocab_size)
    assert output.segments.shape == (b, config.hidden_dim)


def test_losses_finite_and_complete():
    config = micro_config()
    batch = micro_batch(config)
    losses = compute_losses(MesmModel(config)(batch), batch, config)
    assert set(losses) == LOSS_KEYS
    assert all(bool(torch.isfinite(v)) for v in losses.values())
    expected = losses['l_fw'] + losses['l_ss'] + losses['l_enc'] + losses['l_vmr']
    assert float(losses['total']) == pytest.approx(float(expected), rel=1e-6)


def test_switched_off_modules():
    config = micro_config(fw_enabled=False, ss_enabled=False)
    model = MesmModel(config)
    assert model.fw is None and model.ss is None
    batch = micro_batch(config)
    output = model(batch)
    assert torch.equal(output.frames_enh, output.frames)
    assert output.query_tokens.shape[1] == batch.word_mask.shape[1]


def test_complement_token_ignores_frame_word_weights():
    config = micro_config(use_positional_encoding=False)
    model = MesmModel(config).eval()
    batch = micro_batch(config)
    with torch.no_grad():
        before = model(batch)
        model.fw.blocks[0].attn.w_v.weight.add_(1.0)
        model.fw.blocks[0].mlp.fc2.weight.add_(1.0)
        after = model(batch)
    assert not torch.allclose(after.frames_enh, before.frames_enh)
    assert torch.equal(after.query_tokens[:, 0], before.query_tokens[:, 0])
    assert torch.equal(after.segments, before.segments)
    losses = compute_losses(output, batch, config)
    assert float(losses['l_fw']) == 0.0 and float(losses['l_ss']) == 0.0


def test_mlm_off_keeps_enhancement():
    config = micro_config(mlm_enabled=False)
    model = MesmModel(config)
    batch = micro_batch(config)
    output = model(batch)
    assert output.mlm_log_probs is None
    assert not torch.equal(output.frames_enh, output.frames)


def test_zero_aux_weights_leave_vmr():
    config = micro_config(loss_fw=0.0, loss_ss=0.0, loss_enc=0.0)
    batch = micro_batch(config)
    losses = compute_losses(MesmModel(config)(batch), batch, config)
    assert float(losses['total']) == pytest.approx(float(losses['l_vmr']), rel=1e-6)


def test_single_sentence_videos():
    config = micro_config()
    samples = random_samples(np.random.default_rng(3), num_videos=3, queries_per_video=1)
    batch = make_batch(samples, mask_seed=0)
    losses = compute_losses(MesmModel(config)(batch), batch, config)
    assert bool(torch.isfinite(losses['total']))


def test_missing_dimensions_rejected():
    with pytest.raises(ValueError, match='video_dim'):
        MesmModel(micro_config(video_dim=None))


def test_learned_tokens_get_gradient():
    config = micro_config()
    model = MesmModel(config)
    batch = micro_batch(config)
    compute_losses(model(batch), batch, config)['total'].backward()
    params = dict(model.named_parameters())
    for name in ('fw.mask_embedding', 'fw.mlm_head.weight', 'ss.mask_token', 'decoder.anchor_logits',
                 'decoder.query_content', 'saliency_head.mlp.layers.1.weight',
                 'projection.text_proj.0.net.1.weight'):
        assert params[name].grad is not None and bool((params[name].grad != 0).any()), name


def test_probe_on_model_output():
    config = micro_config()
    model = MesmModel(config).eval()
    batch = micro_batch(config)
    with torch.no_grad():
        output = model(batch)
    features = probe_features(output, batch, 1)
    l_s, l_e = batch.frame_spans[1].tolist()
    assert features['segment'].shape == (l_e + 1 - l_s, config.hidden_dim)
    assert features['text_enh'].shape[0] == features['text'].shape[0] + 1
    report = probe_report(features, batch.qids[1])
    assert all(0.0 <= v <= 1.0 for curve in report.curves.values() for v in curve)


# ============================================================================
# SELFTEST CHECKS
# ============================================================================

def test_check_list_is_complete():
    assert len(CHECKS) == 9


def test_geometry_check():
    check_geometry(pairs=200)


def test_loss_gradient_check():
    check_loss_gradients()


def test_gradient_fixture_rejects_breakpoints():
    gt = torch.tensor([[0.2, 0.45]], dtype=torch.float64)
    on_kink = torch.tensor([[[0.3, 0.2]]], dtype=torch.float64)  # starts exactly at 0.2
    with pytest.raises(AssertionError):
        _assert_clear_of_kinks(on_kink, gt, 1e-5)
    _assert_clear_of_kinks(torch.tensor([[[0.3, 0.2]]], dtype=torch.float64),
                           torch.tensor([[0.15, 0.47]], dtype=torch.float64), 1e-5)


def test_model_gradient_check():
    check_model_gradient()


def test_weight_sharing_check():
    check_weight_sharing()


def test_mask_fuzz_check():
    check_mask_fuzz(shapes=20)


def test_matching_oracle_check():
    check_matching_oracle(instances=50)


def test_analytic_and_subspace_checks():
    check_analytic_losses()
    check_subspace(trials=5)
