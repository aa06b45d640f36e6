"""
Feature projection, modality aligner, encoder, saliency head and L_enc
"""

import math
import os
import sys

import pytest
import torch

sys.path.insert(0, os.path.join(os.path.dirname(__file__), 'src'))

from backbone import (FeatureProjection, ModalityAligner, SaliencyHead, TransformerEncoder,
                      loss_enc, saliency_labels)
from spans import FrameIndexSpan


@pytest.fixture(autouse=True)
def seed():
    torch.manual_seed(0)


def ones(*shape):
    return torch.ones(*shape, dtype=torch.bool)


def test_projection_dims():
    projection = FeatureProjection(300, 300, 256, dropout=0.0)
    frames, words = projection(torch.randn(2, 7, 300), torch.randn(2, 4, 300))
    assert frames.shape == (2, 7, 256) and words.shape == (2, 4, 256)
    with pytest.raises(ValueError):
        projection.project_video(torch.randn(1, 3, 299))


def test_projection_zero_input_and_determinism():
    projection = FeatureProjection(6, 5, 8).eval()
    out = projection.project_video(torch.zeros(1, 3, 6))
    assert bool(torch.isfinite(out).all())
    assert torch.equal(out, projection.project_video(torch.zeros(1, 3, 6)))


def test_aligner_shape_for_any_query_length():
    aligner = ModalityAligner(16, 4, num_layers=2, dropout=0.0)
    frames = torch.randn(2, 9, 16)
    for length in (1, 3, 12):
        assert aligner(frames, torch.randn(2, length, 16), ones(2, length)).shape == (2, 9, 16)


def test_aligner_single_key():
    aligner = ModalityAligner(8, 2, num_layers=1, dropout=0.0)
    block = aligner.blocks[0]
    frames = torch.randn(1, 4, 8)
    words = torch.randn(1, 3, 8)
    mask = torch.tensor([[False, True, False]])
    value = block.attn.w_o(block.attn.w_v(words[:, 1:2]))
    expected = frames + block.mlp(block.norm(value.expand(1, 4, 8)))
    assert torch.allclose(aligner(frames, words, mask), expected, atol=1e-6)


def test_encoder_single_frame():
    encoder = TransformerEncoder(8, 2, num_layers=1, dropout=0.0)
    weights = encoder.layers[0].attn.attention_weights(torch.randn(1, 1, 8), torch.randn(1, 1, 8), ones(1, 1))
    assert torch.equal(weights, torch.ones(1, 2, 1, 1))
    assert encoder(torch.randn(1, 1, 8), ones(1, 1)).shape == (1, 1, 8)


def test_encoder_ignores_padded_frames():
    encoder = TransformerEncoder(8, 2, num_layers=2, dropout=0.0)
    x = torch.randn(1, 6, 8)
    mask = torch.tensor([[True, True, True, True, False, False]])
    clean = encoder(x, mask)
    corrupted = x.clone()
    corrupted[0, 4:] = 1e6
    assert torch.allclose(encoder(corrupted, mask)[0, :4], clean[0, :4], atol=1e-6)


def test_saliency_head_range_and_zero_weights():
    head = SaliencyHead(8)
    scores = head(torch.randn(2, 5, 8) * 50)
    assert scores.shape == (2, 5)
    assert bool(((scores > 0) & (scores < 1)).all())

    for layer in head.mlp.layers:
        torch.nn.init.zeros_(layer.weight)
    torch.nn.init.constant_(head.mlp.layers[-1].bias, 0.3)
    assert torch.allclose(head(torch.randn(1, 4, 8)), torch.full((1, 4), 1 / (1 + math.exp(-0.3))))


def test_saliency_labels_inclusive():
    labels = saliency_labels(FrameIndexSpan(l_s=1, l_e=3, num_frames=6))
    assert labels.tolist() == [0, 1, 1, 1, 0, 0]


def test_loss_enc_examples():
    half = torch.full((1, 4), 0.5)
    labels = torch.tensor([[1.0, 0.0, 1.0, 0.0]])
    assert float(loss_enc(half, labels, ones(1, 4))) == pytest.approx(math.log(2), abs=1e-6)
    assert float(loss_enc(labels, labels, ones(1, 4))) == pytest.approx(0.0, abs=1e-5)

    scores = torch.tensor([[0.9, 0.2]], dtype=torch.float64)
    value = loss_enc(scores, torch.tensor([[1.0, 0.0]], dtype=torch.float64), ones(1, 2))
    assert float(value) == pytest.approx(0.1643, abs=1e-4)


def test_loss_enc_masks_padding():
    scores = torch.tensor([[0.9, 0.2, float('nan')]])
    labels = torch.tensor([[1.0, 0.0, 1.0]])
    mask = torch.tensor([[True, True, False]])
    assert float(loss_enc(scores, labels, mask)) == pytest.approx(-(math.log(0.9) + math.log(0.8)) / 2, abs=1e-5)


def test_loss_enc_errors():
    with pytest.raises(ValueError):
        loss_enc(torch.rand(1, 3), torch.rand(1, 4), ones(1, 3))
    with pytest.raises(ValueError):
        loss_enc(torch.rand(1, 3), torch.rand(1, 3), torch.zeros(1, 3, dtype=torch.bool))
