"""
Attention blocks and frame-word enhancement with masked-word reconstruction
"""

import math
import os
import sys

import pytest
import torch

sys.path.insert(0, os.path.join(os.path.dirname(__file__), 'src'))

from attention import (AttentionMaskError, CrossAttentionBlock, MultiHeadAttention, QueryBlock,
                       sinusoidal_encoding, span_position_encoding)
from fw_mesm import FrameWordMesm, loss_fw, mlm_log_probs


@pytest.fixture(autouse=True)
def seed():
    torch.manual_seed(0)


def ones(*shape):
    return torch.ones(*shape, dtype=torch.bool)


# ============================================================================
# ATTENTION
# ============================================================================

def test_single_valid_key_gets_all_weight():
    attn = MultiHeadAttention(16, 4)
    mask = torch.tensor([[False, True, False, False]])
    weights = attn.attention_weights(torch.randn(1, 5, 16) * 10, torch.randn(1, 4, 16), mask)
    assert torch.equal(weights[..., 1], torch.ones(1, 4, 5))
    assert torch.equal(weights[..., 0], torch.zeros(1, 4, 5))


def test_equal_keys_split_weight_evenly():
    attn = MultiHeadAttention(8, 2)
    key = torch.randn(1, 1, 8)
    weights = attn.attention_weights(torch.randn(1, 3, 8), key.expand(1, 2, 8), ones(1, 2))
    assert torch.allclose(weights, torch.full_like(weights, 0.5), atol=1e-7)


def test_rows_sum_to_one_over_valid_keys():
    attn = MultiHeadAttention(8, 2)
    mask = torch.tensor([[True, True, False], [True, False, False]])
    weights = attn.attention_weights(torch.randn(2, 4, 8), torch.randn(2, 3, 8), mask)
    assert torch.allclose(weights.sum(-1), torch.ones(2, 2, 4), atol=1e-6)
    assert torch.all(weights[1, ..., 1:] == 0)


def test_all_invalid_keys_raise():
    block = CrossAttentionBlock(8, 2)
    mask = torch.tensor([[True, True], [False, False]])
    with pytest.raises(AttentionMaskError):
        block(torch.randn(2, 3, 8), torch.randn(2, 2, 8), mask)


def test_zero_output_projection_is_identity():
    block = CrossAttentionBlock(8, 2)
    block.zero_output()
    x = torch.randn(2, 5, 8)
    assert torch.equal(block(x, torch.randn(2, 3, 8), ones(2, 3)), x)

    query_block = QueryBlock(8, 2)
    query_block.zero_output()
    assert torch.equal(query_block(x, ones(2, 5), torch.randn(2, 3, 8), ones(2, 3)), x)


def test_position_encodings():
    table = sinusoidal_encoding(6, 8)
    assert table.shape == (6, 8)
    assert torch.allclose(table[0, 1::2], torch.ones(4))
    emb = span_position_encoding(torch.rand(3, 4, 2), 10)
    assert emb.shape == (3, 4, 10)


# ============================================================================
# FRAME-WORD ENHANCEMENT
# ============================================================================

def test_enhance_video_shape():
    fw = FrameWordMesm(hidden_dim=256, num_heads=8, num_layers=2, vocab_size=100, dropout=0.0)
    out = fw.enhance_video(torch.randn(1, 8, 256), torch.randn(1, 5, 256), ones(1, 5))
    assert out.shape == (1, 8, 256)


def test_empty_stack_and_zero_blocks_are_identity():
    frames = torch.randn(2, 6, 16)
    words = torch.randn(2, 4, 16)
    empty = FrameWordMesm(16, 4, num_layers=0, vocab_size=10)
    assert torch.equal(empty.enhance_video(frames, words, ones(2, 4)), frames)

    zeroed = FrameWordMesm(16, 4, num_layers=3, vocab_size=10)
    for block in zeroed.blocks:
        block.zero_output()
    assert torch.equal(zeroed.enhance_video(frames, words, ones(2, 4)), frames)


def test_reconstruct_words_is_a_distribution():
    fw = FrameWordMesm(32, 4, 2, vocab_size=100, dropout=0.0)
    probs = fw.reconstruct_words(torch.randn(1, 5, 32), torch.randn(1, 7, 32), ones(1, 7))
    assert probs.shape == (1, 5, 100)
    assert torch.allclose(probs.sum(-1), torch.ones(1, 5), atol=1e-6)


def test_reconstruction_is_deterministic():
    fw = FrameWordMesm(16, 2, 2, vocab_size=12).eval()
    words, frames = torch.randn(2, 4, 16), torch.randn(2, 6, 16)
    assert torch.equal(fw.reconstruct_logits(words, frames, ones(2, 6)),
                       fw.reconstruct_logits(words, frames, ones(2, 6)))


def test_passes_share_block_weights():
    fw = FrameWordMesm(16, 2, 2, vocab_size=12, dropout=0.0)
    frames, words = torch.randn(1, 6, 16), torch.randn(1, 4, 16)
    enhanced = fw.enhance_video(frames, words, ones(1, 4))
    recon = fw.reconstruct_words(words, frames, ones(1, 6))
    with torch.no_grad():
        fw.blocks[1].attn.w_k.weight.mul_(3.0)
    assert not torch.equal(enhanced, fw.enhance_video(frames, words, ones(1, 4)))
    assert not torch.equal(recon, fw.reconstruct_words(words, frames, ones(1, 6)))


def test_enhancement_ignores_word_order():
    fw = FrameWordMesm(16, 2, 2, vocab_size=12, dropout=0.0)
    frames, words = torch.randn(2, 6, 16), torch.randn(2, 5, 16)
    word_mask = ones(2, 5)
    word_mask[1, 3:] = False
    base = fw.enhance_video(frames, words, word_mask)
    order = torch.tensor([4, 2, 0, 3, 1])
    shuffled = fw.enhance_video(frames, words[:, order], word_mask[:, order])
    assert torch.allclose(shuffled, base, atol=1e-6)


def test_mask_words_uses_learned_embedding():
    fw = FrameWordMesm(8, 2, 1, vocab_size=5)
    words = torch.randn(1, 3, 8)
    mlm_mask = torch.tensor([[False, True, False]])
    masked = fw.mask_words(words, mlm_mask)
    assert torch.equal(masked[0, 1], fw.mask_embedding.detach())
    assert torch.equal(masked[0, [0, 2]], words[0, [0, 2]])

    loss = masked.sum()
    loss.backward()
    assert fw.mask_embedding.grad is not None


# ============================================================================
# LOSS
# ============================================================================

def test_uniform_prediction_costs_log_vocab():
    log_probs = torch.full((2, 5, 100), -math.log(100))
    ids = torch.randint(0, 100, (2, 5))
    assert float(loss_fw(log_probs, ids, ones(2, 5))) == pytest.approx(4.6052, abs=1e-4)


def test_correct_one_hot_costs_nothing():
    ids = torch.tensor([[2, 0, 1]])
    log_probs = torch.nn.functional.one_hot(ids, 4).double().clamp(min=1e-12).log()
    assert float(loss_fw(log_probs, ids, ones(1, 3))) == pytest.approx(0.0, abs=1e-12)


def test_hand_computed_loss():
    probs = torch.tensor([[[0.5, 0.5, 0.0, 0.0], [0.25, 0.25, 0.25, 0.25]]]).clamp(min=1e-12)
    ids = torch.tensor([[0, 1]])
    expected = (math.log(2) + math.log(4)) / 2
    assert float(loss_fw(probs.log(), ids, ones(1, 2))) == pytest.approx(expected, abs=1e-4)
    assert expected == pytest.approx(1.0397, abs=1e-4)


def test_padding_and_scope():
    log_probs = mlm_log_probs(torch.randn(2, 4, 6))
    ids = torch.randint(0, 6, (2, 4))
    word_mask = torch.tensor([[True, True, True, False], [True, True, False, False]])
    mlm_mask = torch.tensor([[False, True, False, False], [True, False, False, False]])

    all_words = loss_fw(log_probs, ids, word_mask)
    garbage = log_probs.clone()
    garbage[0, 3] = float('nan')
    garbage[1, 2:] = float('nan')
    assert float(loss_fw(garbage, ids, word_mask)) == float(all_words)

    masked_only = loss_fw(log_probs, ids, word_mask, mlm_mask, scope='masked_only')
    expected = -(log_probs[0, 1, ids[0, 1]] + log_probs[1, 0, ids[1, 0]]) / 2
    assert float(masked_only) == pytest.approx(float(expected), abs=1e-6)


def test_scope_errors():
    log_probs = mlm_log_probs(torch.randn(1, 3, 4))
    ids = torch.zeros(1, 3, dtype=torch.long)
    with pytest.raises(ValueError):
        loss_fw(log_probs, ids, ones(1, 3), scope='masked_only')
    with pytest.raises(ValueError):
        loss_fw(log_probs, ids, ones(1, 3), torch.zeros(1, 3, dtype=torch.bool), scope='masked_only')
    with pytest.raises(ValueError):
        loss_fw(log_probs, ids, ones(1, 3), scope='everything')
