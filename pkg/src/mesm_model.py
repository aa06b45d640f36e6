"""
Full moment-retrieval model

projection -> FW enhancement (+ masked-word reconstruction) -> SS complement
token -> modality aligner -> transformer encoder -> saliency head / span decoder
"""

import logging
from dataclasses import dataclass
from typing import Dict, Optional

import torch
from torch import nn

from attention import sinusoidal_encoding
from backbone import FeatureProjection, ModalityAligner, SaliencyHead, TransformerEncoder, loss_enc
from feature_data import Batch
from fw_mesm import FrameWordMesm, loss_fw, mlm_log_probs
from run_config import RunConfig
from span_decoder import DecoderOutput, SpanDecoder, loss_vmr, total_loss
from ss_mesm import (SegmentSentenceMesm, build_positive_set, concat_complement, loss_ss,
                     pool_segment, pool_sentences)

logger = logging.getLogger(__name__)


@dataclass
class ModelOutput:
    decoder: DecoderOutput
    saliency: torch.Tensor  # (B, L_v)
    frames: torch.Tensor  # F_v, projected (+ positions)
    frames_enh: torch.Tensor  # F_v^enh
    words: torch.Tensor  # F_q, projected (+ positions)
    query_tokens: torch.Tensor  # F_q^enh, complement token first when SS is on
    query_mask: torch.Tensor
    encoded: torch.Tensor  # F_enc
    mlm_log_probs: Optional[torch.Tensor] = None
    segments: Optional[torch.Tensor] = None  # pooled ground-truth segments (B, D)


def _sanitize(x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Zero every padded position (NaN included) before anything reads it"""
    return torch.where(mask[..., None], x, torch.zeros_like(x))


class MesmModel(nn.Module):
    """Built from a RunConfig whose data dimensions are filled in"""

    def __init__(self, config: RunConfig):
        super().__init__()
        missing = [k for k in ('video_dim', 'text_dim', 'vocab_size') if getattr(config, k) is None]
        if missing:
            raise ValueError(f"config is missing data dimensions: {', '.join(missing)}")
        self.config = config
        d, h, p = config.hidden_dim, config.num_heads, config.dropout

        self.projection = FeatureProjection(config.video_dim, config.text_dim, d, p)
        self.fw = FrameWordMesm(d, h, config.fw_layers, config.vocab_size, p) if config.fw_enabled else None
        self.ss = SegmentSentenceMesm(d, h, config.ss_layers, p, config.ss_context_grad) \
            if config.ss_enabled else None
        self.aligner = ModalityAligner(d, h, config.ma_layers, p)
        self.encoder = TransformerEncoder(d, h, config.enc_layers, p)
        self.saliency_head = SaliencyHead(d)
        self.decoder = SpanDecoder(d, h, config.dec_layers, config.num_spans, p)

    def _positions(self, length: int, like: torch.Tensor) -> Optional[torch.Tensor]:
        if not self.config.use_positional_encoding:
            return None
        return sinusoidal_encoding(length, self.config.hidden_dim, like.dtype, like.device)[None]

    def forward(self, batch: Batch) -> ModelOutput:
        cfg = self.config
        video_mask, word_mask = batch.video_mask, batch.word_mask

        frames = self.projection.project_video(_sanitize(batch.video_feats, video_mask))
        words = self.projection.project_text(_sanitize(batch.word_feats, word_mask))
        frame_pos = self._positions(frames.shape[1], frames)
        if frame_pos is not None:
            frames = frames + frame_pos
            words = words + self._positions(words.shape[1], words)
        frames = _sanitize(frames, video_mask)
        words = _sanitize(words, word_mask)

        # ===== FW-MESM =====
        log_probs = None
        if self.fw is not None:
            frames_enh = self.fw.enhance_video(frames, words, word_mask)
            if cfg.mlm_enabled:
                masked = self.fw.mask_words(words, batch.mlm_mask)
                log_probs = mlm_log_probs(self.fw.reconstruct_logits(masked, frames, video_mask))
        else:
            frames_enh = frames

        # ===== SS-MESM =====
        query_tokens, query_mask, segments = words, word_mask, None
        if self.ss is not None:
            sentence_word_mask = batch.sentence_word_mask & batch.sentence_mask[..., None]
            sentences = self.projection.project_text(
                _sanitize(batch.sentence_feats, sentence_word_mask))
            pooled = pool_sentences(sentences, sentence_word_mask, batch.sentence_mask)
            # the complement token reads F_v, not the FW output
            token = self.ss.generate_complement(pooled, batch.sentence_mask, batch.current_index,
                                                frames, video_mask)
            query_tokens, query_mask = concat_complement(token, words, word_mask)
            segments = pool_segment(frames, batch.frame_spans)

        # ===== ALIGN / ENCODE / DECODE =====
        aligned = self.aligner(frames_enh, query_tokens, query_mask)
        encoded = self.encoder(aligned, video_mask, frame_pos)
        saliency = self.saliency_head(encoded)
        decoded = self.decoder(encoded, video_mask)

        return ModelOutput(
            decoder=decoded, saliency=saliency, frames=frames, frames_enh=frames_enh,
            words=words, query_tokens=query_tokens, query_mask=query_mask, encoded=encoded,
            mlm_log_probs=log_probs, segments=segments,
        )


def compute_losses(output: ModelOutput, batch: Batch, config: RunConfig) -> Dict[str, torch.Tensor]:
    """Every loss component plus the weighted total; disabled parts are exact zeros"""
    zero = output.saliency.sum() * 0

    l_fw = zero
    if output.mlm_log_probs is not None:
        l_fw = loss_fw(output.mlm_log_probs, batch.word_ids, batch.word_mask, batch.mlm_mask,
                       config.mlm_scope)

    l_ss = zero
    if output.segments is not None:
        primary = [spans[0] for spans in batch.gt_seconds]
        positive = build_positive_set(primary, batch.video_ids, config.gamma,
                                      config.cross_video_positives)
        l_ss = loss_ss(output.query_tokens, output.query_mask, output.segments, positive,
                       config.tau, config.normalize_similarity, config.mean_over_tokens)

    l_enc = loss_enc(output.saliency, batch.saliency_labels.to(output.saliency.dtype), batch.video_mask)
    vmr = loss_vmr(output.decoder, batch.gt_spans, config.loss_l1, config.loss_iou, config.loss_ce,
                   config.bg_weight, config.deep_supervision)

    losses = total_loss(l_fw, l_ss, l_enc, vmr['total'],
                        config.loss_fw, config.loss_ss, config.loss_enc)
    losses.update({'vmr_l1': vmr['l1'], 'vmr_giou': vmr['giou'], 'vmr_ce': vmr['ce']})
    return losses
