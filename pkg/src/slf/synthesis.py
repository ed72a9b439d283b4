"""Desk-scale attention-based autoregressive acoustic model.

Content encoder (token embedding + bidirectional GRU) with a concatenated
speaker embedding, additive content-based attention, a two-layer recurrent
decoder whose pre-net output is concatenated with the style embedding at every
step, a stop-token head, a small post-net and the GRL speaker classifier.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from slf.datagen import AugmentRanges, Utterance, apply_augmentation, crop_invariant, sample_augmentation
from slf.encoder import EncoderConfig, ReferenceEncoder
from slf.errors import ConfigurationError, ContractViolation, TrainingAbort
from slf.numerics import (
    LossReport,
    LossWeights,
    contrast_loss,
    cycle_loss,
    effective_weights,
    kl_divergence,
    kl_margin_loss,
    speaker_adversary_loss,
    total_loss,
)
from slf.quantizer import codebook_loss, ema_update

logger = logging.getLogger(__name__)

__all__ = ["DecoderConfig", "AcousticModel", "TrainOptions", "forward_train", "synthesize", "Utterance"]


@dataclass
class DecoderConfig:
    token_dim: int = 64
    content_width: int = 32
    speaker_dim: int = 32
    prenet_dims: List[int] = field(default_factory=lambda: [64, 64])
    prenet_dropout: float = 0.5
    attention_dim: int = 64
    rnn_width: int = 128
    postnet_channels: int = 64
    postnet_kernel: int = 5
    reduction: int = 2
    max_frames: int = 1000

    def to_dict(self):
        return asdict(self)


class ContentAttention(nn.Module):
    """Additive attention over the memory, queried by the attention RNN state."""

    def __init__(self, query_dim, memory_dim, attention_dim):
        super().__init__()
        self.query = nn.Linear(query_dim, attention_dim, bias=False)
        self.memory = nn.Linear(memory_dim, attention_dim)
        self.v = nn.Linear(attention_dim, 1, bias=False)

    def forward(self, query, processed_memory, memory, memory_mask):
        energies = self.v(torch.tanh(self.query(query)[:, None, :] + processed_memory)).squeeze(-1)
        energies = energies.masked_fill(~memory_mask, -1e9)
        weights = torch.softmax(energies, dim=-1)
        context = torch.bmm(weights.unsqueeze(1), memory).squeeze(1)
        return context, weights


class AcousticModel(nn.Module):
    """Text + speaker id + style embedding -> mel-like frames."""

    def __init__(self, n_tokens: int, num_speakers: int, n_mels: int = 80,
                 encoder_config: Optional[EncoderConfig] = None,
                 decoder_config: Optional[DecoderConfig] = None,
                 swbn_momentum: float = 0.1, swbn_eps: float = 1e-5,
                 codebook_decay: float = 0.99, codebook_eps: float = 1e-5, use_ema: bool = True,
                 generator: Optional[torch.Generator] = None):
        super().__init__()
        enc_cfg = encoder_config or EncoderConfig(n_mels=n_mels)
        dec = decoder_config or DecoderConfig()
        if enc_cfg.n_mels != n_mels:
            raise ConfigurationError("encoder and decoder disagree on the number of bins")
        self.n_tokens = n_tokens
        self.num_speakers = num_speakers
        self.n_mels = n_mels
        self.decoder_config = dec
        self.pad_token = n_tokens
        self.token_embedding = nn.Embedding(n_tokens + 1, dec.token_dim, padding_idx=n_tokens)
        self.content_rnn = nn.GRU(dec.token_dim, dec.content_width, batch_first=True, bidirectional=True)
        self.speaker_embedding = nn.Embedding(num_speakers, dec.speaker_dim)
        memory_dim = 2 * dec.content_width + dec.speaker_dim
        self.memory_dim = memory_dim
        self.reference_encoder = ReferenceEncoder(
            enc_cfg, num_speakers, swbn_momentum=swbn_momentum, swbn_eps=swbn_eps,
            codebook_decay=codebook_decay, codebook_eps=codebook_eps, use_ema=use_ema, generator=generator)
        style_dim = enc_cfg.embedding_dim
        prenet = []
        in_dim = n_mels
        for width in dec.prenet_dims:
            prenet.append(nn.Linear(in_dim, width))
            in_dim = width
        self.prenet = nn.ModuleList(prenet)
        self.attention_rnn = nn.GRUCell(in_dim + style_dim + memory_dim, dec.rnn_width)
        self.attention = ContentAttention(dec.rnn_width, memory_dim, dec.attention_dim)
        self.decoder_rnn = nn.GRUCell(dec.rnn_width + memory_dim, dec.rnn_width)
        self.frame_proj = nn.Linear(dec.rnn_width + memory_dim, n_mels * dec.reduction)
        self.stop_proj = nn.Linear(dec.rnn_width + memory_dim, dec.reduction)
        k = dec.postnet_kernel
        self.postnet = nn.Sequential(
            nn.Conv1d(n_mels, dec.postnet_channels, k, padding=k // 2),
            nn.Tanh(),
            nn.Conv1d(dec.postnet_channels, n_mels, k, padding=k // 2),
        )
        self.speaker_classifier = nn.Linear(style_dim, num_speakers)

    @property
    def variant(self) -> str:
        return self.reference_encoder.config.variant

    @property
    def codebook(self):
        return self.reference_encoder.codebook

    # -- text side -----------------------------------------------------------------

    def encode_text(self, tokens: torch.Tensor, token_lengths: torch.Tensor, speaker_ids: torch.Tensor):
        emb = self.token_embedding(tokens)
        packed = nn.utils.rnn.pack_padded_sequence(emb, token_lengths.cpu(), batch_first=True, enforce_sorted=False)
        out, _ = self.content_rnn(packed)
        out, _ = nn.utils.rnn.pad_packed_sequence(out, batch_first=True, total_length=tokens.shape[1])
        spk = self.speaker_embedding(speaker_ids)[:, None, :].expand(-1, out.shape[1], -1)
        memory = torch.cat([out, spk], dim=-1)
        mask = torch.arange(tokens.shape[1])[None, :] < token_lengths[:, None]
        return memory, mask

    def _prenet(self, x, dropout: bool, generator=None):
        p = self.decoder_config.prenet_dropout
        for layer in self.prenet:
            x = F.relu(layer(x))
            if dropout and p > 0:
                if generator is None:
                    x = F.dropout(x, p=p, training=True)
                else:
                    keep = (torch.rand(x.shape, generator=generator, dtype=x.dtype) >= p).to(x.dtype)
                    x = x * keep / (1.0 - p)
        return x

    def _init_state(self, batch, dtype):
        w = self.decoder_config.rnn_width
        return (torch.zeros(batch, w, dtype=dtype), torch.zeros(batch, w, dtype=dtype),
                torch.zeros(batch, self.memory_dim, dtype=dtype))

    def _step(self, prenet_out, style, state, memory, processed, mask):
        h_att, h_dec, ctx = state
        h_att = self.attention_rnn(torch.cat([prenet_out, style, ctx], dim=-1), h_att)
        ctx, align = self.attention(h_att, processed, memory, mask)
        h_dec = self.decoder_rnn(torch.cat([h_att, ctx], dim=-1), h_dec)
        out = torch.cat([h_dec, ctx], dim=-1)
        frames = self.frame_proj(out).view(out.shape[0], self.decoder_config.reduction, self.n_mels)
        stop = self.stop_proj(out)
        return frames, stop, (h_att, h_dec, ctx), align

    def postnet_refine(self, frames):
        return frames + self.postnet(frames.transpose(1, 2)).transpose(1, 2)

    def decode_teacher_forced(self, memory, mask, style, targets):
        """Teacher-forced decode over ``targets`` (``[B, T, F]``)."""
        r = self.decoder_config.reduction
        b, t, f = targets.shape
        n_steps = math.ceil(t / r)
        padded = F.pad(targets, (0, 0, 0, n_steps * r - t))
        go = torch.zeros(b, 1, f, dtype=targets.dtype)
        prev = torch.cat([go, padded[:, r - 1:-1:r]], dim=1)
        pre = self._prenet(prev, dropout=self.training)
        processed = self.attention.memory(memory)
        state = self._init_state(b, targets.dtype)
        frames, stops = [], []
        for i in range(n_steps):
            fr, st, state, _ = self._step(pre[:, i], style, state, memory, processed, mask)
            frames.append(fr)
            stops.append(st)
        before = torch.cat(frames, dim=1)[:, :t]
        stop_logits = torch.cat(stops, dim=1)[:, :t]
        return before, self.postnet_refine(before), stop_logits

    @torch.no_grad()
    def decode_free(self, memory, mask, style, max_frames: Optional[int] = None,
                    generator: Optional[torch.Generator] = None, prenet_dropout: bool = False):
        """Autoregressive decode for a single utterance until the stop token fires."""
        r = self.decoder_config.reduction
        max_frames = max_frames or self.decoder_config.max_frames
        processed = self.attention.memory(memory)
        state = self._init_state(1, memory.dtype)
        prev = torch.zeros(1, self.n_mels, dtype=memory.dtype)
        frames = []
        n = 0
        stopped = False
        while n < max_frames:
            pre = self._prenet(prev, dropout=prenet_dropout, generator=generator)
            fr, st, state, _ = self._step(pre, style, state, memory, processed, mask)
            probs = torch.sigmoid(st[0])
            fired = torch.nonzero(probs > 0.5)
            if fired.numel():
                keep = int(fired[0]) + 1
                frames.append(fr[:, :keep])
                n += keep
                stopped = True
                break
            frames.append(fr)
            n += r
            prev = fr[:, -1]
        out = torch.cat(frames, dim=1)[:, :max_frames]
        if not stopped:
            logger.warning("no stop token within %d frames; output truncated", max_frames)
        return self.postnet_refine(out)[0], stopped


def pad_batch(arrays: Sequence[np.ndarray], dtype=torch.float32):
    lengths = torch.tensor([a.shape[0] for a in arrays], dtype=torch.long)
    t_max = int(lengths.max())
    out = torch.zeros(len(arrays), t_max, arrays[0].shape[1], dtype=dtype)
    for i, a in enumerate(arrays):
        out[i, : a.shape[0]] = torch.from_numpy(np.asarray(a)).to(dtype)
    return out, lengths


def pad_tokens(seqs: Sequence[Sequence[int]], pad: int):
    lengths = torch.tensor([len(s) for s in seqs], dtype=torch.long)
    out = torch.full((len(seqs), int(lengths.max())), pad, dtype=torch.long)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = torch.tensor(list(s), dtype=torch.long)
    return out, lengths


@dataclass
class TrainOptions:
    crop_window: int = 300
    aligned_crops: bool = True
    augment: AugmentRanges = field(default_factory=AugmentRanges)
    gram_source: str = "frames"
    grl_scale: float = 1.0
    stop_pos_weight: float = 1.0

    def __post_init__(self):
        if isinstance(self.augment, dict):
            self.augment = AugmentRanges(**self.augment)
        if self.gram_source not in ("frames", "embedding"):
            raise ConfigurationError(f"gram_source must be 'frames' or 'embedding', got {self.gram_source!r}")


def _masked_l1(pred, target, lengths):
    mask = (torch.arange(target.shape[1])[None, :] < lengths[:, None]).to(target.dtype)[..., None]
    return torch.sum(torch.abs(pred - target) * mask) / (mask.sum() * target.shape[-1])


def forward_train(model: AcousticModel, batch: Sequence[Utterance], weights: LossWeights, step: int,
                  rng: np.random.Generator, options: Optional[TrainOptions] = None):
    """One teacher-forced training forward pass.

    All seven terms are computed and reported every step; only the terms
    active at ``step`` carry gradient into the returned total.

    Returns:
        (total loss tensor, LossReport)
    """
    options = options or TrainOptions()
    enc = model.reference_encoder
    mult = effective_weights(step, weights)
    dtype = next(model.parameters()).dtype

    tokens, token_lengths = pad_tokens([u.token_ids for u in batch], model.pad_token)
    speakers = torch.tensor([u.speaker_id for u in batch], dtype=torch.long)
    targets, target_lengths = pad_batch([u.features for u in batch], dtype)

    crops, offsets = zip(*(crop_invariant(u.features, options.crop_window, rng) for u in batch))
    ref, ref_lengths = pad_batch(crops, dtype)
    augmented = [apply_augmentation(c, *sample_augmentation(options.augment, rng)) for c in crops]
    aug, aug_lengths = pad_batch(augmented, dtype)

    noise = torch.randn(len(batch), enc.config.embedding_dim, dtype=dtype)
    out_y = enc(ref, ref_lengths, speakers, noise=noise, update_running=True)
    style = out_y.embedding

    memory, mem_mask = model.encode_text(tokens, token_lengths, speakers)
    before, after, stop_logits = model.decode_teacher_forced(memory, mem_mask, style, targets)

    terms: Dict[str, torch.Tensor] = {}
    terms["spec"] = _masked_l1(before, targets, target_lengths) + _masked_l1(after, targets, target_lengths)
    t_idx = torch.arange(targets.shape[1])[None, :]
    stop_target = (t_idx >= (target_lengths[:, None] - 1)).to(dtype)
    terms["stop"] = F.binary_cross_entropy_with_logits(
        stop_logits, stop_target, pos_weight=torch.tensor(options.stop_pos_weight, dtype=dtype))

    kl_raw = kl_divergence(out_y.posterior).mean()
    terms["kl"] = kl_margin_loss(out_y.posterior, weights.kl_margin)
    if out_y.commitment is not None:
        terms["commitment"] = out_y.commitment.mean()
        if not model.codebook.use_ema:
            terms["codebook"] = codebook_loss(out_y.sample, model.codebook.vectors[out_y.vq_index]).mean()
    else:
        terms["commitment"] = torch.zeros((), dtype=dtype)

    with torch.set_grad_enabled(mult["spk"] > 0 and torch.is_grad_enabled()):
        terms["spk"] = speaker_adversary_loss(style, speakers, model.speaker_classifier, scale=options.grl_scale)

    need_cycle = mult["cycle"] > 0 and torch.is_grad_enabled()
    need_contrast = mult["contrast"] > 0 and torch.is_grad_enabled()
    synth_crops = []
    for i, u in enumerate(batch):
        t = int(target_lengths[i])
        off = offsets[i] if options.aligned_crops else None
        crop, _ = crop_invariant(after[i, :t], options.crop_window, rng, offset=off)
        synth_crops.append(crop)
    synth_lengths = torch.tensor([c.shape[0] for c in synth_crops], dtype=torch.long)
    width = int(synth_lengths.max())
    synth = torch.stack([F.pad(c, (0, 0, 0, width - c.shape[0])) for c in synth_crops])

    if options.gram_source == "frames":
        with torch.set_grad_enabled(need_cycle):
            seq_hat, len_hat, _ = enc.frames(synth, synth_lengths)
            terms["cycle"] = cycle_loss(out_y.frame_features, seq_hat, out_y.frame_lengths, len_hat)
        with torch.set_grad_enabled(need_contrast):
            seq_aug, len_aug, _ = enc.frames(aug, aug_lengths)
            terms["contrast"] = contrast_loss(out_y.frame_features, seq_aug, weights.contrast_margin,
                                              out_y.frame_lengths, len_aug)
    else:
        with torch.set_grad_enabled(need_cycle):
            e_hat = enc(synth, synth_lengths, speakers, noise=torch.zeros_like(noise), update_running=False)
            terms["cycle"] = cycle_loss(style.unsqueeze(1), e_hat.embedding.unsqueeze(1))
        with torch.set_grad_enabled(need_contrast):
            e_aug = enc(aug, aug_lengths, speakers, noise=torch.zeros_like(noise), update_running=False)
            terms["contrast"] = contrast_loss(style.unsqueeze(1), e_aug.embedding.unsqueeze(1),
                                              weights.contrast_margin)

    total = total_loss(terms, weights, step)
    if not bool(torch.isfinite(total)):
        raise TrainingAbort(f"non-finite total loss at step {step}", step=step,
                            terms={k: float(v.detach()) for k, v in terms.items()})

    if model.codebook is not None and model.codebook.use_ema and model.training:
        ema_update(model.codebook, out_y.sample.detach(), out_y.vq_index)

    report = LossReport(step=step, total=float(total.detach()), kl_raw=float(kl_raw.detach()),
                        **{k: float(v.detach()) for k, v in terms.items()})
    return total, report


StyleSource = Union[np.ndarray, torch.Tensor, int]


def style_embedding_for(model: AcousticModel, style_source, kind: str, reference_speaker: Optional[int] = None,
                        target_speaker: Optional[int] = None, use_target_stats: bool = False) -> torch.Tensor:
    """Resolve a style source to a 64-dim embedding.

    ``kind`` is ``"reference"`` (features of a reference utterance),
    ``"embedding"`` (explicit vector) or ``"index"`` (codebook row).
    """
    dtype = next(model.parameters()).dtype
    if kind == "embedding":
        emb = torch.as_tensor(np.asarray(style_source), dtype=dtype).reshape(-1)
        if emb.numel() != model.reference_encoder.config.embedding_dim:
            raise ContractViolation("explicit style embedding has the wrong width")
        return emb
    if kind == "index":
        if model.codebook is None:
            raise ConfigurationError("codebook-index style source needs a Q-VAE model")
        idx = int(style_source)
        if not 0 <= idx < model.codebook.num_codes:
            raise ContractViolation(f"codebook index {idx} out of range")
        return model.codebook.vectors[idx].detach().clone()
    if kind == "reference":
        feats = torch.as_tensor(np.asarray(style_source), dtype=dtype)
        ref_spk = reference_speaker if reference_speaker is not None else target_speaker
        if ref_spk is None:
            raise ContractViolation("reference style source needs the reference speaker id")
        stats_spk = target_speaker if use_target_stats and target_speaker is not None else ref_spk
        enc = model.reference_encoder
        was = enc.training
        enc.eval()
        try:
            with torch.no_grad():
                out = enc(feats.unsqueeze(0), speaker_ids=torch.tensor([ref_spk]),
                          stats_ids=torch.tensor([stats_spk]))
        finally:
            enc.train(was)
        return out.embedding[0]
    raise ContractViolation(f"unknown style source kind {kind!r}")


def synthesize(model: AcousticModel, token_ids: Sequence[int], speaker_id: int, style_source,
               kind: str = "embedding", reference_speaker: Optional[int] = None,
               use_target_stats: bool = False, seed: int = 0, max_frames: Optional[int] = None,
               prenet_dropout: bool = False) -> np.ndarray:
    """Free-running synthesis for one utterance; returns ``[T, F]`` features.

    ``speaker_id`` sets the output timbre; ``style_source`` supplies the style
    (cross-speaker transfer when it is a reference from another speaker).
    """
    if not 0 <= speaker_id < model.num_speakers:
        raise ContractViolation(f"speaker id {speaker_id} out of range")
    was = model.training
    model.eval()
    try:
        with torch.no_grad():
            style = style_embedding_for(model, style_source, kind, reference_speaker=reference_speaker,
                                        target_speaker=speaker_id, use_target_stats=use_target_stats)
            tokens, lengths = pad_tokens([list(token_ids)], model.pad_token)
            memory, mask = model.encode_text(tokens, lengths, torch.tensor([speaker_id]))
            gen = torch.Generator().manual_seed(seed)
            out, _ = model.decode_free(memory, mask, style[None, :].to(memory.dtype), max_frames=max_frames,
                                       generator=gen, prenet_dropout=prenet_dropout)
    finally:
        model.train(was)
    return out.numpy()
