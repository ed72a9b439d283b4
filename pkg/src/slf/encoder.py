"""Reference encoder: 2-D conv stack, SE-ResNet bottleneck, GRU summarizer,
speaker-wise batch norm and a Gaussian (optionally quantized) style head."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import List, Optional, Tuple

import torch
import torch.nn.functional as F
from torch import nn
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

from slf.errors import ContractViolation
from slf.numerics import GaussianPosterior, reparameterize
from slf.quantizer import Codebook, quantize
from slf.swbn import SpeakerWiseBatchNorm

EMBEDDING_DIM = 64


@dataclass
class EncoderConfig:
    conv_channels: List[int] = field(default_factory=lambda: [32, 32, 64, 64, 128, 128])
    kernels: List[Tuple[int, int]] = field(default_factory=lambda: [(3, 3)] * 6)
    strides: List[Tuple[int, int]] = field(default_factory=lambda: [(2, 2)] * 6)
    se_reduction: int = 8
    gru_width: int = 128
    embedding_dim: int = EMBEDDING_DIM
    variant: str = "qvae"
    n_mels: int = 80
    num_codes: int = 32
    logvar_init: float = 0.0
    use_swbn: bool = True

    def __post_init__(self):
        self.kernels = [tuple(k) for k in self.kernels]
        self.strides = [tuple(s) for s in self.strides]
        if not (len(self.conv_channels) == len(self.kernels) == len(self.strides) == 6):
            raise ContractViolation("the reference encoder has exactly 6 conv layers")
        if self.embedding_dim != EMBEDDING_DIM:
            raise ContractViolation(f"embedding_dim is fixed at {EMBEDDING_DIM}")
        if self.variant not in ("vae", "qvae"):
            raise ContractViolation(f"variant must be 'vae' or 'qvae', got {self.variant!r}")
        if self.conv_channels[-1] % self.se_reduction:
            raise ContractViolation("last conv width must be divisible by se_reduction")

    @classmethod
    def small(cls, **overrides) -> "EncoderConfig":
        """Desk-scale configuration for short synthetic utterances.

        Time is downsampled only 4x so ~50-frame inputs keep a usable frame
        sequence for the Gram losses.
        """
        base = dict(
            conv_channels=[8, 8, 16, 16, 16, 16],
            strides=[(2, 2), (1, 2), (2, 2), (1, 2), (1, 2), (1, 2)],
            se_reduction=4,
            gru_width=32,
        )
        base.update(overrides)
        return cls(**base)

    @classmethod
    def tiny(cls, **overrides) -> "EncoderConfig":
        """Gradient-check configuration."""
        base = dict(
            conv_channels=[2, 2, 2, 2, 2, 2],
            strides=[(1, 2), (1, 2), (1, 2), (1, 1), (1, 1), (1, 1)],
            se_reduction=1,
            gru_width=8,
            n_mels=16,
            variant="vae",
        )
        base.update(overrides)
        return cls(**base)

    def to_dict(self):
        d = asdict(self)
        d["kernels"] = [list(k) for k in self.kernels]
        d["strides"] = [list(s) for s in self.strides]
        return d

    def frequency_bins_out(self) -> int:
        f = self.n_mels
        for (kt, kf), (st, sf) in zip(self.kernels, self.strides):
            f = (f + 2 * (kf // 2) - kf) // sf + 1
        return f


@dataclass
class EncoderOutput:
    frame_features: torch.Tensor
    frame_lengths: torch.Tensor
    posterior: GaussianPosterior
    sample: torch.Tensor
    embedding: torch.Tensor
    vq_index: Optional[torch.Tensor] = None
    commitment: Optional[torch.Tensor] = None


def _time_mask(lengths, t_max, dtype):
    return (torch.arange(t_max, device=lengths.device)[None, :] < lengths[:, None]).to(dtype)


class SEBlock(nn.Module):
    """Squeeze-and-excitation: channel gates from a masked global average."""

    def __init__(self, channels: int, reduction: int):
        super().__init__()
        if channels % reduction:
            raise ContractViolation(f"{channels} channels not divisible by reduction {reduction}")
        hidden = channels // reduction
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)

    def gate(self, x, lengths=None):
        if lengths is None:
            squeeze = x.mean(dim=(2, 3))
        else:
            mask = _time_mask(lengths, x.shape[2], x.dtype)[:, None, :, None]
            squeeze = (x * mask).sum(dim=(2, 3)) / (lengths.to(x.dtype)[:, None] * x.shape[3])
        return torch.sigmoid(self.fc2(F.relu(self.fc1(squeeze))))

    def forward(self, x, lengths=None):
        return x * self.gate(x, lengths)[:, :, None, None]


class SEResNetBlock(nn.Module):
    """``x + SE(conv(relu(conv(x))))``, shape preserving."""

    def __init__(self, channels: int, reduction: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.se = SEBlock(channels, reduction)

    def forward(self, x, lengths=None):
        mask = None if lengths is None else _time_mask(lengths, x.shape[2], x.dtype)[:, None, :, None]
        if mask is not None:
            # Padded frames must look like the convolution's own zero padding.
            x = x * mask
        h = F.relu(self.conv1(x))
        if mask is not None:
            h = h * mask
        h = self.conv2(h)
        if mask is not None:
            h = h * mask
        return x + self.se(h, lengths)


def se_block(feature_map: torch.Tensor, block: SEResNetBlock, lengths=None) -> torch.Tensor:
    return block(feature_map, lengths)


class ReferenceEncoder(nn.Module):
    """Maps a padded feature batch ``[B, T, F]`` to a 64-dim style embedding.

    With ``variant='qvae'`` the sampled latent is snapped to the nearest
    codebook entry; otherwise the sample itself is the embedding.
    """

    def __init__(self, config: EncoderConfig, num_speakers: int,
                 swbn_momentum: float = 0.1, swbn_eps: float = 1e-5,
                 codebook_decay: float = 0.99, codebook_eps: float = 1e-5,
                 use_ema: bool = True, generator: Optional[torch.Generator] = None):
        super().__init__()
        self.config = config
        convs = []
        in_ch = 1
        for ch, k, s in zip(config.conv_channels, config.kernels, config.strides):
            conv = nn.Conv2d(in_ch, ch, kernel_size=k, stride=s, padding=(k[0] // 2, k[1] // 2))
            nn.init.kaiming_normal_(conv.weight, nonlinearity="relu")
            nn.init.zeros_(conv.bias)
            convs.append(conv)
            in_ch = ch
        self.convs = nn.ModuleList(convs)
        self.bottleneck = SEResNetBlock(in_ch, config.se_reduction)
        self.gru = nn.GRU(in_ch * config.frequency_bins_out(), config.gru_width, batch_first=True)
        self.swbn = SpeakerWiseBatchNorm(num_speakers, config.gru_width, momentum=swbn_momentum, eps=swbn_eps)
        self.mean_head = nn.Linear(config.gru_width, config.embedding_dim)
        self.logvar_head = nn.Linear(config.gru_width, config.embedding_dim)
        nn.init.constant_(self.logvar_head.bias, config.logvar_init)
        self.codebook = None
        if config.variant == "qvae":
            self.codebook = Codebook(config.num_codes, config.embedding_dim, decay=codebook_decay,
                                     smoothing_eps=codebook_eps, use_ema=use_ema, generator=generator)

    def output_lengths(self, lengths: torch.Tensor) -> torch.Tensor:
        for (kt, _), (st, _) in zip(self.config.kernels, self.config.strides):
            lengths = torch.div(lengths + 2 * (kt // 2) - kt, st, rounding_mode="floor") + 1
        return lengths

    def frames(self, features: torch.Tensor, lengths: Optional[torch.Tensor] = None):
        """Conv stack, bottleneck and GRU. Returns (sequence, lengths, last state)."""
        if features.dim() == 2:
            features = features.unsqueeze(0)
        b, t, f = features.shape
        if t < 1:
            raise ContractViolation("reference features need at least one frame")
        if f != self.config.n_mels:
            raise ContractViolation(f"expected {self.config.n_mels} bins, got {f}")
        if lengths is None:
            lengths = torch.full((b,), t, dtype=torch.long)
        lengths = lengths.to(torch.long)
        x = (features * _time_mask(lengths, t, features.dtype)[:, :, None]).unsqueeze(1)
        cur = lengths
        for conv, (kt, _), (st, _) in zip(self.convs, self.config.kernels, self.config.strides):
            x = F.relu(conv(x))
            cur = torch.div(cur + 2 * (kt // 2) - kt, st, rounding_mode="floor") + 1
            x = x * _time_mask(cur, x.shape[2], x.dtype)[:, None, :, None]
        x = self.bottleneck(x, cur)
        seq = x.permute(0, 2, 1, 3).reshape(b, x.shape[2], -1)
        packed = pack_padded_sequence(seq, cur.cpu(), batch_first=True, enforce_sorted=False)
        out, h_n = self.gru(packed)
        out, _ = pad_packed_sequence(out, batch_first=True, total_length=seq.shape[1])
        return out, cur, h_n[-1]

    def forward(self, features, lengths=None, speaker_ids=None, noise=None,
                update_running: bool = True, stats_ids=None) -> EncoderOutput:
        seq, seq_lengths, last = self.frames(features, lengths)
        if self.config.use_swbn:
            if speaker_ids is None:
                raise ContractViolation("speaker ids are required when speaker-wise batch norm is on")
            last = self.swbn(last, speaker_ids, update_running=update_running, stats_ids=stats_ids)
        post = GaussianPosterior(mu=self.mean_head(last), logvar=self.logvar_head(last))
        if noise is None:
            noise = torch.zeros_like(post.mu)
        sample = reparameterize(post, noise)
        out = EncoderOutput(frame_features=seq, frame_lengths=seq_lengths, posterior=post,
                            sample=sample, embedding=sample)
        if self.codebook is not None:
            q = quantize(sample, self.codebook)
            out.embedding = q.quantized
            out.vq_index = q.index
            out.commitment = q.commitment
        return out


def encode(encoder: ReferenceEncoder, features, speaker_id, noise=None, training: bool = False,
           lengths=None, update_running: bool = True) -> EncoderOutput:
    """Functional wrapper that sets the module mode for one call."""
    was_training = encoder.training
    encoder.train(training)
    try:
        ids = torch.as_tensor(speaker_id, dtype=torch.long).reshape(-1)
        return encoder(features, lengths=lengths, speaker_ids=ids, noise=noise, update_running=update_running)
    finally:
        encoder.train(was_training)
