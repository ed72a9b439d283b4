"""Speaker-wise batch normalization.

Rows of a batch are grouped by speaker; each group is normalized with its own
mean and biased variance, then a shared scale and shift are applied. Running
statistics are kept per speaker for inference.
"""

from __future__ import annotations

from typing import Optional

import torch
from torch import nn

from slf.errors import ConfigurationError, ContractViolation


def _group_stats(x, ids, num_speakers):
    counts = torch.bincount(ids, minlength=num_speakers).to(x.dtype)
    safe = counts.clamp(min=1.0)[:, None]
    mean = torch.zeros(num_speakers, x.shape[1], dtype=x.dtype, device=x.device).index_add_(0, ids, x) / safe
    centered = x - mean[ids]
    var = torch.zeros_like(mean).index_add_(0, ids, centered * centered) / safe
    return counts, mean, var, centered


class _SpeakerNormFunction(torch.autograd.Function):
    """Per-speaker normalization with a hand-derived backward pass."""

    @staticmethod
    def forward(ctx, x, ids, weight, bias, eps, num_speakers):
        counts, mean, var, centered = _group_stats(x, ids, num_speakers)
        invstd = torch.rsqrt(var + eps)
        xhat = centered * invstd[ids]
        ctx.save_for_backward(xhat, invstd, counts, ids, weight)
        ctx.num_speakers = num_speakers
        ctx.mark_non_differentiable(mean, var)
        return xhat * weight + bias, mean, var

    @staticmethod
    def backward(ctx, grad_out, _grad_mean, _grad_var):
        xhat, invstd, counts, ids, weight = ctx.saved_tensors
        s = ctx.num_speakers
        dxhat = grad_out * weight
        zeros = torch.zeros(s, xhat.shape[1], dtype=xhat.dtype, device=xhat.device)
        sum_dxhat = zeros.index_add(0, ids, dxhat)
        sum_dxhat_xhat = zeros.index_add(0, ids, dxhat * xhat)
        m = counts.clamp(min=1.0)[ids][:, None]
        grad_x = invstd[ids] * (dxhat - sum_dxhat[ids] / m - xhat * sum_dxhat_xhat[ids] / m)
        grad_w = torch.sum(grad_out * xhat, dim=0)
        grad_b = torch.sum(grad_out, dim=0)
        return grad_x, None, grad_w, grad_b, None, None


class SpeakerWiseBatchNorm(nn.Module):
    """Holds the per-speaker statistics and the shared affine parameters.

    Args:
        num_speakers: S, size of the speaker table.
        dim: k, feature width.
        momentum: running-statistics update rate.
        eps: variance floor added before the square root.
        per_speaker_affine: give every speaker its own scale/shift instead of
            sharing one pair.
    """

    def __init__(self, num_speakers: int, dim: int, momentum: float = 0.1, eps: float = 1e-5,
                 per_speaker_affine: bool = False):
        super().__init__()
        if not 0.0 <= momentum < 1.0:
            raise ContractViolation(f"momentum must be in [0, 1), got {momentum}")
        self.num_speakers = num_speakers
        self.dim = dim
        self.momentum = float(momentum)
        self.eps = float(eps)
        self.per_speaker_affine = per_speaker_affine
        shape = (num_speakers, dim) if per_speaker_affine else (dim,)
        self.weight = nn.Parameter(torch.ones(shape))
        self.bias = nn.Parameter(torch.zeros(shape))
        self.register_buffer("running_mean", torch.zeros(num_speakers, dim))
        self.register_buffer("running_var", torch.ones(num_speakers, dim))
        self.register_buffer("seen", torch.zeros(num_speakers, dtype=torch.bool))

    def forward(self, x, speaker_ids, update_running: bool = True, stats_ids=None):
        return swbn_forward(x, speaker_ids, self, training=self.training,
                            update_running=update_running, stats_ids=stats_ids)

    def extra_repr(self):
        return f"num_speakers={self.num_speakers}, dim={self.dim}, momentum={self.momentum}, eps={self.eps}"


@torch.no_grad()
def swbn_update_running(stats: SpeakerWiseBatchNorm, speaker_id: int, mu, var) -> SpeakerWiseBatchNorm:
    """Blend one speaker's batch statistics into its running statistics.

    The first update copies the batch statistics; later ones use
    ``running <- (1 - momentum) * running + momentum * batch``.
    """
    mu = torch.as_tensor(mu, dtype=stats.running_mean.dtype)
    var = torch.as_tensor(var, dtype=stats.running_var.dtype)
    if not bool(stats.seen[speaker_id]):
        stats.running_mean[speaker_id] = mu
        stats.running_var[speaker_id] = var
        stats.seen[speaker_id] = True
    else:
        m = stats.momentum
        stats.running_mean[speaker_id] = (1.0 - m) * stats.running_mean[speaker_id] + m * mu
        stats.running_var[speaker_id] = (1.0 - m) * stats.running_var[speaker_id] + m * var
    return stats


def _affine(stats, ids):
    if stats.per_speaker_affine:
        return stats.weight[ids], stats.bias[ids]
    return stats.weight, stats.bias


def swbn_forward(batch: torch.Tensor, speaker_ids, stats: SpeakerWiseBatchNorm, training: bool,
                 update_running: bool = True, stats_ids: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Speaker-wise batch normalization of ``batch`` (``[B, k]``).

    Training mode normalizes every speaker group with its in-batch mean and
    biased variance and, if ``update_running``, folds those statistics into
    the running estimates. Inference mode uses each row's running statistics
    (``stats_ids`` overrides which speaker's statistics a row uses); rows of a
    never-seen speaker use the average over all seen speakers.

    Raises:
        ContractViolation: speaker id outside ``[0, S)``.
        ConfigurationError: inference before any speaker has been seen.
    """
    ids = torch.as_tensor(speaker_ids, dtype=torch.long, device=batch.device).reshape(-1)
    s = stats.num_speakers
    if ids.numel() != batch.shape[0]:
        raise ContractViolation("one speaker id per batch row is required")
    if ids.numel() and (ids.min() < 0 or ids.max() >= s):
        raise ContractViolation(f"speaker id out of range [0, {s})")
    if training:
        if stats.per_speaker_affine:
            w, b = _affine(stats, ids)
            out, mean, var = _SpeakerNormFunction.apply(
                batch, ids, torch.ones_like(stats.weight[0]), torch.zeros_like(stats.bias[0]), stats.eps, s)
            out = out * w + b
        else:
            out, mean, var = _SpeakerNormFunction.apply(batch, ids, stats.weight, stats.bias, stats.eps, s)
        if update_running:
            for spk in torch.unique(ids).tolist():
                swbn_update_running(stats, spk, mean[spk].detach(), var[spk].detach())
        return out

    row_ids = ids if stats_ids is None else torch.as_tensor(
        stats_ids, dtype=torch.long, device=batch.device).reshape(-1)
    seen = stats.seen
    if not bool(seen.any()):
        raise ConfigurationError("speaker-wise batch norm has no running statistics yet")
    mean = stats.running_mean.clone()
    var = stats.running_var.clone()
    if not bool(seen.all()):
        mean[~seen] = stats.running_mean[seen].mean(dim=0)
        var[~seen] = stats.running_var[seen].mean(dim=0)
    mean = mean.to(batch.dtype)
    var = var.to(batch.dtype)
    xhat = (batch - mean[row_ids]) * torch.rsqrt(var[row_ids] + stats.eps)
    w, b = _affine(stats, row_ids)
    return xhat * w + b
