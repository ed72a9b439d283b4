"""Discrete style codebook with straight-through gradients and EMA updates."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
from torch import nn

from slf.errors import ContractViolation


class Codebook(nn.Module):
    """K x D codebook maintained by exponential moving averages.

    ``ema_counts`` and ``ema_sums`` start at 1 and at the initial vectors so
    that ``vectors == ema_sums / ema_counts`` holds from the first step and
    codes that receive no assignments keep their position.

    Args:
        num_codes: number of entries K (>= 2).
        dim: entry width.
        decay: EMA decay in (0, 1).
        smoothing_eps: Laplace smoothing constant for the cluster sizes.
        use_ema: if False the vectors are a trainable parameter updated by
            :func:`codebook_loss` instead.
        generator: RNG for the N(0, 0.1^2) initialization.
    """

    def __init__(self, num_codes: int = 32, dim: int = 64, decay: float = 0.99,
                 smoothing_eps: float = 1e-5, use_ema: bool = True,
                 generator: Optional[torch.Generator] = None, init_std: float = 0.1):
        super().__init__()
        if num_codes < 2:
            raise ContractViolation(f"codebook needs K >= 2 entries, got {num_codes}")
        if not 0.0 < decay < 1.0:
            raise ContractViolation(f"decay must be in (0, 1), got {decay}")
        self.decay = float(decay)
        self.smoothing_eps = float(smoothing_eps)
        self.use_ema = use_ema
        init = torch.randn(num_codes, dim, generator=generator) * init_std
        self.vectors = nn.Parameter(init, requires_grad=not use_ema)
        self.register_buffer("ema_counts", torch.ones(num_codes))
        self.register_buffer("ema_sums", init.clone())

    @property
    def num_codes(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    @classmethod
    def from_vectors(cls, vectors, decay: float = 0.99, smoothing_eps: float = 1e-5,
                     counts=None, use_ema: bool = True) -> "Codebook":
        vectors = torch.as_tensor(vectors)
        book = cls(vectors.shape[0], vectors.shape[1], decay=decay,
                   smoothing_eps=smoothing_eps, use_ema=use_ema)
        book.to(vectors.dtype)
        with torch.no_grad():
            book.vectors.copy_(vectors)
            if counts is None:
                book.ema_counts.fill_(1.0)
            else:
                book.ema_counts.copy_(torch.as_tensor(counts, dtype=vectors.dtype))
            book.ema_sums.copy_(vectors * book.ema_counts[:, None])
        return book


@dataclass
class QuantizeResult:
    quantized: torch.Tensor
    index: torch.Tensor
    commitment: torch.Tensor


class _StraightThrough(torch.autograd.Function):
    """Returns the codebook entry exactly; routes its gradient to ``z``."""

    @staticmethod
    def forward(ctx, z, e):
        return e.clone()

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output, None


def nearest_code(z: torch.Tensor, vectors: torch.Tensor) -> torch.Tensor:
    """Index of the closest entry by Euclidean distance, lowest index on ties."""
    if vectors.shape[0] == 0:
        raise ContractViolation("codebook is empty")
    if z.shape[-1] != vectors.shape[-1]:
        raise ContractViolation(f"z width {z.shape[-1]} != codebook width {vectors.shape[-1]}")
    flat = z.reshape(-1, z.shape[-1])
    # Exact squared differences (not the expanded |z|^2 - 2ze + |e|^2 form) so
    # ties between equidistant entries are resolved reproducibly.
    d2 = torch.sum((flat[:, None, :] - vectors[None, :, :]) ** 2, dim=-1)
    # argmin returns the first minimum on CPU; enforce it explicitly anyway.
    best = d2.min(dim=1, keepdim=True).values
    hits = d2 == best
    idx = torch.arange(vectors.shape[0], device=z.device).expand_as(hits)
    index = torch.where(hits, idx, torch.full_like(idx, vectors.shape[0])).min(dim=1).values
    return index.reshape(z.shape[:-1])


def commitment_loss(z: torch.Tensor, e: torch.Tensor) -> torch.Tensor:
    """``||z - sg[e]||^2`` per row."""
    if z.shape != e.shape:
        raise ContractViolation(f"width mismatch: {tuple(z.shape)} vs {tuple(e.shape)}")
    return torch.sum((z - e.detach()) ** 2, dim=-1)


def codebook_loss(z: torch.Tensor, e: torch.Tensor) -> torch.Tensor:
    """``||sg[z] - e||^2`` per row; only used when EMA updates are disabled."""
    if z.shape != e.shape:
        raise ContractViolation(f"width mismatch: {tuple(z.shape)} vs {tuple(e.shape)}")
    return torch.sum((z.detach() - e) ** 2, dim=-1)


def quantize(z: torch.Tensor, book: Codebook) -> QuantizeResult:
    """Snap ``z`` to its nearest codebook entry.

    The returned ``quantized`` equals ``book.vectors[index]`` bit-for-bit; in
    the backward pass its gradient is copied to ``z`` unchanged.
    """
    vectors = book.vectors
    index = nearest_code(z.detach(), vectors.detach())
    e = vectors[index]
    quantized = _StraightThrough.apply(z, e.detach())
    return QuantizeResult(quantized=quantized, index=index, commitment=commitment_loss(z, e))


@torch.no_grad()
def ema_update(book: Codebook, batch_z: torch.Tensor, assignments: torch.Tensor) -> Codebook:
    """One EMA step of cluster sizes and sums, then refresh the vectors.

    ``N_i <- g N_i + (1-g) count_i``, ``m_i <- g m_i + (1-g) sum_i`` and
    ``e_i <- m_i / N~_i`` with Laplace-smoothed sizes
    ``N~_i = (N_i + eps) / (n + K eps) * n``. Mutates and returns ``book``.
    """
    batch_z = batch_z.detach().reshape(-1, book.dim).to(book.ema_sums.dtype)
    assignments = torch.as_tensor(assignments, dtype=torch.long).reshape(-1)
    k = book.num_codes
    if assignments.numel() != batch_z.shape[0]:
        raise ContractViolation("one assignment per batch row is required")
    if assignments.numel() and (assignments.min() < 0 or assignments.max() >= k):
        raise ContractViolation(f"assignment index out of range [0, {k})")
    g = book.decay
    counts = torch.bincount(assignments, minlength=k).to(batch_z.dtype)
    sums = torch.zeros_like(book.ema_sums).index_add_(0, assignments, batch_z)
    book.ema_counts.mul_(g).add_((1.0 - g) * counts)
    book.ema_sums.mul_(g).add_((1.0 - g) * sums)
    n = book.ema_counts.sum()
    smoothed = (book.ema_counts + book.smoothing_eps) / (n + k * book.smoothing_eps) * n
    book.vectors.data.copy_(book.ema_sums / smoothed[:, None])
    return book

