"""Loss functions, sampling, Gram statistics, gradient reversal and the
staged loss scheduler.

All functions accept torch tensors and are dtype-agnostic, so the same code
runs in float32 for training and float64 for finite-difference checks.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, Mapping, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F

from slf.errors import ContractViolation, TrainingAbort

# Loss terms in the order they are switched on during staged training.
TERM_ORDER = ("spec", "stop", "commitment", "kl", "spk", "cycle", "contrast")
WEIGHTED_TERMS = ("kl", "spk", "cycle", "contrast", "commitment")
RECONSTRUCTION_TERMS = frozenset({"spec", "stop"})


@dataclass
class GaussianPosterior:
    """Diagonal Gaussian over the style latent.

    The spread is stored as log-variance; ``sigma`` is derived on access.
    """

    mu: torch.Tensor
    logvar: torch.Tensor

    def __post_init__(self):
        if self.mu.shape != self.logvar.shape:
            raise ContractViolation(
                f"mu {tuple(self.mu.shape)} and logvar {tuple(self.logvar.shape)} differ in shape"
            )

    @classmethod
    def from_sigma(cls, mu, sigma):
        mu = torch.as_tensor(mu)
        sigma = torch.as_tensor(sigma, dtype=mu.dtype)
        return cls(mu=mu, logvar=2.0 * torch.log(sigma))

    @property
    def sigma(self) -> torch.Tensor:
        return torch.exp(0.5 * self.logvar)

    @property
    def dim(self) -> int:
        return self.mu.shape[-1]


def reparameterize(post: GaussianPosterior, noise: torch.Tensor) -> torch.Tensor:
    """Draw ``mu + sigma * noise``; gradients reach ``mu`` and ``logvar`` only."""
    if noise.shape != post.mu.shape:
        raise ContractViolation(
            f"noise shape {tuple(noise.shape)} does not match posterior {tuple(post.mu.shape)}"
        )
    sigma = post.sigma
    # sigma == 0 must return mu bit-for-bit, even for non-finite noise products.
    return torch.where(sigma == 0, post.mu, post.mu + sigma * noise.detach())


def kl_divergence(post: GaussianPosterior) -> torch.Tensor:
    """Closed-form KL(N(mu, sigma^2) || N(0, I)) summed over the last axis."""
    if not torch.all(torch.isfinite(post.logvar)):
        raise ContractViolation("posterior sigma must be strictly positive and finite")
    return 0.5 * torch.sum(post.mu**2 + torch.exp(post.logvar) - 1.0 - post.logvar, dim=-1)


def kl_margin_loss(post: GaussianPosterior, margin: float) -> torch.Tensor:
    """Hinged KL: ``max(0, KL - margin)``.

    For a batched posterior the KL is averaged over the batch before the
    hinge, so the returned scalar is zero exactly when the batch KL is
    within the margin.
    """
    if margin < 0:
        raise ContractViolation(f"KL margin must be non-negative, got {margin}")
    kl = kl_divergence(post)
    if kl.dim() > 0:
        kl = kl.mean()
    return torch.clamp(kl - margin, min=0.0)


def gram(features: torch.Tensor, lengths: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Length-normalized Gram matrix ``F^T F / T``.

    Args:
        features: ``[T, d]`` or padded batch ``[B, T, d]``.
        lengths: valid frame count per batch row; padding rows are ignored.

    Returns:
        ``[d, d]`` or ``[B, d, d]``.
    """
    if features.dim() not in (2, 3):
        raise ContractViolation(f"gram expects a 2-D or 3-D tensor, got {features.dim()}-D")
    if features.shape[-2] < 1:
        raise ContractViolation("gram needs at least one frame")
    if features.dim() == 2:
        return features.transpose(0, 1) @ features / features.shape[0]
    if lengths is None:
        return features.transpose(1, 2) @ features / features.shape[1]
    lengths = lengths.to(features.device)
    if torch.any(lengths < 1):
        raise ContractViolation("every batch row needs at least one valid frame")
    mask = (torch.arange(features.shape[1], device=features.device)[None, :] < lengths[:, None])
    masked = features * mask.unsqueeze(-1).to(features.dtype)
    g = masked.transpose(1, 2) @ masked
    return g / lengths.to(features.dtype)[:, None, None]


def gram_distance(
    feat_a: torch.Tensor,
    feat_b: torch.Tensor,
    lengths_a: Optional[torch.Tensor] = None,
    lengths_b: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """``(1/d^2) * sum((G_a - G_b)^2)``; batch rows are averaged."""
    if feat_a.shape[-1] != feat_b.shape[-1]:
        raise ContractViolation(
            f"channel mismatch: {feat_a.shape[-1]} vs {feat_b.shape[-1]}"
        )
    d = feat_a.shape[-1]
    diff = gram(feat_a, lengths_a) - gram(feat_b, lengths_b)
    per_row = torch.sum(diff**2, dim=(-2, -1)) / (d * d)
    return per_row.mean() if per_row.dim() > 0 else per_row


def cycle_loss(feat_a, feat_b, lengths_a=None, lengths_b=None) -> torch.Tensor:
    """Gram-matrix consistency between ground-truth and synthesized features."""
    return gram_distance(feat_a, feat_b, lengths_a, lengths_b)


def contrast_loss(feat_y, feat_aug, margin: float, lengths_y=None, lengths_aug=None) -> torch.Tensor:
    """``max(0, margin - gram_distance)``: pushes an utterance and its
    perturbed copy apart until their Gram distance reaches ``margin``."""
    if margin < 0:
        raise ContractViolation(f"contrast margin must be non-negative, got {margin}")
    dist = gram_distance(feat_y, feat_aug, lengths_y, lengths_aug)
    return torch.clamp(margin - dist, min=0.0)


class GradReverse(torch.autograd.Function):
    """Identity forward; multiplies the incoming gradient by ``-scale``."""

    @staticmethod
    def forward(ctx, x, scale):
        ctx.scale = scale
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output.neg() * ctx.scale, None


def grl_apply(x: torch.Tensor, scale: float = 1.0) -> torch.Tensor:
    if scale < 0:
        raise ContractViolation(f"GRL scale must be non-negative, got {scale}")
    return GradReverse.apply(x, float(scale))


def speaker_adversary_loss(
    style_emb: torch.Tensor,
    speaker_id,
    classifier: torch.nn.Module,
    scale: float = 1.0,
    reverse: bool = True,
) -> torch.Tensor:
    """Speaker cross-entropy of a linear softmax classifier behind a GRL.

    ``reverse=False`` gives the GRL-free clone used to check gradient signs.
    """
    if style_emb.dim() == 1:
        style_emb = style_emb.unsqueeze(0)
    ids = torch.as_tensor(speaker_id, dtype=torch.long).reshape(-1)
    n_speakers = classifier.out_features
    if ids.numel() != style_emb.shape[0]:
        raise ContractViolation("one speaker id is required per embedding")
    if torch.any(ids < 0) or torch.any(ids >= n_speakers):
        raise ContractViolation(f"speaker id out of range [0, {n_speakers})")
    x = grl_apply(style_emb, scale) if reverse else style_emb
    return F.cross_entropy(classifier(x), ids.to(style_emb.device))


@dataclass(frozen=True)
class KLAnneal:
    """Linear ramp of the KL weight from 0 to ``target`` over ``ramp`` steps.

    ``start=None`` means the ramp starts when the KL term is switched on.
    """

    start: Optional[int] = None
    ramp: int = 10_000
    target: Optional[float] = None


def default_stages(thresholds: Sequence[int] = (0, 1000, 2000, 3000, 4000, 5000)) -> Tuple[Tuple[int, frozenset], ...]:
    """Cumulative stages following ``TERM_ORDER``.

    ``thresholds[0]`` switches on spec+stop, each later threshold adds the
    next term in order.
    """
    if len(thresholds) != len(TERM_ORDER) - 1:
        raise ContractViolation(f"need {len(TERM_ORDER) - 1} thresholds, got {len(thresholds)}")
    stages = []
    active = set(RECONSTRUCTION_TERMS)
    stages.append((int(thresholds[0]), frozenset(active)))
    for term, threshold in zip(TERM_ORDER[2:], thresholds[1:]):
        active.add(term)
        stages.append((int(threshold), frozenset(active)))
    return tuple(stages)


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1e-3
    beta: float = 0.02
    gamma: float = 1.0
    delta: float = 1.0
    zeta: float = 0.25
    kl_margin: float = 0.5
    contrast_margin: float = 1.0
    kl_anneal: KLAnneal = field(default_factory=KLAnneal)
    stages: Tuple[Tuple[int, frozenset], ...] = field(default_factory=default_stages)

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma", "delta", "zeta", "kl_margin", "contrast_margin"):
            if getattr(self, name) < 0:
                raise ContractViolation(f"{name} must be non-negative")
        stages = tuple((int(t), frozenset(s)) for t, s in self.stages)
        object.__setattr__(self, "stages", stages)
        thresholds = [t for t, _ in stages]
        if any(b <= a for a, b in zip(thresholds, thresholds[1:])):
            raise ContractViolation(f"stage thresholds must be strictly increasing: {thresholds}")
        for (_, prev), (_, cur) in zip(stages, stages[1:]):
            if not prev <= cur:
                raise ContractViolation("active term sets must grow monotonically across stages")
        order = {t: i for i, t in enumerate(TERM_ORDER)}
        first_seen = [min(term_activation(stages, t), default=None) for t in TERM_ORDER]
        unknown = set().union(*(s for _, s in stages)) - set(TERM_ORDER) if stages else set()
        if unknown:
            raise ContractViolation(f"unknown loss terms in stages: {sorted(unknown)}")
        seen = [(order[t], s) for t, s in zip(TERM_ORDER, first_seen) if s is not None]
        seen.sort()
        if any(b[1] < a[1] for a, b in zip(seen, seen[1:])):
            raise ContractViolation("stage activation order must follow " + ", ".join(TERM_ORDER))

    def weight(self, term: str) -> float:
        return {
            "spec": 1.0,
            "stop": 1.0,
            "kl": self.alpha,
            "spk": self.beta,
            "cycle": self.gamma,
            "contrast": self.delta,
            "commitment": self.zeta,
            "codebook": 1.0,
        }[term]

    def without(self, *terms: str) -> "LossWeights":
        """Copy with ``terms`` removed from every stage (ablations)."""
        drop = set(terms)
        stages = []
        for threshold, active in self.stages:
            kept = frozenset(active - drop)
            if stages and kept == stages[-1][1]:
                continue
            stages.append((threshold, kept))
        return replace(self, stages=tuple(stages))


def term_activation(stages, term: str) -> Iterable[int]:
    return [t for t, active in stages if term in active][:1]


def stage_schedule(step: int, weights: LossWeights) -> frozenset:
    """Set of active loss terms at ``step``; spec and stop are always on."""
    active = frozenset(RECONSTRUCTION_TERMS)
    for threshold, terms in weights.stages:
        if step >= threshold:
            active = active | terms
        else:
            break
    return active


def activation_step(term: str, weights: LossWeights) -> Optional[int]:
    if term in RECONSTRUCTION_TERMS:
        return 0
    hits = term_activation(weights.stages, term)
    return hits[0] if hits else None


def kl_anneal_factor(step: int, weights: LossWeights) -> float:
    """Fraction of ``alpha`` applied to the KL term at ``step``."""
    start = weights.kl_anneal.start
    if start is None:
        start = activation_step("kl", weights)
        if start is None:
            return 0.0
    ramp = weights.kl_anneal.ramp
    if ramp <= 0:
        return 1.0 if step >= start else 0.0
    return min(max((step - start) / ramp, 0.0), 1.0)


def effective_weights(step: int, weights: LossWeights) -> Dict[str, float]:
    """Multiplier applied to every term at ``step`` (0 for inactive terms)."""
    active = stage_schedule(step, weights)
    out = {}
    for term in TERM_ORDER:
        if term not in active:
            out[term] = 0.0
            continue
        w = weights.weight(term)
        if term == "kl":
            target = weights.kl_anneal.target
            w = (w if target is None else target) * kl_anneal_factor(step, weights)
        out[term] = w
    out["codebook"] = 1.0 if "commitment" in active else 0.0
    return out


def total_loss(terms: Mapping[str, torch.Tensor], weights: LossWeights, step: int):
    """Weighted sum of the active loss terms at ``step``.

    Raises:
        TrainingAbort: if any active term is NaN or infinite.
    """
    mult = effective_weights(step, weights)
    total = None
    for name, value in terms.items():
        w = mult.get(name, 0.0)
        if w == 0.0:
            continue
        v = torch.as_tensor(value)
        if not bool(torch.isfinite(v).all()):
            raise TrainingAbort(f"non-finite {name} loss at step {step}", step=step,
                                terms={k: float(torch.as_tensor(x).detach()) for k, x in terms.items()})
        total = w * v if total is None else total + w * v
    if total is None:
        total = torch.zeros(())
    return total


@dataclass
class LossReport:
    step: int
    spec: float = 0.0
    stop: float = 0.0
    kl: float = 0.0
    kl_raw: float = 0.0
    spk: float = 0.0
    cycle: float = 0.0
    contrast: float = 0.0
    commitment: float = 0.0
    codebook: float = 0.0
    total: float = 0.0

    FIELDS = ("step", "total", "spec", "stop", "kl", "kl_raw", "spk", "cycle",
              "contrast", "commitment", "codebook")

    def as_row(self) -> Dict[str, float]:
        return {name: getattr(self, name) for name in self.FIELDS}

    def weighted_sum(self, weights: LossWeights) -> float:
        mult = effective_weights(self.step, weights)
        return sum(mult[t] * getattr(self, t) for t in TERM_ORDER) + mult["codebook"] * self.codebook
