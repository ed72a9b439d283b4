"""Finite-difference gradient suite.

Every check builds random double-precision cases, differentiates a scalar
function with autograd and compares against central differences computed
here by hand. The report carries the worst relative error per check.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import torch

from slf.encoder import EncoderConfig, ReferenceEncoder, SEResNetBlock
from slf.numerics import (
    GaussianPosterior,
    contrast_loss,
    cycle_loss,
    gram_distance,
    kl_divergence,
    kl_margin_loss,
    speaker_adversary_loss,
)
from slf.quantizer import Codebook, commitment_loss, quantize
from slf.swbn import SpeakerWiseBatchNorm

DTYPE = torch.float64
LAYER_TOL = 1e-4
PROBE_TOL = 1e-3


@dataclass
class Case:
    """One scalar function of ``inputs`` plus how to read its numeric gradient.

    ``numeric_scale[i]`` multiplies the finite-difference gradient of input
    ``i`` before comparison (GRL checks expect ``-scale``). ``numeric_fn``
    replaces ``fn`` for the finite differences when the analytic route is
    defined through a surrogate (straight-through estimator).
    """

    fn: Callable[..., torch.Tensor]
    inputs: List[torch.Tensor]
    numeric_scale: Optional[List[float]] = None
    numeric_fn: Optional[Callable[..., torch.Tensor]] = None
    numeric_inputs: Optional[List[torch.Tensor]] = None
    max_coords: Optional[int] = None


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    tolerance: float
    n_cases: int
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_error) and self.max_rel_error < self.tolerance)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status}  {self.name:<28s} max_rel_err={self.max_rel_error:.3e}  "
                f"tol={self.tolerance:.0e}  cases={self.n_cases}  {self.seconds:.1f}s")


def central_difference(fn: Callable[..., torch.Tensor], inputs: Sequence[torch.Tensor], index: int,
                       coords: Optional[np.ndarray] = None, h: float = 1e-6) -> torch.Tensor:
    """``(f(x + h e_j) - f(x - h e_j)) / 2h`` for the chosen flat coordinates of one input."""
    x = inputs[index]
    flat = x.detach().reshape(-1)
    grad = torch.zeros_like(flat)
    coords = np.arange(flat.numel()) if coords is None else coords
    with torch.no_grad():
        for j in coords:
            orig = flat[j].item()
            vals = []
            for sign in (1.0, -1.0):
                pert = flat.clone()
                pert[j] = orig + sign * h
                args = list(inputs)
                args[index] = pert.reshape(x.shape)
                vals.append(float(fn(*args)))
            grad[j] = (vals[0] - vals[1]) / (2.0 * h)
    return grad


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor, floor: float = 1e-8) -> float:
    """Worst elementwise gap scaled by the larger gradient magnitude.

    Scaling by the max-norm keeps near-zero entries from inflating the error.
    """
    a = analytic.reshape(-1)
    n = numeric.reshape(-1)
    if a.numel() == 0:
        return 0.0
    scale = max(float(a.abs().max()), float(n.abs().max()), floor)
    return float((a - n).abs().max()) / scale


def evaluate_case(case: Case, rng: np.random.Generator) -> float:
    inputs = [x.detach().clone().requires_grad_(True) for x in case.inputs]
    out = case.fn(*inputs)
    grads = torch.autograd.grad(out, inputs, allow_unused=True)
    num_fn = case.numeric_fn or case.fn
    num_inputs = case.numeric_inputs or [x.detach() for x in case.inputs]
    # Coordinates are sampled over all inputs jointly when capped.
    sizes = [x.numel() for x in inputs]
    total = sum(sizes)
    if case.max_coords is not None and total > case.max_coords:
        chosen = np.sort(rng.choice(total, size=case.max_coords, replace=False))
    else:
        chosen = np.arange(total)
    analytic_parts, numeric_parts = [], []
    offset = 0
    for i, size in enumerate(sizes):
        local = chosen[(chosen >= offset) & (chosen < offset + size)] - offset
        offset += size
        if local.size == 0:
            continue
        g = grads[i]
        g = torch.zeros_like(inputs[i]) if g is None else g
        scale = 1.0 if case.numeric_scale is None else case.numeric_scale[i]
        numeric = central_difference(num_fn, num_inputs, i, local) * scale
        analytic_parts.append(g.detach().reshape(-1)[local])
        numeric_parts.append(numeric[local])
    return relative_error(torch.cat(analytic_parts), torch.cat(numeric_parts))


def _randn(gen, *shape):
    return torch.randn(*shape, generator=gen, dtype=DTYPE)


def _case_kl_margin(gen):
    b, d = int(torch.randint(1, 5, (1,), generator=gen)), int(torch.randint(2, 9, (1,), generator=gen))
    mu, logvar = _randn(gen, b, d), 0.5 * _randn(gen, b, d)
    kl = float(kl_divergence(GaussianPosterior(mu, logvar)).mean())
    # Margin at least 0.05 away from the hinge so both sides of the kink stay smooth.
    frac = float(torch.rand(1, generator=gen))
    margin = kl * 0.8 * frac if frac < 0.75 else kl + 0.05 + frac
    return Case(lambda m, lv: kl_margin_loss(GaussianPosterior(m, lv), margin), [mu, logvar])


def _features_pair(gen):
    d = int(torch.randint(2, 6, (1,), generator=gen))
    t1, t2 = (int(v) for v in torch.randint(2, 9, (2,), generator=gen))
    return _randn(gen, t1, d), _randn(gen, t2, d)


def _case_cycle(gen):
    a, b = _features_pair(gen)
    return Case(cycle_loss, [a, b])


def _case_contrast(gen):
    a, b = _features_pair(gen)
    dist = float(gram_distance(a, b))
    # Mostly active cases; the rest sit well inside the clipped region.
    margin = dist * (1.5 + float(torch.rand(1, generator=gen))) if float(torch.rand(1, generator=gen)) < 0.8 \
        else dist * 0.5
    return Case(lambda x, y: contrast_loss(x, y, margin), [a, b])


def _case_commitment(gen):
    b, d = int(torch.randint(1, 5, (1,), generator=gen)), int(torch.randint(2, 9, (1,), generator=gen))
    z, e = _randn(gen, b, d), _randn(gen, b, d)
    # The entry is a stop-gradient constant; only z is differentiated.
    return Case(lambda zz: commitment_loss(zz, e).sum(), [z])


def _case_straight_through(gen):
    k, d = int(torch.randint(2, 9, (1,), generator=gen)), int(torch.randint(2, 7, (1,), generator=gen))
    book = Codebook.from_vectors(_randn(gen, k, d))
    z = _randn(gen, 3, d)
    w = _randn(gen, 3, d)
    e = book.vectors.detach()[quantize(z, book).index]
    # d/dz f(q(z)) is defined as df/de at the selected entry.
    return Case(lambda zz: torch.sum(w * torch.tanh(quantize(zz, book).quantized)), [z],
                numeric_fn=lambda ee: torch.sum(w * torch.tanh(ee)), numeric_inputs=[e])


def _case_speaker_adversary(gen):
    d, s = int(torch.randint(2, 9, (1,), generator=gen)), int(torch.randint(2, 6, (1,), generator=gen))
    b = int(torch.randint(1, 6, (1,), generator=gen))
    emb = _randn(gen, b, d)
    weight, bias = _randn(gen, s, d), _randn(gen, s)
    ids = torch.randint(0, s, (b,), generator=gen)
    scale = 0.25 + float(torch.rand(1, generator=gen))

    clf = torch.nn.Linear(d, s).to(DTYPE)

    def fn(x, w, c):
        head = lambda h: torch.func.functional_call(clf, {"weight": w, "bias": c}, (h,))
        head.out_features = s
        return speaker_adversary_loss(x, ids, head, scale=scale)

    # Style gradient is reversed and scaled; classifier gradients are untouched.
    return Case(fn, [emb, weight, bias], numeric_scale=[-scale, 1.0, 1.0])


def _swbn_case(gen, which: str):
    dim = int(torch.randint(2, 6, (1,), generator=gen))
    n_spk = int(torch.randint(1, 4, (1,), generator=gen))
    ids = torch.cat([torch.full((int(torch.randint(2, 6, (1,), generator=gen)),), s) for s in range(n_spk)])
    x = _randn(gen, ids.numel(), dim) * 2.0 + 0.5
    layer = SpeakerWiseBatchNorm(n_spk, dim).to(DTYPE).train()
    w0 = 1.0 + 0.3 * _randn(gen, dim)
    b0 = 0.3 * _randn(gen, dim)
    probe = _randn(gen, ids.numel(), dim)
    keep = {"input": 0, "weight": 1, "bias": 2}[which]

    def fn(*args):
        # Gradient flows only into the input under test.
        inp, w, b = (a if i == keep else a.detach() for i, a in enumerate(args))
        y = torch.func.functional_call(layer, {"weight": w, "bias": b}, (inp, ids),
                                       dict(update_running=False))
        return torch.sum(probe * y) + 0.1 * torch.sum(y ** 3)

    return Case(fn, [x, w0, b0], numeric_scale=[1.0 if i == keep else 0.0 for i in range(3)])


def _case_se_block(gen):
    ch = 4
    block = SEResNetBlock(ch, 2).to(DTYPE)
    b, t, f = 2, int(torch.randint(3, 7, (1,), generator=gen)), int(torch.randint(3, 6, (1,), generator=gen))
    x = _randn(gen, b, ch, t, f)
    lengths = torch.tensor([t, max(1, t - 2)])
    probe = _randn(gen, b, ch, t, f)
    names = [n for n, _ in block.named_parameters()]
    params = [p.detach().clone() for p in block.parameters()]

    def fn(inp, *ps):
        out = torch.func.functional_call(block, dict(zip(names, ps)), (inp, lengths))
        return torch.sum(probe * out)

    return Case(fn, [x] + params, max_coords=80)


def _case_encoder_probe(gen):
    cfg = EncoderConfig.tiny()
    seed = int(torch.randint(0, 2**31 - 1, (1,), generator=gen))
    torch.manual_seed(seed)
    enc = ReferenceEncoder(cfg, num_speakers=2).to(DTYPE)
    enc.train()
    t = int(torch.randint(4, 9, (1,), generator=gen))
    # Three rows per speaker: with two, normalized rows are +-1 whatever the
    # input and every upstream gradient collapses to eps scale.
    feats = _randn(gen, 6, t, cfg.n_mels)
    lengths = torch.tensor([t, t - 1, t - 3, t, t - 2, t - 1])
    ids = torch.tensor([0, 0, 0, 1, 1, 1])
    noise = _randn(gen, 6, cfg.embedding_dim)
    probe = _randn(gen, 6, cfg.embedding_dim)
    names = [n for n, _ in enc.named_parameters()]
    # Jitter off the zero bias init: a dead channel feeding exact zeros puts
    # the next pre-activation on the ReLU kink.
    params = [p.detach() + 0.05 * _randn(gen, *p.shape) for p in enc.parameters()]

    def fn(inp, *ps):
        out = torch.func.functional_call(enc, dict(zip(names, ps)), (inp,),
                                         dict(lengths=lengths, speaker_ids=ids, noise=noise,
                                              update_running=False))
        return torch.sum(probe * out.embedding) + 0.05 * torch.sum(out.embedding ** 2)

    return Case(fn, [feats] + params, max_coords=48)


@dataclass
class Check:
    name: str
    build: Callable[[torch.Generator], Case]
    tolerance: float = LAYER_TOL
    n_cases: int = 50
    tags: tuple = field(default_factory=tuple)


CHECKS: Dict[str, Check] = {c.name: c for c in [
    Check("kl_margin_loss", _case_kl_margin),
    Check("cycle_loss", _case_cycle),
    Check("contrast_loss", _case_contrast),
    Check("commitment_loss", _case_commitment),
    Check("quantizer_straight_through", _case_straight_through),
    Check("speaker_adversary_loss", _case_speaker_adversary),
    Check("swbn_input", lambda g: _swbn_case(g, "input")),
    Check("swbn_weight", lambda g: _swbn_case(g, "weight")),
    Check("swbn_bias", lambda g: _swbn_case(g, "bias")),
    Check("se_block", _case_se_block),
    Check("encoder_probe", _case_encoder_probe, tolerance=PROBE_TOL),
]}


def run_check(check: Check, seed: int = 0, n_cases: Optional[int] = None) -> CheckResult:
    n = check.n_cases if n_cases is None else n_cases
    gen = torch.Generator().manual_seed(seed)
    rng = np.random.default_rng(seed)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(n):
        err = evaluate_case(check.build(gen), rng)
        worst = err if not np.isfinite(err) else max(worst, err)
        if not np.isfinite(worst):
            break
    return CheckResult(check.name, worst, check.tolerance, n, time.perf_counter() - start)


def run_suite(names: Optional[Sequence[str]] = None, seed: int = 0,
              n_cases: Optional[int] = None) -> List[CheckResult]:
    """Run the named checks (all by default) in registry order."""
    names = list(CHECKS) if names is None else list(names)
    unknown = [n for n in names if n not in CHECKS]
    if unknown:
        raise KeyError(f"unknown gradient checks: {unknown}")
    prev = torch.get_default_dtype()
    torch.set_default_dtype(DTYPE)
    try:
        return [run_check(CHECKS[n], seed=seed, n_cases=n_cases) for n in names]
    finally:
        torch.set_default_dtype(prev)
