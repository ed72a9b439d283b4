import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from slf.errors import ContractViolation
from slf.quantizer import Codebook, codebook_loss, commitment_loss, ema_update, nearest_code, quantize

D = torch.float64


def book_of(rows, **kw):
    return Codebook.from_vectors(torch.tensor(rows, dtype=D), **kw)


def brute_force_nearest(z, vectors):
    """Plain-Python scan: strictly smaller distance wins, so ties keep the lowest index."""
    best, best_d = None, None
    for i, e in enumerate(vectors):
        d = sum((a - b) ** 2 for a, b in zip(z, e))
        if best_d is None or d < best_d:
            best, best_d = i, d
    return best


class TestQuantize:
    def test_two_entry_example(self):
        q = quantize(torch.tensor([0.2, 0.1], dtype=D), book_of([[0.0, 0.0], [1.0, 1.0]]))
        assert int(q.index) == 0
        assert q.quantized.tolist() == [0.0, 0.0]
        assert float(q.commitment) == pytest.approx(0.05)

    def test_exact_match(self):
        book = book_of([[0.0, 0.0], [1.0, 1.0], [3.0, -1.0]])
        q = quantize(torch.tensor([3.0, -1.0], dtype=D), book)
        assert int(q.index) == 2 and float(q.commitment) == 0.0

    def test_tie_goes_to_lowest_index(self):
        assert int(quantize(torch.tensor([0.5], dtype=D), book_of([[0.0], [1.0]])).index) == 0
        assert int(nearest_code(torch.tensor([[0.5]], dtype=D), torch.tensor([[1.0], [0.0]], dtype=D))[0]) == 0

    def test_matches_brute_force_1000_cases(self):
        rng = np.random.default_rng(123)
        ties = 0
        for case in range(1000):
            k, d = int(rng.integers(2, 9)), int(rng.integers(1, 5))
            # Integer grids make exact ties common.
            vectors = rng.integers(-2, 3, size=(k, d)).astype(float)
            if case % 3 == 0:
                vectors[int(rng.integers(k))] = vectors[0]
            z = rng.integers(-4, 5, size=d) / 2.0
            dists = ((vectors - z) ** 2).sum(axis=1)
            ties += int((dists == dists.min()).sum() > 1)
            got = int(nearest_code(torch.tensor(z[None]), torch.tensor(vectors))[0])
            assert got == brute_force_nearest(z.tolist(), vectors.tolist())
        assert ties > 100

    def test_quantized_is_codebook_row_bitwise(self):
        gen = torch.Generator().manual_seed(0)
        book = Codebook(16, 8, generator=gen)
        z = torch.randn(50, 8, generator=gen)
        q = quantize(z, book)
        assert torch.equal(q.quantized, book.vectors.detach()[q.index])

    def test_straight_through_gradient(self):
        gen = torch.Generator().manual_seed(3)
        book = Codebook.from_vectors(torch.randn(6, 4, generator=gen, dtype=D))
        w = torch.randn(5, 4, generator=gen, dtype=D)
        z = torch.randn(5, 4, generator=gen, dtype=D, requires_grad=True)
        q = quantize(z, book)
        torch.sum(w * q.quantized ** 2).backward()
        e = q.quantized.detach().clone().requires_grad_()
        torch.sum(w * e ** 2).backward()
        assert torch.equal(z.grad, e.grad)

    def test_empty_and_width_errors(self):
        with pytest.raises(ContractViolation):
            nearest_code(torch.zeros(1, 2), torch.zeros(0, 2))
        with pytest.raises(ContractViolation):
            quantize(torch.zeros(3), book_of([[0.0, 0.0], [1.0, 1.0]]))

    def test_small_codebook_rejected(self):
        with pytest.raises(ContractViolation):
            Codebook(1, 4)


class TestLosses:
    def test_commitment_values(self):
        z = torch.tensor([0.2, 0.1], dtype=D)
        assert float(commitment_loss(z, z)) == 0.0
        assert float(commitment_loss(z, torch.zeros(2, dtype=D))) == pytest.approx(0.05)

    def test_commitment_gradient_only_to_z(self):
        z = torch.tensor([0.2, 0.1], dtype=D, requires_grad=True)
        e = torch.tensor([1.0, -1.0], dtype=D, requires_grad=True)
        commitment_loss(z, e).backward()
        assert e.grad is None
        np.testing.assert_allclose(z.grad.numpy(), 2 * (z - e).detach().numpy())

    def test_codebook_loss_gradient_only_to_e(self):
        z = torch.tensor([0.2, 0.1], dtype=D, requires_grad=True)
        e = torch.tensor([1.0, -1.0], dtype=D, requires_grad=True)
        codebook_loss(z, e).backward()
        assert z.grad is None
        np.testing.assert_allclose(e.grad.numpy(), 2 * (e - z).detach().numpy())

    def test_width_mismatch(self):
        with pytest.raises(ContractViolation):
            commitment_loss(torch.zeros(2), torch.zeros(3))


def hand_ema(counts, sums, z, assign, decay, eps):
    """Scalar-loop transcription of the EMA recurrences with Laplace smoothing."""
    k = len(counts)
    counts = list(counts)
    sums = [list(r) for r in sums]
    for i in range(k):
        c = sum(1 for a in assign if a == i)
        counts[i] = decay * counts[i] + (1 - decay) * c
        for j in range(len(sums[i])):
            s = sum(z[b][j] for b, a in enumerate(assign) if a == i)
            sums[i][j] = decay * sums[i][j] + (1 - decay) * s
    n = sum(counts)
    smoothed = [(c + eps) / (n + k * eps) * n for c in counts]
    vectors = [[s / smoothed[i] for s in sums[i]] for i in range(k)]
    return counts, sums, vectors


class TestEMA:
    def test_single_code_hand_example(self):
        book = book_of([[1.0], [5.0]], decay=0.99, counts=[1.0, 1.0])
        ema_update(book, torch.tensor([[2.0]], dtype=D), torch.tensor([0]))
        assert float(book.ema_counts[0]) == pytest.approx(1.0)
        assert float(book.ema_sums[0, 0]) == pytest.approx(1.01)
        assert float(book.vectors[0, 0]) == pytest.approx(1.01, rel=1e-3)

    def test_matches_hand_recurrence_100_cases(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            k, d, b = int(rng.integers(2, 7)), int(rng.integers(1, 5)), int(rng.integers(1, 10))
            decay = float(rng.uniform(0.5, 0.999))
            eps = float(10 ** rng.uniform(-6, -2))
            vectors = rng.normal(size=(k, d))
            counts = rng.uniform(0.1, 3.0, size=k)
            z = rng.normal(size=(b, d))
            assign = rng.integers(0, k, size=b)
            book = Codebook.from_vectors(torch.tensor(vectors), decay=decay, smoothing_eps=eps,
                                         counts=counts.tolist())
            exp_counts, exp_sums, exp_vectors = hand_ema(counts.tolist(), (vectors * counts[:, None]).tolist(),
                                                         z.tolist(), assign.tolist(), decay, eps)
            ema_update(book, torch.tensor(z), torch.tensor(assign))
            np.testing.assert_allclose(book.ema_counts.numpy(), exp_counts, rtol=0, atol=1e-10)
            np.testing.assert_allclose(book.ema_sums.numpy(), exp_sums, rtol=0, atol=1e-10)
            np.testing.assert_allclose(book.vectors.detach().numpy(), exp_vectors, rtol=0, atol=1e-10)

    def test_unassigned_code_keeps_position_up_to_smoothing(self):
        book = book_of([[1.0, 2.0], [-3.0, 0.5]], decay=0.9)
        before = book.vectors.detach().clone()
        ema_update(book, torch.tensor([[0.0, 0.0]], dtype=D), torch.tensor([0]))
        np.testing.assert_allclose(book.vectors[1].detach().numpy(), before[1].numpy(), rtol=1e-4)

    def test_constant_batch_converges_to_assigned_mean(self):
        book = book_of([[0.0, 0.0], [4.0, 4.0]], decay=0.99)
        z = torch.tensor([[1.0, 0.0], [0.0, 1.0], [3.0, 3.0], [5.0, 4.0]], dtype=D)
        assign = torch.tensor([0, 0, 1, 1])
        for _ in range(1000):
            ema_update(book, z, assign)
        np.testing.assert_allclose(book.vectors.detach().numpy(), [[0.5, 0.5], [4.0, 3.5]], atol=1e-3)

    def test_out_of_range_assignment(self):
        with pytest.raises(ContractViolation):
            ema_update(book_of([[0.0], [1.0]]), torch.zeros(1, 1, dtype=D), torch.tensor([2]))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 30))
    def test_counts_nonnegative_entries_finite(self, seed, n_updates):
        gen = torch.Generator().manual_seed(seed)
        book = Codebook(8, 4, generator=gen).double()
        for _ in range(n_updates):
            z = torch.randn(6, 4, generator=gen, dtype=D)
            ema_update(book, z, quantize(z, book).index)
        assert bool((book.ema_counts >= 0).all())
        assert bool(torch.isfinite(book.vectors).all())

    def test_vectors_equal_smoothed_ratio(self):
        gen = torch.Generator().manual_seed(1)
        book = Codebook(5, 3, generator=gen).double()
        z = torch.randn(9, 3, generator=gen, dtype=D)
        ema_update(book, z, quantize(z, book).index)
        n = book.ema_counts.sum()
        sm = (book.ema_counts + book.smoothing_eps) / (n + 5 * book.smoothing_eps) * n
        torch.testing.assert_close(book.vectors.detach(), book.ema_sums / sm[:, None])
