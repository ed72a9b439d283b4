import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from slf.errors import ConfigurationError, ContractViolation
from slf.swbn import SpeakerWiseBatchNorm, swbn_forward, swbn_update_running

D = torch.float64


def layer(s=1, k=1, **kw):
    return SpeakerWiseBatchNorm(s, k, **kw).double().train()


def oracle(x, ids, w, b, eps):
    """Group-by-speaker normalization in numpy, biased variance."""
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    for s in np.unique(ids):
        rows = ids == s
        mu = x[rows].mean(axis=0)
        var = ((x[rows] - mu) ** 2).mean(axis=0)
        out[rows] = (x[rows] - mu) / np.sqrt(var + eps) * w + b
    return out


class TestForwardExamples:
    def test_two_rows(self):
        y = layer()(torch.tensor([[1.0], [3.0]], dtype=D), torch.tensor([0, 0]))
        expected = 1.0 / np.sqrt(1.0 + 1e-5)
        np.testing.assert_allclose(y.detach().numpy().ravel(), [-expected, expected], rtol=1e-12)
        assert expected == pytest.approx(0.999995, abs=1e-6)

    def test_affine(self):
        bn = layer()
        with torch.no_grad():
            bn.weight.fill_(2.0)
            bn.bias.fill_(1.0)
        y = bn(torch.tensor([[1.0], [3.0]], dtype=D), torch.tensor([0, 0])).detach().numpy().ravel()
        np.testing.assert_allclose(y, [-1.0, 3.0], atol=1e-4)

    def test_singleton_group_outputs_shift(self):
        bn = layer(2, 3)
        with torch.no_grad():
            bn.bias.copy_(torch.tensor([0.5, -1.0, 2.0]))
        y = bn(torch.tensor([[4.0, 5.0, 6.0], [1.0, 1.0, 1.0], [2.0, 3.0, 4.0]], dtype=D), torch.tensor([1, 0, 0]))
        np.testing.assert_allclose(y[0].detach().numpy(), [0.5, -1.0, 2.0])

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000))
    def test_matches_numpy_oracle(self, seed):
        rng = np.random.default_rng(seed)
        s, k = int(rng.integers(1, 5)), int(rng.integers(1, 6))
        ids = rng.integers(0, s, size=int(rng.integers(2, 20)))
        x = rng.normal(size=(ids.size, k)) * 3 + 1
        bn = layer(s, k)
        w, b = rng.normal(size=k), rng.normal(size=k)
        with torch.no_grad():
            bn.weight.copy_(torch.tensor(w))
            bn.bias.copy_(torch.tensor(b))
        y = bn(torch.tensor(x), torch.tensor(ids)).detach().numpy()
        np.testing.assert_allclose(y, oracle(x, ids, w, b, 1e-5), rtol=1e-10, atol=1e-10)

    def test_unknown_speaker_id(self):
        with pytest.raises(ContractViolation):
            layer(2, 1)(torch.zeros(2, 1, dtype=D), torch.tensor([0, 2]))


class TestProperties:
    @pytest.mark.parametrize("seed", range(5))
    def test_group_moments(self, seed):
        rng = np.random.default_rng(seed)
        ids = np.concatenate([np.full(int(rng.integers(2, 9)), s) for s in range(4)])
        x = rng.normal(size=(ids.size, 16)) * rng.uniform(0.5, 3, size=16) + rng.normal(size=16) * 5
        y = layer(4, 16)(torch.tensor(x), torch.tensor(ids)).detach().numpy()
        for s in range(4):
            rows = ids == s
            var_in = x[rows].var(axis=0)
            assert np.abs(y[rows].mean(axis=0)).max() < 1e-6
            np.testing.assert_allclose(y[rows].var(axis=0), var_in / (var_in + 1e-5), atol=1e-3)

    def test_per_speaker_shift_invariance(self):
        rng = np.random.default_rng(0)
        ids = torch.tensor([0, 0, 0, 1, 1, 1])
        x = torch.tensor(rng.normal(size=(6, 4)))
        shifted = x.clone()
        shifted[:3] += torch.tensor(rng.normal(size=4))
        bn = layer(2, 4)
        torch.testing.assert_close(bn(x, ids)[:3], bn(shifted, ids)[:3], rtol=1e-9, atol=1e-9)

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(1)
        ids = torch.tensor([0, 1, 0, 2, 1, 2, 0])
        x = torch.tensor(rng.normal(size=(7, 3)))
        perm = torch.tensor(rng.permutation(7))
        bn = layer(3, 3)
        torch.testing.assert_close(bn(x, ids)[perm], bn(x[perm], ids[perm]), rtol=1e-12, atol=1e-12)

    def test_groups_independent(self):
        rng = np.random.default_rng(2)
        ids = torch.tensor([0, 0, 1, 1, 1])
        x = torch.tensor(rng.normal(size=(5, 2)))
        other = x.clone()
        other[:2] = torch.tensor(rng.normal(size=(2, 2))) * 10
        bn = layer(2, 2)
        torch.testing.assert_close(bn(x, ids)[2:], bn(other, ids)[2:])

    def test_backward_matches_autograd_reference(self):
        # Independent route: plain autograd through the same algebra.
        rng = np.random.default_rng(3)
        ids = torch.tensor([0, 0, 0, 1, 1, 2, 2, 2, 2])
        x = torch.tensor(rng.normal(size=(9, 5)), requires_grad=True)
        g = torch.tensor(rng.normal(size=(9, 5)))
        bn = layer(3, 5)
        with torch.no_grad():
            bn.weight.copy_(torch.tensor(rng.normal(size=5)))
            bn.bias.copy_(torch.tensor(rng.normal(size=5)))
        (bn(x, ids) * g).sum().backward()
        x2 = x.detach().clone().requires_grad_()
        w2 = bn.weight.detach().clone().requires_grad_()
        b2 = bn.bias.detach().clone().requires_grad_()
        parts = []
        for s in range(3):
            r = x2[ids == s]
            mu = r.mean(0)
            var = ((r - mu) ** 2).mean(0)
            parts.append((r - mu) / torch.sqrt(var + 1e-5))
        y2 = torch.cat(parts)
        order = torch.cat([torch.nonzero(ids == s).ravel() for s in range(3)])
        y_ref = torch.zeros(9, 5, dtype=D).index_copy(0, order, y2) * w2 + b2
        (y_ref * g).sum().backward()
        torch.testing.assert_close(x.grad, x2.grad)
        torch.testing.assert_close(bn.weight.grad, w2.grad)
        torch.testing.assert_close(bn.bias.grad, b2.grad)


class TestRunningStats:
    def test_first_update_copies(self):
        bn = layer(2, 2)
        swbn_update_running(bn, 1, torch.tensor([0.5, -1.0]), torch.tensor([2.0, 3.0]))
        assert bn.running_mean[1].tolist() == [0.5, -1.0]
        assert bn.running_var[1].tolist() == [2.0, 3.0]
        assert bn.seen.tolist() == [False, True]

    def test_momentum_zero_freezes(self):
        bn = layer(1, 1, momentum=0.0)
        swbn_update_running(bn, 0, torch.tensor([1.0]), torch.tensor([1.0]))
        swbn_update_running(bn, 0, torch.tensor([9.0]), torch.tensor([4.0]))
        assert bn.running_mean.item() == 1.0 and bn.running_var.item() == 1.0

    def test_two_updates_half_momentum(self):
        bn = layer(1, 1, momentum=0.5)
        swbn_update_running(bn, 0, torch.tensor([0.0]), torch.tensor([1.0]))
        swbn_update_running(bn, 0, torch.tensor([2.0]), torch.tensor([1.0]))
        assert bn.running_mean.item() == pytest.approx(1.0)

    def test_training_forward_updates_only_present_speakers(self):
        bn = layer(3, 2)
        x = torch.tensor([[1.0, 2.0], [3.0, 6.0]], dtype=D)
        bn(x, torch.tensor([2, 2]))
        assert bn.seen.tolist() == [False, False, True]
        np.testing.assert_allclose(bn.running_mean[2].numpy(), [2.0, 4.0])
        np.testing.assert_allclose(bn.running_var[2].numpy(), [1.0, 4.0])

    def test_update_running_false_leaves_buffers(self):
        bn = layer(2, 2)
        bn(torch.randn(4, 2, dtype=D), torch.tensor([0, 0, 1, 1]), update_running=False)
        assert not bn.seen.any()

    def test_inference_uses_running_stats(self):
        bn = layer(2, 1)
        swbn_update_running(bn, 0, torch.tensor([2.0]), torch.tensor([4.0]))
        swbn_update_running(bn, 1, torch.tensor([-1.0]), torch.tensor([1.0]))
        y = swbn_forward(torch.tensor([[4.0], [0.0]], dtype=D), torch.tensor([0, 1]), bn, training=False)
        np.testing.assert_allclose(y.detach().numpy().ravel(), [2.0 / np.sqrt(4 + 1e-5), 1.0 / np.sqrt(1 + 1e-5)])

    def test_unseen_speaker_uses_average(self):
        bn = layer(3, 1)
        swbn_update_running(bn, 0, torch.tensor([2.0]), torch.tensor([4.0]))
        swbn_update_running(bn, 1, torch.tensor([0.0]), torch.tensor([2.0]))
        # averaged statistics: mean 1, variance 3
        y = swbn_forward(torch.tensor([[4.0]], dtype=D), torch.tensor([2]), bn, training=False)
        assert y.item() == pytest.approx(3.0 / np.sqrt(3.0 + 1e-5))

    def test_inference_without_any_seen_speaker(self):
        bn = layer(2, 1)
        with pytest.raises(ConfigurationError):
            swbn_forward(torch.zeros(1, 1, dtype=D), torch.tensor([0]), bn, training=False)

    def test_inference_is_read_only(self):
        bn = layer(1, 2)
        swbn_update_running(bn, 0, torch.tensor([1.0, 1.0]), torch.tensor([2.0, 2.0]))
        before = bn.running_mean.clone()
        bn.eval()
        bn(torch.randn(3, 2, dtype=D), torch.tensor([0, 0, 0]))
        assert torch.equal(before, bn.running_mean)

    def test_stats_ids_override(self):
        bn = layer(2, 1)
        swbn_update_running(bn, 0, torch.tensor([0.0]), torch.tensor([1.0]))
        swbn_update_running(bn, 1, torch.tensor([10.0]), torch.tensor([1.0]))
        y = swbn_forward(torch.tensor([[10.0]], dtype=D), torch.tensor([0]), bn, training=False,
                         stats_ids=torch.tensor([1]))
        assert y.item() == pytest.approx(0.0, abs=1e-12)
