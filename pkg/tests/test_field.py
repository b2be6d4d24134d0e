import math

import numpy as np
import pytest
import torch

from eqflow._util import FormatError, NumericalError
from eqflow.field import (
    OutputNorm,
    VelocityNetwork,
    divergence_exact,
    divergence_fd,
    divergence_hutchinson,
    integrate_rk4,
    linear_field,
    positional_encode,
    zero_field,
)

A = np.array([[1.0, 2.0], [3.0, 4.0]])


def quad_field(x):
    return x**2


def smooth_mlp_field():
    torch.manual_seed(3)
    net = torch.nn.Sequential(torch.nn.Linear(3, 32), torch.nn.SiLU(), torch.nn.Linear(32, 3)).double()
    return lambda x: net(x)


class TestPositionalEncode:
    def test_zero_input(self):
        out = positional_encode(np.zeros(2), 0)
        np.testing.assert_array_equal(out.numpy(), [0, 0, 1, 1])

    def test_widths(self):
        assert positional_encode(np.zeros(2), 4).shape == (20,)
        net = VelocityNetwork(2, pe_levels=4)
        assert net.mlp.input_width == 2 + 2 * 2 * 5 == 22

    def test_exact_trig(self):
        out = positional_encode(np.array([math.pi / 2]), 1).numpy()
        np.testing.assert_allclose(out, [1, 0, 0, -1], atol=1e-15)

    def test_ordering_octave_then_sincos_then_component(self):
        x = np.array([0.3, -0.7])
        out = positional_encode(x, 1).numpy()
        want = np.concatenate([np.sin(x), np.cos(x), np.sin(2 * x), np.cos(2 * x)])
        np.testing.assert_allclose(out, want)

    def test_negative_levels(self):
        with pytest.raises(ValueError):
            positional_encode(np.zeros(2), -1)


class TestVelocityNetwork:
    def test_zeroed_final_layer_gives_zero(self):
        net = VelocityNetwork(2, seed=0)
        with torch.no_grad():
            net.mlp.net[-1].weight.zero_()
            net.mlp.net[-1].bias.zero_()
        net.train()
        out = net(torch.randn(16, 2))
        assert torch.isfinite(out).all()
        assert out.abs().max() == 0

    def test_normalization_arithmetic(self):
        norm = OutputNorm(2).train()
        out = norm(torch.tensor([[1.0, 0.0], [3.0, 0.0]], dtype=torch.float64))
        np.testing.assert_allclose(out.numpy(), [[-1, 0], [1, 0]], atol=1e-5)

    def test_batch_of_one_in_train_mode(self):
        net = VelocityNetwork(2).train()
        with pytest.raises(ValueError):
            net(torch.zeros(1, 2))

    def test_infer_is_deterministic(self):
        net = VelocityNetwork(3, seed=1).eval()
        x = torch.randn(5, 3)
        assert torch.equal(net(x), net(x))

    def test_train_batch_is_standardized(self):
        net = VelocityNetwork(3, seed=2).double().train()
        x = torch.randn(512, 3, dtype=torch.float64)
        out = net(x)
        assert out.mean(0).abs().max() <= 1e-6
        # biased batch variance after the eps guard: v / (v + eps)
        v = net.raw(x).var(0, unbiased=False)
        expected = v / (v + net.norm.eps)
        var = out.var(0, unbiased=False)
        torch.testing.assert_close(var, expected, rtol=1e-9, atol=1e-12)
        # a wide raw spread gives unit variance
        wide = net.norm(1e3 * torch.randn(512, 3, dtype=torch.float64))
        assert ((wide.var(0, unbiased=False) - 1).abs() <= 1e-3).all()

    def test_output_shape_and_single_vector(self):
        net = VelocityNetwork(3, seed=0).eval()
        assert net(torch.zeros(7, 3)).shape == (7, 3)
        assert net(np.zeros(3)).shape == (3,)

    def test_with_batch_stats_matches_forward(self):
        net = VelocityNetwork(2, seed=0).double().train()
        x = torch.randn(32, 2, dtype=torch.float64)
        v, field = net.with_batch_stats(x)
        torch.testing.assert_close(field(x), v)
        torch.testing.assert_close(net(x), v)

    def test_running_stats_momentum(self):
        norm = OutputNorm(1, momentum=0.1).train()
        norm(torch.tensor([[1.0], [3.0]]))
        assert norm.running_mean.item() == pytest.approx(0.2)
        # unbiased batch variance of {1, 3} is 2
        assert norm.running_var.item() == pytest.approx(0.9 + 0.1 * 2)

    def test_roundtrip_bytes(self):
        net = VelocityNetwork(3, pe_levels=2, hidden=(16, 8), seed=4)
        net.train()
        net(torch.randn(64, 3))
        net.eval()
        buf = net.to_bytes()
        assert buf[:5] == b"EQFV1"
        back = VelocityNetwork.from_bytes(buf)
        assert back.hidden == (16, 8) and back.pe_levels == 2
        x = torch.randn(10, 3)
        torch.testing.assert_close(back(x), net(x))

    def test_corrupt_bytes(self):
        buf = VelocityNetwork(2, hidden=(4,)).to_bytes()
        with pytest.raises(FormatError):
            VelocityNetwork.from_bytes(b"XXXXX" + buf[5:])
        with pytest.raises(FormatError):
            VelocityNetwork.from_bytes(buf[:-4])


class TestDivergence:
    def test_exact_linear(self):
        x = np.random.default_rng(0).normal(size=(4, 2))
        np.testing.assert_allclose(divergence_exact(linear_field(A), x), 5.0)

    def test_exact_negative_identity(self):
        assert divergence_exact(lambda x: -x, np.ones(3)) == pytest.approx(-3.0)

    def test_exact_quadratic(self):
        assert divergence_exact(quad_field, np.array([1.0, 2.0])) == pytest.approx(6.0)

    def test_hutchinson_single_probes(self):
        f = linear_field(A)
        x = np.zeros(2)
        assert divergence_hutchinson(f, x, probes=[[1.0, 0.0]]) == pytest.approx(1.0)
        assert divergence_hutchinson(f, x, probes=[[1.0, 1.0]]) == pytest.approx(10.0)
        assert divergence_hutchinson(f, x, probes=[[1.0, 1.0]], h=1e-3) == pytest.approx(10.0)

    def test_hutchinson_many_probes(self):
        est = divergence_hutchinson(linear_field(A), np.zeros(2), k=100_000, rng=np.random.default_rng(0))
        assert abs(est - 5.0) <= 0.05

    def test_hutchinson_error_shrinks_with_k(self):
        f = linear_field(A)
        errs = {}
        for k in (100, 10_000):
            draws = [divergence_hutchinson(f, np.zeros(2), k=k, rng=np.random.default_rng(s)) for s in range(40)]
            errs[k] = np.sqrt(np.mean((np.array(draws) - 5.0) ** 2))
        # 1/sqrt(k) scaling: 100x more probes -> ~10x smaller RMS error
        assert 5 < errs[100] / errs[10_000] < 20

    def test_fd_linear_exact_for_any_h(self):
        x = np.random.default_rng(1).normal(size=(3, 2))
        for h in (1e-4, 0.1, 2.0):
            np.testing.assert_allclose(divergence_fd(linear_field(A), x, h), 5.0, rtol=1e-12)

    def test_fd_quadratic(self):
        f = lambda x: torch.stack([x[:, 0] ** 2, torch.zeros_like(x[:, 0])], -1)  # noqa: E731
        assert divergence_fd(f, np.array([1.0, 0.0]), 0.1) == pytest.approx(2.0)

    def test_fd_second_order_against_exact(self):
        f = smooth_mlp_field()
        x = np.random.default_rng(2).normal(size=(8, 3))
        exact = divergence_exact(f, x)
        e1 = np.abs(divergence_fd(f, x, 1e-2) - exact).max()
        e2 = np.abs(divergence_fd(f, x, 1e-3) - exact).max()
        assert e1 < 1e-3
        # h -> h/10 should cut the error ~100x for a central scheme
        assert e2 < e1 / 30

    def test_fd_rejects_bad_h(self):
        with pytest.raises(ValueError):
            divergence_fd(zero_field, np.zeros(2), 0.0)


class TestRK4:
    def test_zero_field_constant(self):
        traj = integrate_rk4(zero_field, np.array([1.0, -2.0]), 0.1, 5)
        assert traj.shape == (6, 2)
        np.testing.assert_array_equal(traj, np.tile([1.0, -2.0], (6, 1)))

    def test_exponential_one_step(self):
        traj = integrate_rk4(lambda x: -x, np.array([1.0]), 0.1, 1)
        assert traj[1, 0] == pytest.approx(0.9048375, abs=1e-7)

    def test_rotation_norm_conserved(self):
        rot = linear_field([[0.0, -1.0], [1.0, 0.0]])
        traj = integrate_rk4(rot, np.array([1.0, 0.0]), 0.01, 1000)
        assert abs(np.linalg.norm(traj[-1]) - 1.0) <= 1e-6

    def test_fourth_order_convergence(self):
        def err(dt):
            steps = int(round(1.0 / dt))
            return abs(integrate_rk4(lambda x: -x, np.array([1.0]), dt, steps)[-1, 0] - math.exp(-1))

        assert err(0.1) / err(0.05) >= 2**3 * 0.9

    def test_blowup_detected(self):
        with pytest.raises(NumericalError):
            integrate_rk4(lambda x: x**2, np.array([1.0]), 0.5, 50)

    def test_batched_torch(self):
        x0 = torch.randn(4, 2, dtype=torch.float64)
        traj = integrate_rk4(lambda x: -x, x0, 0.1, 3)
        assert isinstance(traj, torch.Tensor) and traj.shape == (4, 4, 2)
