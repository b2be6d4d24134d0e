import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from eqflow._util import NumericalError
from eqflow.field import VelocityNetwork, linear_field, zero_field
from eqflow.metrics import (
    ChangeFingerprint,
    DynamicsFingerprint,
    align_sign,
    change_fingerprint,
    cosine_similarity,
    fingerprint,
    lyapunov_max,
    make_baseline,
    mmd_rbf,
    pairwise_similarities,
    preservation_curve,
    similarity_table,
)
from eqflow.skew import make_rotation_kernel, validate_skew
from eqflow.systems import gray_scott_preset, gray_scott_step, lorenz_field

from oracles import lorenz_lyapunov_oracle

ROT = linear_field([[0.0, -1.0], [1.0, 0.0]])


class TestMMD:
    def test_identical(self):
        X = np.random.default_rng(0).normal(size=(30, 2))
        assert mmd_rbf(X, X) == 0.0

    def test_two_points(self):
        # closed form sqrt(2 - 2 exp(-2)) = 1.315040
        assert mmd_rbf(np.zeros((1, 1)), np.ones((1, 1)), 0.5) == pytest.approx(math.sqrt(2 - 2 * math.exp(-2)), abs=1e-12)
        assert mmd_rbf(np.zeros((1, 1)), np.ones((1, 1)), 0.5) == pytest.approx(1.315040, abs=1e-6)

    def test_against_explicit_sums(self):
        rng = np.random.default_rng(1)
        X, Y = rng.normal(size=(7, 3)), rng.normal(size=(5, 3)) + 0.5
        k = lambda a, b: math.exp(-np.sum((a - b) ** 2) / (2 * 0.5**2))  # noqa: E731
        m2 = (
            np.mean([k(a, b) for a in X for b in X])
            + np.mean([k(a, b) for a in Y for b in Y])
            - 2 * np.mean([k(a, b) for a in X for b in Y])
        )
        assert mmd_rbf(X, Y) == pytest.approx(math.sqrt(m2), rel=1e-10)

    @settings(max_examples=50, deadline=None)
    @given(
        arrays(np.float64, st.tuples(st.integers(1, 6), st.just(2)), elements=st.floats(-3, 3)),
        arrays(np.float64, st.tuples(st.integers(1, 6), st.just(2)), elements=st.floats(-3, 3)),
    )
    def test_symmetric_nonnegative(self, X, Y):
        a, b = mmd_rbf(X, Y), mmd_rbf(Y, X)
        assert a >= 0 and a == pytest.approx(b, abs=1e-12)
        assert mmd_rbf(X, X) <= 1e-6


class TestPreservation:
    def test_zero_field(self):
        x = np.random.default_rng(0).normal(size=(200, 2))
        curve = preservation_curve(zero_field, x)
        assert len(curve) == 10 and curve[-1][0] == pytest.approx(10.0)
        assert all(m == 0.0 for _, m in curve)

    def test_rotation_within_noise_floor(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(800, 2))
        floor = mmd_rbf(rng.normal(size=(800, 2)), rng.normal(size=(800, 2)))
        curve = preservation_curve(ROT, x)
        assert max(m for _, m in curve) <= 3 * floor

    def test_contraction_detected(self):
        x = np.random.default_rng(2).normal(size=(300, 2))
        curve = preservation_curve(lambda z: -z, x)
        assert curve[-1][1] > curve[0][1] > 0.1


class TestLyapunov:
    def test_contraction(self):
        assert lyapunov_max(lambda x: -x, np.array([1.0]), horizon_steps=2000) == pytest.approx(-1.0, abs=0.05)

    def test_zero_field(self):
        assert lyapunov_max(zero_field, np.array([1.0, 2.0]), horizon_steps=100) == 0.0

    def test_linear_top_eigenvalue(self):
        A = np.array([[0.3, 1.0], [0.0, -0.5]])
        assert lyapunov_max(linear_field(A), np.array([1.0, 1.0]), horizon_steps=4000) == pytest.approx(0.3, abs=0.01)

    def test_bad_horizon(self):
        with pytest.raises(ValueError):
            lyapunov_max(zero_field, np.zeros(2), horizon_steps=5, renorm_every=10)

    def test_degenerate(self):
        with pytest.raises(NumericalError):
            lyapunov_max(lambda x: torch.zeros_like(x) - x * 1e3, np.array([1.0]), dt=0.1, horizon_steps=100)

    def test_network_runs_in_float64(self):
        net = VelocityNetwork(2, hidden=(8,), seed=0).eval()
        lam = lyapunov_max(net, np.zeros(2), horizon_steps=200)
        assert np.isfinite(lam)
        assert next(net.parameters()).dtype == torch.float32

    @pytest.mark.slow
    def test_lorenz_matches_variational_oracle(self):
        oracle, x = lorenz_lyapunov_oracle()
        assert 0.8 < oracle < 1.0
        est = lyapunov_max(lorenz_field(), x, horizon_steps=20_000)
        assert est == pytest.approx(oracle, rel=0.1)


class TestFingerprints:
    probes = np.random.default_rng(0).normal(size=(16, 2))

    def test_zero(self):
        fp = fingerprint(zero_field, self.probes)
        assert fp.values.shape == (32,) and not fp.values.any()

    def test_negation(self):
        a = fingerprint(ROT, self.probes)
        b = fingerprint(lambda x: -ROT(x), self.probes)
        np.testing.assert_array_equal(a.values, -b.values)

    def test_order_and_repeatability(self):
        fp = fingerprint(ROT, self.probes)
        np.testing.assert_array_equal(fp.values[:2], [-self.probes[0, 1], self.probes[0, 0]])
        np.testing.assert_array_equal(fp.values, fingerprint(ROT, self.probes).values)

    def test_align(self):
        a = fingerprint(ROT, self.probes)
        neg = align_sign(-a, a)
        np.testing.assert_array_equal(neg.values, a.values)
        assert neg.aligned_to == a.probe_set_id
        np.testing.assert_array_equal(align_sign(a, a).values, a.values)

    def test_align_tie(self):
        e = DynamicsFingerprint(np.array([1.0, 0.0]), "p")
        ref = DynamicsFingerprint(np.array([0.0, 1.0]), "p")
        np.testing.assert_array_equal(align_sign(e, ref).values, [1.0, 0.0])

    def test_probe_mismatch(self):
        a = fingerprint(ROT, self.probes)
        b = fingerprint(ROT, self.probes + 1)
        with pytest.raises(ValueError):
            cosine_similarity(a, b)
        with pytest.raises(ValueError):
            align_sign(a, b)

    def test_cosine(self):
        assert cosine_similarity([1.0, 2.0], [1.0, 2.0]) == pytest.approx(1.0)
        assert cosine_similarity([1.0, 0.0], [0.0, 3.0]) == 0.0
        a = fingerprint(ROT, self.probes)
        assert cosine_similarity(align_sign(-a, a), a) == pytest.approx(1.0)
        with pytest.raises(ValueError):
            cosine_similarity([0.0, 0.0], [1.0, 1.0])

    @settings(max_examples=50, deadline=None)
    @given(
        arrays(np.float64, 6, elements=st.floats(-5, 5)),
        arrays(np.float64, 6, elements=st.floats(-5, 5)),
        st.floats(0.01, 100),
        st.sampled_from([1.0, -1.0]),
    )
    def test_cosine_invariances(self, a, b, scale, sign):
        if np.linalg.norm(a) < 1e-3 or np.linalg.norm(b) < 1e-3:
            return
        base = cosine_similarity(align_sign(a, b), b)
        assert base >= -1e-12
        assert cosine_similarity(align_sign(sign * scale * a, b), b) == pytest.approx(base, abs=1e-9)

    def test_change_fingerprint_trivial(self):
        x0 = np.random.default_rng(1).normal(size=(2, 4, 4))
        assert not change_fingerprint(x0, lambda x: x + 1, 0).values.any()
        assert not change_fingerprint(x0, lambda x: x, 10).values.any()
        assert isinstance(change_fingerprint(x0, lambda x: x, 1), ChangeFingerprint)

    def test_change_fingerprint_blowup(self):
        with pytest.raises(NumericalError):
            with np.errstate(over="ignore"):
                change_fingerprint(np.ones(3), lambda x: x * 1e200, 3)

    def test_maze_quasi_static(self):
        from eqflow.systems import generate_turing_dataset

        norms = {}
        for preset in ("life", "maze"):
            x0 = generate_turing_dataset(preset, 1, grid=(64, 64), burn_in=4000, seed=3)[0].astype(float)
            p = gray_scott_preset(preset)
            norms[preset] = np.linalg.norm(change_fingerprint(x0, lambda x: gray_scott_step(x, p), 50).values)
        assert norms["maze"] < 0.1 * norms["life"]


class TestBaselines:
    def test_random_kernel_not_skew(self):
        rng = np.random.default_rng(0)
        tpl = make_rotation_kernel(1.0)
        assert sum(validate_skew(make_baseline("random_kernel", tpl, rng)) for _ in range(100)) == 0

    def test_score_reweight_unit_weights(self):
        op = make_baseline("score_reweight", make_rotation_kernel(1.0), np.random.default_rng(0))
        op.weights[0, 0, 0, 0] = op.weights[1, 1, 0, 0] = 1.0
        from eqflow.skew import v_skew

        s = np.random.default_rng(1).normal(size=(2, 5, 5))
        np.testing.assert_allclose(v_skew(op, s), s)

    def test_random_network_calibrated(self):
        tpl = VelocityNetwork(2, hidden=(16, 16), seed=0)
        data = np.random.default_rng(2).normal(size=(256, 2))
        net = make_baseline("random_network", tpl, np.random.default_rng(3), calibrate_on=data)
        with torch.no_grad():
            v = net(torch.as_tensor(data, dtype=torch.float32))
        assert v.std(0).min() > 0.5 and v.mean(0).abs().max() < 0.2

    def test_random_networks_scatter(self):
        tpl = VelocityNetwork(2, hidden=(16, 16), seed=0)
        probes = np.random.default_rng(4).normal(size=(64, 2))
        rng = np.random.default_rng(5)
        fps = [fingerprint(make_baseline("random_network", tpl, rng, calibrate_on=probes), probes) for _ in range(6)]
        assert pairwise_similarities(fps).mean() < 0.9

    def test_unknown(self):
        with pytest.raises(ValueError):
            make_baseline("nope", None, np.random.default_rng(0))


def test_similarity_table_shapes_and_alignment():
    probes = np.random.default_rng(0).normal(size=(8, 2))
    ref = fingerprint(ROT, probes)
    groups = {
        "truth": [ref],
        "model": [fingerprint(lambda x: -ROT(x), probes), fingerprint(lambda x: 2 * ROT(x), probes)],
    }
    rows = {(a, b): (m, s, n) for a, b, m, s, n in similarity_table(groups, "truth")}
    assert rows[("model", "model")] == pytest.approx((1.0, 0.0, 1))
    assert rows[("truth", "model")][0] == pytest.approx(1.0)
    assert rows[("truth", "model")][2] == 2
