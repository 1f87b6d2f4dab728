import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from sanr.quantization import (
    SgaState,
    add_uniform_noise,
    dequantize16,
    ptq_uniform16,
    round_half_away,
    sga_sample,
    ste_round,
)


class TestSteRound:
    def test_forward_values(self):
        x = torch.tensor([0.4, 2.5, -2.5, -0.5, 1.49])
        out = ste_round(x, 1.0)
        assert out.tolist() == [0.0, 3.0, -3.0, -1.0, 1.0]

    def test_gradient_is_identity(self):
        x = torch.randn(64, requires_grad=True)
        ste_round(x, 0.1).sum().backward()
        assert torch.equal(x.grad, torch.ones(64))

    def test_true_derivative_is_zero_almost_everywhere(self):
        # Finite differences of the forward map vanish away from grid edges;
        # the STE gradient above is deliberately not that derivative.
        x = torch.tensor([0.2, 1.3, -0.7])
        h = 1e-4
        fd = (ste_round(x + h, 1.0) - ste_round(x - h, 1.0)) / (2 * h)
        assert torch.equal(fd, torch.zeros(3))

    def test_rejects_nonpositive_scale(self):
        with pytest.raises(ValueError):
            ste_round(torch.zeros(3), 0.0)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(0.01, 10.0))
    def test_idempotent_on_own_output(self, seed, scale):
        g = torch.Generator().manual_seed(seed)
        x = torch.randn(32, generator=g) * 5
        once = ste_round(x, scale)
        assert torch.allclose(ste_round(once, scale), once, atol=1e-5)


class TestUniformNoise:
    def test_support(self):
        g = torch.Generator().manual_seed(0)
        y = torch.zeros(10000)
        n = add_uniform_noise(y, g) - y
        assert float(n.min()) > -0.5 and float(n.max()) < 0.5

    def test_zero_mean(self):
        g = torch.Generator().manual_seed(1)
        y = torch.zeros(1_000_000)
        mean = float((add_uniform_noise(y, g) - y).mean())
        assert -0.01 < mean < 0.01

    def test_deterministic_for_seed(self):
        y = torch.randn(100)
        a = add_uniform_noise(y, torch.Generator().manual_seed(3))
        b = add_uniform_noise(y, torch.Generator().manual_seed(3))
        assert torch.equal(a, b)

    def test_gradient_is_identity(self):
        y = torch.randn(16, requires_grad=True)
        add_uniform_noise(y, torch.Generator().manual_seed(0)).sum().backward()
        assert torch.equal(y.grad, torch.ones(16))


class TestSga:
    def test_integer_input_passes_through(self):
        g = torch.Generator().manual_seed(0)
        y = torch.arange(-5, 6, dtype=torch.float32)
        out = sga_sample(y, 0.02, g)
        assert torch.allclose(out, y, atol=1e-4)

    def test_half_integer_symmetry(self):
        g = torch.Generator().manual_seed(1)
        y = torch.full((10_000,), 3.5)
        up = float((sga_sample(y, 0.3, g) > 3.5).float().mean())
        assert abs(up - 0.5) < 0.02

    def test_annealed_temperature_hardens(self):
        g = torch.Generator().manual_seed(2)
        y = torch.full((10_000,), 4.1)
        out = sga_sample(y, 0.02, g)
        assert float(((out - 4.0).abs() < 1e-3).float().mean()) > 0.99

    def test_samples_between_candidates(self):
        g = torch.Generator().manual_seed(3)
        y = torch.randn(1000) * 4
        out = sga_sample(y, 0.5, g)
        assert bool((out >= torch.floor(y) - 1e-6).all())
        assert bool((out <= torch.ceil(y) + 1e-6).all())

    def test_gradient_flows(self):
        g = torch.Generator().manual_seed(4)
        y = torch.randn(100, requires_grad=True)
        sga_sample(y, 0.5, g).sum().backward()
        assert torch.isfinite(y.grad).all()

    def test_schedule_endpoint(self):
        state = SgaState(tau_start=0.5, tau_end=0.02, total_steps=77, rng_seed=0)
        assert state.temperature(0) == pytest.approx(0.5)
        assert state.temperature(77) == pytest.approx(0.02)
        taus = [state.temperature(t) for t in range(78)]
        assert all(b < a for a, b in zip(taus, taus[1:]))

    def test_state_validation(self):
        with pytest.raises(ValueError):
            SgaState(tau_start=0.1, tau_end=0.5)


class TestPtqUniform16:
    def test_endpoint_mapping(self):
        q, mn, mx = ptq_uniform16(torch.tensor([0.0, 1.0]))
        assert q.tolist() == [0, 65535]
        restored = dequantize16(q, mn, mx)
        assert torch.equal(restored, torch.tensor([0.0, 1.0]))

    def test_constant_tensor(self):
        q, mn, mx = ptq_uniform16(torch.full((5,), 2.75))
        assert q.tolist() == [0] * 5
        assert torch.allclose(dequantize16(q, mn, mx), torch.full((5,), 2.75))

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            ptq_uniform16(torch.tensor([1.0, float("nan")]))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_error_bounded_by_half_step(self, seed):
        g = torch.Generator().manual_seed(seed)
        x = (torch.rand(257, generator=g) * 6 - 3).double()
        q, mn, mx = ptq_uniform16(x.float())
        restored = dequantize16(q, mn, mx).double()
        step = (mx - mn) / 65535.0
        assert float((x.float().double() - restored).abs().max()) <= step / 2 + 1e-6


def test_round_half_away_matches_reference():
    vals = np.array([-2.5, -1.5, -0.5, 0.5, 1.5, 2.5, 0.49, -0.49])
    expect = np.sign(vals) * np.floor(np.abs(vals) + 0.5)
    got = round_half_away(torch.from_numpy(vals)).numpy()
    assert np.array_equal(got, expect)
