import numpy as np
import pytest

from densecc.autodiff import Tensor
from densecc.checkpoint import load_params, restore_into, save_params
from densecc.optim import AdamW, schedule_factor


class TestSchedule:
    def test_zero_step_no_movement(self):
        assert schedule_factor(0, 100) == 0.0

    def test_peak_at_warmup_boundary(self):
        # 6% of 100 steps
        assert schedule_factor(6, 100, warmup_frac=0.06) == pytest.approx(1.0)

    def test_linear_up_then_down(self):
        assert schedule_factor(3, 100) == pytest.approx(0.5)
        assert schedule_factor(53, 100) == pytest.approx((100 - 53) / 94)

    def test_clamps_to_zero_beyond_total(self):
        assert schedule_factor(100, 100) == 0.0
        assert schedule_factor(250, 100) == 0.0


def _reference_adamw(x0, grads, lr, total, warmup, betas=(0.9, 0.999), eps=1e-8, wd=0.0):
    """Scalar reference trajectory, written independently of the vector path."""
    b1, b2 = betas
    x, m, v = x0, 0.0, 0.0
    trajectory = []
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        w = warmup * total
        if t <= w:
            factor = t / w
        elif t >= total:
            factor = 0.0
        else:
            factor = (total - t) / (total - w)
        x = x - lr * factor * (mhat / (vhat**0.5 + eps) + wd * x)
        trajectory.append(x)
    return trajectory


class TestAdamW:
    def test_matches_scalar_reference(self):
        p = Tensor(np.array([0.7]), requires_grad=True)
        opt = AdamW([({"p": p}, 0.05)], total_steps=100, warmup_frac=0.06, weight_decay=0.01)
        seen = []
        for _ in range(100):
            p.grad = np.array([0.3])
            opt.step()
            seen.append(float(p.data[0]))
        expected = _reference_adamw(0.7, [0.3] * 100, 0.05, 100, 0.06, wd=0.01)
        np.testing.assert_allclose(seen, expected, atol=1e-10)

    def test_two_groups_use_distinct_rates(self):
        a = Tensor(np.array([1.0]), requires_grad=True)
        b = Tensor(np.array([1.0]), requires_grad=True)
        opt = AdamW([({"a": a}, 0.1), ({"b": b}, 0.01)], total_steps=10, warmup_frac=0.0)
        a.grad = np.array([1.0])
        b.grad = np.array([1.0])
        opt.step()
        da, db = 1.0 - a.data[0], 1.0 - b.data[0]
        assert da > 0 and db > 0
        assert da / db == pytest.approx(10.0, rel=1e-6)

    def test_missing_grad_treated_as_zero(self):
        p = Tensor(np.array([2.0]), requires_grad=True)
        opt = AdamW([({"p": p}, 0.1)], total_steps=10)
        opt.step()
        assert p.data[0] == pytest.approx(2.0)


class TestCheckpoint:
    def test_bit_exact_round_trip(self, tmp_path):
        rng = np.random.default_rng(5)
        named = {
            "encoder.layer0.wq": Tensor(rng.normal(size=(7, 3)), requires_grad=True),
            "head.bias": Tensor(rng.normal(size=(4,)), requires_grad=True),
        }
        path = tmp_path / "model.npz"
        save_params(path, named, meta={"note": "fixture"})
        arrays, meta = load_params(path)
        assert meta["note"] == "fixture"
        assert set(arrays) == set(named)
        for name, tensor in named.items():
            assert arrays[name].dtype == np.float64
            np.testing.assert_array_equal(arrays[name], tensor.data)

    def test_restore_validates_names_and_shapes(self, tmp_path):
        named = {"w": Tensor(np.zeros((2, 2)), requires_grad=True)}
        path = tmp_path / "model.npz"
        save_params(path, named)
        arrays, _ = load_params(path)
        with pytest.raises(ValueError, match="missing"):
            restore_into({"w": named["w"], "extra": Tensor(np.zeros(1))}, arrays)
        with pytest.raises(ValueError, match="shape"):
            restore_into({"w": Tensor(np.zeros((3, 2)))}, arrays)
