import numpy as np
import pytest

from minidet3d.errors import RankTooLarge, ShapeMismatch
from minidet3d.lora import (
    LoRAAdapter,
    adapter_init,
    adapter_param_fraction,
    apply_adapted,
    load_adapter,
    merge_adapter,
    save_adapter,
)


class TestAdapterInit:
    def test_zero_update_at_init(self):
        rng = np.random.default_rng(0)
        w = rng.normal(size=(16, 16))
        a = adapter_init(16, 16, r=4, alpha=32.0, seed=1)
        x = rng.normal(size=16)
        # B = 0 makes the adapted forward bit-identical to the base forward
        assert np.array_equal(apply_adapted(w, a, x), w @ x)
        assert np.array_equal(merge_adapter(w, a), w)

    def test_param_count_square_case(self):
        a = adapter_init(768, 768, r=16, alpha=32.0, seed=0)
        assert a.param_count == 2 * 768 * 16 == 24_576

    def test_param_count_rectangular(self):
        a = adapter_init(48, 80, r=8, alpha=1.0, seed=0)
        assert a.param_count == 8 * (48 + 80)

    def test_rank_boundary(self):
        adapter_init(16, 32, r=16, alpha=1.0, seed=0)  # r == min dim allowed
        with pytest.raises(RankTooLarge):
            adapter_init(16, 32, r=17, alpha=1.0, seed=0)

    def test_deterministic(self):
        a1 = adapter_init(8, 8, r=2, alpha=1.0, seed=42)
        a2 = adapter_init(8, 8, r=2, alpha=1.0, seed=42)
        assert np.array_equal(a1.A, a2.A)
        assert np.array_equal(a1.B, a2.B)


class TestApplyAndMerge:
    def test_rank_one_hand_case(self):
        # W = 0, alpha = 2, A = row of ones, B = column of ones, x = e1
        w = np.zeros((4, 4))
        a = LoRAAdapter(A=np.ones((1, 4)), B=np.ones((4, 1)), r=1, alpha=2.0)
        x = np.array([1.0, 0.0, 0.0, 0.0])
        assert np.array_equal(apply_adapted(w, a, x), [2.0, 2.0, 2.0, 2.0])
        assert np.array_equal(merge_adapter(w, a) @ x, [2.0, 2.0, 2.0, 2.0])

    def test_factored_matches_merged(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            w = rng.normal(size=(32, 32))
            a = LoRAAdapter(
                A=rng.normal(size=(4, 32)), B=rng.normal(size=(32, 4)), r=4, alpha=0.5
            )
            x = rng.normal(size=32)
            assert np.allclose(apply_adapted(w, a, x), merge_adapter(w, a) @ x, atol=1e-9)

    def test_alpha_linearity(self):
        rng = np.random.default_rng(8)
        w = rng.normal(size=(16, 16))
        A = rng.normal(size=(2, 16))
        B = rng.normal(size=(16, 2))
        x = rng.normal(size=16)
        base = w @ x
        c = 0.7
        out_c = apply_adapted(w, LoRAAdapter(A, B, 2, c), x)
        out_2c = apply_adapted(w, LoRAAdapter(A, B, 2, 2 * c), x)
        assert np.allclose(out_2c - base, 2.0 * (out_c - base), atol=1e-9)

    def test_shape_mismatch(self):
        a = adapter_init(8, 8, r=2, alpha=1.0, seed=0)
        with pytest.raises(ShapeMismatch):
            apply_adapted(np.zeros((4, 8)), a, np.zeros(8))
        with pytest.raises(ShapeMismatch):
            apply_adapted(np.zeros((8, 8)), a, np.zeros(5))
        with pytest.raises(ShapeMismatch):
            merge_adapter(np.zeros((8, 9)), a)


class TestParamFraction:
    def test_no_adapters(self):
        assert adapter_param_fraction(1000, []) == 0.0

    def test_point_one_percent(self):
        a = adapter_init(768, 768, r=16, alpha=32.0, seed=0)
        assert adapter_param_fraction(24_576_000, [a]) == pytest.approx(0.001)

    def test_two_adapters_double(self):
        a = adapter_init(64, 64, r=4, alpha=1.0, seed=0)
        one = adapter_param_fraction(10_000, [a])
        two = adapter_param_fraction(10_000, [a, a])
        assert two == pytest.approx(2 * one)

    def test_rejects_nonpositive_total(self):
        with pytest.raises(ValueError):
            adapter_param_fraction(0, [])


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(5)
        a = LoRAAdapter(A=rng.normal(size=(3, 10)), B=rng.normal(size=(6, 3)), r=3, alpha=1.5)
        path = tmp_path / "adapter.json"
        save_adapter(path, a)
        b = load_adapter(path)
        assert np.array_equal(a.A, b.A)
        assert np.array_equal(a.B, b.B)
        assert (a.r, a.alpha) == (b.r, b.alpha)
