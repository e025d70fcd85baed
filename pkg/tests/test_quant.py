"""Quantiser tests against a grid-enumeration oracle, plus search-space checks."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qgnas import quant
from qgnas.autodiff import Tape, Tensor
from qgnas.quant import (
    QUANT_PAIRS,
    QuantScheme,
    bit_cost,
    parse_pair,
    parse_scheme,
    quantise,
    quantise_binary,
    quantise_fixed,
    quantise_ternary,
)


def enumerate_grid(int_bits, frac_bits):
    step = 2.0 ** -frac_bits
    lo = -(2.0 ** (int_bits - 1))
    hi = 2.0 ** (int_bits - 1) - step
    ks = np.arange(round(lo / step), round(hi / step) + 1)
    return ks * step


def oracle_nearest(x, int_bits, frac_bits):
    """True nearest representable value, ties away from zero.

    Works on the enumerated sorted grid: the nearest point is one of the two
    bracketing neighbours around the insertion index.
    """
    grid = enumerate_grid(int_bits, frac_bits)
    out = np.empty_like(x)
    pos = np.searchsorted(grid, x)
    for i, xi in enumerate(x):
        p = pos[i]
        if p == 0:
            out[i] = grid[0]
            continue
        if p == len(grid):
            out[i] = grid[-1]
            continue
        left, right = grid[p - 1], grid[p]
        dl, dr = xi - left, right - xi
        if dl < dr:
            out[i] = left
        elif dr < dl:
            out[i] = right
        else:
            out[i] = left if abs(left) > abs(right) else right
    return out


def fixed_schemes_in_table():
    seen = {}
    for pair in QUANT_PAIRS:
        for s in (pair.weight, pair.activation):
            if s.kind == "fixed":
                seen[s.name] = s
    return sorted(seen.values(), key=lambda s: (s.int_bits, s.frac_bits))


class TestFixedQuantiser:
    def test_frozen_examples_fix22(self):
        x = Tensor(np.array([0.0, 0.2, 0.9, 10.0, -10.0, 0.125, -0.125, 0.375]))
        out = quantise_fixed(x, 2, 2)
        np.testing.assert_array_equal(
            out.data, [0.0, 0.25, 1.0, 1.75, -2.0, 0.25, -0.25, 0.5])

    @pytest.mark.parametrize("scheme", fixed_schemes_in_table(), ids=lambda s: s.name)
    def test_matches_grid_oracle(self, scheme):
        rng = np.random.default_rng(99)
        step, lo, hi = quant.fixed_grid_limits(scheme.int_bits, scheme.frac_bits)
        x = rng.uniform(2 * lo, 2 * (hi + step), size=10_000)
        # exact tie points stress the away-from-zero rule
        ties = (rng.integers(round(lo / step), round(hi / step), size=64) + 0.5) * step
        x = np.concatenate([x, ties])
        out = quantise_fixed(Tensor(x), scheme.int_bits, scheme.frac_bits)
        expected = oracle_nearest(x, scheme.int_bits, scheme.frac_bits)
        np.testing.assert_array_equal(out.data, expected)

    def test_small_full_scan_cross_check(self):
        # belt and braces: exhaustive distance argmin on a small grid
        rng = np.random.default_rng(5)
        grid = enumerate_grid(2, 2)
        x = rng.uniform(-3, 3, size=100)
        out = quantise_fixed(Tensor(x), 2, 2).data
        for xi, oi in zip(x, out):
            d = np.abs(grid - xi)
            best = d.min()
            cands = grid[d == best]
            pick = cands[np.argmax(np.abs(cands))]
            assert oi == pick

    @given(st.integers(1, 6), st.integers(0, 12), st.integers(0, 2**31 - 1))
    @settings(max_examples=40, deadline=None)
    def test_idempotent_and_on_grid(self, int_bits, frac_bits, seed):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.normal(scale=3.0, size=100))
        once = quantise_fixed(x, int_bits, frac_bits)
        twice = quantise_fixed(once, int_bits, frac_bits)
        np.testing.assert_array_equal(once.data, twice.data)
        step, lo, hi = quant.fixed_grid_limits(int_bits, frac_bits)
        scaled = once.data / step
        np.testing.assert_array_equal(scaled, np.round(scaled))
        assert once.data.min() >= lo and once.data.max() <= hi

    def test_ste_passthrough_exact(self):
        x = Tensor(np.array([0.3, -1.2, 5.0, -9.0, 1.75]), requires_grad=True)
        with Tape() as tape:
            out = quantise_fixed(x, 2, 2)  # clamp range [-2, 1.75]
            tape.backward(__import__("qgnas.autodiff", fromlist=["sum_all"]).sum_all(out))
        np.testing.assert_array_equal(x.grad, [1.0, 1.0, 0.0, 0.0, 1.0])


class TestBinaryTernary:
    def test_binary_example(self):
        out = quantise_binary(Tensor(np.array([2.0, -1.0, 1.0])))
        np.testing.assert_allclose(out.data, [4 / 3, -4 / 3, 4 / 3])

    def test_binary_sign_zero_positive(self):
        out = quantise_binary(Tensor(np.array([0.0, 1.0])))
        np.testing.assert_array_equal(out.data, [0.5, 0.5])

    def test_binary_zeros(self):
        out = quantise_binary(Tensor(np.zeros(4)))
        np.testing.assert_array_equal(out.data, np.zeros(4))

    def test_binary_ste_clip(self):
        x = Tensor(np.array([0.5, -0.5, 2.0, -3.0, 1.0]), requires_grad=True)
        from qgnas.autodiff import sum_all
        with Tape() as tape:
            tape.backward(sum_all(quantise_binary(x)))
        np.testing.assert_array_equal(x.grad, [1, 1, 0, 0, 1])

    def test_ternary_example(self):
        out = quantise_ternary(Tensor(np.array([1.0, 0.1, -1.0])))
        # delta = 0.49, survivors {1, -1}, alpha = 1
        np.testing.assert_allclose(out.data, [1.0, 0.0, -1.0])

    def test_ternary_uniform(self):
        out = quantise_ternary(Tensor(np.ones(5)))
        np.testing.assert_allclose(out.data, np.ones(5))

    def test_ternary_zeros(self):
        out = quantise_ternary(Tensor(np.zeros(3)))
        np.testing.assert_array_equal(out.data, np.zeros(3))

    def test_ternary_dead_zone(self):
        x = np.array([4.0, 0.5, -0.5, 0.1])
        out = quantise_ternary(Tensor(x))
        # mean |x| = 1.275, delta = 0.8925: only 4.0 survives
        np.testing.assert_allclose(out.data, [4.0, 0.0, 0.0, 0.0])

    def test_ternary_ste_clip(self):
        x = Tensor(np.array([0.2, 1.5, -0.9]), requires_grad=True)
        from qgnas.autodiff import sum_all
        with Tape() as tape:
            tape.backward(sum_all(quantise_ternary(x)))
        np.testing.assert_array_equal(x.grad, [1, 0, 1])

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=30, deadline=None)
    def test_binary_two_level(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=50)
        out = quantise_binary(Tensor(x))
        assert len(np.unique(out.data)) <= 2
        np.testing.assert_allclose(np.abs(out.data), np.abs(x).mean())

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=30, deadline=None)
    def test_ternary_three_level(self, seed):
        rng = np.random.default_rng(seed)
        out = quantise_ternary(Tensor(rng.normal(size=50)))
        assert len(np.unique(out.data)) <= 3


class TestSchemes:
    def test_parse_roundtrip(self):
        for name in ("binary", "ternary", "fix4.4", "fix1.5", "fix4.12"):
            assert parse_scheme(name).name == name

    def test_parse_rejects_garbage(self):
        for bad in ("fix4", "int8", "fix.4", "fix4.4.4"):
            with pytest.raises(ValueError):
                parse_scheme(bad)

    def test_bit_costs(self):
        assert bit_cost(parse_scheme("binary")) == 1
        assert bit_cost(parse_scheme("ternary")) == 2
        assert bit_cost(parse_scheme("fix4.8")) == 12
        assert bit_cost(parse_scheme("fix4.12")) == 16
        assert bit_cost(None) == 32

    def test_scheme_equality_and_hash(self):
        assert parse_scheme("fix4.4") == QuantScheme("fixed", 4, 4)
        assert len({parse_scheme("fix4.4"), parse_scheme("fix4.4")}) == 1


class TestSearchSpace:
    def test_seventeen_rows(self):
        assert len(QUANT_PAIRS) == 17
        assert len(set(QUANT_PAIRS)) == 17

    def test_first_row(self):
        assert QUANT_PAIRS[0].weight.name == "binary"
        assert QUANT_PAIRS[0].activation.name == "fix2.2"

    def test_weight_bit_population(self):
        bits = sorted({p.weight.total_bits for p in QUANT_PAIRS})
        assert bits == [1, 2, 4, 6, 8, 12, 16]

    def test_activation_bit_population(self):
        bits = sorted({p.activation.total_bits for p in QUANT_PAIRS})
        assert bits == [4, 8, 12, 16]

    def test_joint_space_size(self):
        assert len(QUANT_PAIRS) ** 4 == 83_521

    def test_parse_pair_shorthands(self):
        assert parse_pair("w4a8").name == "fix2.2/fix4.4"
        assert parse_pair("w6a8").name == "fix3.3/fix4.4"
        assert parse_pair("w8a8").name == "fix4.4/fix4.4"
        assert parse_pair("w1a8").name == "binary/fix4.4"
        assert parse_pair("float") is None
        assert parse_pair(None) is None
        assert parse_pair(0) is QUANT_PAIRS[0]
        assert parse_pair("16") is QUANT_PAIRS[16]
        assert parse_pair("ternary/fix4.8").name == "ternary/fix4.8"

    def test_parse_pair_rejects_unknown(self):
        with pytest.raises(ValueError):
            parse_pair("w3a8")


class TestDispatcher:
    def test_float_mode_identity(self):
        x = Tensor(np.array([0.1234]))
        assert quantise(x, None) is x

    @pytest.mark.parametrize("pair", QUANT_PAIRS, ids=lambda p: p.name)
    def test_all_table_rows_apply(self, pair):
        rng = np.random.default_rng(1)
        w = Tensor(rng.normal(size=(4, 4)))
        a = Tensor(rng.normal(size=(4, 4)))
        qw = quantise(w, pair.weight)
        qa = quantise(a, pair.activation)
        assert np.all(np.isfinite(qw.data)) and np.all(np.isfinite(qa.data))
