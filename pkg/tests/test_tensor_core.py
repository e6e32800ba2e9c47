import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from binmoire.tensor_core import (
    DimensionError,
    DomainError,
    check_tensor4,
    compute_alpha,
    pack,
    sign_binarize,
    unpack,
)
from oracles import loop_alpha, loop_sign_binarize


def test_sign_of_zero_is_plus_one():
    assert unpack(sign_binarize(np.zeros((1, 1, 1, 1)), [0.0])).item() == 1.0


def test_negative_value_binarizes_to_minus_one():
    assert unpack(sign_binarize(np.full((1, 1, 1, 1), -0.5), [0.0])).item() == -1.0


def test_sign_binarize_matches_loop(rng):
    x = rng.normal(size=(2, 3, 8, 8))
    t = rng.normal(size=3)
    np.testing.assert_array_equal(unpack(sign_binarize(x, t)), loop_sign_binarize(x, t))


def test_sign_binarize_threshold_length_checked(rng):
    with pytest.raises(DimensionError):
        sign_binarize(rng.normal(size=(1, 3, 2, 2)), [0.0, 0.0])


def test_pack_bits_and_padding():
    b = pack(np.array([1.0, -1.0, 1.0]).reshape(1, 1, 1, 3))
    assert b.words.shape == (1, 1, 1, 1)
    assert int(b.words[0, 0, 0, 0]) == 0b101
    np.testing.assert_array_equal(unpack(b).ravel(), [1, -1, 1])


def test_row_of_65_uses_two_words_one_live_bit():
    b = pack(np.ones((1, 1, 1, 65)))
    assert b.n_words == 2
    assert int(b.words[0, 0, 0, 1]) == 1
    assert bin(int(b.row_mask()[1])).count("1") == 1


def test_pack_rejects_non_pm1():
    with pytest.raises(DomainError):
        pack(np.array([[[[1.0, 0.0]]]]))


def test_random_round_trips(rng):
    for _ in range(500):
        shape = tuple(int(s) for s in rng.integers(1, 5, size=3)) + (int(rng.integers(1, 200)),)
        x = rng.choice([-1.0, 1.0], size=shape).astype(np.float32)
        b = pack(x)
        np.testing.assert_array_equal(unpack(b), x)
        np.testing.assert_array_equal(pack(unpack(b)).words, b.words)


def test_weight_packing_flattens_inner_axes(rng):
    w = rng.choice([-1.0, 1.0], size=(4, 5, 3, 3))
    b = pack(w, inner_dims=3)
    assert b.words.shape == (4, 1)
    assert b.row_bits == 45
    np.testing.assert_array_equal(unpack(b), w)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(1, 4), min_size=3, max_size=3), st.integers(1, 150), st.integers(0, 2**32 - 1))
def test_round_trip_property(lead, width, seed):
    x = np.random.default_rng(seed).choice([-1.0, 1.0], size=(*lead, width))
    np.testing.assert_array_equal(unpack(pack(x)), x)


def test_binarize_idempotent_on_pm1(rng):
    x = rng.choice([-1.0, 1.0], size=(2, 3, 5, 7))
    once = unpack(sign_binarize(x, np.zeros(3)))
    np.testing.assert_array_equal(once, x)
    np.testing.assert_array_equal(unpack(sign_binarize(once, np.zeros(3))), once)


def test_alpha_examples():
    assert compute_alpha(np.ones((1, 2, 3, 3)))[0] == 1.0
    w = np.array([1.0, -1.0, 0.5, -0.5]).reshape(1, 1, 2, 2)
    assert compute_alpha(w)[0] == 0.75


def test_alpha_matches_loop(rng):
    w = rng.normal(size=(7, 4, 3, 3))
    np.testing.assert_allclose(compute_alpha(w), loop_alpha(w), rtol=1e-12)


def test_alpha_ignores_signs(rng):
    w = rng.normal(size=(3, 2, 3, 3))
    flips = rng.choice([-1.0, 1.0], size=w.shape)
    np.testing.assert_array_equal(compute_alpha(w), compute_alpha(w * flips))


def test_check_tensor4():
    with pytest.raises(DimensionError):
        check_tensor4(np.zeros((2, 2)))
    with pytest.raises(DomainError):
        check_tensor4(np.full((1, 1, 1, 1), np.nan))
    assert check_tensor4(np.zeros((1, 1, 1, 1), dtype=int)).dtype == np.float32
