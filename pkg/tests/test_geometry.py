import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from rulekg.geometry import (positional_residual, rotate, rotate_distance, rule_distance,
                             rule_distance_positional, transe_distance, wrap_angle)

angles = arrays(np.float64, 4, elements=st.floats(-20, 20))


def test_rotate_distance_identity():
    h = np.array([1 + 2j, -0.5 + 0.3j])
    assert rotate_distance(h, np.zeros(2), h) == 0.0


def test_rotate_quarter_turn():
    assert rotate_distance([1 + 0j], [np.pi / 2], [1j]) == pytest.approx(0.0, abs=1e-12)


def test_rotate_half_turn():
    assert rotate_distance([1 + 0j], [np.pi], [1 + 0j]) == pytest.approx(2.0)


def test_rotate_dimension_mismatch():
    with pytest.raises(ValueError):
        rotate_distance([1 + 0j, 1j], [0.1], [1j, 1j])


def test_transe_distance():
    assert transe_distance([1.0], [2.0], [0.0]) == pytest.approx(3.0)
    assert transe_distance([1.0, 2.0], [0.5, -1.0], [1.5, 1.0]) == 0.0
    assert transe_distance([1.0], [2.0], [0.0], "L1") == transe_distance([1.0], [2.0], [0.0], "L2")


def test_rule_distance_examples():
    assert rule_distance([[0.3], [0.5]], [0.8], [0.0]) == pytest.approx(0.0, abs=1e-12)
    assert rule_distance([[0.3], [0.5]], [0.9], [0.2]) == pytest.approx(0.1)
    # 3.0 + 3.0 + 0.4 - 0.1 = 6.3, which wraps to 6.3 - 2*pi
    expected = 6.3
    while expected >= np.pi:
        expected -= 2 * np.pi
    assert rule_distance([[3.0], [3.0]], [0.1], [0.4]) == pytest.approx(abs(expected), abs=1e-12)
    assert rule_distance([[3.0], [3.0]], [0.1], [0.4]) == pytest.approx(0.0168146928, abs=1e-9)


def test_rule_distance_empty_body():
    with pytest.raises(ValueError):
        rule_distance([], [0.1], [0.0])


def test_positional_examples():
    assert rule_distance_positional([[0.2], [0.5]], [1.2], [[1.0], [2.0]]) == pytest.approx(0.0, abs=1e-12)
    assert rule_distance_positional([[0.5], [0.2]], [1.2], [[1.0], [2.0]]) == pytest.approx(0.3)
    assert rule_distance_positional([[0.7]], [0.2], [[2.0]]) == pytest.approx(1.2)


def test_positional_unit_blocks_match_plain_sum():
    rng = np.random.default_rng(0)
    body = rng.uniform(-np.pi, np.pi, (3, 5))
    head = rng.uniform(-np.pi, np.pi, 5)
    ones = np.ones((3, 5))
    assert rule_distance_positional(body, head, ones) == pytest.approx(rule_distance(body, head, np.zeros(5)))


def test_positional_block_count_mismatch():
    with pytest.raises(ValueError):
        rule_distance_positional([[0.1], [0.2]], [0.3], [[1.0]])


def test_positional_residual_wraps_body_angles():
    r = positional_residual([[0.1 + 2 * np.pi]], [0.0], [[1.0]])
    assert r == pytest.approx([0.1])


@given(st.lists(st.floats(-10, 10), min_size=1, max_size=6), st.floats(-1e3, 1e3))
def test_rotation_preserves_modulus(re, phase):
    h = np.array(re) + 1j * np.array(re[::-1])
    out = rotate(h, np.full(len(re), phase))
    np.testing.assert_allclose(np.abs(out), np.abs(h), rtol=1e-12, atol=1e-12)


@given(st.lists(angles, min_size=1, max_size=3), angles, angles, st.randoms())
def test_rule_distance_permutation_invariant(body, head, rule, rnd):
    perm = list(body)
    rnd.shuffle(perm)
    assert rule_distance(perm, head, rule) == pytest.approx(rule_distance(body, head, rule), abs=1e-9)


@given(st.lists(angles, min_size=1, max_size=3), angles, angles,
       arrays(np.int64, 4, elements=st.integers(-5, 5)))
def test_rule_distance_periodic(body, head, rule, shift):
    shifted = [b + 2 * np.pi * shift for b in body]
    assert rule_distance(shifted, head - 2 * np.pi * shift, rule + 2 * np.pi * shift) == pytest.approx(
        rule_distance(body, head, rule), abs=1e-8)


@given(st.lists(angles, min_size=1, max_size=3), angles)
def test_rule_distance_zero_iff_consistent(body, rule):
    head = wrap_angle(np.sum(body, axis=0) + rule)
    assert rule_distance(body, head, rule) < 1e-9
    assert rule_distance(body, head + 0.05, rule) > 1e-3


@given(arrays(np.float64, 8, elements=st.floats(-1e4, 1e4)))
@settings(max_examples=50)
def test_wrap_range(x):
    w = wrap_angle(x)
    assert np.all(w >= -np.pi) and np.all(w < np.pi)
    np.testing.assert_allclose(np.cos(w), np.cos(x), atol=1e-6)


def test_positional_not_permutation_invariant():
    blocks = [[1.0], [2.0]]
    assert rule_distance_positional([[0.2], [0.5]], [1.2], blocks) != pytest.approx(
        rule_distance_positional([[0.5], [0.2]], [1.2], blocks))
