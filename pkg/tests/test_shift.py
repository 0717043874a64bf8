from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import shift_oracle
from tokshift import tensor as tn
from tokshift.shift import (
    PLACEMENTS,
    VARIANTS,
    ShiftSpec,
    apply_shift,
    patch_shift,
    temporal_shift,
    token_shift,
)
from tokshift.tensor import Tensor

ROWS = np.arange(1.0, 13.0).reshape(3, 4)


def test_token_shift_hand_example():
    out = token_shift(Tensor(ROWS), 1, 1).data
    np.testing.assert_array_equal(out, [[0, 2, 3, 8], [1, 6, 7, 12], [5, 10, 11, 0]])


def test_token_shift_does_not_touch_input():
    x = Tensor(ROWS.copy())
    token_shift(x, 1, 1)
    np.testing.assert_array_equal(x.data, ROWS)


@pytest.mark.parametrize("fn", [temporal_shift, patch_shift])
def test_zero_counts_identity(fn):
    z = np.random.default_rng(0).normal(size=(3, 4, 5))
    np.testing.assert_array_equal(fn(Tensor(z), 0, 0).data, z)
    np.testing.assert_array_equal(token_shift(Tensor(z[:, 0]), 0, 0).data, z[:, 0])


def test_single_frame_zeroes_shifted_blocks():
    c = np.random.default_rng(1).normal(size=(1, 6))
    out = token_shift(Tensor(c), 2, 1).data
    np.testing.assert_array_equal(out[0, :2], 0.0)
    np.testing.assert_array_equal(out[0, -1:], 0.0)
    np.testing.assert_array_equal(out[0, 2:5], c[0, 2:5])


def test_temporal_shift_restricted_to_class_token():
    z = np.random.default_rng(2).normal(size=(4, 3, 6))
    out = temporal_shift(Tensor(z), 2, 1).data
    np.testing.assert_array_equal(out[:, 0], token_shift(Tensor(z[:, 0]), 2, 1).data)


def test_temporal_shift_hand_example():
    z = np.arange(1.0, 9.0).reshape(2, 2, 2)
    out = temporal_shift(Tensor(z), 1, 0).data
    np.testing.assert_array_equal(out[1, :, 0], z[0, :, 0])
    np.testing.assert_array_equal(out[0, :, 0], 0.0)
    np.testing.assert_array_equal(out[:, :, 1], z[:, :, 1])


def test_patch_shift_exempts_class_token():
    z = np.random.default_rng(3).normal(size=(4, 5, 8))
    out = patch_shift(Tensor(z), 2, 2).data
    np.testing.assert_array_equal(out[:, 0], z[:, 0])
    np.testing.assert_array_equal(out[:, 1:], temporal_shift(Tensor(z), 2, 2).data[:, 1:])


@pytest.mark.parametrize("n_back, n_forth", [(-1, 0), (0, -2), (3, 2)])
def test_invalid_counts(n_back, n_forth):
    with pytest.raises(ValueError, match="shift counts|exceeds"):
        token_shift(Tensor(np.ones((2, 4))), n_back, n_forth)


# ---------------------------------------------------------------- ShiftSpec


def test_spec_counts_base_width():
    assert ShiftSpec("token", Fraction(1, 4), Fraction(1, 4)).counts(768) == (192, 192)
    assert ShiftSpec("none").counts(768) == (0, 0)


def test_spec_counts_floor():
    assert ShiftSpec("token", Fraction(1, 3), Fraction(1, 3)).counts(8) == (2, 2)


@pytest.mark.parametrize(
    "kwargs, match",
    [
        (dict(variant="sideways"), "variant"),
        (dict(placement="nowhere"), "placement"),
        (dict(frac_back=Fraction(3, 4), frac_forth=Fraction(1, 2)), "exceeds 1"),
        (dict(frac_back=Fraction(-1, 4)), "non-negative"),
    ],
)
def test_spec_validation(kwargs, match):
    with pytest.raises(ValueError, match=match):
        ShiftSpec(**kwargs)


def test_apply_shift_none_is_same_object():
    z = Tensor(np.ones((2, 3, 4)))
    assert apply_shift(z, ShiftSpec("none")) is z


def test_apply_shift_rejects_non_spec():
    with pytest.raises(TypeError):
        apply_shift(Tensor(np.ones((2, 3, 4))), "token")


def test_apply_shift_constant_frames_keep_interior():
    frame = np.random.default_rng(4).normal(size=(3, 8))
    z = np.broadcast_to(frame, (5, 3, 8)).copy()
    out = apply_shift(Tensor(z), ShiftSpec("token")).data
    np.testing.assert_array_equal(out[1:-1], z[1:-1])


@pytest.mark.parametrize("variant", ["temporal", "patch", "token"])
def test_apply_shift_matches_oracle(variant):
    z = np.random.default_rng(5).normal(size=(4, 3, 8))
    out = apply_shift(Tensor(z), ShiftSpec(variant)).data
    np.testing.assert_array_equal(out, shift_oracle(z, 2, 2, variant))


# ---------------------------------------------------------------- properties


@st.composite
def shift_case(draw):
    T = draw(st.integers(1, 6))
    W = draw(st.integers(1, 10))
    D = draw(st.integers(1, 16))
    n_back = draw(st.integers(0, D))
    n_forth = draw(st.integers(0, D - n_back))
    seed = draw(st.integers(0, 2**31))
    z = np.random.default_rng(seed).normal(size=(T, W, D))
    return z, n_back, n_forth


@settings(max_examples=60, deadline=None)
@given(shift_case(), st.sampled_from(["temporal", "patch"]))
def test_word_shift_matches_oracle(case, variant):
    z, n_back, n_forth = case
    fn = temporal_shift if variant == "temporal" else patch_shift
    np.testing.assert_array_equal(fn(Tensor(z), n_back, n_forth).data, shift_oracle(z, n_back, n_forth, variant))


@settings(max_examples=60, deadline=None)
@given(shift_case())
def test_shift_middle_block_untouched(case):
    z, n_back, n_forth = case
    D = z.shape[-1]
    out = temporal_shift(Tensor(z), n_back, n_forth).data
    np.testing.assert_array_equal(out[..., n_back:D - n_forth], z[..., n_back:D - n_forth])


@settings(max_examples=60, deadline=None)
@given(shift_case())
def test_shift_moves_values_without_creating_new_ones(case):
    # every output entry is either zero padding or a copy of some input entry
    z, n_back, n_forth = case
    out = temporal_shift(Tensor(z), n_back, n_forth).data
    values = set(z.ravel().tolist()) | {0.0}
    assert set(out.ravel().tolist()) <= values
    # interior frames lose nothing: the multiset of each channel over time changes
    # only by the values pushed out at the two boundaries
    T = z.shape[0]
    if n_back:
        np.testing.assert_array_equal(out[1:, :, :n_back], z[:T - 1, :, :n_back])


@settings(max_examples=40, deadline=None)
@given(shift_case())
def test_shift_backward_is_adjoint(case):
    # <shift(x), y> == <x, shift^T(y)> with shift^T computed by autodiff
    z, n_back, n_forth = case
    y = np.random.default_rng(0).normal(size=z.shape)
    x = Tensor(z, requires_grad=True)
    out = temporal_shift(x, n_back, n_forth)
    tn.backward(out, y)
    assert np.vdot(out.data, y) == pytest.approx(np.vdot(z, x.grad), rel=1e-12, abs=1e-12)


@pytest.mark.parametrize("variant", VARIANTS)
@pytest.mark.parametrize("placement", PLACEMENTS)
def test_every_variant_placement_constructs(variant, placement):
    assert ShiftSpec(variant, placement=placement).placement == placement


@settings(max_examples=60, deadline=None)
@given(shift_case())
def test_shift_multiset_conservation(case):
    z, n_back, n_forth = case
    T, D = z.shape[0], z.shape[-1]
    out = temporal_shift(Tensor(z), n_back, n_forth).data

    def rows(a, block):
        return sorted(map(tuple, a[..., block].reshape(-1, a.shape[1] * len(range(D)[block]))))

    back, forth = slice(0, n_back), slice(D - n_forth, D)
    if n_back and T > 1:
        assert rows(out[1:], back) == rows(z[:-1], back)
    if n_forth and T > 1:
        assert rows(out[:-1], forth) == rows(z[1:], forth)


def test_token_shift_backward_through_quadratic_loss():
    c = np.random.default_rng(6).uniform(-1, 1, (5, 8))
    report = tn.grad_check(lambda x: tn.mean(tn.reshape(tn.gelu(token_shift(x, 2, 3)), (1, 40)), axis=1), [c])
    assert report.max_rel_error < 1e-6
    # the quadratic loss sum(shift(x)^2) has gradient 2 * shift^T(shift(x))
    x = Tensor(c, requires_grad=True)
    y = token_shift(x, 2, 3)
    tn.backward(y, 2 * y.data)
    expected = np.zeros_like(c)
    expected[:, 2:5] = 2 * c[:, 2:5]
    expected[:-1, :2] = 2 * c[:-1, :2]
    expected[1:, 5:] = 2 * c[1:, 5:]
    np.testing.assert_array_equal(x.grad, expected)
