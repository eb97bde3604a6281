import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from panofactor.losses import loss_rc, loss_wl, pairwise_l1


def direct_pairwise(frames, smooth=0.0):
    n = len(frames)
    total = 0.0
    for i, j in itertools.combinations(range(n), 2):
        d = frames[i] - frames[j]
        total += (np.sqrt(d * d + smooth * smooth) - smooth).sum() if smooth else np.abs(d).sum()
    return total / (n * (n - 1) // 2 * frames[0].size)


def test_identical_frames():
    f = np.random.default_rng(0).normal(size=(3, 4, 5, 3))
    f[:] = f[0]
    assert loss_rc(f) == 0.0


def test_one_channel_offset():
    a = np.zeros((2, 4, 6, 3))
    a[1, :, :, 0] += 0.1
    assert loss_rc(a) == pytest.approx(0.1 / 3, abs=1e-15)


def test_three_frame_enumeration():
    a = np.zeros((3, 2, 2, 3))
    a[1] += 0.3
    a[2] += 0.3
    assert loss_rc(a) == pytest.approx(0.2, abs=1e-15)


def test_rc_needs_two_frames():
    with pytest.raises(ValueError):
        loss_rc(np.zeros((1, 2, 2, 3)))


@given(arrays(np.float64, (4, 3, 5, 3), elements=st.floats(-3, 3)), st.sampled_from([0.0, 0.01, 0.3]))
def test_compiled_pairwise_matches_direct_sum(a, smooth):
    assert pairwise_l1(a, smooth) == pytest.approx(direct_pairwise(a, smooth), rel=1e-12, abs=1e-13)


@given(arrays(np.float64, (3, 2, 4, 3), elements=st.floats(-2, 2)), arrays(np.float64, (3,), elements=st.floats(-1, 1)))
def test_rc_invariant_to_common_channel_shift(a, k):
    assert loss_rc(a + k) == pytest.approx(loss_rc(a), abs=1e-12)


def test_smoothed_gradient_matches_finite_differences(rng):
    a = rng.normal(size=(4, 3, 5, 3))
    _, g = pairwise_l1(a, 0.05, with_grad=True)
    for _ in range(10):
        idx = tuple(int(rng.integers(s)) for s in a.shape)
        ap, am = a.copy(), a.copy()
        ap[idx] += 1e-6
        am[idx] -= 1e-6
        fd = (pairwise_l1(ap, 0.05) - pairwise_l1(am, 0.05)) / 2e-6
        assert g[idx] == pytest.approx(fd, rel=1e-5, abs=1e-10)


def test_wl_cancellation():
    b = np.stack([np.full((3, 4, 3), 0.2), np.full((3, 4, 3), -0.2)])
    assert loss_wl(b) == 0.0


def test_wl_single_zero_frame():
    assert loss_wl(np.zeros((1, 3, 4, 3))) == 0.0


def test_wl_sums_over_frames():
    assert loss_wl(np.full((2, 3, 4, 3), 0.1)) == pytest.approx(0.2, abs=1e-15)


def test_wl_gradient(rng):
    b = rng.normal(size=(3, 2, 4, 3))
    v, g = loss_wl(b, with_grad=True)
    assert v == loss_wl(b)
    d = rng.normal(size=b.shape)
    fd = (loss_wl(b + 1e-7 * d) - loss_wl(b - 1e-7 * d)) / 2e-7
    assert np.sum(g * d) == pytest.approx(fd, rel=1e-6)
