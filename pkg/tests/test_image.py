import math

import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from panofactor.image import (
    LOG_FLOOR,
    Domain,
    GammaParams,
    ImageError,
    Panorama,
    check_resolution,
    column_shift,
    column_yaw,
    gamma_decode,
    gamma_encode,
    log_decode,
    log_encode,
    parse_resolution,
    read_float_map,
    read_png,
    recompose,
    rotate_pano,
    write_float_map,
    write_png,
)

mpmath.mp.dps = 40


def pano_of(values, domain=Domain.SRGB_UNIT):
    v = np.asarray(values, dtype=np.float64).reshape(1, -1, 1)
    return Panorama(np.repeat(v, 3, axis=2), domain)


def random_pano(rng, h=4, w=12):
    return Panorama(rng.uniform(0, 1, (h, w, 3)))


# --- gamma -------------------------------------------------------------------


def test_gamma_decode_fixed_points():
    out = gamma_decode(pano_of([0.0, 1.0]))
    assert out.data[0, :, 0].tolist() == [0.0, 1.0]


def test_gamma_decode_half_matches_high_precision_power():
    expected = float(mpmath.mpf("0.5") ** (mpmath.mpf(1) / (mpmath.mpf(1) / mpmath.mpf("2.2"))))
    got = gamma_decode(pano_of([0.5])).data[0, 0, 0]
    assert got == pytest.approx(expected, rel=1e-12)
    assert got == pytest.approx(0.21764, abs=1e-5)


def test_gamma_one_is_identity(rng):
    p = random_pano(rng)
    g = GammaParams(1.0, 1.0)
    assert np.array_equal(gamma_decode(p, g).data, p.data)
    assert np.array_equal(gamma_encode(p, g).data, p.data)


def test_gamma_decode_rejects_log_input():
    with pytest.raises(ImageError):
        gamma_decode(pano_of([0.1], Domain.LOG_LINEAR))


def test_srgb_values_outside_unit_interval_rejected():
    with pytest.raises(ImageError):
        pano_of([1.5])
    with pytest.raises(ImageError):
        pano_of([-0.1])


def test_non_finite_rejected_in_either_domain():
    with pytest.raises(ImageError):
        pano_of([np.nan], Domain.LOG_LINEAR)
    with pytest.raises(ImageError):
        pano_of([np.inf])


@pytest.mark.parametrize("kwargs", [{"A": 0.0}, {"A": -1.0}, {"gamma": 0.0}, {"gamma": 1.5}])
def test_gamma_params_invariants(kwargs):
    with pytest.raises(ImageError):
        GammaParams(**kwargs)


@given(arrays(np.float64, (3, 7, 3), elements=st.floats(0.0, 1.0)))
def test_gamma_roundtrip_property(a):
    p = Panorama(a)
    back = gamma_encode(gamma_decode(p))
    assert np.abs(back.data - a).max() <= 1e-6


# --- log domain --------------------------------------------------------------


def test_log_encode_examples():
    out = log_encode(pano_of([1.0, 0.0]))
    assert out.domain is Domain.LOG_LINEAR
    assert out.data[0, 0, 0] == 0.0
    assert out.data[0, 1, 0] == pytest.approx(float(mpmath.log(mpmath.mpf(1) / 255)), abs=1e-12)
    assert out.data[0, 1, 0] == pytest.approx(-5.5413, abs=1e-4)


def test_log_roundtrip_at_and_above_floor():
    vals = [1.0 / 255.0, 0.5, 1.0]
    back = log_decode(log_encode(pano_of(vals)))
    np.testing.assert_allclose(back.data[0, :, 0], vals, rtol=1e-15)


@pytest.mark.parametrize("floor", [0.0, -1e-3])
def test_log_encode_rejects_non_positive_floor(floor):
    with pytest.raises(ImageError):
        log_encode(pano_of([0.5]), floor)


# --- recompose ---------------------------------------------------------------


def test_recompose_neutral_shading_is_clamped_exp(rng):
    logr = rng.normal(-0.5, 0.6, (4, 12, 3))
    out = recompose(Panorama(logr, Domain.LOG_LINEAR), Panorama(np.zeros_like(logr), Domain.LOG_LINEAR))
    np.testing.assert_array_equal(out.data, np.clip(np.exp(logr), 0, 1))


def test_recompose_half_times_half():
    half = pano_of([math.log(0.5)], Domain.LOG_LINEAR)
    assert recompose(half, half).data[0, 0, 0] == pytest.approx(0.25, abs=1e-15)


def test_recompose_dimension_mismatch():
    a = Panorama(np.zeros((2, 6, 3)), Domain.LOG_LINEAR)
    b = Panorama(np.zeros((2, 3, 3)), Domain.LOG_LINEAR)
    with pytest.raises(ImageError):
        recompose(a, b)


@given(
    arrays(np.float64, (3, 6, 3), elements=st.floats(LOG_FLOOR, 1.0)),
    arrays(np.float64, (3, 6, 3), elements=st.floats(-3.0, 0.0)),
)
def test_decompose_then_recompose_identity(img, logs):
    logi = log_encode(Panorama(img))
    logr = Panorama(logi.data - logs, Domain.LOG_LINEAR)
    out = recompose(logr, Panorama(logs, Domain.LOG_LINEAR))
    assert np.abs(out.data - img).max() <= 1e-6


# --- rotation ----------------------------------------------------------------


def test_full_turn_is_identity(rng):
    p = random_pano(rng)
    assert rotate_pano(p, 2 * math.pi) == p


def test_half_turn_twice_is_identity(rng):
    p = random_pano(rng)
    assert rotate_pano(rotate_pano(p, math.pi), math.pi) == p


def test_quarter_turn_index_arithmetic(rng):
    p = random_pano(rng, 2, 240)
    out = rotate_pano(p, math.pi / 2)
    for c in range(240):
        assert np.array_equal(out.data[:, (c + 60) % 240], p.data[:, c])


@given(st.integers(-200, 200))
def test_bin_aligned_rotation_inverts(k):
    p = Panorama(np.random.default_rng(k + 500).uniform(0, 1, (2, 120, 3)))
    a = k * 2 * math.pi / 60
    assert rotate_pano(rotate_pano(p, a), -a) == p


@given(st.floats(-50.0, 50.0))
def test_rotation_permutes_columns(angle):
    p = Panorama(np.random.default_rng(0).uniform(0, 1, (2, 60, 3)))
    out = rotate_pano(p, angle)
    assert np.array_equal(np.sort(out.data, axis=None), np.sort(p.data, axis=None))
    assert column_shift(angle, 60) == round(math.remainder(angle, 2 * math.pi) / (2 * math.pi) * 60) % 60


def test_rotate_accepts_feature_maps():
    m = np.arange(24.0).reshape(2, 12)
    np.testing.assert_array_equal(rotate_pano(m, 2 * math.pi / 12), np.roll(m, 1, axis=1))


def test_column_yaw_centre_column_is_heading_zero():
    yaw = column_yaw(240)
    assert yaw[120] == pytest.approx(math.pi / 240)
    assert yaw[0] == pytest.approx(-math.pi + math.pi / 240)


# --- resolution and files ----------------------------------------------------


@pytest.mark.parametrize("res", [(240, 80), (960, 320), (180, 60)])
def test_valid_resolutions(res):
    check_resolution(*res)


@pytest.mark.parametrize("text", ["250x80", "240x81", "abc", "0x0", "240"])
def test_invalid_resolutions(text):
    with pytest.raises(ImageError):
        parse_resolution(text)


def test_png_roundtrip_is_bit_preserving(tmp_path, rng):
    q = np.round(rng.uniform(0, 1, (4, 12, 3)) * 255) / 255
    write_png(tmp_path / "a.png", Panorama(q))
    assert read_png(tmp_path / "a.png") == Panorama(q)


def test_float_map_layout_and_sidecar(tmp_path, rng):
    a = rng.normal(size=(3, 5, 3)).astype(np.float32).astype(np.float64)
    write_float_map(tmp_path / "m.f32", a, "log")
    raw = np.frombuffer((tmp_path / "m.f32").read_bytes(), dtype="<f4")
    # planar: the whole first channel precedes the second
    np.testing.assert_array_equal(raw[:15], a[:, :, 0].ravel())
    back, meta = read_float_map(tmp_path / "m.f32")
    np.testing.assert_array_equal(back, a)
    assert meta == {"width": 5, "height": 3, "channels": 3, "dtype": "f32le", "layout": "planar", "domain_tag": "log"}
