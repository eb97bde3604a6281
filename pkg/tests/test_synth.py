import math

import numpy as np
import pytest

from panofactor.azimuth import BIN_WIDTH, angle_bin
from panofactor.image import Panorama, gamma_decode, gamma_encode, log_encode, recompose_array, rotate_pano
from panofactor.synth import (
    Box,
    Illumination,
    SynthScene,
    make_stack,
    random_illuminations,
    render,
    scene_geometry,
    spacetime_grid,
    sun_direction,
    sun_mask,
    sun_visible,
)

RES = (240, 80)


def illum_at(az):
    return Illumination(az, (0.15, 0.03, -0.15), (-0.1, 0.0, 0.12), 0.5, 0.2)


def test_construction_identity(small_scene, rng):
    for il in random_illuminations(rng, 3):
        pano, logr, sh = render(small_scene, il, RES)
        exact = gamma_encode(Panorama(recompose_array(logr, sh.full()))).data
        assert np.abs(pano.data - np.clip(exact, 0, 1)).max() <= 1 / 255
        raw = render(small_scene, il, RES, quantized=False)[0]
        # before quantisation the log identity is exact wherever nothing clipped
        ok = (raw.data < 1).all(axis=-1)
        logs = log_encode(gamma_decode(raw)).data
        assert np.abs(logs - (logr + sh.full()))[ok].max() < 1e-9


def test_box_free_rotation_symmetry():
    scene = SynthScene.empty()
    base = illum_at(0.4)
    p0 = render(scene, base, RES, quantized=False)[0]
    for k in (1, 15, -20):
        d = k * BIN_WIDTH
        p1 = render(scene, base.rotated(d), RES, quantized=False)[0]
        assert np.abs(p1.data - rotate_pano(p0, d).data).max() < 1e-9


def _blocked(scene, origin, s):
    """Independent shadow ray: does the ray origin + t*s (t > 0) enter any box?"""
    for b in scene.layout:
        lo = np.array([b.x0, b.y0, 0.0])
        hi = np.array([b.x1, b.y1, b.height])
        tn, tf = 0.0, np.inf
        for a in range(3):
            if abs(s[a]) < 1e-15:
                if not lo[a] <= origin[a] <= hi[a]:
                    break
                continue
            t1, t2 = sorted(((lo[a] - origin[a]) / s[a], (hi[a] - origin[a]) / s[a]))
            tn, tf = max(tn, t1), min(tf, t2)
        else:
            if tn < tf - 1e-9:
                return True
    return False


def test_mask_is_recast_visibility(small_scene, rng):
    geo = scene_geometry(small_scene, *RES)
    az = 0.9
    s = sun_direction(az, small_scene.sun_elevation)
    M = sun_mask(small_scene, geo, az)
    assert M.min() >= 0 and M.max() <= 1
    assert not M[geo.sky].any()
    lit = np.argwhere(M > 0)
    dark = np.argwhere((M == 0) & ~geo.sky & (geo.normals @ s > 0.05))
    assert len(lit) > 50 and len(dark) > 50
    for y, x in lit[rng.choice(len(lit), 60, replace=False)]:
        p = geo.points[y, x] + geo.normals[y, x] * 1e-6
        assert not _blocked(small_scene, p, s)
        assert M[y, x] == pytest.approx(geo.normals[y, x] @ s, abs=1e-12)
    for y, x in dark[rng.choice(len(dark), 60, replace=False)]:
        assert _blocked(small_scene, geo.points[y, x] + geo.normals[y, x] * 1e-6, s)


def test_wall_facing_away_from_sun_is_dark():
    box = Box(6.0, 16.0, 10.0, 22.0, 12.0, (0.5, 0.5, 0.5), 1)
    scene = SynthScene(seed=0, layout=(box,))
    geo = scene_geometry(scene, *RES)
    wall = (geo.kind == 1) & (geo.normals[..., 0] < -0.5)
    assert wall.sum() > 20
    # sun due east lights the far side; the face towards the camera gets none
    assert not sun_mask(scene, geo, math.pi / 2)[wall].any()
    assert (sun_mask(scene, geo, -math.pi / 2)[wall] > 0).all()


def test_cast_shadow_on_ground():
    box = Box(6.0, 16.0, 10.0, 22.0, 12.0, (0.5, 0.5, 0.5), 1)
    scene = SynthScene(seed=0, layout=(box,))
    geo = scene_geometry(scene, *RES)
    M = sun_mask(scene, geo, math.pi / 2)
    # ground just west of the building lies in its shadow when the sun is east
    shade = (geo.kind == 0) & (geo.points[..., 0] > 3) & (geo.points[..., 0] < 5.9)
    shade &= (geo.points[..., 1] > 12) & (geo.points[..., 1] < 20)
    assert shade.sum() > 0 and not M[shade].any()


def test_scene_validation():
    a = Box(6.0, 10.0, 0.0, 5.0, 8.0, (0.5,) * 3, 0)
    b = Box(7.0, 12.0, 4.0, 9.0, 8.0, (0.5,) * 3, 1)
    with pytest.raises(ValueError):
        SynthScene(0, (a, b))
    with pytest.raises(ValueError):
        SynthScene(0, (Box(-1.0, 1.0, -1.0, 1.0, 5.0, (0.5,) * 3, 0),))


def test_generated_scene_invariants():
    for seed in range(5):
        sc = SynthScene.generate(seed)
        assert 6 <= len(sc.layout) <= 12
        for b in sc.layout:
            assert all(0.05 <= a <= 0.95 for a in b.albedo)


def test_illumination_validation():
    with pytest.raises(ValueError):
        Illumination(0.0, (0, 0, 0), (0, 0, 0), 0.0, 0.2)
    with pytest.raises(ValueError):
        Illumination(math.nan, (0, 0, 0), (0, 0, 0), 0.5, 0.2)


def test_illumination_bicolor_parameters():
    il = illum_at(0.0)
    np.testing.assert_allclose(il.c1, math.log(0.5 / 0.2) + np.array([0.15, 0.03, -0.15]))
    np.testing.assert_allclose(il.c2, [-0.1, 0.0, 0.12])


def test_make_stack_zero_jitter(small_scene, rng):
    stack, warps, _ = make_stack(small_scene, random_illuminations(rng, 3), 0.0)
    assert all(not g.control.any() for g in warps)
    il = illum_at(1.0)
    stack, _, _ = make_stack(small_scene, [il] * 3, 0.0)
    assert stack.frames[0] == stack.frames[1] == stack.frames[2]


def test_make_stack_deterministic(small_scene):
    ils = random_illuminations(np.random.default_rng(4), 8)
    a = make_stack(small_scene, ils, 3.0, seed=9)
    b = make_stack(small_scene, ils, 3.0, seed=9)
    assert a[0].frames == b[0].frames
    assert all(np.array_equal(x.control, y.control) for x, y in zip(a[1], b[1]))
    assert max(np.abs(g.control).max() for g in a[1]) <= 3.0
    assert a[0].frames != make_stack(small_scene, ils, 3.0, seed=10)[0].frames


def test_make_stack_validation(small_scene):
    with pytest.raises(ValueError):
        make_stack(small_scene, [illum_at(0.0)] * 9)
    with pytest.raises(ValueError):
        make_stack(small_scene, [illum_at(0.0)], -1.0)


def test_spacetime_grid_identities():
    g = spacetime_grid(3, 4, seed=3, resolution=(120, 40))
    assert g.shape == (3, 4)
    for c in range(4):
        assert len({g.cell(r, c).shading.c1.tobytes() for r in range(3)}) == 1
    for r in range(3):
        for c in range(1, 4):
            assert np.array_equal(g.cell(r, c).log_reflectance, g.cell(r, 0).log_reflectance)
    blobs = {g.cell(r, c).pano.data.tobytes() for r in range(3) for c in range(4)}
    assert len(blobs) == 12
    again = spacetime_grid(3, 4, seed=3, resolution=(120, 40))
    assert all(again.cell(r, c).pano == g.cell(r, c).pano for r in range(3) for c in range(4))
    with pytest.raises(ValueError):
        spacetime_grid(1, 4)


def test_sun_is_brightest_column_of_sky_band(rng):
    scene = SynthScene.empty()
    for _ in range(6):
        il = Illumination.random(rng)
        pano = render(scene, il, RES)[0]
        band = pano.data[: int(0.4 * RES[1])].mean(axis=-1).sum(axis=0)
        col = int(np.argmax(band))
        assert abs(angle_bin(-math.pi + (col + 0.5) * 2 * math.pi / RES[0]) - angle_bin(il.sun_azimuth)) % 60 in (0, 1, 59)
        assert sun_visible(scene, il.sun_azimuth, RES)
