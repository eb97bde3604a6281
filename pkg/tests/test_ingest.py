import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from panofactor.image import Panorama, read_png, rotate_pano, write_png
from panofactor.ingest import (
    CaptureRecord,
    Stack,
    StackError,
    StackSkeleton,
    greedy_cluster,
    haversine_m,
    load_stack,
    read_manifest,
    resample_area,
    write_manifest,
)


def rec(i, lat=10.0, lon=20.0, heading=0.0, path=None):
    return CaptureRecord(f"r{i}", path or f"r{i}.png", lat, lon, heading, 1.0e9 + i)


def test_identical_coordinates_form_one_stack():
    out = greedy_cluster([rec(i) for i in range(3)])
    assert len(out) == 1 and len(out[0].records) == 3


def test_two_groups_a_kilometre_apart():
    recs = [rec(0), rec(1, lat=10.009), rec(2), rec(3, lat=10.009)]
    out = greedy_cluster(recs, 0.4)
    assert [[r.id for r in s.records] for s in out] == [["r0", "r2"], ["r1", "r3"]]


def test_nine_colocated_records_split_eight_plus_one():
    out = greedy_cluster([rec(i) for i in range(9)])
    assert [len(s.records) for s in out] == [8, 1]
    assert not out[0].singleton and out[1].singleton


def test_empty_input_and_bad_radius():
    assert greedy_cluster([]) == []
    with pytest.raises(StackError):
        greedy_cluster([rec(0)], 0.0)


def test_haversine_matches_arc_length():
    # one degree of latitude along a meridian
    assert haversine_m(0, 0, 1, 0) == pytest.approx(6_371_000 * math.pi / 180, rel=1e-12)


coords = st.lists(
    st.tuples(st.floats(-1e-5, 1e-5), st.floats(-1e-5, 1e-5)), min_size=0, max_size=25
)


@given(coords, st.floats(0.1, 3.0))
def test_cluster_partition_radius_and_determinism(pts, radius):
    recs = [rec(i, 45.0 + a, 7.0 + b) for i, (a, b) in enumerate(pts)]
    out = greedy_cluster(recs, radius)
    ids = [r.id for s in out for r in s.records]
    assert sorted(ids) == sorted(r.id for r in recs)
    assert len(ids) == len(set(ids))
    for s in out:
        assert 1 <= len(s.records) <= 8
        for a, b in itertools.combinations(s.records, 2):
            assert haversine_m(a.lat, a.lon, b.lat, b.lon) <= radius
    assert greedy_cluster(recs, radius) == out


# --- manifest ----------------------------------------------------------------


def test_manifest_roundtrip(tmp_path):
    skels = greedy_cluster([rec(0), rec(1), rec(2, lat=11.0)])
    write_manifest(skels, tmp_path / "m.json")
    assert read_manifest(tmp_path / "m.json") == skels


def test_empty_manifest(tmp_path):
    write_manifest([], tmp_path / "m.json")
    assert json.loads((tmp_path / "m.json").read_text()) == {"stacks": []}
    assert read_manifest(tmp_path / "m.json") == []


def test_manifest_field_names(tmp_path):
    write_manifest([StackSkeleton("s", (rec(0),))], tmp_path / "m.json")
    frame = json.loads((tmp_path / "m.json").read_text())["stacks"][0]["frames"][0]
    assert set(frame) == {"id", "path", "lat", "lon", "heading_deg", "timestamp_utc"}


def test_latitude_out_of_range_is_schema_error(tmp_path):
    bad = {"stacks": [{"stack_id": "s", "frames": [{**rec(0).to_json(), "lat": 91}]}]}
    (tmp_path / "m.json").write_text(json.dumps(bad))
    with pytest.raises(StackError, match="latitude"):
        read_manifest(tmp_path / "m.json")


@pytest.mark.parametrize(
    "text",
    ["{not json", "[]", '{"stacks": [{"frames": []}]}', '{"stacks": [{"stack_id": "a", "frames": [{"id": "x"}]}]}'],
)
def test_malformed_manifests(tmp_path, text):
    (tmp_path / "m.json").write_text(text)
    with pytest.raises(StackError):
        read_manifest(tmp_path / "m.json")


@pytest.mark.parametrize("field,value", [("lon", 181.0), ("timestamp", 0.0), ("heading", float("nan")), ("id", "")])
def test_record_invariants(field, value):
    kwargs = dict(id="a", path="a.png", lat=0.0, lon=0.0, heading=0.0, timestamp=1.0)
    kwargs[field] = value
    with pytest.raises(StackError):
        CaptureRecord(**kwargs)


# --- loading -----------------------------------------------------------------


def _frames(rng, n, w=120, h=40):
    return [np.round(rng.uniform(0, 1, (h, w, 3)) * 255) / 255 for _ in range(n)]


def test_load_at_target_resolution_is_bit_preserving(tmp_path, rng):
    data = _frames(rng, 2)
    for i, d in enumerate(data):
        write_png(tmp_path / f"r{i}.png", d)
    stack = load_stack(StackSkeleton("s", (rec(0), rec(1))), (120, 40), tmp_path)
    for f, d in zip(stack.frames, data):
        np.testing.assert_array_equal(f.data, d)


def test_heading_ninety_shifts_a_quarter(tmp_path, rng):
    (data,) = _frames(rng, 1)
    write_png(tmp_path / "r0.png", data)
    stack = load_stack(StackSkeleton("s", (rec(0, heading=90.0),)), (120, 40), tmp_path)
    np.testing.assert_array_equal(stack.frames[0].data, np.roll(data, 30, axis=1))
    assert stack.frames[0] == rotate_pano(read_png(tmp_path / "r0.png"), math.pi / 2)


def test_area_resampling_averages_blocks(tmp_path, rng):
    big = rng.uniform(0, 1, (80, 240, 3))
    out = resample_area(big, 120, 40)
    np.testing.assert_allclose(out, big.reshape(40, 2, 120, 2, 3).mean(axis=(1, 3)), atol=1e-12)


def test_missing_file_names_frame(tmp_path):
    with pytest.raises(StackError, match="r7"):
        load_stack(StackSkeleton("s", (rec(7),)), (120, 40), tmp_path)


def test_corrupt_file_names_frame(tmp_path):
    (tmp_path / "r3.png").write_bytes(b"not a png")
    with pytest.raises(StackError, match="r3"):
        load_stack(StackSkeleton("s", (rec(3),)), (120, 40), tmp_path)


def test_wrong_aspect_names_frame(tmp_path, rng):
    write_png(tmp_path / "r2.png", rng.uniform(0, 1, (40, 100, 3)))
    with pytest.raises(StackError, match="r2"):
        load_stack(StackSkeleton("s", (rec(2),)), (120, 40), tmp_path)


def test_stack_size_limits():
    p = Panorama(np.zeros((2, 6, 3)))
    with pytest.raises(StackError):
        Stack("s", ())
    with pytest.raises(StackError):
        Stack("s", (p,) * 9)
    with pytest.raises(StackError):
        Stack("s", (p, Panorama(np.zeros((2, 12, 3)))))
