import json

import numpy as np
import pytest

from panofactor.corpus import CORPUS_FILE, frame_id, load_synth_corpus, scene_id, write_synth_corpus
from panofactor.image import read_float_map
from panofactor.ingest import StackError, greedy_cluster, read_manifest
from panofactor.synth import grid_factors, make_stack, scene_geometry

RES = (120, 40)


@pytest.fixture(scope="module")
def corpus_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("corpus")
    write_synth_corpus(d, 2, 3, jitter=1.5, seed=4, resolution=RES)
    return d


def test_layout_and_truth(corpus_dir):
    scenes, illums = grid_factors(2, 3, 4)
    for r in range(2):
        logr, meta = read_float_map(corpus_dir / "truth" / f"{scene_id(r)}.logR.f32")
        np.testing.assert_allclose(logr, scene_geometry(scenes[r], *RES).log_reflectance, atol=1e-6)
        for t in range(3):
            assert (corpus_dir / "frames" / f"{frame_id(r, t)}.png").is_file()
            mask, _ = read_float_map(corpus_dir / "truth" / f"{frame_id(r, t)}.mask.f32")
            assert mask.shape[:2] == (RES[1], RES[0]) and 0 <= mask.min() and mask.max() <= 1
    meta = json.loads((corpus_dir / CORPUS_FILE).read_text())
    assert meta["seed"] == 4 and len(meta["illuminations"]) == 3


def test_roundtrip(corpus_dir):
    c = load_synth_corpus(corpus_dir)
    scenes, illums = grid_factors(2, 3, 4)
    assert c.scenes == scenes and c.illuminations == illums
    ref, warps, _ = make_stack(scenes[1], illums, 1.5, 4 * 1000 + 1, RES)
    assert c.stacks[1].frames == ref.frames
    for a, b in zip(c.applied_warps(1), warps):
        np.testing.assert_allclose(a.control, b.control, atol=1e-6)
    g = c.to_grid()
    assert g.shape == (2, 3) and g.cell(1, 2).pano == c.stacks[1].frames[2]


def test_manifest_reclusters(corpus_dir):
    skels = read_manifest(corpus_dir / "manifest.json")
    records = [r for s in skels for r in s.records]
    assert [len(s.records) for s in greedy_cluster(records)] == [3, 3]


def test_rewrite_is_byte_identical(corpus_dir, tmp_path):
    write_synth_corpus(tmp_path, 2, 3, jitter=1.5, seed=4, resolution=RES, workers=2)
    for p in corpus_dir.rglob("*"):
        if p.is_file():
            assert (tmp_path / p.relative_to(corpus_dir)).read_bytes() == p.read_bytes(), p.name


def test_load_errors(tmp_path, corpus_dir):
    with pytest.raises(StackError):
        load_synth_corpus(tmp_path)
    (tmp_path / CORPUS_FILE).write_text("{")
    with pytest.raises(StackError):
        load_synth_corpus(tmp_path)
    with pytest.raises(ValueError):
        write_synth_corpus(tmp_path / "x", 1, 9)
