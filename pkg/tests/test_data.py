import numpy as np
import pytest

from gzsl_moe.data import (AGV, BACKBONE_TRAINING, COBOT, DEFAULT_COUNTS, FLOOR, GZSL_EVAL, HUMAN,
                           WALL, FrameFormatError, PointFrame, SceneSpec, SplitConfig,
                           generate_scene, inverse_frequency_weights, load_frame, load_frames,
                           make_batches, split_frames, write_frame, write_pcd)


@pytest.fixture(scope="module")
def scene():
    return generate_scene(SceneSpec(seed=3))


def test_default_counts(scene):
    assert scene.class_counts() == {FLOOR: 10000, WALL: 13400, COBOT: 1800, HUMAN: 2800, AGV: 1200}
    assert len(scene) == 29200


def test_empty_and_deterministic():
    empty = generate_scene(SceneSpec(counts={c: 0 for c in DEFAULT_COUNTS}))
    assert len(empty) == 0
    a = generate_scene(SceneSpec(seed=9).scaled(0.05))
    b = generate_scene(SceneSpec(seed=9).scaled(0.05))
    assert np.array_equal(a.points, b.points) and np.array_equal(a.labels, b.labels)


def test_scene_spec_validation():
    with pytest.raises(ValueError):
        SceneSpec(counts={1: -1})
    with pytest.raises(ValueError):
        SceneSpec(counts={9: 10})
    with pytest.raises(ValueError):
        SceneSpec(extents=(1.0, 0.0, 1.0))


def test_scene_geometry(scene):
    floor = scene.points[scene.labels == FLOOR]
    assert abs(floor[:, 2].mean()) < 0.01
    assert np.all(scene.points[:, 0] > -0.1) and np.all(scene.points[:, 0] < 6.1)


def test_round_trip_bit_exact(tmp_path, scene):
    write_frame(scene, tmp_path / "f.pf")
    back = load_frame(tmp_path / "f.pf")
    assert np.array_equal(back.points, scene.points)
    assert np.array_equal(back.labels, scene.labels)


def test_round_trip_empty_and_unlabeled(tmp_path):
    write_frame(PointFrame(np.empty((0, 3)), []), tmp_path / "e.pf")
    assert len(load_frame(tmp_path / "e.pf")) == 0
    f = PointFrame([[0.1, 0.2, 0.3], [1, 2, 3]], [0, 4])
    write_frame(f, tmp_path / "u.pf")
    assert load_frame(tmp_path / "u.pf").labels.tolist() == [0, 4]


def test_native_small_and_count_mismatch(tmp_path):
    p = tmp_path / "a.pf"
    p.write_text("GZSL-PF v1 3\n0 0 0 1\n1 0 0 2\n0 1 0 3\n")
    assert len(load_frame(p)) == 3
    p.write_text("GZSL-PF v1 5\n" + "0 0 0 1\n" * 4)
    with pytest.raises(FrameFormatError, match="point count mismatch"):
        load_frame(p)
    p.write_text("garbage\n")
    with pytest.raises(FrameFormatError):
        load_frame(p)
    p.write_text("GZSL-PF v1 1\n0 0 x 1\n")
    with pytest.raises(FrameFormatError):
        load_frame(p)


def test_pcd_round_trip(tmp_path, rng):
    f = PointFrame(rng.normal(size=(10, 3)), rng.integers(0, 6, size=10))
    write_pcd(f, tmp_path / "f.pcd")
    back = load_frame(tmp_path / "f.pcd")
    assert np.array_equal(back.points, f.points) and np.array_equal(back.labels, f.labels)
    write_frame(f, tmp_path / "g.pf")
    assert len(load_frames(tmp_path)) == 2


def test_pcd_binary_rejected(tmp_path):
    p = tmp_path / "b.pcd"
    p.write_text("FIELDS x y z label\nPOINTS 0\nDATA binary\n")
    with pytest.raises(FrameFormatError):
        load_frame(p)


def test_split_counts(scene):
    split = SplitConfig()
    bb = split_frames([scene], split, BACKBONE_TRAINING)[0]
    assert len(bb.frame) == 18000 and bb.seen_mask.all()
    ev = split_frames([scene], split, GZSL_EVAL)[0]
    assert len(ev.frame) == 29200
    assert int(ev.seen_mask.sum()) == 18000 and int((~ev.seen_mask).sum()) == 11200


def test_split_only_unseen_and_unlabeled():
    f = PointFrame(np.zeros((4, 3)), [FLOOR, FLOOR, 0, AGV])
    assert len(split_frames([f], SplitConfig(), BACKBONE_TRAINING)[0].frame) == 0
    assert len(split_frames([f], SplitConfig(), GZSL_EVAL)[0].frame) == 3
    with pytest.raises(ValueError):
        split_frames([f], SplitConfig(), "other")


def test_split_config_validation():
    with pytest.raises(ValueError, match="overlap"):
        SplitConfig({1, 2}, {2})
    with pytest.raises(ValueError):
        SplitConfig(set(), {2})


def test_batches():
    X = np.arange(20.0).reshape(10, 2)
    y = np.arange(10)
    sizes = [len(b.y) for b in make_batches(X, y, 4, seed=1)]
    assert sizes == [4, 4, 2]
    a = [b.index.tolist() for b in make_batches(X, y, 4, seed=1)]
    b = [b.index.tolist() for b in make_batches(X, y, 4, seed=1)]
    assert a == b
    with pytest.raises(ValueError):
        next(make_batches(X, y, 0, seed=1))


def test_class_weight_ratio():
    w = inverse_frequency_weights({WALL: 120298, COBOT: 16159, HUMAN: 25137})
    assert w[WALL] / w[COBOT] == pytest.approx(16159 / 120298, rel=1e-12)
    assert round(w[WALL] / w[COBOT], 4) == 0.1343
    y = np.array([WALL] * 6 + [COBOT] * 2)
    batch = next(make_batches(np.zeros((8, 1)), y, 8, seed=0, class_weights=True))
    assert batch.weights.mean() == pytest.approx(1.0)
