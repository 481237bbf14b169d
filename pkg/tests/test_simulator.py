import json
import shutil

import numpy as np
import pytest

from mvagg import geometry as geo
from mvagg.simulator import (
    BACKGROUND, DatasetError, SceneConfig, SimulationError, camera_split, coverage, generate_scene,
    make_cameras, read_dataset, read_pgm, read_ppm, visible, write_dataset, write_pgm, write_ppm,
)


def test_zero_pedestrians(small_scene):
    s = generate_scene(small_scene, 0, positions=np.zeros((0, 2)))
    assert s.n_people == 0
    bg = np.round(np.array(BACKGROUND) * 255).astype(np.uint8)
    for img in s.images:
        assert img.shape == (3, 48, 80)
        assert np.all(img == bg[:, None, None])
    assert s.foot_px.shape == (4, 0, 2)


def test_determinism(small_scene):
    assert generate_scene(small_scene, 3) == generate_scene(small_scene, 3)
    assert not generate_scene(small_scene, 3) == generate_scene(small_scene, 4)


def test_pedestrian_counts_and_separation(small_scene):
    for k in range(5):
        s = generate_scene(small_scene, k)
        assert small_scene.ped_min <= s.n_people <= small_scene.ped_max
        cells = {tuple(c) for c in np.rint(s.positions).astype(int)}
        assert len(cells) == s.n_people
        assert np.all((s.positions >= 0) & (s.positions <= [small_scene.cols - 1, small_scene.rows - 1]))


def test_foot_pixel_matches_projection(small_scene):
    cams = make_cameras(small_scene)
    pos = np.array([[17.0, 11.0]])
    s = generate_scene(small_scene, 0, positions=pos, cameras=cams)
    world = small_scene.grid.grid_to_world(pos)[0]
    for i, cal in enumerate(cams):
        want = geo.world_to_image(cal, (world[0], world[1], 0.0))
        assert np.hypot(*(s.foot_px[i, 0] - want)) < 0.5
        head = geo.world_to_image(cal, (world[0], world[1], small_scene.ped_height))
        assert np.hypot(*(s.head_px[i, 0] - head)) < 0.5


def test_blob_visible_at_foot(small_scene):
    cams = make_cameras(small_scene)
    s = generate_scene(small_scene, 0, positions=np.array([[17.0, 11.0]]), cameras=cams)
    bg = np.round(np.array(BACKGROUND) * 255)
    seen = 0
    for i, img in enumerate(s.images):
        u, v = s.foot_px[i, 0]
        if 0 <= u < 80 and 0 <= v < 48:
            # rendered foot blob centre sits just above the foot point
            col = img[:, max(0, int(v) - 2): int(v) + 1, int(u)]
            seen += int(np.any(np.abs(col.astype(float) - bg[:, None]) > 20))
    assert seen >= 1


def test_every_pedestrian_visible(small_scene):
    cams = make_cameras(small_scene)
    for k in range(4):
        s = generate_scene(small_scene, k, cameras=cams)
        world = small_scene.grid.grid_to_world(s.positions)
        pts = np.column_stack([world, np.zeros(len(world))])
        assert np.all(np.any([visible(c, pts) for c in cams], axis=0))


def test_foot_homography_consistency(small_scene):
    # ground homography of the rendered foot pixel recovers the grid cell
    cams = make_cameras(small_scene)
    s = generate_scene(small_scene, 1, cameras=cams)
    for i, cal in enumerate(cams):
        H = geo.homography(small_scene.grid, geo.theta_at_height(cal, 0, 0.1))
        for j in range(s.n_people):
            px = s.foot_px[i, j]
            if np.any(np.isnan(px)):
                continue
            back = geo.apply_h(H, [px])[0]
            assert np.hypot(*(back - s.positions[j])) < 1.0


def test_coverage_default_scene():
    cfg = SceneConfig()
    cov = coverage(make_cameras(cfg), cfg.grid)
    assert cov.shape == (48, 72)
    assert cov.min() >= 1
    assert cov.mean() >= 2.0


def test_placement_failure(small_scene):
    from dataclasses import replace

    crowded = replace(small_scene, ped_min=400, ped_max=400, min_separation=0.5)
    with pytest.raises(SimulationError):
        generate_scene(crowded, 0)


def test_pnm_round_trip(tmp_path, rng):
    img = rng.integers(0, 256, size=(3, 5, 7), dtype=np.uint8)
    write_ppm(tmp_path / "a.ppm", img)
    np.testing.assert_array_equal(read_ppm(tmp_path / "a.ppm"), img)
    g = img[0]
    write_pgm(tmp_path / "a.pgm", g)
    np.testing.assert_array_equal(read_pgm(tmp_path / "a.pgm"), g)
    with pytest.raises(DatasetError):
        read_pgm(tmp_path / "a.ppm")
    (tmp_path / "b.ppm").write_bytes((tmp_path / "a.ppm").read_bytes()[:-3])
    with pytest.raises(DatasetError):
        read_ppm(tmp_path / "b.ppm")


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory, small_scene):
    return write_dataset(small_scene, 4, tmp_path_factory.mktemp("ds") / "data")


def test_dataset_round_trip(dataset_dir, small_scene):
    ds = read_dataset(dataset_dir)
    assert len(ds) == 4
    assert ds.config == small_scene
    cams = make_cameras(small_scene)
    assert ds.calibrations == cams
    for k in range(4):
        mem = generate_scene(small_scene, k, cameras=cams)
        disk = ds[k]
        assert disk == mem
        gt = json.loads((dataset_dir / "frames" / f"{k:05d}" / "gt.json").read_text())
        for j, entry in enumerate(gt):
            assert entry["grid_x"] == mem.positions[j, 0] and entry["grid_y"] == mem.positions[j, 1]
            assert len(entry["views"]) == 4
    assert list(ds.train_indices()) == [0, 1, 2, 3] and list(ds.test_indices()) == []


def test_dataset_layout(dataset_dir):
    assert (dataset_dir / "config.json").is_file()
    assert sorted(p.name for p in (dataset_dir / "calibrations").iterdir()) == [f"cam_{i}.json" for i in range(4)]
    assert sorted(p.name for p in (dataset_dir / "frames" / "00000").iterdir()) == ["cam_0.ppm", "cam_1.ppm", "cam_2.ppm", "cam_3.ppm", "gt.json"]


def test_corrupt_dataset(dataset_dir, tmp_path):
    broken = tmp_path / "broken"
    shutil.copytree(dataset_dir, broken)
    shutil.rmtree(broken / "frames" / "00003")
    with pytest.raises(DatasetError):
        read_dataset(broken)
    with pytest.raises(DatasetError):
        read_dataset(tmp_path / "missing")
    bad = tmp_path / "bad"
    shutil.copytree(dataset_dir, bad)
    (bad / "frames" / "00001" / "gt.json").write_text("{")
    ds = read_dataset(bad)
    with pytest.raises(DatasetError):
        ds[1]
    (bad / "calibrations" / "cam_2.json").unlink()
    with pytest.raises(DatasetError):
        read_dataset(bad)


def test_camera_split_halves(small_scene):
    cams = make_cameras(small_scene)
    tr, te = camera_split(small_scene, [0, 1], cams)
    assert tr.camera_ids == [0, 1] and te.camera_ids == [2, 3]
    assert tr.grid.shape == te.grid.shape == (24, 18)
    assert {tr.col_offset, te.col_offset} == {0, 18}
    for k in range(5):
        s = generate_scene(small_scene, k, cameras=cams)
        a, b = tr.select(s), te.select(s)
        assert a.n_people + b.n_people == s.n_people
        assert len(a.images) == 2 and a.foot_px.shape == (2, a.n_people, 2)
        for part in (a, b):
            assert np.all(np.rint(part.positions[:, 0]) >= 0) and np.all(np.rint(part.positions[:, 0]) <= 17)


def test_camera_split_swap(small_scene):
    cams = make_cameras(small_scene)
    tr, te = camera_split(small_scene, [0, 1], cams)
    tr2, te2 = camera_split(small_scene, [2, 3], cams)
    assert tr2.camera_ids == te.camera_ids and te2.camera_ids == tr.camera_ids
    assert tr2.col_offset == te.col_offset and te2.col_offset == tr.col_offset


def test_camera_split_all_but_one(small_scene):
    tr, te = camera_split(small_scene, [0, 1, 2])
    assert len(tr.camera_ids) == 3 and te.camera_ids == [3]


@pytest.mark.parametrize("split", [[], [0, 1, 2, 3], [7]])
def test_camera_split_degenerate(small_scene, split):
    with pytest.raises(SimulationError):
        camera_split(small_scene, split)


def test_six_camera_split_equal_area():
    cfg = SceneConfig(n_cameras=6, rows=24, cols=36, cell_size=0.2, image_h=48, image_w=80)
    tr, te = camera_split(cfg, [0, 1, 2])
    assert tr.grid.rows * tr.grid.cols == te.grid.rows * te.grid.cols == 24 * 18
