import numpy as np
import pytest

from mvagg.analysis import (
    AnalysisError, collect, jaccard, majority_set, read_table, summarize, to_gray, upsample, write_analysis,
)
from mvagg.pipeline.model import PipelineConfig
from mvagg.pipeline.training import Rig, new_params
from mvagg.simulator import generate_scene, make_cameras, read_pgm


@pytest.fixture(scope="module")
def frames(small_scene):
    cams = make_cameras(small_scene)
    return small_scene, cams, [generate_scene(small_scene, k, cameras=cams) for k in range(3)]


def stats_for(frames, **kw):
    scene, cams, fs = frames
    base = dict(C=6, D=3, K=2, extractor_channels=(4, 4), bev_hidden=4)
    base.update(kw)
    cfg = PipelineConfig(**base)
    rig = Rig.build(cams, scene.grid, cfg.D, cfg.dz)
    return collect(fs, new_params(cfg, rig.n_views, 0), rig, cfg)


def test_counting_identity(frames, tmp_path):
    st = stats_for(frames)
    assert st.frames == 3 and st.counts.shape == (4, 6, 3)
    for cam in range(4):
        frac = st.fractions(cam)
        assert np.all((frac >= 0) & (frac <= 1))
        np.testing.assert_allclose(frac.sum(axis=0), st.K)
        np.testing.assert_array_equal(st.counts[cam].sum(axis=0), st.K * st.frames)
    write_analysis(st, tmp_path, (48, 80))
    for cam in range(4):
        np.testing.assert_allclose(read_table(tmp_path / f"selection_cam{cam}.csv").sum(axis=0), st.K)
    np.testing.assert_allclose(read_table(tmp_path / "selection_all.csv").sum(axis=0), st.K)
    for d in range(3):
        img = read_pgm(tmp_path / f"spatial_h{d}.pgm")
        assert img.shape == (48, 80)
        assert (tmp_path / f"channel_cam0_h{d}.pgm").is_file()


def test_single_homography_degenerate(frames):
    st = stats_for(frames, D=1, K=None)
    assert st.K == st.C
    np.testing.assert_array_equal(st.fractions(), np.ones((6, 1)))


def test_deterministic(frames, tmp_path):
    a, b = stats_for(frames), stats_for(frames)
    write_analysis(a, tmp_path / "a", (48, 80))
    write_analysis(b, tmp_path / "b", (48, 80))
    for p in sorted((tmp_path / "a").iterdir()):
        assert p.read_bytes() == (tmp_path / "b" / p.name).read_bytes()


def test_summary_fields(frames):
    st = stats_for(frames)
    s = summarize(st)
    assert s["plane_heights"] == [0.0, 0.1, 0.2]
    assert set(s["jaccard_between_homographies"]) == {"h0-h1", "h0-h2", "h1-h2"}
    assert all(0.0 <= v <= 1.0 for v in s["jaccard_between_homographies"].values())
    assert len(s["majority_sets"]) == 3


def test_no_attention_rejected(frames):
    with pytest.raises(AnalysisError):
        stats_for(frames, gates="none")


def test_channel_only_has_no_spatial_maps(frames, tmp_path):
    st = stats_for(frames, gates="channel")
    write_analysis(st, tmp_path, (48, 80))
    assert not list(tmp_path.glob("spatial_*.pgm"))


def test_helpers():
    assert majority_set(np.array([[0.6, 0.5], [0.2, 0.9]])) == [[0], [1]]
    assert jaccard([], []) == 1.0
    assert jaccard([1, 2], [2, 3]) == pytest.approx(1 / 3)
    assert not to_gray(np.full((2, 2), 3.0)).any()
    np.testing.assert_array_equal(to_gray(np.array([[0.0, 1.0]])), [[0, 255]])
    up = upsample(np.array([[1, 2]]), (2, 4))
    np.testing.assert_array_equal(up, [[1, 1, 2, 2], [1, 1, 2, 2]])
    with pytest.raises(AnalysisError):
        upsample(np.zeros((2, 2)), (3, 4))
