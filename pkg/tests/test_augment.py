import numpy as np
import pytest

from mvagg import geometry as geo
from mvagg.geometry import GroundGrid
from mvagg.pipeline.augment import AugmentRanges, affine_matrix, random_affine, view_coherent_augment, warp_image
from mvagg.tensor import Tensor


def smooth_image(h=40, w=56):
    # bilinear error is about |f''|/8 per resampling; keep curvature low
    vv, uu = np.mgrid[0:h, 0:w].astype(np.float64)
    return np.stack([
        np.sin(uu / 30.0) + np.cos(vv / 30.0),
        np.cos((uu + vv) / 40.0),
        0.02 * uu - 0.01 * vv,
    ])


# image -> grid map: mild perspective, roughly one pixel per cell
H = np.array([[0.9, 0.05, 2.0], [0.02, 1.0, 1.0], [0.0005, 0.001, 1.0]])
GRID = GroundGrid(40, 56, 1.0)


def warped(img, h):
    return geo.warp_to_grid(Tensor(img, dtype=np.float64), h, GRID).data


def interior(h_aug, img_shape, margin=3):
    """Cells whose preimages stay well inside the image both before and after."""
    _, ih, iw = img_shape
    masks = []
    for h in (H, h_aug):
        src, valid = geo.grid_sample_points(h, GRID.shape)
        ok = valid & (src[:, 0] > margin) & (src[:, 0] < iw - 1 - margin) & (src[:, 1] > margin) & (src[:, 1] < ih - 1 - margin)
        masks.append(ok.reshape(GRID.shape))
    return masks[0] & masks[1]


def test_identity_is_noop(rng):
    img = smooth_image()
    labels = {"foot": np.array([[3.0, 4.0]])}
    out, hs, moved = view_coherent_augment(img, H, labels, AugmentRanges(), rng, affine=np.eye(3))
    np.testing.assert_allclose(out, img, atol=1e-12)
    np.testing.assert_allclose(hs, H)
    np.testing.assert_allclose(moved["foot"], labels["foot"])


@pytest.mark.parametrize("affine", [
    affine_matrix((40, 56), translation=(2.5, -1.3)),
    affine_matrix((40, 56), rotation_deg=10.0),
])
def test_coherence(affine, rng):
    img = smooth_image()
    out, h_aug, _ = view_coherent_augment(img, H, {}, AugmentRanges(), rng, affine=affine)
    mask = interior(h_aug, img.shape)
    assert mask.sum() > 0.3 * mask.size
    assert np.abs(warped(out, h_aug) - warped(img, H))[:, mask].max() < 1e-3


def test_coherence_exact_on_integer_translation(rng):
    # integer shifts resample exactly, so the tight tolerance applies everywhere inside
    img = smooth_image()
    a = affine_matrix((40, 56), translation=(2.0, 1.0))
    out, h_aug, _ = view_coherent_augment(img, H, {}, AugmentRanges(), rng, affine=a)
    mask = interior(h_aug, img.shape)
    assert np.abs(warped(out, h_aug) - warped(img, H))[:, mask].max() < 1e-3


def test_labels_move_with_affine(rng):
    a = affine_matrix((40, 56), rotation_deg=7.0, translation=(1.0, 2.0))
    pts = np.array([[10.0, 12.0], [30.0, 5.0]])
    _, _, moved = view_coherent_augment(smooth_image(), [H, H], {"foot": pts, "none": np.zeros((0, 2))}, AugmentRanges(), rng, affine=a)
    np.testing.assert_allclose(moved["foot"], geo.apply_h(a, pts))
    assert moved["none"].shape == (0, 2)


def test_list_of_homographies(rng):
    a = affine_matrix((40, 56), scale=1.05)
    _, hs, _ = view_coherent_augment(smooth_image(), [H, 2 * H], {}, AugmentRanges(), rng, affine=a)
    assert len(hs) == 2
    np.testing.assert_allclose(hs[1], 2 * H @ np.linalg.inv(a), atol=1e-12)


def test_degenerate_affine_resampled(rng):
    bad = np.diag([0.0, 1.0, 1.0])
    _, hs, _ = view_coherent_augment(smooth_image(), H, {}, AugmentRanges(), rng, affine=bad)
    assert np.all(np.isfinite(hs))


def test_random_affine_within_ranges(rng):
    r = AugmentRanges(rotation_deg=0.0, translation=0.0, scale_min=1.0, scale_max=1.0, shear_deg=0.0)
    np.testing.assert_allclose(random_affine((40, 56), r, rng), np.eye(3), atol=1e-12)
    for _ in range(20):
        a = random_affine((40, 56), AugmentRanges(), rng)
        assert 0.9**2 * 0.99 <= abs(np.linalg.det(a[:2, :2])) <= 1.1**2 * 1.01


def test_warp_image_translation():
    img = smooth_image()
    out = warp_image(img, affine_matrix((40, 56), translation=(1.0, 0.0)))
    np.testing.assert_allclose(out[:, :, 1:], img[:, :, :-1], atol=1e-12)
    assert not out[:, :, 0].any()
