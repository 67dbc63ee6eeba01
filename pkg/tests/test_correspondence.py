import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scenemae.correspondence import (
    CameraModel,
    ConfigurationError,
    InstanceMaskSet,
    MaskInfo,
    build_point_mask_map,
    classify_patches,
    group_points_by_mask,
    project_continuous,
    project_points,
    round_half_away,
)
from scenemae.geometry import PatchSet
from oracles import half_away


def identity_camera(f=1.0, c=0.0, w=100, h=100):
    return CameraModel(f, f, c, c, np.eye(3), np.zeros(3), w, h)


def test_round_half_away():
    vals = [-2.5, -1.5, -0.5, 0.5, 1.5, 2.5, 2.4999, -0.49]
    assert round_half_away(vals).tolist() == [half_away(v) for v in vals]


def test_projection_examples():
    pm = project_points(np.array([[0.0, 0.0, 1.0]]), identity_camera())
    assert pm.valid.tolist() == [True] and pm.pixels.tolist() == [[0, 0]]

    pm = project_points(np.array([[0.0, 0.0, 0.0], [0.1, 0.2, -1.0]]), identity_camera())
    assert not pm.valid.any()

    pm = project_points(np.array([[0.1, 0.0, 1.0]]), identity_camera(100.0, 50.0))
    assert pm.pixels.tolist() == [[60, 50]] and pm.valid[0]


def test_projection_out_of_bounds_is_invalid():
    cam = identity_camera(100.0, 50.0, w=100, h=100)
    pm = project_points(np.array([[1.0, 0.0, 1.0], [-0.6, 0.0, 1.0], [0.494, 0.494, 1.0]]), cam)
    assert pm.valid.tolist() == [False, False, True]


def _random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31), st.floats(0, 639), st.floats(0, 479), st.floats(0.05, 50))
def test_ray_round_trip(seed, u, v, depth):
    rng = np.random.default_rng(seed)
    cam = CameraModel(500.0, 480.0, 320.0, 240.0, _random_rotation(rng), rng.normal(size=3), 640, 480)
    p = cam.pixel_ray_point(u, v, depth)
    uv, z = project_continuous(p[None], cam)
    assert z[0] > 0
    assert np.allclose(uv[0], [u, v], atol=1e-9, rtol=0)


def test_camera_validation():
    bad = CameraModel(1, 1, 0, 0, np.ones((3, 3)), np.zeros(3), 4, 4)
    with pytest.raises(ConfigurationError):
        bad.validate()
    identity_camera().validate()


def _masks(pixel, infos):
    return InstanceMaskSet([MaskInfo(*i) for i in infos], np.asarray(pixel))


def test_point_mask_map_examples():
    cam = identity_camera(10.0, 2.0, w=4, h=4)
    pts = np.array([[0.0, 0.0, 1.0], [0.1, 0.1, 1.0], [0.0, 0.0, -1.0]])
    proj = project_points(pts, cam)

    empty = _masks(np.full((4, 4), -1), [])
    assert build_point_mask_map(proj, empty).mask_id.tolist() == [-1, -1, -1]

    full = _masks(np.full((4, 4), 7), [(7, 0, True)])
    assert build_point_mask_map(proj, full).mask_id.tolist() == [7, 7, -1]

    with pytest.raises(ConfigurationError):
        build_point_mask_map(proj, _masks(np.full((3, 4), -1), []))


def test_mask_set_validation():
    with pytest.raises(ConfigurationError):
        _masks(np.full((2, 2), 3), [(1, 0, True)]).validate()
    with pytest.raises(ConfigurationError):
        _masks(np.full((2, 2), 1), [(1, 0, True), (1, 2, False)]).validate()


def _patchset(neighbors):
    neighbors = np.asarray(neighbors)
    m, k = neighbors.shape
    return PatchSet(np.zeros((m, 3)), neighbors, np.zeros((m, k, 3)), np.zeros(m, dtype=int))


def _pmap(mask_id):
    mask_id = np.asarray(mask_id)
    n = len(mask_id)
    return type(project_points(np.zeros((1, 3)), identity_camera()))(
        np.zeros((n, 2), dtype=int), mask_id >= 0, mask_id, 100, 100)


MASKS = _masks(np.full((100, 100), -1), [(3, 1, True), (5, 2, True), (8, 4, False)])


def test_classify_patches_examples():
    pmap = _pmap([-1] * 10 + [3] * 10 + [3] * 4 + [-1] * 6)
    patches = _patchset([list(range(10)), list(range(10, 20)), list(range(20, 30))])
    sem = classify_patches(patches, pmap, MASKS, 0.5)
    assert sem.is_foreground.tolist() == [False, True, False]
    assert sem.dominant_mask.tolist() == [-1, 3, 3]


def test_classify_background_masks_do_not_count():
    pmap = _pmap([8] * 10)
    sem = classify_patches(_patchset([list(range(10))]), pmap, MASKS, 0.5)
    assert sem.is_foreground.tolist() == [False] and sem.dominant_mask.tolist() == [-1]


def test_dominant_tie_goes_to_lowest_id():
    pmap = _pmap([5, 5, 3, 3])
    sem = classify_patches(_patchset([[0, 1, 2, 3]]), pmap, MASKS, 0.5)
    assert sem.dominant_mask.tolist() == [3]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.sampled_from([-1, 3, 5, 8]), min_size=1, max_size=12), st.randoms(), st.floats(0.05, 1.0))
def test_classify_is_order_invariant(ids, rnd, tau):
    pmap = _pmap(ids)
    order = list(range(len(ids)))
    rnd.shuffle(order)
    a = classify_patches(_patchset([list(range(len(ids)))]), pmap, MASKS, tau)
    b = classify_patches(_patchset([order]), pmap, MASKS, tau)
    assert a.is_foreground.tolist() == b.is_foreground.tolist()
    assert a.dominant_mask.tolist() == b.dominant_mask.tolist()


def test_group_points_examples():
    assert len(group_points_by_mask(_pmap([-1, -1]), MASKS)) == 0

    g = group_points_by_mask(_pmap([3, 5, 3, 5, 3, 5, 5, 5]), MASKS)
    sizes = dict(zip(g.mask_ids, map(len, g.point_indices)))
    assert sizes == {3: 3, 5: 5}
    assert set(np.concatenate(g.point_indices).tolist()) == set(range(8))

    bg_only = _masks(np.full((100, 100), -1), [(8, 4, False), (9, 4, False)])
    g = group_points_by_mask(_pmap([8, 9, 9]), bg_only)
    assert g.foreground_subset == [] and len(g) == 2


@settings(max_examples=50, deadline=None)
@given(st.lists(st.sampled_from([-1, 3, 5, 8]), min_size=0, max_size=30))
def test_groups_are_disjoint_and_consistent(ids):
    pmap = _pmap(ids)
    g = group_points_by_mask(pmap, MASKS)
    flat = np.concatenate(g.point_indices) if len(g) else np.array([], dtype=int)
    assert len(flat) == len(set(flat.tolist())) <= int(pmap.valid.sum())
    for mid, pts in zip(g.mask_ids, g.point_indices):
        assert np.all(pmap.mask_id[pts] == mid)
    fg = {m.mask_id for m in MASKS.masks if m.is_foreground}
    assert all(g.mask_ids[i] in fg for i in g.foreground_subset)
