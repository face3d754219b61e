import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import make_scene
from uniloc.scene import (GridSpec, RegionFilter, SceneError, default_scene, delay_bounds, generate_grid,
                          is_los, load_scene, los_mask, region_membership, sample_users, scene_from_dict,
                          segments_hit_box)


def sampled_los(scene, p, samples=1000):
    """Oracle: walk the open segment and test every sample against every footprint/height."""
    t = (np.arange(samples) + 0.5) / samples
    pts = scene.bs_position + t[:, None] * (np.asarray(p) - scene.bs_position)
    for b in scene.buildings:
        inside = ((pts[:, 0] >= b.x_min) & (pts[:, 0] <= b.x_max) & (pts[:, 1] >= b.y_min)
                  & (pts[:, 1] <= b.y_max) & (pts[:, 2] >= 0) & (pts[:, 2] <= b.height))
        if inside.any():
            return False
    return True


def test_point_next_to_bs_is_los(empty_scene):
    assert is_los(empty_scene, [0.5, 0.0, 1.5])


def test_point_behind_box_is_nlos():
    scene = make_scene([(10, 20, 10, 20, 60)])
    assert not is_los(scene, [15.0, 30.0, 1.5])
    assert is_los(scene, [40.0, 5.0, 1.5])


def test_is_los_outside_region_raises(empty_scene):
    with pytest.raises(SceneError):
        is_los(empty_scene, [-5.0, 10.0, 1.5])


def test_canyon_matches_sampling_oracle(canyon):
    pts = generate_grid(canyon, GridSpec(2.0))
    exact = los_mask(canyon, pts)
    oracle = np.array([sampled_los(canyon, p) for p in pts])
    assert np.array_equal(exact, oracle)


def test_grazing_counts_as_blocked():
    # segment touching the top face along its length
    lo, hi = np.array([0.0, 0, 0]), np.array([1.0, 1, 1])
    assert segments_hit_box(np.array([-1.0, 0.5, 1.0]), np.array([2.0, 0.5, 1.0]), lo, hi)[0]
    # touching a single edge
    assert segments_hit_box(np.array([-1.0, 1.0, 2.0]), np.array([1.0, 1.0, 0.0]), lo, hi)[0]
    assert not segments_hit_box(np.array([-1.0, 1.01, 2.0]), np.array([1.0, 1.01, 0.0]), lo, hi)[0]


def test_grid_counts_and_filters():
    scene = make_scene(region=(0, 10, 0, 10))
    pts = generate_grid(scene, GridSpec(5.0))
    assert len(pts) == 9
    assert np.all(pts[:, 2] == scene.user_height)
    # row-major: y outer, x inner
    assert np.array_equal(pts[:3, 0], [0, 5, 10]) and np.all(pts[:3, 1] == 0)
    assert np.array_equal(generate_grid(scene, GridSpec(5.0, RegionFilter.LOS_ONLY)), pts)


def test_grid_partition(canyon):
    spec = lambda f: GridSpec(1.0, f)
    all_pts = generate_grid(canyon, spec(RegionFilter.ALL))
    los = generate_grid(canyon, spec(RegionFilter.LOS_ONLY))
    nlos = generate_grid(canyon, spec(RegionFilter.NLOS_ONLY))
    key = lambda a: {tuple(p) for p in a}
    assert not key(los) & key(nlos)
    assert key(los) | key(nlos) == key(all_pts)
    assert len(los) + len(nlos) == len(all_pts)


def test_grid_spacing_must_be_positive():
    with pytest.raises(SceneError):
        GridSpec(0.0)


def test_sample_users_contract(canyon):
    assert sample_users(canyon, 0, 1).shape == (0, 3)
    a = sample_users(canyon, 300, 7)
    assert np.array_equal(a, sample_users(canyon, 300, 7))
    assert not canyon.inside_building(a).any()
    assert np.all(a[:, :2] >= 0) and np.all(a[:, 2] == canyon.user_height)


def test_sample_users_los_fraction(canyon):
    # 550 LoS of 1800 users, within five percentage points
    pts = sample_users(canyon, 1800, 11)
    assert abs(los_mask(canyon, pts).mean() - 550 / 1800) <= 0.05


def test_scene_invariants_rejected():
    with pytest.raises(SceneError):
        make_scene(bs=(0, -9, 1.0))
    with pytest.raises(SceneError):
        make_scene([(70, 90, 0, 10, 5)])
    with pytest.raises(SceneError):
        make_scene(height=0.0)
    s = make_scene(direction=(3.0, 4.0, 0.0))
    assert abs(np.linalg.norm(s.ula_direction) - 1) < 1e-12


def test_scene_roundtrip_and_bundled_file(canyon, tmp_path):
    again = scene_from_dict(canyon.to_dict())
    assert again.to_dict() == canyon.to_dict()
    assert default_scene().to_dict() == canyon.to_dict()
    import yaml
    f = tmp_path / "s.yaml"
    f.write_text(yaml.safe_dump(canyon.to_dict()))
    assert load_scene(f).to_dict() == canyon.to_dict()


def test_region_membership_off_map_is_nlos(canyon):
    assert region_membership(canyon, [-50.0, 10.0, 1.5]) is False


def test_delay_bounds_cover_every_grid_point(canyon):
    lo, hi = delay_bounds(canyon)
    pts = generate_grid(canyon, GridSpec(4.0))
    d = np.linalg.norm(pts - canyon.bs_position, axis=1) / 299792458.0
    assert np.all(d >= lo - 1e-15) and np.all(d <= hi)


coord = st.floats(0.5, 79.5)


@given(x=coord, y=coord, dx=st.floats(-30, 30), dy=st.floats(-30, 30))
def test_is_los_translation_invariant(x, y, dx, dy):
    scene = default_scene()
    p = np.array([x, y, scene.user_height])
    if scene.inside_building(p)[0]:
        return
    moved = scene.translated([dx, dy, 0.0])
    assert is_los(scene, p) == is_los(moved, p + [dx, dy, 0.0])


@given(st.integers(0, 2**31 - 1), st.integers(1, 50))
def test_samples_never_inside_buildings(seed, n):
    scene = default_scene()
    assert not scene.inside_building(sample_users(scene, n, seed)).any()
