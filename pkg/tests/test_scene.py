import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from collabmi.errors import ContractError, GenerationError
from collabmi.geometry import SE2
from collabmi.scene import (
    BevGrid,
    GridConfig,
    SceneConfig,
    SensorConfig,
    build_dataset,
    cast_rays,
    generate_scene,
    has_hidden_object,
    load_scene,
    make_labels,
    observe_scene,
    raycast_observe,
    save_scene,
    visible_objects,
    voxelize,
)

from oracles import brute_voxelize, make_scene, random_small_scene, raycast_agrees, rectangles_intersect


# -- generation ---------------------------------------------------------------------------
def test_same_seed_gives_identical_scene_bytes():
    assert generate_scene(17).dumps() == generate_scene(17).dumps()
    assert generate_scene(17).dumps() != generate_scene(18).dumps()


def test_empty_object_range_gives_empty_scene_and_labels():
    scene = generate_scene(3, SceneConfig(object_count=(0, 0)))
    assert scene.objects.shape == (0, 5)
    data = observe_scene(scene)
    assert all(lab.foreground.sum() == 0 for lab in data.labels)
    assert all(len(p) == 0 for p in data.points)


def test_thousand_scenes_have_no_overlapping_objects():
    for seed in range(1000):
        scene = generate_scene(seed)
        boxes = scene.boxes()
        assert 2 <= scene.n_agents <= 5
        half = scene.extent / 2
        assert all(abs(a.x) <= half and abs(a.y) <= half for a in scene.agents)
        for i in range(len(boxes)):
            for j in range(i + 1, len(boxes)):
                assert not rectangles_intersect(boxes[i], boxes[j]), (seed, i, j)


def test_agent_count_is_drawn_from_range():
    counts = {generate_scene(s, SceneConfig(agent_count=(2, 4))).n_agents for s in range(60)}
    assert counts == {2, 3, 4}


def test_rotated_scenes_stay_disjoint():
    cfg = SceneConfig(rotate_scene=True, object_count=(6, 10))
    for seed in range(50):
        boxes = generate_scene(seed, cfg).boxes()
        assert not any(rectangles_intersect(boxes[i], boxes[j]) for i in range(len(boxes)) for j in range(i + 1, len(boxes)))


def test_impossible_packing_raises_generation_error():
    cfg = SceneConfig(object_count=(200, 200), object_region=3.0, max_attempts=500)
    with pytest.raises(GenerationError, match="non-overlapping"):
        generate_scene(0, cfg)


@pytest.mark.parametrize("bad", [dict(extent=0.0), dict(object_count=(3, 1)), dict(agent_count=(1, 3)), dict(agent_count=(2, 6))])
def test_invalid_scene_config(bad):
    with pytest.raises(ContractError):
        generate_scene(0, SceneConfig(**bad))


def test_scene_file_round_trip(tmp_path):
    scene = generate_scene(5)
    save_scene(scene, tmp_path / "s.json")
    back = load_scene(tmp_path / "s.json")
    assert back.dumps() == scene.dumps()
    np.testing.assert_array_equal(back.objects, scene.objects)


# -- ray casting ----------------------------------------------------------------------------
def test_empty_scene_gives_no_points():
    scene = make_scene([], [SE2(), SE2(3, 0, 0)])
    assert raycast_observe(scene, 0).shape == (0, 3)


def test_blocked_object_contributes_no_points():
    # a wall right in front of the agent hides a smaller box behind it on every ray
    scene = make_scene([[3.0, 0.0, 1.0, 20.0, 2.0], [8.0, 0.0, 2.0, 2.0, 2.0]], [SE2(), SE2(20, 20, 0)])
    _, idx = cast_rays(scene, scene.agents[0], SensorConfig(n_rays=720))
    assert 1 not in set(idx.tolist())
    pts = raycast_observe(scene, 0)
    inside_second = (np.abs(pts[:, 0] - 8.0) <= 1.0 + 1e-9) & (np.abs(pts[:, 1]) <= 1.0 + 1e-9)
    assert not inside_second.any()
    assert visible_objects(scene, 0) == frozenset({0})


def test_unobstructed_object_has_points_on_near_face():
    scene = make_scene([[6.0, 1.0, 2.0, 4.0, 1.5]], [SE2(), SE2(20, 20, 0)])
    pts = raycast_observe(scene, 0)
    assert len(pts) >= 1
    np.testing.assert_allclose(pts[:, 0], 5.0, atol=1e-9)
    assert np.all(pts[:, 2] < 1.5)


def test_raycast_matches_ray_march_oracle():
    rng = np.random.default_rng(123)
    sensor = SensorConfig(n_rays=48, max_range=12.0)
    for _ in range(100):
        scene = random_small_scene(rng)
        assert raycast_agrees(scene, scene.agents[0], sensor, cast_rays)


def test_union_of_views_contains_each_view():
    data = observe_scene(generate_scene(7))
    union = frozenset().union(*data.visible)
    assert all(v <= union for v in data.visible)


def test_validation_scenes_usually_hide_something_from_ego():
    data = build_dataset(40, 50_000, SceneConfig(agent_count=(3, 3)))
    assert np.mean([has_hidden_object(d, 0) for d in data]) >= 0.5


def test_occlusion_only_filter():
    data = build_dataset(10, 0, SceneConfig(agent_count=(3, 3)), occlusion_only=True)
    assert len(data) == 10 and all(has_hidden_object(d, 0) for d in data)


# -- voxelization -----------------------------------------------------------------------------
def test_point_at_ego_origin_lights_the_centre_voxel():
    grid = GridConfig()
    pose = SE2(4.0, -2.0, 0.7)
    occ = voxelize(np.array([[4.0, -2.0, 0.1]]), pose, grid).occupancy
    assert occ.sum() == 1 and occ[grid.size // 2, grid.size // 2, 0] == 1


def test_point_outside_crop_gives_empty_grid():
    assert voxelize(np.array([[100.0, 0.0, 0.3]]), SE2()).occupancy.sum() == 0


def test_voxelize_matches_brute_binning():
    grid = GridConfig()
    rng = np.random.default_rng(8)
    for trial in range(100):
        pts = np.column_stack([rng.uniform(-12, 12, 500), rng.uniform(-12, 12, 500), rng.uniform(-0.2, 2.2, 500)])
        pose = SE2(*rng.uniform(-2, 2, 2), rng.uniform(-math.pi, math.pi))
        np.testing.assert_array_equal(voxelize(pts, pose, grid).occupancy, brute_voxelize(pts, pose, grid))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(0, 60), st.integers(0, 60))
def test_voxelize_commutes_with_union(seed, na, nb):
    rng = np.random.default_rng(seed)
    a = rng.uniform(-10, 10, (na, 3)) * [1, 1, 0.1] + [0, 0, 1]
    b = rng.uniform(-10, 10, (nb, 3)) * [1, 1, 0.1] + [0, 0, 1]
    pose = SE2(*rng.uniform(-2, 2, 3))
    both = voxelize(np.vstack([a, b]), pose).occupancy
    np.testing.assert_array_equal(both, np.maximum(voxelize(a, pose).occupancy, voxelize(b, pose).occupancy))


def test_bev_binary_round_trip():
    occ = (np.random.default_rng(0).uniform(size=(32, 32, 4)) < 0.2).astype(float)
    blob = BevGrid(occ, 0.5).to_bytes()
    assert len(blob) == 16 + occ.size
    np.testing.assert_array_equal(BevGrid.from_bytes(blob, 0.5).occupancy, occ)
    with pytest.raises(ContractError):
        BevGrid.from_bytes(b"XXXX" + blob[4:], 0.5)


# -- labels -------------------------------------------------------------------------------------
def test_no_objects_no_foreground():
    assert make_labels(make_scene([], [SE2(), SE2(1, 1, 0)]), SE2()).foreground.sum() == 0


def test_voxel_at_object_centre_has_small_offset():
    grid = GridConfig()
    scene = make_scene([[1.25, -0.75, 2.0, 4.0, 1.0]], [SE2(), SE2(9, 9, 0)])
    lab = make_labels(scene, SE2(), grid)
    col = int(math.floor(1.25 / grid.resolution + grid.size / 2))
    row = int(math.floor(-0.75 / grid.resolution + grid.size / 2))
    assert lab.foreground[row, col] == 1
    assert np.hypot(*lab.regression[row, col, :2]) <= grid.resolution / 2 + 1e-12
    np.testing.assert_allclose(lab.regression[row, col, 2:], np.log([2.0, 4.0]))


def test_labels_are_translation_equivariant():
    for seed in range(20):
        scene = generate_scene(seed)
        ego = scene.agents[0]
        a = make_labels(scene, ego)
        moved = scene.translated(3.25, -7.5)
        b = make_labels(moved, moved.agents[0])
        np.testing.assert_array_equal(a.foreground, b.foreground)
        np.testing.assert_allclose(a.regression, b.regression, atol=1e-9)


def test_foreground_fraction_below_half_and_targets_finite():
    for d in build_dataset(20, 0):
        for lab in d.labels:
            assert lab.foreground.mean() < 0.5
            assert np.all(np.isfinite(lab.regression[lab.foreground == 1]))


def test_dataset_generation_is_pure():
    a, b = build_dataset(3, 10), build_dataset(3, 10)
    for x, y in zip(a, b):
        assert x.scene.dumps() == y.scene.dumps()
        assert x.bev.tobytes() == y.bev.tobytes()
