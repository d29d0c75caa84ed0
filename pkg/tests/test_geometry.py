import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from avemo.geometry import (
    BBox,
    ExpansionConfig,
    KeypointSet,
    compute_agent_bbox,
    crop_body,
    crop_bounds,
    mask_agent,
    read_png,
    write_png,
)


def kps_from(joints, fill_conf=0.0):
    """25-joint set whose first rows are ``joints`` and the rest are zero-confidence."""
    arr = np.zeros((25, 3))
    arr[:, 2] = fill_conf
    arr[: len(joints)] = joints
    return KeypointSet(arr)


def test_bbox_hand_case():
    # e_x = 0.1 * 20 = 2, e_y = 0.25 * 40 = 10
    box = compute_agent_bbox(kps_from([(10, 20, 0.9), (30, 60, 0.8)]), 100, 100)
    assert box == BBox(top=10, bottom=70, left=8, right=32)


def test_all_low_confidence_is_no_agent():
    arr = np.full((25, 3), 50.0)
    arr[:, 2] = 0.05
    assert compute_agent_bbox(KeypointSet(arr), 100, 100) is None


def test_single_joint_gives_degenerate_box():
    box = compute_agent_bbox(kps_from([(50, 50, 1.0)]), 100, 100)
    assert box == BBox(top=50, bottom=50, left=50, right=50)


def test_threshold_is_inclusive_at_ten_percent():
    box = compute_agent_bbox(kps_from([(10, 10, 0.10), (20, 20, 0.0999)]), 100, 100)
    assert box == BBox(10, 10, 10, 10)


def test_bounds_clip_to_image():
    box = compute_agent_bbox(kps_from([(-40, -10, 1.0), (500, 300, 1.0)]), 120, 160)
    assert box == BBox(top=0, bottom=120, left=0, right=160)


def test_bounds_round_outward():
    # x: 1.5..3.5, e_x = 0.2 -> [1.3, 3.7] -> [1, 4); y: 2..4, e_y = 0.5 -> [1.5, 4.5] -> [1, 5)
    box = compute_agent_bbox(kps_from([(1.5, 2, 1), (3.5, 4, 1)]), 10, 10)
    assert box == BBox(top=1, bottom=5, left=1, right=4)


def test_rejects_malformed_keypoints():
    arr = np.zeros((25, 3))
    arr[0, 0] = np.nan
    with pytest.raises(ValueError):
        KeypointSet(arr)
    with pytest.raises(ValueError):
        KeypointSet(np.zeros((24, 3)))
    with pytest.raises(ValueError):
        KeypointSet.from_flat([0.0] * 74)


def test_keypoint_access():
    k = kps_from([(1, 2, 0.5)])
    assert k[0] == (1.0, 2.0, 0.5)
    assert k[0].confidence == 0.5
    assert len(k) == 25
    assert KeypointSet.from_flat(k.to_flat()).joints.tolist() == k.joints.tolist()


def test_expansion_config_validation():
    with pytest.raises(ValueError):
        ExpansionConfig(lambda_x=-0.1)
    with pytest.raises(ValueError):
        ExpansionConfig(conf_threshold=1.5)


def test_mask_counts_zeroed_pixels():
    img = np.ones((4, 4, 3), dtype=np.uint8)
    out = mask_agent(img, BBox(top=1, bottom=3, left=1, right=3))
    zeroed = np.all(out == 0, axis=2)
    assert zeroed.sum() == 4
    assert np.all(out[~zeroed] == 1)
    assert np.all(img == 1)  # input untouched


def test_mask_absent_bbox_is_identity():
    img = np.random.default_rng(0).integers(0, 256, (5, 7, 3), dtype=np.uint8)
    np.testing.assert_array_equal(mask_agent(img, None), img)


def test_mask_full_box_blanks_image():
    img = np.full((6, 5), 200, dtype=np.uint8)
    assert not mask_agent(img, BBox(0, 6, 0, 5)).any()


def test_mask_rejects_out_of_bounds_box():
    with pytest.raises(ValueError):
        mask_agent(np.ones((4, 4), np.uint8), BBox(0, 5, 0, 4))


def test_crop_hand_case():
    img = np.zeros((100, 100, 3), dtype=np.uint8)
    assert crop_body(img, BBox(top=10, bottom=70, left=8, right=32)).shape == (60, 24, 3)


def test_crop_absent_bbox_is_full_image():
    img = np.arange(12, dtype=np.uint8).reshape(3, 4)
    np.testing.assert_array_equal(crop_body(img, None), img)


@pytest.mark.parametrize("box, where", [(BBox(50, 50, 50, 50), (50, 50)), (BBox(100, 100, 100, 100), (99, 99))])
def test_crop_degenerate_box_is_one_pixel(box, where):
    img = np.random.default_rng(1).integers(0, 256, (100, 100, 3), dtype=np.uint8)
    out = crop_body(img, box)
    assert out.shape == (1, 1, 3)
    np.testing.assert_array_equal(out[0, 0], img[where])


def random_keypoints(rng, H, W):
    arr = np.empty((25, 3))
    arr[:, 0] = rng.uniform(-0.2 * W, 1.2 * W, 25)
    arr[:, 1] = rng.uniform(-0.2 * H, 1.2 * H, 25)
    arr[:, 2] = rng.uniform(0, 1, 25)
    return KeypointSet(arr)


def test_partition_mask_plus_crop_reconstructs():
    rng = np.random.default_rng(42)
    for _ in range(100):
        H, W = rng.integers(1, 40, 2)
        img = rng.integers(0, 256, (H, W, 3), dtype=np.uint8)
        box = compute_agent_bbox(random_keypoints(rng, H, W), H, W)
        rebuilt = mask_agent(img, box)
        crop = crop_body(img, box)
        if box is None:
            np.testing.assert_array_equal(rebuilt, img)
            continue
        b = crop_bounds(box, H, W)
        rebuilt[b.top:b.bottom, b.left:b.right] = crop
        np.testing.assert_array_equal(rebuilt, img)


@settings(max_examples=200, deadline=None)
@given(
    seed=st.integers(0, 2**32 - 1),
    lx=st.floats(0, 2),
    ly=st.floats(0, 2),
    dx=st.floats(0, 1),
    dy=st.floats(0, 1),
)
def test_expansion_is_monotone(seed, lx, ly, dx, dy):
    rng = np.random.default_rng(seed)
    kps = random_keypoints(rng, 80, 60)
    small = compute_agent_bbox(kps, 80, 60, ExpansionConfig(lx, ly))
    big = compute_agent_bbox(kps, 80, 60, ExpansionConfig(lx + dx, ly + dy))
    if small is None:
        assert big is None
        return
    assert big.top <= small.top and big.left <= small.left
    assert big.bottom >= small.bottom and big.right >= small.right
    assert big.area >= small.area


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), H=st.integers(1, 500), W=st.integers(1, 500))
def test_bounds_always_inside_image(seed, H, W):
    rng = np.random.default_rng(seed)
    arr = np.empty((25, 3))
    arr[:, :2] = rng.uniform(-1e4, 1e4, (25, 2))
    arr[:, 2] = 1.0
    box = compute_agent_bbox(KeypointSet(arr), H, W)
    assert 0 <= box.top <= box.bottom <= H
    assert 0 <= box.left <= box.right <= W


def test_filtered_joints_have_no_effect():
    rng = np.random.default_rng(3)
    for _ in range(50):
        kps = random_keypoints(rng, 100, 100)
        keep = kps.joints[:, 2] >= 0.1
        if not keep.any():
            continue
        arr = kps.joints.copy()
        # Move the discarded joints far away; the box must not change.
        arr[~keep, :2] = rng.uniform(-1e5, 1e5, (int((~keep).sum()), 2))
        assert compute_agent_bbox(KeypointSet(arr), 100, 100) == compute_agent_bbox(kps, 100, 100)


def test_png_round_trip(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, (9, 11, 3), dtype=np.uint8)
    write_png(tmp_path / "a.png", img)
    np.testing.assert_array_equal(read_png(tmp_path / "a.png"), img)
