"""Mask merging, sampling, and motion scores."""

import itertools

import numpy as np
import pytest

from dynrefine.errors import DimensionMismatch, EmptyTrack
from dynrefine.masks import (
    MU_DYNAMIC,
    MU_STATIC,
    DynamicMaskSequence,
    InstanceMaskSequence,
    merge_masks,
    resample_nearest,
    sample_mask,
    track_motion_score,
)


def _instance(instance_id, pixels, shape=(2, 4, 5)):
    masks = np.zeros(shape, dtype=np.uint8)
    for t, row, col in pixels:
        masks[t, row, col] = 1
    return InstanceMaskSequence(instance_id, masks)


def test_merge_disjoint_instances():
    a = _instance(0, [(0, 1, 1), (1, 1, 1)])
    b = _instance(1, [(0, 2, 3), (1, 2, 3)])
    merged = merge_masks([a, b])
    assert merged.masks.sum() == 4
    assert merged.masks[0, 1, 1] == 1 and merged.masks[0, 2, 3] == 1


def test_merge_empty_list_gives_zeros():
    merged = merge_masks([], shape=(3, 4, 5))
    assert merged.masks.shape == (3, 4, 5)
    assert merged.masks.sum() == 0


def test_merge_duplicate_is_idempotent():
    a = _instance(0, [(0, 1, 2), (1, 3, 4)])
    merged = merge_masks([a, _instance(1, [(0, 1, 2), (1, 3, 4)])])
    assert (merged.masks == a.masks).all()


def test_merge_order_invariant_bit_exact():
    rng = np.random.default_rng(0)
    instances = [
        InstanceMaskSequence(k, (rng.uniform(size=(2, 6, 7)) > 0.7).astype(np.uint8))
        for k in range(3)
    ]
    reference = merge_masks(instances).masks
    for perm in itertools.permutations(instances):
        assert (merge_masks(list(perm)).masks == reference).all()


def test_merge_monotone_under_new_instance():
    rng = np.random.default_rng(1)
    instances = [
        InstanceMaskSequence(k, (rng.uniform(size=(2, 6, 7)) > 0.7).astype(np.uint8))
        for k in range(2)
    ]
    before = merge_masks(instances[:1]).masks
    after = merge_masks(instances).masks
    assert (after >= before).all()


def test_merge_rejects_shape_mismatch():
    a = _instance(0, [], shape=(2, 4, 5))
    b = _instance(1, [], shape=(2, 4, 6))
    with pytest.raises(DimensionMismatch):
        merge_masks([a, b])


def test_sample_center_of_set_pixel():
    masks = merge_masks([_instance(0, [(0, 2, 3)])])
    assert sample_mask(masks, 0, (3.0, 2.0)) == 1
    assert sample_mask(masks, 0, (3.4, 1.6)) == 1  # nearest pixel is (3, 2)


def test_sample_clamps_out_of_bounds():
    masks = merge_masks([_instance(0, [(0, 5, 0)], shape=(1, 8, 6))])
    assert sample_mask(masks, 0, (-3.2, 5.0)) == 1


def test_sample_all_zero():
    masks = DynamicMaskSequence.zeros(1, 4, 4)
    assert sample_mask(masks, 0, (2.0, 2.0)) == 0


def test_track_motion_score_dynamic_if_any_masked():
    masks = merge_masks([_instance(0, [(1, 2, 2)], shape=(10, 5, 5))])
    points = [(t, (1.0, 1.0)) for t in range(10)]
    points[7] = (1, (2.0, 2.0))
    assert track_motion_score(points, masks) == MU_DYNAMIC


def test_track_motion_score_static():
    masks = DynamicMaskSequence.zeros(4, 5, 5)
    assert track_motion_score([(t, (1.0, 2.0)) for t in range(4)], masks) == MU_STATIC


def test_track_motion_score_single_boundary_point():
    masks = merge_masks([_instance(0, [(0, 0, 0)], shape=(1, 3, 3))])
    assert track_motion_score([(0, (0.0, 0.0))], masks) == MU_DYNAMIC


def test_track_motion_score_empty_raises():
    with pytest.raises(EmptyTrack):
        track_motion_score([], DynamicMaskSequence.zeros(1, 2, 2))


def test_score_values_are_binary():
    assert {MU_STATIC, MU_DYNAMIC} == {15.0, 25.0}


def test_resample_nearest_stays_binary():
    rng = np.random.default_rng(2)
    masks = DynamicMaskSequence((rng.uniform(size=(2, 9, 13)) > 0.6).astype(np.uint8))
    small = resample_nearest(masks, (5, 6))
    assert small.masks.shape == (2, 5, 6)
    assert set(np.unique(small.masks)) <= {0, 1}
    back = resample_nearest(small, (9, 13))
    assert set(np.unique(back.masks)) <= {0, 1}
