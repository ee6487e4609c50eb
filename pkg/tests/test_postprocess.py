import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from oracles import flood_fill_partition, partition_from_ids
from s4c import postprocess
from s4c.postprocess import (
    ScreeningResult,
    classify,
    confidence_score,
    connected_components,
    filter_components,
    load_results,
    save_results,
)
from s4c.volume import LabelVolume, ProbVolume


def _labels(shape, *voxels, cls=1):
    m = np.zeros(shape, np.uint8)
    for v in voxels:
        m[v] = cls
    return LabelVolume(m)


def test_face_neighbors_join_diagonals_do_not():
    cs = connected_components(_labels((3, 3, 3), (0, 0, 0), (0, 0, 1)))
    assert cs.count == 1 and cs.sizes.tolist() == [2]
    cs = connected_components(_labels((3, 3, 3), (0, 0, 0), (0, 1, 1)))
    assert cs.count == 2
    cs = connected_components(_labels((3, 3, 3), (0, 0, 0), (1, 1, 1)))
    assert cs.count == 2


def test_empty_foreground():
    cs = connected_components(LabelVolume(np.zeros((4, 4, 4), np.uint8)))
    assert cs.count == 0 and cs.max_size == 0
    m = LabelVolume(np.zeros((4, 4, 4), np.uint8))
    assert filter_components(m) == m


def test_pancreas_and_tumor_share_components():
    m = np.zeros((1, 1, 4), np.uint8)
    m[0, 0, :2] = 1
    m[0, 0, 2] = 2
    cs = connected_components(LabelVolume(m))
    assert cs.count == 1 and cs.max_size == 3


@given(hnp.arrays(np.uint8, st.tuples(st.integers(1, 12), st.integers(1, 12), st.integers(1, 12)), elements=st.integers(0, 2)))
def test_matches_flood_fill(arr):
    cs = connected_components(LabelVolume(arr))
    assert partition_from_ids(cs.ids) == flood_fill_partition(arr > 0)
    assert cs.sizes.sum() == (arr > 0).sum()
    # dense ids, numbered in scan order of each component's first voxel
    firsts = [np.flatnonzero(cs.ids.ravel() == k)[0] for k in range(cs.count)]
    assert firsts == sorted(firsts)


def test_numpy_fallback_matches(rng):
    for _ in range(10):
        arr = (rng.random((9, 11, 10)) < 0.4).astype(np.uint8)
        ids, n = postprocess._label_np(arr > 0)
        ref = connected_components(LabelVolume(arr))
        assert n == ref.count and np.array_equal(ids, ref.ids)


@pytest.mark.parametrize("small,kept", [(19, False), (20, False), (21, True)])
def test_strict_ratio_boundary(small, kept):
    # a 100-voxel slab and a separate 1-voxel-thick sheet of ``small`` voxels
    m = np.zeros((20, 20, 40), np.uint8)
    m[0:10, 0:10, 0] = 1
    sheet = np.zeros(20 * 20, bool)
    sheet[:small] = True
    m[:, :, 30][sheet.reshape(20, 20)] = 2
    lab = LabelVolume(m)
    cs = connected_components(lab)
    assert sorted(cs.sizes.tolist()) == sorted([100, small])
    out = filter_components(lab, cs)
    assert (out.data[:, :, 30] == 2).any() == kept
    assert (out.data[:, :, 0] == 1).sum() == 100


def test_single_component_untouched():
    lab = _labels((5, 5, 5), (1, 1, 1), (1, 1, 2), (1, 2, 2))
    assert filter_components(lab) == lab


@given(hnp.arrays(np.uint8, (8, 9, 10), elements=st.integers(0, 2)))
def test_filter_never_adds_and_keeps_largest(arr):
    lab = LabelVolume(arr)
    cs = connected_components(lab)
    out = filter_components(lab, cs)
    for c in (1, 2):
        assert (out.data == c).sum() <= (arr == c).sum()
    assert ((out.data != arr) <= (out.data == 0)).all()
    if cs.count:
        big = cs.ids == int(np.argmax(cs.sizes))
        assert np.array_equal(out.data[big], arr[big])


def test_classify_threshold():
    m = np.zeros(200, np.uint8)
    assert classify(LabelVolume(m.reshape(2, 10, 10))) == 0
    m[:49] = 2
    assert classify(LabelVolume(m.reshape(2, 10, 10)), K=50) == 0
    m[:50] = 2
    assert classify(LabelVolume(m.reshape(2, 10, 10)), K=50) == 1


@given(st.integers(0, 200), st.integers(1, 300), st.integers(1, 300))
def test_classify_monotone_in_K(n, k1, k2):
    m = np.zeros(300, np.uint8)
    m[:n] = 2
    lab = LabelVolume(m.reshape(3, 10, 10))
    lo, hi = sorted((k1, k2))
    assert classify(lab, hi) <= classify(lab, lo)


def _prob_with_tumor(n_t, p_bar, shape=(10, 10, 20)):
    m = np.zeros(np.prod(shape), np.uint8)
    m[:n_t] = 2
    p = np.zeros(shape + (3,), np.float32)
    p[..., 0] = 1
    flat = p.reshape(-1, 3)
    flat[:n_t] = (1 - p_bar, 0, p_bar)
    return LabelVolume(m.reshape(shape)), ProbVolume(p)


def test_confidence_examples():
    lab, prob = _prob_with_tumor(0, 0.0)
    assert confidence_score(lab, prob) == 0.0
    lab, prob = _prob_with_tumor(750, 0.8, shape=(10, 10, 10))
    assert confidence_score(lab, prob, saturation=1500) == pytest.approx(0.65, abs=1e-7)
    lab, prob = _prob_with_tumor(1500, 1.0, shape=(10, 10, 20))
    assert confidence_score(lab, prob) == 1.0


@given(st.integers(0, 900), st.integers(0, 900), st.floats(0, 1), st.floats(0, 1))
def test_confidence_monotone(n1, n2, p1, p2):
    lo_n, hi_n = sorted((n1, n2))
    lo_p, hi_p = sorted((p1, p2))
    a = confidence_score(*_prob_with_tumor(lo_n, lo_p, (10, 10, 10)), saturation=500)
    b = confidence_score(*_prob_with_tumor(hi_n, hi_p, (10, 10, 10)), saturation=500)
    assert a <= b + 1e-7
    assert 0 <= a <= 1 and 0 <= b <= 1


def test_confidence_dim_mismatch():
    lab, _ = _prob_with_tumor(1, 1.0, (2, 2, 2))
    _, prob = _prob_with_tumor(1, 1.0, (2, 2, 3))
    with pytest.raises(ValueError):
        confidence_score(lab, prob)


def test_result_json_round_trip(tmp_path):
    rs = [ScreeningResult("a", 60, 0.7, 1, 0.5, 0.8), ScreeningResult("b", 0, 0.0, 0)]
    assert load_results(save_results(rs, tmp_path / "r.json")) == rs
    assert rs[0].with_K(100).predicted_label == 0
    with pytest.raises(ValueError):
        ScreeningResult("c", 5, 1.5, 0)
