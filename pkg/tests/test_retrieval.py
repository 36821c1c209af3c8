import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vicprompt.data import DatasetSpec, generate_dataset
from vicprompt.retrieval import (
    EmptySupportError,
    build_index,
    extract_features,
    load_index,
    retrieve,
    retrieve_many,
    save_index,
)


def oracle_features(img, grid=16):
    """Straight-line bilinear (half-pixel centres) downsample + luma + l2 normalise."""
    img = np.asarray(img, dtype=np.float64)
    h, w, _ = img.shape
    out = np.zeros((grid, grid, 3))
    for oi in range(grid):
        sy = max((oi + 0.5) * h / grid - 0.5, 0.0)
        y0 = min(int(np.floor(sy)), h - 1)
        y1 = min(y0 + 1, h - 1)
        fy = sy - y0
        for oj in range(grid):
            sx = max((oj + 0.5) * w / grid - 0.5, 0.0)
            x0 = min(int(np.floor(sx)), w - 1)
            x1 = min(x0 + 1, w - 1)
            fx = sx - x0
            out[oi, oj] = ((1 - fy) * ((1 - fx) * img[y0, x0] + fx * img[y0, x1])
                           + fy * ((1 - fx) * img[y1, x0] + fx * img[y1, x1]))
    gray = out[..., 0] * 0.299 + out[..., 1] * 0.587 + out[..., 2] * 0.114
    v = gray.ravel()
    return v / np.linalg.norm(v)


def test_unit_norm():
    rng = np.random.default_rng(0)
    for _ in range(10):
        v = extract_features(rng.random((40, 56, 3)))
        assert abs(np.linalg.norm(v.values.astype(np.float64)) - 1) < 1e-6


def test_scale_homogeneity():
    img = np.random.default_rng(1).random((64, 64, 3))
    assert np.array_equal(extract_features(img).values, extract_features(0.5 * img).values)


@pytest.mark.parametrize("shape", [(64, 64, 3), (37, 50, 3), (16, 16, 3)])
def test_matches_straight_line_oracle(shape):
    img = np.random.default_rng(2).random(shape)
    np.testing.assert_allclose(extract_features(img).values, oracle_features(img), atol=1e-6)


def test_zero_image_flagged():
    v = extract_features(np.zeros((8, 8, 3)))
    assert v.degenerate and not v.values.any()


def _random_dataset(n, seed=0):
    return generate_dataset(DatasetSpec(per_class_count=max(1, n // 10), seed=seed))


def test_index_size_and_determinism():
    d = _random_dataset(30)
    a, b = build_index(d), build_index(d)
    assert len(a) == 30
    assert a.ids == b.ids and np.array_equal(a.vectors, b.vectors)


def test_index_similarity_equals_bruteforce_dots():
    d = _random_dataset(20)
    idx = build_index(d)
    probe = np.random.default_rng(3).random((64, 64, 3))
    q = extract_features(probe)
    sims = idx.similarities(q)
    for k, p in enumerate(d):
        v = extract_features(p.input).values.astype(np.float64)
        assert sims[k] == pytest.approx(float(np.dot(v, q.values.astype(np.float64))), abs=1e-12)


def test_singleton_and_self_retrieval():
    d = _random_dataset(10)
    one = d.subset(lambda p: p.id == "00003")
    assert retrieve(build_index(one), d.pairs[7].input) == "00003"
    idx = build_index(d)
    for p in d:
        assert retrieve(idx, p.input) == p.id


def _bruteforce(idx, query, exclude=None):
    q = extract_features(query).values.astype(np.float64)
    ranked = sorted(((-float(np.dot(v.astype(np.float64), q)), bool(deg), pid)
                     for pid, v, deg in zip(idx.ids, idx.vectors, idx.degenerate) if pid != exclude))
    return ranked


def test_leave_one_out_returns_second_best():
    d = _random_dataset(40)
    idx = build_index(d)
    for p in d.pairs[:10]:
        ranked = _bruteforce(idx, p.input)
        assert ranked[0][2] == p.id
        got = retrieve(idx, p.input, exclude=p.id)
        assert got == ranked[1][2] and got != p.id


def test_all_excluded_raises():
    d = _random_dataset(10).subset(lambda p: p.id == "00000")
    with pytest.raises(EmptySupportError, match="empty support set"):
        retrieve(build_index(d), d.pairs[0].input, exclude="00000")


def test_ties_go_to_smallest_id():
    d = _random_dataset(10)
    # identical input images under different ids
    from vicprompt.data import Dataset, TaskPair

    img = d.pairs[0].input
    dup = Dataset(tuple(TaskPair(f"{k:05d}", img, d.pairs[0].label, 0, 0) for k in (4, 2, 9)),
                  "segmentation", {0: "x"})
    assert retrieve(build_index(dup), img) == "00002"
    assert retrieve(build_index(dup), img, exclude="00002") == "00004"


@settings(max_examples=25, deadline=None)
@given(st.floats(min_value=0.05, max_value=20.0), st.integers(0, 2**16))
def test_argmax_scale_invariance(c, seed):
    d = _random_dataset(20)
    idx = build_index(d)
    q = np.random.default_rng(seed).random((64, 64, 3))
    assert retrieve(idx, c * q) == retrieve(idx, q)


def test_batched_retrieval_matches_single(tmp_path):
    d = _random_dataset(30)
    idx = build_index(d)
    queries = [p.input for p in d.pairs[:12]]
    ex = [p.id for p in d.pairs[:12]]
    assert retrieve_many(idx, queries, ex) == [retrieve(idx, q, e) for q, e in zip(queries, ex)]
    save_index(idx, tmp_path / "i.bin")
    back = load_index(tmp_path / "i.bin")
    assert back.ids == idx.ids and np.array_equal(back.vectors, idx.vectors)
    assert back.extractor_tag == idx.extractor_tag
