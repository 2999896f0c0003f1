import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from hypnet import loss as L
from hypnet.tensor import Tensor


def unit(v):
    return v / np.linalg.norm(v)


def oracle_distance(a, b):
    diff = unit(np.asarray(a, float)) - unit(np.asarray(b, float))
    return float(diff @ diff)


def exhaustive_negatives(dm):
    """Per-anchor lowest-index argmin over j != i, by explicit loops."""
    n = len(dm)
    row, col = [], []
    for i in range(n):
        best_r = best_c = None
        for j in range(n):
            if j == i:
                continue
            if best_r is None or dm[i, j] < dm[i, best_r]:
                best_r = j
            if best_c is None or dm[j, i] < dm[best_c, i]:
                best_c = j
        row.append(best_r)
        col.append(best_c)
    return np.array(row), np.array(col)


def test_distance_examples():
    d = np.array([0.3, -1.0, 2.0])
    assert L.descriptor_distance(d, d) == pytest.approx(0.0, abs=1e-12)
    assert L.descriptor_distance(d, -d) == pytest.approx(4.0, abs=1e-6)
    e = np.array([1.0, 0.5, -0.2])
    for alpha in (0.5, 3.0, 100.0):
        assert abs(L.descriptor_distance(alpha * d, e) - L.descriptor_distance(d, e)) < 1e-6
    with pytest.raises(ValueError):
        L.descriptor_distance(np.zeros(3), e)


@given(
    hnp.arrays(np.float64, 8, elements=st.floats(-5, 5)),
    hnp.arrays(np.float64, 8, elements=st.floats(-5, 5)),
)
def test_distance_cosine_identity_and_range(a, b):
    if np.linalg.norm(a) < 1e-3 or np.linalg.norm(b) < 1e-3:
        return
    d = L.descriptor_distance(a, b)
    cos = unit(a) @ unit(b)
    assert abs(d - (2 - 2 * cos)) < 1e-6
    assert -1e-12 <= d <= 4 + 1e-12
    assert d == pytest.approx(L.descriptor_distance(b, a), abs=1e-12)


def test_triplet_examples():
    a = np.array([1.0, 0.0])
    assert L.triplet_loss(a, a, -a, 1.0) == 0.0
    p = np.array([0.6, 0.8])
    assert L.triplet_loss(a, p, a, 1.0) == pytest.approx(oracle_distance(a, p) + 1.0)
    rng = np.random.default_rng(0)
    for _ in range(50):
        x, y, z = rng.normal(size=(3, 6))
        expected = max(0.0, oracle_distance(x, y) - oracle_distance(x, z) + 1.0)
        assert L.triplet_loss(x, y, z) == pytest.approx(expected, abs=1e-12)


def test_mining_examples():
    two = L.mine_hard_negatives(np.array([[0.0, 1.0], [2.0, 0.0]]))
    np.testing.assert_array_equal(two.negatives_for(0), [1, 0])
    np.testing.assert_array_equal(two.negatives_for(1), [1, 0])
    dm = np.array([[0.1, 0.5, 0.2], [0.3, 0.1, 0.9], [0.8, 0.4, 0.0]])
    assert L.mine_hard_negatives(dm).negatives_for(0)[0] == 2
    with pytest.raises(ValueError):
        L.mine_hard_negatives(np.zeros((1, 1)))


def test_mining_ties_go_to_lowest_index():
    dm = np.full((4, 4), 0.5)
    mined = L.mine_hard_negatives(dm)
    np.testing.assert_array_equal(mined.negatives_for(0), [1, 0, 0, 0])
    np.testing.assert_array_equal(mined.negatives_for(1), [1, 0, 0, 0])


@given(st.integers(2, 12), st.integers(0, 2**32 - 1))
def test_mining_equals_exhaustive_search(n, seed):
    rng = np.random.default_rng(seed)
    # a coarse grid of values makes ties common
    dm = rng.integers(0, 5, size=(n, n)) / 4.0
    mined = L.mine_hard_negatives(dm)
    row, col = exhaustive_negatives(dm)
    np.testing.assert_array_equal(mined.negatives_for(0), row)
    np.testing.assert_array_equal(mined.negatives_for(1), col)
    assert not np.any(mined.negatives_for(0) == np.arange(n))
    assert not np.any(mined.negatives_for(1) == np.arange(n))


@given(st.integers(2, 10), st.integers(0, 2**32 - 1))
def test_rescaling_descriptors_changes_nothing(n, seed):
    rng = np.random.default_rng(seed)
    da, db = rng.normal(size=(n, 16)), rng.normal(size=(n, 16))
    scale = rng.uniform(0.1, 10.0, size=(n, 1))
    dm1, dm2 = L.distance_matrix(da, db), L.distance_matrix(da * scale, db)
    np.testing.assert_allclose(dm1, dm2, atol=1e-6)
    a, b = L.mine_hard_negatives(dm1), L.mine_hard_negatives(dm2)
    np.testing.assert_array_equal(a.negative, b.negative)


def test_distance_matrix_entries():
    rng = np.random.default_rng(1)
    da, db = rng.normal(size=(5, 7)), rng.normal(size=(5, 7))
    dm = L.distance_matrix(da, db)
    for i in range(5):
        for j in range(5):
            assert dm[i, j] == pytest.approx(oracle_distance(da[i], db[j]), abs=1e-12)


def test_random_negatives():
    rng = np.random.default_rng(2)
    two = L.sample_random_negatives(2, rng)
    np.testing.assert_array_equal(two.negatives_for(0), [1, 0])
    a = L.sample_random_negatives(7, np.random.default_rng(5))
    b = L.sample_random_negatives(7, np.random.default_rng(5))
    np.testing.assert_array_equal(a.negative, b.negative)
    with pytest.raises(ValueError):
        L.sample_random_negatives(1, rng)


def test_random_negative_frequencies():
    rng = np.random.default_rng(3)
    counts = np.zeros((5, 5))
    for _ in range(10_000):
        neg = L.sample_random_negatives(5, rng).negatives_for(0)
        counts[np.arange(5), neg] += 1
    assert np.all(np.diag(counts) == 0)
    freq = counts / 10_000
    off = freq[~np.eye(5, dtype=bool)]
    assert np.all(np.abs(off - 0.25) <= 0.02)


def test_batch_loss_identities():
    same = np.tile(np.array([[0.2, -0.7, 1.1]]), (4, 1))
    for strategy in ("random", "hard"):
        loss = L.batch_loss(Tensor(same), Tensor(same), strategy, rng=np.random.default_rng(0))
        assert loss.item() == 1.0
    # positives coincide and every negative is antipodal
    sep = np.array([[1.0, 0.0], [-1.0, 0.0]])
    assert L.batch_loss(Tensor(sep), Tensor(sep), "hard").item() == 0.0


def test_batch_loss_matches_loop_oracle(f64):
    rng = np.random.default_rng(4)
    da, db = rng.normal(size=(6, 5)), rng.normal(size=(6, 5))
    for strategy in ("random", "hard"):
        triplets = L.select_triplets(da, db, strategy, np.random.default_rng(9))
        total = 0.0
        for i in range(6):
            j = triplets.negatives_for(0)[i]
            total += max(0.0, oracle_distance(da[i], db[i]) - oracle_distance(da[i], db[j]) + 1.0)
            k = triplets.negatives_for(1)[i]
            total += max(0.0, oracle_distance(db[i], da[i]) - oracle_distance(db[i], da[k]) + 1.0)
        loss = L.batch_loss(Tensor(da), Tensor(db), margin=1.0, triplets=triplets).item()
        assert loss == pytest.approx(total / 12, abs=1e-12)
        if strategy == "hard":
            dm = L.distance_matrix(da, db)
            row, col = exhaustive_negatives(dm)
            np.testing.assert_array_equal(triplets.negatives_for(0), row)
            np.testing.assert_array_equal(triplets.negatives_for(1), col)


def test_select_triplets_rejects_unknown_strategy():
    with pytest.raises(ValueError):
        L.select_triplets(np.ones((3, 2)), np.ones((3, 2)), "semi-hard")
