import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hypnet import evaluate as E
from hypnet import model as M
from hypnet.corpus import from_pairs, load_corpus, write_corpus
from hypnet.synthetic import patch_pairs, random_corpus


def sweep_fpr95(d, y):
    """Scan every distinct threshold upward; report FPR at the first one with recall >= 95%."""
    d, y = np.asarray(d, float), np.asarray(y, bool)
    for t in sorted(set(d.tolist())):
        if np.mean(d[y] <= t) >= 0.95:
            return float(np.mean(d[~y] <= t))
    raise AssertionError("unreachable")


def random_set(rng, n):
    # rounded distances force ties between matches and non-matches
    d = np.round(rng.random(n), int(rng.integers(1, 4)))
    y = rng.random(n) < rng.uniform(0.1, 0.9)
    y[0], y[1] = True, False
    return d, y


def test_fpr95_examples():
    d = np.r_[np.zeros(20), np.ones(20)]
    y = np.r_[np.ones(20), np.zeros(20)]
    assert E.fpr95(d, y) == 0.0
    assert E.fpr95(np.ones(40), y) == 1.0
    # 20 matches: tau is the 19th smallest match distance
    d = np.r_[np.arange(20) / 10.0, [1.85, 1.8]]
    y = np.r_[np.ones(20), [0, 0]]
    assert E.fpr95(d, y) == 0.5


def test_fpr95_requires_both_labels():
    with pytest.raises(ValueError):
        E.fpr95([0.1, 0.2], [1, 1])
    with pytest.raises(ValueError):
        E.fpr95([0.1, 0.2], [0, 0])
    with pytest.raises(ValueError):
        E.fpr95([0.1, 0.2], [0, 1, 1])


@given(st.integers(0, 2**32 - 1), st.integers(2, 300))
def test_fpr95_equals_threshold_sweep(seed, n):
    d, y = random_set(np.random.default_rng(seed), n)
    assert E.fpr95(d, y) == sweep_fpr95(d, y)


@given(st.integers(0, 2**32 - 1))
def test_fpr95_invariant_under_monotone_transform(seed):
    rng = np.random.default_rng(seed)
    d, y = random_set(rng, 200)
    base = E.fpr95(d, y)
    assert E.fpr95(3.0 * d + 7.0, y) == base
    assert E.fpr95(np.exp(d), y) == base
    assert E.fpr95(d**3, y) == base


def test_null_model_near_095():
    rng = np.random.default_rng(0)
    d = rng.random(100_000)
    y = rng.random(100_000) < 0.5
    assert abs(E.fpr95(d, y) - 0.95) <= 0.02


def test_roc_examples():
    curve = E.roc_curve([0.1, 0.2, 0.3, 0.4], [1, 0, 1, 0])
    assert curve == [(0.0, 0.5), (0.5, 0.5), (0.5, 1.0), (1.0, 1.0)]
    assert E.fpr_at_recall_from_roc(curve) == 0.5


@given(st.integers(0, 2**32 - 1), st.integers(2, 200))
def test_roc_staircase_and_consistency(seed, n):
    d, y = random_set(np.random.default_rng(seed), n)
    curve = E.roc_curve(d, y)
    fpr, tpr = np.array(curve).T
    assert np.all(np.diff(fpr) >= 0) and np.all(np.diff(tpr) >= 0)
    assert curve[-1] == (1.0, 1.0)
    assert E.fpr_at_recall_from_roc(curve) == E.fpr95(d, y)


def test_match_examples():
    g = np.eye(3)
    idx, dist = E.match_descriptors(g.copy(), g)
    np.testing.assert_array_equal(idx, [0, 1, 2])
    np.testing.assert_allclose(dist, 0.0, atol=1e-12)
    idx, dist = E.match_descriptors(np.array([[5.0, 0.1, 0.0]]), g)
    assert idx[0] == 0
    with pytest.raises(ValueError):
        E.match_descriptors(g, np.zeros((0, 3)))
    with pytest.raises(ValueError):
        E.match_descriptors(g, g, method="lsh")


def test_tree_matches_brute_force_at_scale():
    rng = np.random.default_rng(1)
    q, g = rng.normal(size=(1000, 128)), rng.normal(size=(1000, 128))
    ti, td = E.match_descriptors(q, g, "tree")
    bi, bd = E.match_descriptors(q, g, "brute")
    np.testing.assert_array_equal(ti, bi)
    np.testing.assert_allclose(td, bd, atol=1e-12)


@given(st.integers(0, 2**32 - 1), st.integers(1, 40), st.integers(1, 40))
def test_tree_matches_brute_force_small(seed, nq, ng):
    rng = np.random.default_rng(seed)
    q, g = rng.normal(size=(nq, 8)), rng.normal(size=(ng, 8))
    ti, td = E.match_descriptors(q, g, "tree")
    bi, bd = E.match_descriptors(q, g, "brute")
    np.testing.assert_allclose(td, bd, atol=1e-12)
    # ties aside, the indices agree; the distances always do
    assert np.mean(ti == bi) == 1.0


def _copy_corpus(n=12):
    vis, _ = patch_pairs(n, seed=3)
    return from_pairs(vis, vis.copy(), np.full(n, "test"), seed=1)


def test_identical_copies_score_zero():
    report = E.evaluate_corpus(M.init_weights(0), _copy_corpus())
    assert report.mean == 0.0
    assert [c.category for c in report.categories] == ["all"]


def test_random_model_on_random_corpus_is_null():
    report = E.evaluate_corpus(M.init_weights(1), random_corpus(200, seed=2, categories=1), split=None)
    assert abs(report.mean - 0.95) <= 0.05


def test_each_patch_described_once(monkeypatch):
    corpus = _copy_corpus(10)
    seen = []
    real = E.hypnet_forward

    def counting(x, modality, weights, mode="eval", rng=None, trace=None):
        seen.append(x.shape[0])
        return real(x, modality, weights, mode, rng, trace)

    monkeypatch.setattr(E, "hypnet_forward", counting)
    report = E.evaluate_corpus(M.init_weights(0), corpus, batch_size=4)
    # 10 patches per modality, 40 rows referencing them
    assert len(corpus) == 20 and sum(seen) == 20 == report.n_descriptors


def test_report_csv():
    report = E.EvalReport([E.CategoryScore("a", 4, 0.25), E.CategoryScore("b", 2, 0.5)], 0.375, 6)
    assert report.to_csv() == "category,n_pairs,fpr95\na,4,0.250000\nb,2,0.500000\nmean,6,0.375000\n"


def test_evaluate_on_disk_names_missing_file(tmp_path):
    write_corpus(tmp_path, _copy_corpus(4))
    (tmp_path / "patch_1_000002.png").unlink()
    with pytest.raises(FileNotFoundError, match="patch_1_000002.png"):
        load_corpus(tmp_path)


def test_empty_split_rejected():
    with pytest.raises(ValueError, match="val"):
        E.evaluate_corpus(M.init_weights(0), _copy_corpus(4), split="val")
