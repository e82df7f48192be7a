import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from bnnas.analysis import (RankVector, SimilarityMatrix, convergence_epoch, correlation_study, kendall_tau,
                            rank_block, rank_vector, read_pgm, similarity_matrix, write_correlation_csv,
                            write_matrix_csv, write_pgm)
from bnnas.space import build_supernet
from bnnas.trainer import BnSnapshot, TrainConfig


def naive_tau_b(x, y):
    """O(n^2) pair count with tie correction."""
    n = len(x)
    conc = disc = tx = ty = 0
    for i in range(n):
        for j in range(i + 1, n):
            dx, dy = x[i] - x[j], y[i] - y[j]
            if dx == 0 and dy == 0:
                tx += 1
                ty += 1
            elif dx == 0:
                tx += 1
            elif dy == 0:
                ty += 1
            elif dx * dy > 0:
                conc += 1
            else:
                disc += 1
    n0 = n * (n - 1) // 2
    if tx == n0 or ty == n0:
        return None
    return (conc - disc) / math.sqrt((n0 - tx) * (n0 - ty))


def test_rank_block_ties_follow_index():
    assert rank_block([0.5, 0.9, 0.5, 0.1]).tolist() == [2, 1, 3, 4]
    assert rank_block([1.0] * 6).tolist() == [1, 2, 3, 4, 5, 6]


def test_rank_vector_from_snapshot():
    g = [[np.array([1.0]), np.array([-3.0]), np.array([2.0])], [np.array([0.1]), np.array([0.2]), np.array([0.0])]]
    rv = rank_vector(BnSnapshot(4, g))
    assert rv.epoch == 4
    assert rv.ranks.tolist() == [3, 1, 2, 2, 1, 3]
    with pytest.raises(ValueError):
        rank_vector(BnSnapshot(0, [[np.ones(1)], [np.ones(1), np.ones(1)]]))


def rank_vectors(draw_ranks):
    return [RankVector(i, r) for i, r in enumerate(draw_ranks)]


perm_lists = st.integers(2, 8).flatmap(
    lambda e: st.lists(st.lists(st.permutations(range(1, 7)), min_size=3, max_size=3), min_size=e, max_size=e))


@given(perm_lists)
@settings(max_examples=60)
def test_similarity_invariants(blocks):
    vecs = rank_vectors([np.concatenate(b) for b in blocks])
    m = similarity_matrix(vecs).values
    assert np.array_equal(m, m.T)
    assert np.all(np.diag(m) == 1.0)
    assert m.min() >= 0.0 and m.max() <= 1.0
    if not all(np.array_equal(v.ranks, vecs[0].ranks) for v in vecs):
        assert m.min() == 0.0


def test_similarity_hand_example():
    a = RankVector(0, np.array([1, 2, 3]))
    b = RankVector(1, np.array([2, 1, 3]))
    c = RankVector(2, np.array([3, 2, 1]))
    m = similarity_matrix([a, b, c]).values
    d_ab, d_ac, d_bc = math.sqrt(2), math.sqrt(8), math.sqrt(6)
    assert m[0, 1] == pytest.approx(1 - d_ab / d_ac)
    assert m[1, 2] == pytest.approx(1 - d_bc / d_ac)
    assert m[0, 2] == 0.0
    same = similarity_matrix([a, a]).values
    assert np.all(same == 1.0)


def brute_convergence(sim, epochs, window, threshold, sustained):
    n = len(sim)
    tail = range(max(0, n - window), n)
    for e in range(n):
        rows = range(e, n) if sustained else [e]
        if all(sim[i, j] >= threshold for i in rows for j in tail):
            return epochs[e]
    return None


@given(st.integers(0, 2**31), st.integers(2, 12), st.integers(1, 4), st.floats(0.0, 1.0), st.booleans())
@settings(max_examples=150)
def test_convergence_epoch_matches_brute_force(seed, n, window, threshold, sustained):
    rng = np.random.default_rng(seed)
    a = rng.uniform(0, 1, (n, n))
    sim = (a + a.T) / 2
    np.fill_diagonal(sim, 1.0)
    m = SimilarityMatrix(list(range(0, 2 * n, 2)), sim)
    assert convergence_epoch(m, window, threshold, sustained) == brute_convergence(
        sim, m.epochs, window, threshold, sustained)


def test_convergence_epoch_examples():
    ones = SimilarityMatrix(list(range(5)), np.ones((5, 5)))
    assert convergence_epoch(ones, 3, 0.9) == 0
    # similarity to the end rises steadily and crosses 0.9 at epoch 4
    n = 8
    closeness = np.array([0.1, 0.3, 0.5, 0.7, 0.92, 0.95, 0.98, 1.0])
    sim = 1 - np.abs(closeness[:, None] - closeness[None, :])
    assert convergence_epoch(SimilarityMatrix(list(range(n)), sim), 3, 0.9) == 4
    noise = np.eye(4) + 0.1 * (1 - np.eye(4))
    assert convergence_epoch(SimilarityMatrix(list(range(4)), noise), 2, 0.9) is None


def test_convergence_epoch_sustained_differs():
    vecs = [RankVector(e, np.array(r)) for e, r in enumerate(
        [[1, 2, 3], [3, 2, 1], [1, 3, 2], [1, 2, 3], [1, 2, 3], [1, 2, 3]])]
    m = similarity_matrix(vecs)
    assert convergence_epoch(m, 3, 0.9) == 0
    assert convergence_epoch(m, 3, 0.9, sustained=True) == 3
    with pytest.raises(ValueError):
        convergence_epoch(m, 0, 0.9)


@given(st.integers(0, 2**31))
@settings(max_examples=100)
def test_rank_vector_matches_sort_oracle(seed):
    rng = np.random.default_rng(seed)
    table = np.round(rng.uniform(0, 2, (4, 6)), 1)  # coarse values force ties
    ranks = rank_vector(table).ranks
    for l, row in enumerate(table):
        order = sorted(range(6), key=lambda n: (-row[n], n))
        expect = [order.index(n) + 1 for n in range(6)]
        assert ranks[6 * l:6 * l + 6].tolist() == expect
        assert sorted(expect) == list(range(1, 7))


@given(st.integers(0, 2**31))
@settings(max_examples=50)
def test_rank_vector_ignores_monotone_transforms(seed):
    table = np.random.default_rng(seed).uniform(0.1, 2, (3, 6))
    assert np.array_equal(rank_vector(table).ranks, rank_vector(np.exp(3 * table) + 1).ranks)


@given(st.lists(st.tuples(st.integers(-3, 3), st.integers(-3, 3)), min_size=2, max_size=30))
@settings(max_examples=200)
def test_kendall_tau_matches_pair_count(pairs):
    x, y = zip(*pairs)
    assert kendall_tau(x, y) == naive_tau_b(x, y)


def test_kendall_tau_against_scipy_and_oracle_on_100_inputs():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(2, 40))
        x = rng.integers(0, 5, n).astype(float)
        y = rng.normal(size=n) if rng.random() < 0.5 else rng.integers(0, 4, n).astype(float)
        t = kendall_tau(x, y)
        assert t == naive_tau_b(list(x), list(y))
        if t is not None:
            assert t == pytest.approx(stats.kendalltau(x, y).statistic, abs=1e-12)


@given(st.lists(st.floats(-100, 100), min_size=2, max_size=25))
def test_kendall_tau_self_and_reverse(xs):
    if len(set(xs)) < 2:
        assert kendall_tau(xs, xs) is None
        return
    assert kendall_tau(xs, xs) == pytest.approx(1.0)
    assert kendall_tau(xs, [-v for v in xs]) == pytest.approx(-1.0)


def test_kendall_tau_edge_cases():
    assert kendall_tau([1, 2, 3], [1, 2, 3]) == 1.0
    assert kendall_tau([1, 2, 3], [3, 2, 1]) == -1.0
    assert kendall_tau([1, 1, 1], [1, 2, 3]) is None
    with pytest.raises(ValueError):
        kendall_tau([1, 2], [1, 2, 3])
    with pytest.raises(ValueError):
        kendall_tau([1], [1])


def test_exports(tmp_path):
    vecs = [RankVector(e, np.array(r)) for e, r in enumerate([[1, 2, 3], [2, 1, 3], [3, 2, 1]])]
    m = similarity_matrix(vecs)
    write_matrix_csv(tmp_path / "m.csv", m)
    rows = (tmp_path / "m.csv").read_text().splitlines()
    assert rows[0] == "epoch,0,1,2" and rows[1].startswith("0,1.000000")
    write_pgm(tmp_path / "m.pgm", m)
    pix = read_pgm(tmp_path / "m.pgm")
    assert pix.shape == (3, 3)
    assert pix[0, 0] == 0 and pix[0, 2] == 255


def test_correlation_study_small(tmp_path, space, tiny_data):
    net = build_supernet(space, 0)
    train, val = tiny_data.split(0.25, 0)
    cfg = TrainConfig(epochs=1, mode="all_params", batch_size=32)
    res = correlation_study(space, net, train, val, 4, cfg, seed=1)
    assert len(set(res.archs)) == 4
    assert res.tau == kendall_tau(res.scores, res.accuracies)
    again = correlation_study(space, net, train, val, 4, cfg, seed=1)
    assert again.accuracies == res.accuracies
    write_correlation_csv(tmp_path / "c.csv", res)
    assert len((tmp_path / "c.csv").read_text().splitlines()) == 5
    with pytest.raises(ValueError):
        correlation_study(space, net, train, val, 1, cfg, seed=1)
    pair = correlation_study(space, net, train, val, 2, cfg, seed=2)
    assert pair.tau in (-1.0, 1.0, None)
