import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from intent_cir import composer as cmp
from intent_cir import evaluation as ev
from intent_cir.objectives import loyalty_matrix, row_softmax
from intent_cir.pnm import read_pnm_u8


def oracle_rankings(q, g):
    """Brute-force cosine scores and a stable sort on (-score, index)."""
    out = []
    for row in q:
        scores = [(-sum(a * b for a, b in zip(row, col)), j) for j, col in enumerate(g)]
        out.append([j for _, j in sorted(scores)])
    return out


@pytest.fixture(scope="module")
def model():
    cfg = cmp.ComposerConfig(image_size=16, patch_size=8, n_queries=3, dim=6, hidden=5, seed=2)
    return cmp.ComposerParams.init(cfg)


def test_rank_all_matches_oracle(model):
    rng = np.random.default_rng(0)
    gallery = rng.uniform(size=(7, 16, 16, 3))
    queries = [(rng.uniform(size=(16, 16, 3)), (1, 4)) for _ in range(5)]
    ranks = ev.rank_all(model, queries, gallery)
    q = ev.pooled_queries(model, np.stack([x for x, _ in queries]), [t for _, t in queries])
    g = ev.pooled_gallery(model, gallery)
    assert ranks.tolist() == oracle_rankings(q.tolist(), g.tolist())
    for row in ranks:
        assert sorted(row) == list(range(7))


def test_rank_all_trivial_cases(model):
    rng = np.random.default_rng(1)
    img = rng.uniform(size=(16, 16, 3))
    assert ev.rank_all(model, [(img, ())], img[None]).tolist() == [[0]]
    gallery = np.stack([rng.uniform(size=(16, 16, 3)), img, rng.uniform(size=(16, 16, 3))])
    assert ev.rank_all(model, [(img, ())], gallery)[0, 0] == 1  # target encoding equals empty-text query
    with pytest.raises(ValueError):
        ev.rank_all(model, [(img, ())], np.zeros((0, 16, 16, 3)))


def test_ties_break_by_index():
    assert ev.rank_rows(np.array([[0.5, 0.9, 0.5, 0.9]])).tolist() == [[1, 3, 0, 2]]


def test_recall_examples():
    rankings = np.array([[3, 0, 1, 2], [1, 2, 3, 0], [2, 1, 0, 3]])
    truths = [3, 0, 1]  # positions 0, 3, 1 (ranks 1, 4, 2)
    assert abs(ev.recall_at_k(rankings, truths, 2) - 2 / 3) < 1e-15
    assert ev.recall_at_k(rankings, truths, 4) == 1.0
    assert ev.recall_at_k(rankings, [3, 1, 2], 1) == 1.0
    with pytest.raises(ValueError):
        ev.recall_at_k(rankings, truths, 5)
    with pytest.raises(ValueError):
        ev.recall_at_k(rankings, truths, 0)


def test_subset_recall_examples():
    rankings = np.array([[4, 2, 0, 1, 3], [0, 1, 2, 3, 4]])
    # query 0: subset {0, 1, 2} ordered 2, 0, 1 -> truth 0 at position 1
    # query 1: subset {2, 3} ordered 2, 3 -> truth 2 first
    subsets, truths = [[0, 1, 2], [3, 2]], [0, 2]
    assert ev.restrict_rankings(rankings, subsets) == [[2, 0, 1], [2, 3]]
    assert ev.subset_recall_at_k(rankings, subsets, truths, 1) == 0.5
    assert ev.subset_recall_at_k(rankings, subsets, truths, 2) == 1.0
    full = [list(range(5))] * 2
    assert ev.subset_recall_at_k(rankings, full, truths, 1) == ev.recall_at_k(rankings, truths, 1)
    with pytest.raises(ValueError):
        ev.subset_recall_at_k(rankings, [[1, 2], [2, 3]], truths, 1)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 9), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_recall_properties(g, nq, seed):
    rng = np.random.default_rng(seed)
    scores = rng.normal(size=(nq, g))
    truths = rng.integers(g, size=nq)
    rankings = ev.rank_rows(scores)
    recalls = [ev.recall_at_k(rankings, truths, k) for k in range(1, g + 1)]
    assert recalls == sorted(recalls) and recalls[-1] == 1.0
    perm = rng.permutation(g)  # new column c holds old column perm[c]
    inverse = np.argsort(perm)
    permuted = ev.rank_rows(scores[:, perm])
    for k in range(1, g + 1):
        assert ev.recall_at_k(permuted, inverse[truths], k) == recalls[k - 1]
    # enlarging a subset can only keep or lower subset R@1
    small = [[int(t)] + [int(c) for c in rng.permutation(g) if c != t][:1] for t in truths]
    big = [s + [c for c in range(g) if c not in s][:2] for s in small]
    assert ev.subset_recall_at_k(rankings, big, truths, 1) <= ev.subset_recall_at_k(rankings, small, truths, 1)


def test_heat_export(tmp_path, model):
    rng = np.random.default_rng(3)
    imgs = rng.uniform(size=(3, 16, 16, 3))
    cos = ev.export_similarity_heat(model, [(x, ()) for x in imgs], imgs, tmp_path / "sim")
    assert np.allclose(np.diag(cos), 1.0)
    pgm = read_pnm_u8(tmp_path / "sim.pgm")[..., 0]
    assert np.all(np.diag(pgm) == 255)
    expected = [[int(np.floor(255 * (c + 1) / 2 + 0.5)) for c in row] for row in cos.tolist()]
    assert pgm.tolist() == expected
    assert np.max(np.abs(ev.read_matrix_csv(tmp_path / "sim.csv") - cos)) < 1e-6
    with pytest.raises(ValueError):
        ev.export_similarity_heat(model, [(imgs[0], ())], imgs, tmp_path / "bad")


def test_heat_values_mapping():
    assert ev.heat_values(np.array([-1.0, 0.0, 1.0, 2.0])).tolist() == [0, 128, 255, 255]


def test_loyalty_rank_examples(tmp_path):
    s = np.eye(3)
    sim, loy = ev.loyalty_ranks(s, loyalty_matrix(s))
    assert not loy.any() and not sim.any()
    s = np.array([[0.9, 0.1], [0.2, 0.8]])
    sim, loy = ev.export_loyalty_ranks(s, loyalty_matrix(s), None, tmp_path / "r.csv")
    assert loy.tolist() == [0, 0]
    assert (tmp_path / "r.csv").read_text() == "query,similarity_rank,loyalty_rank\n0,0,0\n1,0,0\n"


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 8), st.integers(0, 2**31 - 1))
def test_loyalty_never_promotes_truth_within_one_matrix(b, seed):
    """With both rewards on, truth beats j under loyalty only if 2 s_ii > s_ij + max_neg,
    which implies s_ii > s_ij; so loyalty rank >= similarity rank for the same S."""
    s = row_softmax(np.random.default_rng(seed).normal(size=(b, b)) * 2)
    sim, loy = ev.loyalty_ranks(s, loyalty_matrix(s))
    assert np.all(loy >= sim)


def test_without_rewards_ranks_coincide():
    s = row_softmax(np.random.default_rng(4).normal(size=(6, 6)))
    sim, loy = ev.loyalty_ranks(s, loyalty_matrix(s, enable_pwr=False, enable_nwr=False))
    assert np.array_equal(sim, loy)
