import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_instance
from gcp import kernels
from gcp.acquisition import (
    AcquisitionConfig,
    PoolScores,
    _kmedoids_on_demand,
    acquire,
    acquisition_weights,
    consensus_select,
    coverage_from_distances,
    coverage_objective,
    gradient_distance,
    kl_distance,
    medoids_from_distances,
    node_entropy,
    pairwise_gradient_distances,
    score_pool,
    select_coverage,
    select_gradient_medoids,
    select_swu,
    structure_weighted_uncertainty,
    symmetric_kl_distance,
)
from gcp.data import Sample
from gcp.errors import BudgetExceedsPool, InvalidDistribution, LengthMismatch, NodeSetMismatch, PoolTooSmall
from gcp.graph import degree_weights
from gcp.model import NodeOutputs, forward, node_gradient_embedding

LN2 = np.log(2.0)


def outputs(**dists):
    return NodeOutputs(np.zeros(2), {k: np.asarray(v, dtype=np.float64) for k, v in dists.items()})


def fake_scores(e_unc: dict[str, float]) -> PoolScores:
    ids = sorted(e_unc)
    return PoolScores(ids, np.array([e_unc[i] for i in ids]), outputs(), {}, {}, 2.0)


def factor_scores(A: np.ndarray, R: np.ndarray) -> PoolScores:
    """Single-node pool whose gradient embeddings come from the given factors."""
    ids = [f"s{i:03d}" for i in range(A.shape[0])]
    return PoolScores(ids, np.zeros(len(ids)), outputs(), {"n": (A, R)}, {"n": 1.0}, 2.0)


def random_pool(m, rng, n, prefix="p"):
    return [Sample(f"{prefix}{i:03d}", rng.standard_normal(m.d_in)) for i in range(n)]


# entropy and E_unc ----------------------------------------------------------------


@pytest.mark.parametrize("p,h", [([1, 0], 0.0), ([0.5, 0.5], LN2), ([0.25] * 4, np.log(4)), ([1 / 3] * 3, np.log(3))])
def test_entropy_examples(p, h):
    assert node_entropy(p) == pytest.approx(h, abs=1e-12)


@pytest.mark.parametrize("bad", [[0.5, 0.6], [-0.1, 1.1], [[0.5, 0.5]]])
def test_entropy_rejects_non_distributions(bad):
    with pytest.raises(InvalidDistribution):
        node_entropy(bad)


@pytest.mark.parametrize("p,expected", [(1.0, 0.519860), (2.0, 0.600281)])
def test_e_unc_examples(p, expected):
    out = outputs(a=[1.0, 0.0], b=[0.5, 0.5], c=[0.5, 0.5])
    w = {"a": 0.25, "b": 0.5, "c": 0.25}
    # the quoted decimals are approximate (ln2 * sqrt(0.75) = 0.6002831); the closed form is exact
    assert structure_weighted_uncertainty(out, w, p) == pytest.approx(expected, abs=5e-6)
    exact = 0.75 * LN2 if p == 1.0 else LN2 * np.sqrt(0.75)
    assert structure_weighted_uncertainty(out, w, p) == pytest.approx(exact, abs=1e-14)


def test_e_unc_node_set_mismatch():
    with pytest.raises(NodeSetMismatch):
        structure_weighted_uncertainty(outputs(a=[1, 0]), {"b": 1.0})


@given(
    st.lists(st.floats(0.0, 3.0), min_size=1, max_size=6),
    st.lists(st.floats(0.01, 1.0), min_size=6, max_size=6),
    st.floats(1.0, 6.0),
    st.integers(0, 5),
    st.floats(0.0, 2.0),
)
def test_e_unc_monotone_in_each_entropy(H, w, p, i, bump):
    H = np.array(H)
    w = np.array(w[: H.size])
    i = i % H.size
    base = float((np.power(H, p) @ w) ** (1 / p))
    H2 = H.copy()
    H2[i] += bump
    assert float((np.power(H2, p) @ w) ** (1 / p)) >= base - 1e-12
    # the library scorer agrees with the formula on distributions of that entropy
    from gcp.acquisition import _weighted_pnorm

    assert _weighted_pnorm(H, w, p) == pytest.approx(base, rel=1e-12, abs=1e-15)
    assert _weighted_pnorm(H2, w, p) >= _weighted_pnorm(H, w, p) - 1e-12


def test_pool_scores_use_renormalized_non_root_weights(rng):
    m, _ = random_instance(7)
    pool = random_pool(m, rng, 9)
    sc = score_pool(m, pool, p_norm=3.0)
    w = degree_weights(m.graph)
    root = m.graph.root_id
    total = sum(v for k, v in w.items() if k != root)
    renorm = {k: v / total for k, v in w.items() if k != root}
    assert sc.weights == pytest.approx(renorm, rel=1e-14)
    assert acquisition_weights(m) == sc.weights
    for s in pool:
        out = forward(m, s.features)
        assert sc.e_unc[sc.index[s.id]] == pytest.approx(structure_weighted_uncertainty(out, renorm, 3.0), rel=1e-12)
    assert np.all(sc.e_unc >= 0)
    assert sc.ids == sorted(s.id for s in pool)


# SWU ---------------------------------------------------------------------------


def test_select_swu_examples():
    assert select_swu(fake_scores({"a": 0.9, "b": 0.1, "c": 0.5}), 2) == ["a", "c"]
    assert select_swu(fake_scores({"c": 0.3, "a": 0.3, "b": 0.3}), 2) == ["a", "b"]
    assert sorted(select_swu(fake_scores({"a": 0.2, "b": 0.1}), 2)) == ["a", "b"]
    with pytest.raises(PoolTooSmall):
        select_swu(fake_scores({"a": 0.2}), 2)


@given(st.lists(st.sampled_from([0.0, 0.1, 0.5, 1.0]), min_size=1, max_size=12), st.integers(1, 12))
def test_select_swu_is_top_k(vals, k):
    k = min(k, len(vals))
    sc = fake_scores({f"x{i:02d}": v for i, v in enumerate(vals)})
    got = select_swu(sc, k)
    assert len(set(got)) == k
    inc = min(sc.e_unc[sc.index[i]] for i in got)
    for sid in sc.ids:
        if sid not in got:
            e = sc.e_unc[sc.index[sid]]
            assert e <= inc
            if e == inc:
                assert all(sid > g for g in got if sc.e_unc[sc.index[g]] == e)


# gradient distance --------------------------------------------------------------


def test_gradient_distance_examples():
    z = {"n": np.array([1.0, 2.0, 3.0])}
    assert gradient_distance(z, z, {"n": 1.0}) == 0.0
    assert gradient_distance({"n": np.zeros(2)}, {"n": np.array([3.0, 0.0])}, {"n": 1.0}, 2.0) == pytest.approx(3.0)
    a, b = {"n": np.array([1.0, -1.0])}, {"n": np.array([0.5, 4.0])}
    assert gradient_distance(a, b, {"n": 1.0}) == gradient_distance(b, a, {"n": 1.0})
    with pytest.raises(LengthMismatch):
        gradient_distance({"n": np.zeros(2)}, {"n": np.zeros(3)}, {"n": 1.0})


@pytest.mark.parametrize("p", [1.0, 2.0, 3.5])
def test_factored_distances_match_explicit_embeddings(rng, p):
    m, _ = random_instance(2)
    pool = random_pool(m, rng, 10)
    sc = score_pool(m, pool, p_norm=p)
    D = pairwise_gradient_distances(sc)
    for i, j in [(0, 1), (3, 7), (9, 2), (4, 4)]:
        zi, zj = sc.z(sc.ids[i]), sc.z(sc.ids[j])
        assert D[i, j] == pytest.approx(gradient_distance(zi, zj, sc.weights, p), rel=1e-9, abs=1e-12)
    s = pool[5]
    for n in m.graph.non_root_ids:
        ref = node_gradient_embedding(m, s, n)
        got = sc.z(s.id)[n]
        assert np.allclose(np.sort(got), np.sort(ref), atol=1e-15)


def test_gradient_distance_pseudometric(rng):
    m, _ = random_instance(4)
    sc = score_pool(m, random_pool(m, rng, 25))
    D = pairwise_gradient_distances(sc)
    assert np.array_equal(D, D.T)
    assert np.all(np.diag(D) == 0) and np.all(D >= 0)
    for _ in range(500):
        i, j, k = rng.integers(0, 25, size=3)
        assert D[i, k] <= D[i, j] + D[j, k] + 1e-9


# gradient medoids ----------------------------------------------------------------


def test_medoids_whole_pool_when_k_equals_n(rng):
    m, _ = random_instance(3)
    sc = score_pool(m, random_pool(m, rng, 6))
    assert sorted(select_gradient_medoids(sc, 6)) == sc.ids


def test_one_medoid_is_exhaustive_minimizer(rng):
    for seed in range(5):
        m, _ = random_instance(seed)
        sc = score_pool(m, random_pool(m, np.random.default_rng(seed), 15))
        D = pairwise_gradient_distances(sc)
        best = min(range(15), key=lambda i: (D[i].sum(), i))
        assert select_gradient_medoids(sc, 1) == [sc.ids[best]]


def test_two_separated_clusters_give_one_medoid_each(rng):
    h = 4
    centers = np.array([np.zeros(h), np.full(h, 50.0)])
    A_rows, member = [], []
    for c in range(2):
        for _ in range(8):
            A_rows.append(centers[c] + rng.normal(scale=0.1, size=h))
            member.append(c)
    A = np.concatenate([np.array(A_rows), np.ones((16, 1))], axis=1)
    R = np.tile([0.3, -0.3], (16, 1))
    sc = factor_scores(A, R)
    D = pairwise_gradient_distances(sc)
    member = np.array(member)
    intra = max(D[np.ix_(member == c, member == c)].max() for c in range(2))
    inter = D[np.ix_(member == 0, member == 1)].min()
    assert inter >= 10 * intra
    med = select_gradient_medoids(sc, 2)
    assert sorted(member[sc.index[s]] for s in med) == [0, 1]


def test_on_demand_medoids_match_dense(rng):
    m, _ = random_instance(8)
    sc = score_pool(m, random_pool(m, rng, 40))
    dense, dense_lab = kernels.kmedoids(pairwise_gradient_distances(sc), 5, 20)
    lazy, lazy_lab = _kmedoids_on_demand(sc, 5, 20, chunk=7)
    assert list(dense) == list(lazy)
    assert np.array_equal(dense_lab, lazy_lab)


def test_build_then_swap_matches_reference_implementation(rng):
    """Greedy BUILD plus alternating updates, written plainly, on random metrics."""

    def reference(D, k, iters):
        n = D.shape[0]
        med = [int(np.argmin(D.sum(1)))]
        near = D[med[0]].copy()
        while len(med) < k:
            gains = [np.maximum(near - D[i], 0).sum() if i not in med else -1 for i in range(n)]
            i = int(np.argmax(gains))
            med.append(i)
            near = np.minimum(near, D[i])
        for _ in range(iters):
            lab = np.argmin(D[:, med], axis=1)
            new = list(med)
            for c in range(k):
                mem = np.flatnonzero(lab == c)
                if mem.size:
                    new[c] = int(mem[np.argmin(D[np.ix_(mem, mem)].sum(1))])
            if new == med:
                break
            med = new
        return med

    for t in range(20):
        pts = rng.standard_normal((int(rng.integers(5, 30)), 3))
        D = np.sqrt(((pts[:, None] - pts[None]) ** 2).sum(-1))
        k = int(rng.integers(1, min(6, D.shape[0]) + 1))
        ids = [f"i{j:02d}" for j in range(D.shape[0])]
        got = medoids_from_distances(ids, D, k)
        assert got == [ids[j] for j in reference(D, k, 20)]


# KL distance and coverage ----------------------------------------------------------


def test_kl_examples():
    x, y = outputs(n=[1.0, 0.0]), outputs(n=[0.5, 0.5])
    w = {"n": 1.0}
    assert kl_distance(x, x, w) == 0.0
    assert kl_distance(x, y, w) == pytest.approx(LN2, abs=1e-9)
    rev = kl_distance(y, x, w)
    assert np.isfinite(rev) and rev != kl_distance(x, y, w)
    # both terms of KL((.5,.5) || (1, 1e-12)); the second dominates
    assert rev == pytest.approx(0.5 * np.log(0.5) + 0.5 * np.log(0.5 / 1e-12), rel=1e-9)
    with pytest.raises(NodeSetMismatch):
        kl_distance(x, outputs(m=[0.5, 0.5]), w)


def test_kl_nonnegative_and_zero_on_self(rng):
    m, _ = random_instance(5)
    w = acquisition_weights(m)
    outs = forward(m, rng.standard_normal((30, m.d_in)) * 3)
    for i in range(30):
        assert kl_distance(outs.row(i), outs.row(i), w) == 0.0
        j = (i * 7 + 3) % 30
        assert kl_distance(outs.row(i), outs.row(j), w) >= 0
        assert symmetric_kl_distance(outs.row(i), outs.row(j), w) == symmetric_kl_distance(outs.row(j), outs.row(i), w)


def test_coverage_line_example():
    D = np.array([[0.0, 1.0, 2.0], [1.0, 0.0, 1.0], [2.0, 1.0, 0.0]])
    assert coverage_from_distances(["A", "B", "C"], D, labeled=[0], k=1) == ["C"]
    # exhaustive objective agrees
    assert max([1, 2], key=lambda c: coverage_objective(D, [c], [0])) == 2


def test_coverage_whole_pool_and_too_small(rng):
    m, _ = random_instance(1)
    sc = score_pool(m, random_pool(m, rng, 5))
    assert sorted(select_coverage(sc, None, 5)) == sc.ids
    with pytest.raises(PoolTooSmall):
        select_coverage(sc, None, 6)


def test_coverage_kernel_matches_explicit_divergence(rng):
    for seed in range(6):
        m, _ = random_instance(seed)
        r = np.random.default_rng(seed)
        pool = random_pool(m, r, 9)
        lab = random_pool(m, r, seed % 3, prefix="l")
        sc = score_pool(m, pool)
        X = np.stack([s.features for s in pool + lab])
        outs = forward(m, X)
        N = X.shape[0]
        D = np.array([[symmetric_kl_distance(outs.row(i), outs.row(j), sc.weights) for j in range(N)] for i in range(N)])
        ids = [s.id for s in pool + lab]
        lab_out = forward(m, X[9:]) if lab else None
        got = select_coverage(sc, lab_out, 4)
        ref = coverage_from_distances(ids, D, list(range(9, N)), 4)
        assert got == ref


def test_farthest_first_half_guarantee_on_metric_pools(rng):
    for _ in range(50):
        n = int(rng.integers(3, 9))
        pts = rng.standard_normal((n, 2))
        D = np.sqrt(((pts[:, None] - pts[None]) ** 2).sum(-1))
        nl = int(rng.integers(0, 3)) if n > 3 else 0
        lab = list(range(n - nl, n))
        k = int(rng.integers(1 if nl else 2, n - nl + 1))
        ids = [str(i) for i in range(n)]
        got = [int(s) for s in coverage_from_distances(ids, D, lab, k)]
        opt = max(coverage_objective(D, list(c), lab) for c in itertools.combinations(range(n - nl), k))
        assert coverage_objective(D, got, lab) >= 0.5 * opt - 1e-12


# consensus --------------------------------------------------------------------------


def test_consensus_examples():
    sc = fake_scores({"1": 0.1, "2": 0.9, "3": 0.5, "4": 0.2, "5": 0.3})
    chosen, trace = consensus_select(["1", "2", "3"], ["2", "3", "4"], ["3", "4", "5"], sc, 2)
    assert chosen == ["3", "2"]
    assert [t["source"] for t in trace] == ["intersection", "fill"]
    chosen, trace = consensus_select(["1"], ["2"], ["3"], sc, 2)
    assert chosen == ["2", "3"] and all(t["source"] == "fill" for t in trace)
    chosen, _ = consensus_select(["1", "2", "3"], ["1", "2", "3"], ["1", "2", "3"], sc, 2)
    assert chosen == ["2", "3"]
    with pytest.raises(BudgetExceedsPool):
        consensus_select(["1"], ["1"], ["1"], sc, 6)


@given(st.integers(0, 10_000))
def test_acquire_contract(seed):
    m, _ = random_instance(seed % 50)
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 25))
    pool = random_pool(m, rng, n)
    lab = random_pool(m, rng, int(rng.integers(0, 4)), prefix="l")
    B = int(rng.integers(1, 8))
    cfg = AcquisitionConfig(B=B, k=B + int(rng.integers(0, 6)))
    sel, sc = acquire(m, pool, lab, cfg)
    assert len(sel.consensus) == len(set(sel.consensus)) == min(B, n)
    union = set(sel.swu_set) | set(sel.grad_set) | set(sel.cover_set)
    assert set(sel.consensus) <= union
    src = [t["source"] for t in sel.fill_trace]
    assert src == sorted(src, key=lambda s: s != "intersection")
    assert [t["id"] for t in sel.fill_trace] == sel.consensus
    again, _ = acquire(m, pool, lab, cfg)
    assert again.to_dict(sc) == sel.to_dict(sc)


def test_config_validation():
    assert AcquisitionConfig(B=4).k == 12
    with pytest.raises(ValueError):
        AcquisitionConfig(B=4, k=3)
    with pytest.raises(ValueError):
        AcquisitionConfig(B=1, p_norm=0.5)
