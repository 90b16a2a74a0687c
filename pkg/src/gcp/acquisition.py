"""Graph-aware acquisition: weighted uncertainty, gradient medoids, KL coverage, consensus."""
from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import kernels
from .data import Sample, stack_features
from .errors import (
    BudgetExceedsPool,
    InvalidDistribution,
    LengthMismatch,
    NodeSetMismatch,
    PoolTooSmall,
)
from .graph import degree_weights
from .model import PROB_FLOOR, GcpModel, NodeOutputs, forward, gradient_factors

MAX_DENSE_POOL = 5000


@dataclass
class AcquisitionConfig:
    B: int = 10
    k: int | None = None  # defaults to 3 * B
    p_norm: float = 2.0
    medoid_iters: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.k is None:
            self.k = 3 * self.B
        if self.B < 1 or self.k < self.B:
            raise ValueError("need k >= B >= 1")
        if self.p_norm < 1:
            raise ValueError("p_norm must be >= 1")


# scores ------------------------------------------------------------------------


def node_entropy(distribution, atol: float = 1e-6) -> float:
    """Shannon entropy in nats; 0 log 0 counts as 0."""
    p = np.asarray(distribution, dtype=np.float64)
    if p.ndim != 1 or np.any(p < 0) or abs(p.sum() - 1.0) > atol:
        raise InvalidDistribution(f"not a probability vector: {p}")
    nz = p[p > 0]
    return float(max(-(nz * np.log(nz)).sum(), 0.0))


def _entropies(p: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(p > 0, p * np.log(p), 0.0)
    return np.maximum(-t.sum(axis=-1), 0.0)


def _weighted_pnorm(terms: np.ndarray, w: np.ndarray, p: float) -> np.ndarray:
    """(sum_i w_i t_i^p)^(1/p) along the last axis."""
    if p == 1.0:
        return terms @ w
    return (np.power(terms, p) @ w) ** (1.0 / p)


def structure_weighted_uncertainty(outputs: NodeOutputs, weights: Mapping[str, float], p_norm: float = 2.0) -> float:
    """Degree-weighted p-norm of per-node entropies (non-root nodes only)."""
    ids = list(weights)
    if set(ids) != set(outputs.distributions):
        raise NodeSetMismatch("weights and outputs cover different nodes")
    H = np.array([node_entropy(outputs.distributions[n]) for n in ids])
    w = np.array([weights[n] for n in ids])
    return float(_weighted_pnorm(H, w, p_norm))


def acquisition_weights(model: GcpModel) -> dict[str, float]:
    return degree_weights(model.graph, exclude_root=True)


@dataclass
class PoolScores:
    """Everything acquisition needs from one model snapshot, rows sorted by id."""

    ids: list[str]
    e_unc: np.ndarray
    outputs: NodeOutputs
    factors: dict[str, tuple[np.ndarray, np.ndarray]]
    weights: dict[str, float]
    p_norm: float
    index: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        self.index = {sid: i for i, sid in enumerate(self.ids)}

    def __len__(self) -> int:
        return len(self.ids)

    def z(self, sample_id: str) -> dict[str, np.ndarray]:
        """Explicit per-node gradient embedding of one pool sample."""
        i = self.index[sample_id]
        out = {}
        for n, (A, R) in self.factors.items():
            out[n] = np.concatenate([np.outer(A[i, :-1], R[i]).ravel(), R[i]])
        return out


def score_pool(model: GcpModel, pool: Sequence[Sample], p_norm: float = 2.0) -> PoolScores:
    ordered = sorted(pool, key=lambda s: s.id)
    X = stack_features(ordered)
    outputs = forward(model, X)
    weights = acquisition_weights(model)
    ids = list(weights)
    H = np.stack([_entropies(outputs.distributions[n]) for n in ids], axis=1)
    e_unc = _weighted_pnorm(H, np.array([weights[n] for n in ids]), p_norm)
    factors = gradient_factors(model, X, ids)
    return PoolScores([s.id for s in ordered], e_unc, outputs, factors, weights, p_norm)


def _check_k(n: int, k: int) -> None:
    if k < 1:
        raise ValueError("k must be >= 1")
    if n < k:
        raise PoolTooSmall(f"pool of {n} cannot supply {k} candidates")


def _rank_by_score(ids: Sequence[str], scores: np.ndarray) -> list[int]:
    # descending score, ascending id on ties
    return sorted(range(len(ids)), key=lambda i: (-scores[i], ids[i]))


def select_swu(scores: PoolScores, k: int) -> list[str]:
    """Top-k pool ids by E_unc, in rank order."""
    _check_k(len(scores), k)
    return [scores.ids[i] for i in _rank_by_score(scores.ids, scores.e_unc)[:k]]


# gradient diversity --------------------------------------------------------------


def gradient_distance(zx: Mapping[str, np.ndarray], zy: Mapping[str, np.ndarray], weights: Mapping[str, float], p_norm: float = 2.0) -> float:
    ids = list(weights)
    terms = []
    for n in ids:
        a, b = np.asarray(zx[n]), np.asarray(zy[n])
        if a.shape != b.shape:
            raise LengthMismatch(f"node {n!r}: {a.shape} vs {b.shape}")
        terms.append(np.linalg.norm(a - b))
    return float(_weighted_pnorm(np.array(terms), np.array([weights[n] for n in ids]), p_norm))


def _grad_rows(scores: PoolScores, rows: np.ndarray, cols: np.ndarray | None = None) -> np.ndarray:
    """D_grad between pool rows and columns from the factored embeddings."""
    ids = list(scores.weights)
    p = scores.p_norm
    acc = None
    for n in ids:
        A, R = scores.factors[n]
        Ar, Rr = A[rows], R[rows]
        Ac, Rc = (A, R) if cols is None else (A[cols], R[cols])
        na_r = np.einsum("ij,ij->i", Ar, Ar) * np.einsum("ij,ij->i", Rr, Rr)
        na_c = np.einsum("ij,ij->i", Ac, Ac) * np.einsum("ij,ij->i", Rc, Rc)
        sq = (Ar @ Ac.T) * (Rr @ Rc.T)
        sq *= -2.0
        sq += na_r[:, None]
        sq += na_c[None, :]
        np.maximum(sq, 0.0, out=sq)
        term = sq if p == 2.0 else np.power(sq, p / 2.0)
        term *= scores.weights[n]
        acc = term if acc is None else acc + term
    return np.sqrt(acc) if p == 2.0 else np.power(acc, 1.0 / p)


def pairwise_gradient_distances(scores: PoolScores, chunk: int = 1024) -> np.ndarray:
    n = len(scores)
    D = np.empty((n, n))
    for s in range(0, n, chunk):
        rows = np.arange(s, min(s + chunk, n))
        D[rows] = _grad_rows(scores, rows)
    D = 0.5 * (D + D.T)
    np.fill_diagonal(D, 0.0)
    return D


def _kmedoids_on_demand(scores: PoolScores, k: int, max_iter: int, chunk: int = 1024):
    """Same algorithm as :func:`kernels.kmedoids` without materializing D."""
    n = len(scores)

    def row(i):
        r = _grad_rows(scores, np.array([i]))[0]
        r[i] = 0.0
        return r

    sums = np.empty(n)
    for s in range(0, n, chunk):
        rows = np.arange(s, min(s + chunk, n))
        blk = _grad_rows(scores, rows)
        blk[np.arange(len(rows)), rows] = 0.0
        sums[rows] = blk.sum(axis=1)
    first = int(np.argmin(sums))
    med = [first]
    nearest = row(first)
    heap = [(-float(np.maximum(nearest - row(i), 0.0).sum()), i) for i in range(n) if i != first]
    heapq.heapify(heap)
    stamp = np.zeros(n, dtype=np.int64)
    for r in range(1, k):
        while True:
            _, i = heapq.heappop(heap)
            if stamp[i] == r:
                break
            stamp[i] = r
            heapq.heappush(heap, (-float(np.maximum(nearest - row(i), 0.0).sum()), i))
        med.append(i)
        np.minimum(nearest, row(i), out=nearest)
    med = np.array(med, dtype=np.int64)

    def assign(med):
        cols = np.stack([row(m) for m in med], axis=1)
        return np.argmin(cols, axis=1)

    labels = assign(med)
    for _ in range(max_iter):
        changed = False
        for c in range(k):
            members = np.flatnonzero(labels == c)
            if members.size == 0:
                continue
            blk = _grad_rows(scores, members, members)
            blk[np.arange(members.size), np.arange(members.size)] = 0.0
            best = int(members[np.argmin(blk.sum(axis=1))])
            if best != med[c]:
                med[c] = best
                changed = True
        if not changed:
            break
        labels = assign(med)
    return med, labels


def medoids_from_distances(ids: Sequence[str], D: np.ndarray, k: int, medoid_iters: int = 20) -> list[str]:
    """k-medoids on an explicit distance matrix; returns one id per cluster."""
    _check_k(len(ids), k)
    med, _ = kernels.kmedoids(D, k, medoid_iters)
    return [ids[i] for i in med]


def select_gradient_medoids(scores: PoolScores, k: int, config: AcquisitionConfig | None = None) -> list[str]:
    """One medoid per cluster of a k-medoids partition under D_grad."""
    cfg = config or AcquisitionConfig(B=1, k=max(k, 1))
    _check_k(len(scores), k)
    if len(scores) <= MAX_DENSE_POOL:
        med, _ = kernels.kmedoids(pairwise_gradient_distances(scores), k, cfg.medoid_iters)
    else:
        med, _ = _kmedoids_on_demand(scores, k, cfg.medoid_iters)
    return [scores.ids[i] for i in med]


# representativeness ------------------------------------------------------------------


def kl_distance(outputs_x: NodeOutputs, outputs_y: NodeOutputs, weights: Mapping[str, float]) -> float:
    """Degree-weighted sum of per-node KL(p_i(x) || p_i(y)), clamped to [1e-12, 1]."""
    if set(outputs_x.distributions) != set(outputs_y.distributions) or not set(weights) <= set(outputs_x.distributions):
        raise NodeSetMismatch("outputs cover different node sets")
    total = 0.0
    for n, w in weights.items():
        p = np.clip(np.asarray(outputs_x.distributions[n], dtype=np.float64), PROB_FLOOR, 1.0)
        q = np.clip(np.asarray(outputs_y.distributions[n], dtype=np.float64), PROB_FLOOR, 1.0)
        total += w * max(float(np.sum(p * (np.log(p) - np.log(q)))), 0.0)
    return total


def symmetric_kl_distance(outputs_x: NodeOutputs, outputs_y: NodeOutputs, weights: Mapping[str, float]) -> float:
    return 0.5 * (kl_distance(outputs_x, outputs_y, weights) + kl_distance(outputs_y, outputs_x, weights))


def _stack_dists(outputs: NodeOutputs, ids: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
    blocks = [np.atleast_2d(outputs.distributions[n]) for n in ids]
    ptr = np.cumsum([0] + [b.shape[1] for b in blocks])
    return np.concatenate(blocks, axis=1), ptr


def select_coverage(
    scores: PoolScores,
    labeled_outputs: NodeOutputs | None,
    k: int,
    config: AcquisitionConfig | None = None,
) -> list[str]:
    """Greedy farthest-first core-set under symmetrized D_KL, in pick order."""
    _check_k(len(scores), k)
    ids = list(scores.weights)
    P, ptr = _stack_dists(scores.outputs, ids)
    if labeled_outputs is None or np.atleast_2d(labeled_outputs.root_latent).shape[0] == 0:
        Q = np.zeros((0, P.shape[1]))
    else:
        Q, _ = _stack_dists(labeled_outputs, ids)
    w = np.array([scores.weights[n] for n in ids])
    sel, _ = kernels.farthest_first_kl(P, Q, ptr, w, k)
    return [scores.ids[i] for i in sel]


def coverage_from_distances(ids: Sequence[str], D: np.ndarray, labeled: Sequence[int], k: int) -> list[str]:
    """Farthest-first traversal on an explicit symmetric distance matrix.

    ``labeled`` indexes rows of ``D`` that are already covered and never picked.
    Without labeled rows the traversal starts from the 1-medoid.
    """
    D = np.asarray(D, dtype=np.float64)
    lab = np.asarray(list(labeled), dtype=np.int64)
    cand = np.setdiff1d(np.arange(D.shape[0]), lab)
    _check_k(cand.size, k)
    sub = D[np.ix_(cand, cand)]
    if lab.size:
        sel, _ = kernels.farthest_first_matrix(sub, D[np.ix_(cand, lab)].min(axis=1), k)
    else:
        sel, _ = kernels.farthest_first_matrix(sub, None, k, int(np.argmin(sub.sum(axis=1))))
    return [ids[cand[i]] for i in sel]


def coverage_objective(D: np.ndarray, chosen: Sequence[int], labeled: Sequence[int] = ()) -> float:
    """min over chosen x of the distance to the rest of L u S (x excluded).

    The max-min dispersion value of a chosen set; farthest-first achieves at
    least half the optimum when D is a metric.
    """
    chosen = list(chosen)
    others = list(labeled) + chosen
    best = np.inf
    for x in chosen:
        for y in others:
            if y != x:
                best = min(best, D[x, y])
    return float(best)


# consensus -----------------------------------------------------------------------------


@dataclass
class SelectionResult:
    swu_set: list[str]
    grad_set: list[str]
    cover_set: list[str]
    consensus: list[str]
    fill_trace: list[dict]

    def to_dict(self, scores: PoolScores | None = None) -> dict:
        d = {
            "chosen": list(self.consensus),
            "swu_set": sorted(self.swu_set),
            "grad_set": sorted(self.grad_set),
            "cover_set": sorted(self.cover_set),
            "fill_trace": self.fill_trace,
        }
        if scores is not None:
            union = sorted(set(self.swu_set) | set(self.grad_set) | set(self.cover_set))
            d["e_unc"] = {sid: float(scores.e_unc[scores.index[sid]]) for sid in union}
        return d


def consensus_select(
    swu_set: Sequence[str],
    grad_set: Sequence[str],
    cover_set: Sequence[str],
    scores: PoolScores,
    B: int,
) -> tuple[list[str], list[dict]]:
    """Intersection first (by E_unc), then union members by descending E_unc."""
    if B > len(scores):
        raise BudgetExceedsPool(f"budget {B} exceeds pool of {len(scores)}")

    def key(sid):
        return (-scores.e_unc[scores.index[sid]], sid)

    inter = set(swu_set) & set(grad_set) & set(cover_set)
    union = set(swu_set) | set(grad_set) | set(cover_set)
    chosen = sorted(inter, key=key)[:B]
    trace = [{"id": s, "source": "intersection"} for s in chosen]
    if len(chosen) < B:
        fill = sorted(union - inter, key=key)[: B - len(chosen)]
        chosen += fill
        trace += [{"id": s, "source": "fill"} for s in fill]
    return chosen, trace


def acquire(
    model: GcpModel,
    pool: Sequence[Sample],
    labeled: Sequence[Sample],
    config: AcquisitionConfig,
) -> tuple[SelectionResult, PoolScores]:
    """Score the pool against one model snapshot and pick min(B, |pool|) samples."""
    scores = score_pool(model, pool, config.p_norm)
    n = len(scores)
    B = min(config.B, n)
    k = min(config.k, n)
    swu = select_swu(scores, k)
    grad = select_gradient_medoids(scores, k, config)
    lab_out = forward(model, stack_features(list(labeled))) if labeled else None
    cover = select_coverage(scores, lab_out, k, config)
    chosen, trace = consensus_select(swu, grad, cover, scores, B)
    return SelectionResult(swu, grad, cover, chosen, trace), scores
