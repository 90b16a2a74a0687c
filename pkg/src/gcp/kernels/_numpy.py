"""Pure-numpy reference implementations of the hot kernels."""
import heapq

import numpy as np

PROB_FLOOR = 1e-12
_CHUNK = 512


def _row_sums(D):
    return D.sum(axis=1)


def kmedoids_build(D, k):
    n = D.shape[0]
    first = int(np.argmin(_row_sums(D)))
    medoids = [first]
    nearest = D[first].copy()
    chosen = np.zeros(n, dtype=bool)
    chosen[first] = True
    gains = np.empty(n)
    for s in range(0, n, _CHUNK):
        gains[s : s + _CHUNK] = np.maximum(nearest[None, :] - D[s : s + _CHUNK], 0.0).sum(axis=1)
    heap = [(-gains[i], i) for i in range(n) if not chosen[i]]
    heapq.heapify(heap)
    stamp = np.zeros(n, dtype=np.int64)
    for r in range(1, k):
        while True:
            _, i = heapq.heappop(heap)
            if stamp[i] == r:
                break
            stamp[i] = r
            heapq.heappush(heap, (-float(np.maximum(nearest - D[i], 0.0).sum()), i))
        medoids.append(i)
        np.minimum(nearest, D[i], out=nearest)
    return np.asarray(medoids, dtype=np.int64)


def kmedoids_refine(D, medoids, max_iter):
    med = np.array(medoids, dtype=np.int64)
    k = len(med)
    labels = np.argmin(D[:, med], axis=1)
    for _ in range(max_iter):
        changed = False
        for c in range(k):
            members = np.flatnonzero(labels == c)
            if members.size == 0:
                continue
            cost = D[np.ix_(members, members)].sum(axis=1)
            best = int(members[np.argmin(cost)])
            if best != med[c]:
                med[c] = best
                changed = True
        if not changed:
            break
        labels = np.argmin(D[:, med], axis=1)
    return med, labels


def _sym_kl_block(P, LP, Q, LQ, node_ptr, w):
    """Symmetrized weighted KL between every row of P and every row of Q."""
    out = np.zeros((P.shape[0], Q.shape[0]))
    for u in range(len(w)):
        s = slice(node_ptr[u], node_ptr[u + 1])
        cross_pq = P[:, s] @ LQ[:, s].T
        cross_qp = LP[:, s] @ Q[:, s].T
        self_p = np.sum(P[:, s] * LP[:, s], axis=1)[:, None]
        self_q = np.sum(Q[:, s] * LQ[:, s], axis=1)[None, :]
        kl_pq = np.maximum(self_p - cross_pq, 0.0)
        kl_qp = np.maximum(self_q - cross_qp, 0.0)
        out += w[u] * (kl_pq + kl_qp)
    return 0.5 * out


def farthest_first_kl(P, LP, Q, LQ, node_ptr, w, k):
    n = P.shape[0]
    selected = np.empty(k, dtype=np.int64)
    gaps = np.empty(k)
    taken = np.zeros(n, dtype=bool)
    if Q.shape[0] > 0:
        mind = np.full(n, np.inf)
        for s in range(0, Q.shape[0], _CHUNK):
            mind = np.minimum(mind, _sym_kl_block(P, LP, Q[s : s + _CHUNK], LQ[s : s + _CHUNK], node_ptr, w).min(axis=1))
        first = 0
    else:
        sums = np.empty(n)
        for s in range(0, n, _CHUNK):
            sums[s : s + _CHUNK] = _sym_kl_block(P[s : s + _CHUNK], LP[s : s + _CHUNK], P, LP, node_ptr, w).sum(axis=1)
        start = int(np.argmin(sums))
        selected[0], gaps[0], taken[start] = start, np.inf, True
        mind = _sym_kl_block(P, LP, P[start : start + 1], LP[start : start + 1], node_ptr, w)[:, 0]
        first = 1
    for r in range(first, k):
        masked = np.where(taken, -np.inf, mind)
        best = int(np.argmax(masked))
        selected[r], gaps[r], taken[best] = best, masked[best], True
        d = _sym_kl_block(P, LP, P[best : best + 1], LP[best : best + 1], node_ptr, w)[:, 0]
        np.minimum(mind, d, out=mind)
    return selected, gaps


def farthest_first_matrix(D, seed_dist, k, start):
    n = D.shape[0]
    selected = np.empty(k, dtype=np.int64)
    gaps = np.empty(k)
    taken = np.zeros(n, dtype=bool)
    mind = np.array(seed_dist, dtype=np.float64)
    first = 0
    if start >= 0:
        selected[0], gaps[0], taken[start] = start, np.inf, True
        np.minimum(mind, D[start], out=mind)
        first = 1
    for r in range(first, k):
        masked = np.where(taken, -np.inf, mind)
        best = int(np.argmax(masked))
        selected[r], gaps[r], taken[best] = best, masked[best], True
        np.minimum(mind, D[best], out=mind)
    return selected, gaps


def counterfactual_losses(model, X, truth, targets, sets_pa, sets_pai):
    """Batched reruns: one vectorized pass over all samples per intervention."""
    from ..model import node_nll, propagate

    out = model.graph.output_id
    N, T = X.shape[0], len(targets)
    l_pa = np.empty((N, T))
    l_pai = np.empty((N, T))
    for t in range(T):
        for sets, dest in ((sets_pa, l_pa), (sets_pai, l_pai)):
            trace = propagate(model, X, truth, intervene=sets[t])
            dest[:, t] = node_nll(trace.reps[out], truth[out])
    return l_pa, l_pai
