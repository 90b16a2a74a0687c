"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The active path follows :func:`gcp._backend.backend`; set
``GCP_DISABLE_NUMBA=1`` to force numpy.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .. import _backend
from . import _numpy

if _backend.HAVE_NUMBA:
    from . import _numba
else:  # pragma: no cover
    _numba = None


def _use_numba() -> bool:
    return _backend.backend() == "numba"


@dataclass(frozen=True)
class PackedModel:
    """Index-based view of a :class:`GcpModel` for compiled kernels.

    Nodes are numbered by topological position: the root is 0 and the output
    is the last node.
    """

    flat: np.ndarray
    in_dim: np.ndarray
    hid: np.ndarray
    out_dim: np.ndarray
    w1o: np.ndarray
    b1o: np.ndarray
    w2o: np.ndarray
    b2o: np.ndarray
    par_ptr: np.ndarray
    par_idx: np.ndarray
    rep_off: np.ndarray
    act: int


def pack_model(model) -> PackedModel:
    from ..model import ACTIVATION_CODES

    g = model.graph
    order = list(g.topo_order)
    pos = {n: i for i, n in enumerate(order)}
    V = len(order)
    ints = lambda: np.zeros(V, dtype=np.int64)  # noqa: E731
    in_dim, hid, out_dim = ints(), ints(), ints()
    w1o, b1o, w2o, b2o, rep_off = ints(), ints(), ints(), ints(), ints()
    par_ptr = np.zeros(V + 1, dtype=np.int64)
    par_idx = []
    off = 0
    for i, n in enumerate(order):
        lay = model.layout[n]
        in_dim[i] = model.in_width(n)
        hid[i] = model.config.hidden_dim
        out_dim[i] = model.rep_width(n)
        w1o[i], b1o[i], w2o[i], b2o[i] = (lay[k][0] for k in ("W1", "b1", "W2", "b2"))
        rep_off[i] = off
        off += out_dim[i]
        par_idx.extend(pos[p] for p in g.parents(n))
        par_ptr[i + 1] = len(par_idx)
    return PackedModel(
        np.ascontiguousarray(model.flat), in_dim, hid, out_dim, w1o, b1o, w2o, b2o,
        par_ptr, np.asarray(par_idx, dtype=np.int64), rep_off,
        ACTIVATION_CODES[model.config.activation],
    )


def counterfactual_losses(
    model,
    X: np.ndarray,
    truth: Mapping[str, np.ndarray],
    targets: Sequence[str],
    sets_pa: Sequence[frozenset],
    sets_pai: Sequence[frozenset],
) -> tuple[np.ndarray, np.ndarray]:
    """Final-label losses under do(S) for paired intervention sets.

    Returns two ``(N, len(targets))`` arrays, one per set family.
    """
    if not _use_numba():
        return _numpy.counterfactual_losses(model, X, truth, targets, sets_pa, sets_pai)
    g = model.graph
    order = list(g.topo_order)
    pos = {n: i for i, n in enumerate(order)}
    pk = pack_model(model)
    N, V, T = X.shape[0], len(order), len(targets)
    tm = np.full((N, V), -1, dtype=np.int64)
    for n in g.non_root_ids:
        tm[:, pos[n]] = truth[n]
    m_pa = np.zeros((T, V), dtype=np.bool_)
    m_pai = np.zeros((T, V), dtype=np.bool_)
    for t in range(T):
        for n in sets_pa[t]:
            m_pa[t, pos[n]] = True
        for n in sets_pai[t]:
            m_pai[t, pos[n]] = True
    return _numba.counterfactual_losses(
        pk.flat, pk.in_dim, pk.hid, pk.out_dim, pk.w1o, pk.b1o, pk.w2o, pk.b2o,
        pk.par_ptr, pk.par_idx, pk.rep_off, pk.act,
        np.ascontiguousarray(X, dtype=np.float64), tm, m_pa, m_pai,
    )


def kmedoids(D: np.ndarray, k: int, max_iter: int = 20) -> tuple[np.ndarray, np.ndarray]:
    """Greedy BUILD then alternating assignment / medoid update.

    Returns ``(medoids, labels)``; ties resolve to the lowest index.
    """
    D = np.ascontiguousarray(D, dtype=np.float64)
    impl = _numba if _use_numba() else _numpy
    medoids = impl.kmedoids_build(D, int(k))
    return impl.kmedoids_refine(D, medoids, int(max_iter))


def farthest_first_kl(P, Q, node_ptr, weights, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Farthest-first traversal under symmetrized weighted KL.

    ``P`` holds pool distributions (rows, node blocks given by ``node_ptr``),
    ``Q`` the already-labeled ones. With empty ``Q`` the traversal starts at
    the pool's 1-medoid. Returns selected pool indices and, per pick, its
    distance to the previously covered set.
    """
    P = np.clip(np.ascontiguousarray(P, dtype=np.float64), 1e-12, 1.0)
    Q = np.clip(np.ascontiguousarray(Q, dtype=np.float64), 1e-12, 1.0).reshape(-1, P.shape[1])
    LP, LQ = np.log(P), np.log(Q)
    ptr = np.asarray(node_ptr, dtype=np.int64)
    w = np.asarray(weights, dtype=np.float64)
    impl = _numba if _use_numba() else _numpy
    return impl.farthest_first_kl(P, LP, Q, LQ, ptr, w, int(k))


def farthest_first_matrix(D, seed_dist=None, k: int = 1, start: int = -1):
    """Farthest-first traversal on a precomputed distance matrix."""
    D = np.ascontiguousarray(D, dtype=np.float64)
    n = D.shape[0]
    sd = np.full(n, np.inf) if seed_dist is None else np.asarray(seed_dist, dtype=np.float64)
    impl = _numba if _use_numba() else _numpy
    return impl.farthest_first_matrix(D, sd, int(k), int(start))
