"""Counterfactual reruns, per-node Delta scores and selective module retraining."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import kernels
from .data import AnnotatedSample, ConceptPair, annotations_to_arrays, validate_pair
from .errors import EmptyDataset, InvalidNode, MalformedOracleOutput, MissingTruth
from .graph import ConceptGraph
from .model import (
    PROB_FLOOR,
    AdamW,
    GcpModel,
    NodeOutputs,
    TrainConfig,
    _ACTIVATIONS,
    node_nll,
    one_hot,
    propagate,
    softmax,
)


@dataclass(frozen=True)
class InterventionSet:
    nodes: frozenset
    truth_source: Mapping[str, int] = field(default_factory=dict)

    @classmethod
    def from_annotation(cls, graph: ConceptGraph, nodes: Iterable[str], annotated: AnnotatedSample) -> "InterventionSet":
        nodes = frozenset(nodes)
        truth = annotated.truth(graph)
        return cls(nodes, {n: truth[n] for n in nodes if n in truth})

    def validate(self, graph: ConceptGraph) -> None:
        for n in self.nodes:
            if n not in graph.non_root_ids:
                raise InvalidNode(f"cannot intervene on {n!r}")
            if n not in self.truth_source:
                raise MissingTruth(f"no truth value for intervened node {n!r}")


@dataclass
class CounterfactualResult:
    intervened_outputs: NodeOutputs
    final_loss: float


@dataclass
class DeltaReport:
    delta: dict[str, float]
    dataset_size: int
    retrain_set: list[str] = field(default_factory=list)
    per_sample_trace: dict[str, tuple[np.ndarray, np.ndarray]] | None = None

    def to_dict(self) -> dict:
        return {
            "delta": dict(self.delta),
            "dataset_size": self.dataset_size,
            "retrain_set": list(self.retrain_set),
        }


# reruns ----------------------------------------------------------------------------


def rerun(model: GcpModel, annotated: AnnotatedSample, S: InterventionSet | Iterable[str] = ()) -> CounterfactualResult:
    """Forward pass with the nodes of S pinned to the one-hot of their truth."""
    g = model.graph
    if not isinstance(S, InterventionSet):
        nodes = frozenset(S)
        for n in nodes:
            if n not in g.non_root_ids:
                raise InvalidNode(f"cannot intervene on {n!r}")
        S = InterventionSet.from_annotation(g, nodes, annotated)
    S.validate(g)
    X = annotated.sample.features[None, :]
    truth = {n: np.array([v], dtype=np.int64) for n, v in S.truth_source.items()}
    trace = propagate(model, X, truth, intervene=S.nodes)
    outs = NodeOutputs(trace.reps[g.root_id], {n: trace.reps[n] for n in g.non_root_ids}).row(0)
    y = np.array([annotated.label], dtype=np.int64)
    final = float(node_nll(trace.reps[g.output_id], y)[0])
    return CounterfactualResult(outs, final)


def parent_set(graph: ConceptGraph, node: str) -> frozenset:
    """Interveneable parents of a node (the root carries no discrete truth)."""
    return frozenset(p for p in graph.parents(node) if p != graph.root_id)


def parent_corrected_losses(model: GcpModel, annotated: AnnotatedSample, node: str) -> tuple[float, float]:
    g = model.graph
    if node not in g.non_root_ids:
        raise InvalidNode(f"{node!r} is not a scoreable node")
    pa = parent_set(g, node)
    l_pa = rerun(model, annotated, pa).final_loss
    l_pai = rerun(model, annotated, pa | {node}).final_loss
    return l_pa, l_pai


def delta_scores(
    model: GcpModel,
    data: Sequence[AnnotatedSample],
    nodes: Sequence[str] | None = None,
    keep_trace: bool = False,
) -> DeltaReport:
    """Mean final-loss reduction from correcting each node after its parents."""
    if not data:
        raise EmptyDataset("delta scores need annotated data")
    g = model.graph
    nodes = list(nodes or g.non_root_ids)
    for n in nodes:
        if n not in g.non_root_ids:
            raise InvalidNode(f"{n!r} is not a scoreable node")
    X, truth = annotations_to_arrays(g, data)
    sets_pa = [parent_set(g, n) for n in nodes]
    sets_pai = [s | {n} for s, n in zip(sets_pa, nodes)]
    l_pa, l_pai = kernels.counterfactual_losses(model, X, truth, nodes, sets_pa, sets_pai)
    diff = l_pa - l_pai
    delta = {n: float(diff[:, t].mean()) for t, n in enumerate(nodes)}
    trace = {n: (l_pa[:, t].copy(), l_pai[:, t].copy()) for t, n in enumerate(nodes)} if keep_trace else None
    return DeltaReport(delta, len(data), [], trace)


def select_retrain_set(
    delta: Mapping[str, float],
    b: int,
    exclude: Iterable[str] = (),
    positive_only: bool = True,
) -> list[str]:
    """The b nodes with largest Delta (ties by ascending id), best first.

    With ``positive_only`` nodes whose Delta is not positive are dropped, so
    the set may be smaller than b.
    """
    if b < 1:
        raise ValueError("b must be >= 1")
    exclude = set(exclude)
    cand = [n for n in delta if n not in exclude]
    ranked = sorted(cand, key=lambda n: (-delta[n], n))[:b]
    if positive_only:
        ranked = [n for n in ranked if delta[n] > 0]
    return ranked


# augmentation -------------------------------------------------------------------------


def augment_node_data(oracle, graph: ConceptGraph, node: str, K: int, max_retries: int = 3) -> list[ConceptPair]:
    """Ask the oracle for K valid parent-child pairs for ``node``.

    Invalid pairs are dropped and re-requested up to ``max_retries`` times.
    """
    if K <= 0:
        return []
    if node not in graph.non_root_ids:
        raise InvalidNode(f"{node!r} has no concept module to augment")
    good: list[ConceptPair] = []
    for _ in range(max_retries + 1):
        need = K - len(good)
        batch = oracle.generate_pairs(node, need)
        good.extend(p for p in batch if validate_pair(graph, p))
        if len(good) >= K:
            return good[:K]
    raise MalformedOracleOutput(f"oracle returned too few valid pairs for {node!r} after {max_retries} retries")


# module retraining -------------------------------------------------------------------


def _module_inputs(model: GcpModel, node: str, X: np.ndarray | None, parents: Mapping[str, np.ndarray]) -> np.ndarray:
    """Teacher-forced input of one module: root latent and one-hot parent values."""
    g = model.graph
    parts = []
    for p in g.parents(node):
        if p == g.root_id:
            parts.append(propagate_root(model, X))
        else:
            parts.append(one_hot(parents[p], g.cardinality(p)))
    return parts[0] if len(parts) == 1 else np.concatenate(parts, axis=1)


def propagate_root(model: GcpModel, X: np.ndarray) -> np.ndarray:
    act, _ = _ACTIVATIONS[model.config.activation]
    P = model.params[model.graph.root_id]
    return act(X @ P["W1"] + P["b1"]) @ P["W2"] + P["b2"]


def _module_step(model: GcpModel, node: str, inp: np.ndarray, y: np.ndarray, rate: float, rng) -> tuple[float, np.ndarray]:
    """Mean cross-entropy of one module and its gradient in the flat layout."""
    act, act_grad = _ACTIVATIONS[model.config.activation]
    P = model.params[node]
    a = inp @ P["W1"] + P["b1"]
    z = act(a)
    mask = None
    zd = z
    if rate > 0.0:
        mask = (rng.random(z.shape) >= rate) / (1.0 - rate)
        zd = z * mask
    p = softmax(zd @ P["W2"] + P["b2"])
    n = inp.shape[0]
    py = np.take_along_axis(p, y[:, None], axis=1)
    dout = (p - one_hot(y, p.shape[1])) * (py >= PROB_FLOOR) / n
    buf, grads = model.zeros_like_params()
    G = grads[node]
    G["W2"][...] = zd.T @ dout
    G["b2"][...] = dout.sum(axis=0)
    dz = dout @ P["W2"].T
    if mask is not None:
        dz = dz * mask
    da = dz * act_grad(a, z)
    G["W1"][...] = inp.T @ da
    G["b1"][...] = da.sum(axis=0)
    return float(-np.log(np.clip(py, PROB_FLOOR, 1.0)).mean()), buf


@dataclass
class _ModuleData:
    X: np.ndarray | None
    parents: dict[str, np.ndarray]
    y: np.ndarray

    def __len__(self) -> int:
        return len(self.y)

    def take(self, idx: np.ndarray) -> "_ModuleData":
        return _ModuleData(
            None if self.X is None else self.X[idx], {k: v[idx] for k, v in self.parents.items()}, self.y[idx]
        )


def _annotated_module_data(graph: ConceptGraph, node: str, data: Sequence[AnnotatedSample]) -> _ModuleData | None:
    if not data:
        return None
    X, truth = annotations_to_arrays(graph, data)
    pa = [p for p in graph.parents(node) if p != graph.root_id]
    needs_x = graph.root_id in graph.parents(node)
    return _ModuleData(X if needs_x else None, {p: truth[p] for p in pa}, truth[node])


def _pair_module_data(graph: ConceptGraph, node: str, pairs: Sequence[ConceptPair]) -> _ModuleData | None:
    pairs = [p for p in pairs if p.node == node]
    if not pairs:
        return None
    pa = [p for p in graph.parents(node) if p != graph.root_id]
    needs_x = graph.root_id in graph.parents(node)
    X = np.stack([p.features for p in pairs]) if needs_x else None
    parents = {q: np.array([p.parents[q] for p in pairs], dtype=np.int64) for q in pa}
    return _ModuleData(X, parents, np.array([p.child for p in pairs], dtype=np.int64))


def _concat(a: _ModuleData, b: _ModuleData) -> _ModuleData:
    X = None if a.X is None else np.concatenate([a.X, b.X])
    return _ModuleData(X, {k: np.concatenate([a.parents[k], b.parents[k]]) for k in a.parents}, np.concatenate([a.y, b.y]))


def module_nll(model: GcpModel, node: str, data: Sequence[AnnotatedSample]) -> float:
    """Teacher-forced mean NLL of one module on annotated data."""
    md = _annotated_module_data(model.graph, node, data)
    if md is None:
        raise EmptyDataset("no data to evaluate")
    inp = _module_inputs(model, node, md.X, md.parents)
    P = model.params[node]
    act, _ = _ACTIVATIONS[model.config.activation]
    p = softmax(act(inp @ P["W1"] + P["b1"]) @ P["W2"] + P["b2"])
    return float(node_nll(p, md.y).mean())


def _fit_module(model: GcpModel, node: str, annotated: _ModuleData | None, generated: _ModuleData | None, cfg: TrainConfig) -> None:
    rng = np.random.default_rng(cfg.seed)
    opt = AdamW(model.n_params, cfg)
    sl = [model.node_slices[node]]
    sources = [d for d in (annotated, generated) if d is not None and len(d)]
    bs = cfg.batch_size
    if len(sources) == 2:
        # equal shares from annotated and generated pairs in every batch
        half = max(bs // 2, 1)
        steps = math.ceil(max(len(s) for s in sources) / half)
        for _ in range(cfg.max_epochs):
            orders = [rng.permutation(len(s)) for s in sources]
            for t in range(steps):
                parts = []
                for s, o in zip(sources, orders):
                    idx = o[(np.arange(t * half, (t + 1) * half)) % len(s)]
                    parts.append(s.take(idx))
                batch = _concat(parts[0], parts[1])
                inp = _module_inputs(model, node, batch.X, batch.parents)
                _, grad = _module_step(model, node, inp, batch.y, cfg.dropout_rate, rng)
                opt.step(model.flat, grad, sl)
    else:
        src = sources[0]
        for _ in range(cfg.max_epochs):
            order = rng.permutation(len(src))
            for start in range(0, len(src), bs):
                batch = src.take(order[start : start + bs])
                inp = _module_inputs(model, node, batch.X, batch.parents)
                _, grad = _module_step(model, node, inp, batch.y, cfg.dropout_rate, rng)
                opt.step(model.flat, grad, sl)


def retrain_submodules(
    model: GcpModel,
    retrain_set: Iterable[str],
    annotated: Sequence[AnnotatedSample],
    augmented: Sequence[ConceptPair] = (),
    config: TrainConfig | None = None,
) -> GcpModel:
    """Retrain each listed module on teacher-forced parent-child supervision.

    Every other module is left bit-identical. Works in place and returns the model.
    """
    cfg = config or model.config
    g = model.graph
    for node in retrain_set:
        if node not in g.non_root_ids:
            raise InvalidNode(f"{node!r} has no concept module")
        a = _annotated_module_data(g, node, annotated)
        b = _pair_module_data(g, node, augmented)
        if a is None and b is None:
            raise EmptyDataset(f"no supervision for {node!r}")
        _fit_module(model, node, a, b, cfg)
    if not model.all_finite():
        raise FloatingPointError("non-finite parameters after retraining")
    return model
