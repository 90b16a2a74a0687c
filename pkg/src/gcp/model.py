"""Graph of concept predictors: per-node MLPs, propagation, gradients, training."""
from __future__ import annotations

import copy
import hashlib
import itertools
from dataclasses import asdict, dataclass, field, fields
from typing import Iterable, Mapping, Sequence

import numpy as np

from .data import AnnotatedSample, Sample, annotations_to_arrays
from .errors import (
    DimensionMismatch,
    EmptyDataset,
    MissingAnnotation,
    RootNodeHasNoDistribution,
)
from .graph import ConceptGraph

PROB_FLOOR = 1e-12
PARAM_KEYS = ("W1", "b1", "W2", "b2")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 8
    hidden_dim: int = 256
    dropout_rate: float = 0.1
    max_epochs: int = 50
    seed: int = 0
    weight_decay: float = 0.01
    latent_dim: int = 64
    activation: str = "tanh"
    teacher_forcing: bool = True
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1 or self.hidden_dim < 1 or self.latent_dim < 1:
            raise ValueError("batch_size, hidden_dim and latent_dim must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def _tanh_grad(a, z):
    return 1.0 - z * z


def _relu(a):
    return np.maximum(a, 0.0)


def _relu_grad(a, z):
    return (a > 0).astype(a.dtype)


_ACTIVATIONS = {"tanh": (np.tanh, _tanh_grad), "relu": (_relu, _relu_grad)}
ACTIVATION_CODES = {"tanh": 0, "relu": 1}


@dataclass
class NodeOutputs:
    """Root latent plus one probability vector per non-root node.

    Arrays carry a leading batch axis when produced from a feature matrix.
    """

    root_latent: np.ndarray
    distributions: dict[str, np.ndarray]

    def row(self, i: int) -> "NodeOutputs":
        return NodeOutputs(self.root_latent[i], {k: v[i] for k, v in self.distributions.items()})


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def one_hot(values: np.ndarray, depth: int) -> np.ndarray:
    values = np.asarray(values, dtype=np.int64)
    out = np.zeros(values.shape + (depth,), dtype=np.float64)
    np.put_along_axis(out, values[..., None], 1.0, axis=-1)
    return out


class GcpModel:
    """A concept graph with one two-layer MLP per node.

    The root predictor encodes raw features into a latent vector; every other
    node maps the concatenation of its parents' representations to logits over
    its concept values. Parameters live in one flat float64 buffer and each
    node's tensors are views into it.
    """

    def __init__(
        self,
        graph: ConceptGraph,
        d_in: int,
        config: TrainConfig | None = None,
        loss_weights: Mapping[str, float] | None = None,
        flat: np.ndarray | None = None,
    ):
        self.graph = graph
        self.d_in = int(d_in)
        self.config = config or TrainConfig()
        if loss_weights is None:
            ids = graph.non_root_ids
            loss_weights = {n: 1.0 / len(ids) for n in ids}
        missing = set(graph.non_root_ids) - set(loss_weights)
        if missing:
            raise ValueError(f"loss weights missing for {sorted(missing)}")
        if any(w < 0 for w in loss_weights.values()):
            raise ValueError("loss weights must be nonnegative")
        self.loss_weights = {n: float(loss_weights[n]) for n in graph.non_root_ids}

        self.layout: dict[str, dict[str, tuple[int, tuple[int, ...]]]] = {}
        self.node_slices: dict[str, slice] = {}
        offset = 0
        H = self.config.hidden_dim
        for node in graph.topo_order:
            start = offset
            entry = {}
            for key, shape in zip(
                PARAM_KEYS,
                [(self.in_width(node), H), (H,), (H, self.rep_width(node)), (self.rep_width(node),)],
            ):
                entry[key] = (offset, shape)
                offset += int(np.prod(shape))
            self.layout[node] = entry
            self.node_slices[node] = slice(start, offset)
        self.n_params = offset

        if flat is None:
            flat = np.empty(offset, dtype=np.float64)
            self._init_params(flat)
        elif flat.shape != (offset,):
            raise DimensionMismatch(f"expected {offset} parameters, got {flat.shape}")
        self.flat = flat
        self.params = self._views(self.flat)

    # structure ---------------------------------------------------------------
    def rep_width(self, node: str) -> int:
        if node == self.graph.root_id:
            return self.config.latent_dim
        return self.graph.cardinality(node)

    def in_width(self, node: str) -> int:
        if node == self.graph.root_id:
            return self.d_in
        return sum(self.rep_width(p) for p in self.graph.parents(node))

    def _views(self, buf: np.ndarray) -> dict[str, dict[str, np.ndarray]]:
        out = {}
        for node, entry in self.layout.items():
            out[node] = {
                k: buf[o : o + int(np.prod(s))].reshape(s) for k, (o, s) in entry.items()
            }
        return out

    def _init_params(self, flat: np.ndarray) -> None:
        # uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases
        rng = np.random.default_rng(self.config.seed)
        views = self._views(flat)
        for node in self.graph.topo_order:
            p = views[node]
            for w, b in (("W1", "b1"), ("W2", "b2")):
                bound = 1.0 / np.sqrt(max(p[w].shape[0], 1))
                p[w][...] = rng.uniform(-bound, bound, size=p[w].shape)
                p[b][...] = rng.uniform(-bound, bound, size=p[b].shape)

    def zeros_like_params(self) -> tuple[np.ndarray, dict[str, dict[str, np.ndarray]]]:
        buf = np.zeros(self.n_params, dtype=np.float64)
        return buf, self._views(buf)

    def copy(self) -> "GcpModel":
        return GcpModel(
            self.graph, self.d_in, copy.deepcopy(self.config), dict(self.loss_weights), self.flat.copy()
        )

    def module_checksum(self, node: str) -> str:
        return hashlib.sha256(self.flat[self.node_slices[node]].tobytes()).hexdigest()

    def all_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.flat)))


# propagation -------------------------------------------------------------------


@dataclass
class _Trace:
    reps: dict[str, np.ndarray]
    cache: dict[str, tuple] = field(default_factory=dict)


def _as_matrix(model: GcpModel, features) -> tuple[np.ndarray, bool]:
    X = np.asarray(features, dtype=np.float64)
    single = X.ndim == 1
    if single:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != model.d_in:
        raise DimensionMismatch(f"expected {model.d_in} features, got shape {np.shape(features)}")
    return X, single


def propagate(
    model: GcpModel,
    X: np.ndarray,
    truth: Mapping[str, np.ndarray] | None = None,
    intervene: Iterable[str] = (),
    teacher_forcing: bool = False,
    train: bool = False,
    rng: np.random.Generator | None = None,
    keep_cache: bool = False,
) -> _Trace:
    """Run the DAG in topological order on a batch.

    ``intervene`` nodes emit the one-hot of their truth value instead of their
    prediction. With ``teacher_forcing`` every child reads one-hot parent
    truths rather than predicted distributions.
    """
    g = model.graph
    act, _ = _ACTIVATIONS[model.config.activation]
    rate = model.config.dropout_rate if train else 0.0
    intervene = set(intervene)
    reps: dict[str, np.ndarray] = {}
    trace = _Trace(reps)
    for node in g.topo_order:
        P = model.params[node]
        if node == g.root_id:
            inp = X
        elif node in intervene:
            reps[node] = one_hot(truth[node], g.cardinality(node))
            continue
        else:
            parts = []
            for p in g.parents(node):
                if teacher_forcing and p != g.root_id:
                    parts.append(one_hot(truth[p], g.cardinality(p)))
                else:
                    parts.append(reps[p])
            inp = parts[0] if len(parts) == 1 else np.concatenate(parts, axis=1)
        a = inp @ P["W1"] + P["b1"]
        z = act(a)
        if rate > 0.0:
            mask = (rng.random(z.shape) >= rate) / (1.0 - rate)
            zd = z * mask
        else:
            mask = None
            zd = z
        out = zd @ P["W2"] + P["b2"]
        reps[node] = out if node == g.root_id else softmax(out)
        if keep_cache:
            trace.cache[node] = (inp, a, z, mask, zd)
    return trace


def _outputs(model: GcpModel, trace: _Trace, single: bool) -> NodeOutputs:
    g = model.graph
    dists = {n: trace.reps[n] for n in g.non_root_ids}
    out = NodeOutputs(trace.reps[g.root_id], dists)
    return out.row(0) if single else out


def forward(model: GcpModel, features) -> NodeOutputs:
    """Evaluation-mode forward pass (no dropout, predicted parents)."""
    X, single = _as_matrix(model, features)
    return _outputs(model, propagate(model, X), single)


def predict_label(model: GcpModel, features) -> np.ndarray:
    return forward(model, features).distributions[model.graph.output_id]


def node_nll(p: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-sample -log p[y] with probabilities clamped to [1e-12, 1]."""
    py = np.take_along_axis(p, np.asarray(y, dtype=np.int64)[:, None], axis=1)[:, 0]
    return -np.log(np.clip(py, PROB_FLOOR, 1.0))


def loss(model: GcpModel, outputs: NodeOutputs, annotation: AnnotatedSample) -> tuple[float, dict[str, float]]:
    """Weighted sum of per-node negative log-likelihoods for one sample."""
    truth = annotation.truth(model.graph)
    per_node = {}
    for n in model.graph.non_root_ids:
        p = np.atleast_2d(outputs.distributions[n])
        per_node[n] = float(node_nll(p, np.array([truth[n]]))[0])
    total = float(sum(model.loss_weights[n] * v for n, v in per_node.items()))
    return total, per_node


def batch_loss(
    model: GcpModel,
    X: np.ndarray,
    truth: Mapping[str, np.ndarray],
    teacher_forcing: bool | None = None,
) -> tuple[float, dict[str, float]]:
    """Mean-reduced training objective on a batch (evaluation mode)."""
    tf = model.config.teacher_forcing if teacher_forcing is None else teacher_forcing
    trace = propagate(model, X, truth, teacher_forcing=tf)
    per_node = {n: float(node_nll(trace.reps[n], truth[n]).mean()) for n in model.graph.non_root_ids}
    return float(sum(model.loss_weights[n] * v for n, v in per_node.items())), per_node


def _backprop(model: GcpModel, trace: _Trace, seeds: Mapping[str, np.ndarray], teacher_forcing: bool):
    """Reverse pass given d(objective)/d(logits) seeds for some nodes.

    Returns the flat gradient buffer and its per-node views.
    """
    g = model.graph
    _, act_grad = _ACTIVATIONS[model.config.activation]
    buf, grads = model.zeros_like_params()
    d_rep: dict[str, np.ndarray] = {}
    for node in reversed(g.topo_order):
        if node not in trace.cache:
            continue  # intervened
        if node == g.root_id:
            dout = d_rep.get(node)
        else:
            dout = seeds.get(node)
            upstream = d_rep.get(node)
            if upstream is not None:
                p = trace.reps[node]
                dsm = p * (upstream - np.sum(upstream * p, axis=1, keepdims=True))
                dout = dsm if dout is None else dout + dsm
        if dout is None:
            continue
        inp, a, z, mask, zd = trace.cache[node]
        P, G = model.params[node], grads[node]
        G["W2"][...] = zd.T @ dout
        G["b2"][...] = dout.sum(axis=0)
        dz = dout @ P["W2"].T
        if mask is not None:
            dz = dz * mask
        da = dz * act_grad(a, z)
        G["W1"][...] = inp.T @ da
        G["b1"][...] = da.sum(axis=0)
        if node == g.root_id:
            continue
        dinp = da @ P["W1"].T
        col = 0
        for p in g.parents(node):
            w = model.rep_width(p)
            if p == g.root_id or not teacher_forcing:
                piece = dinp[:, col : col + w]
                d_rep[p] = piece if p not in d_rep else d_rep[p] + piece
            col += w
    return buf, grads


def loss_and_grad(
    model: GcpModel,
    X: np.ndarray,
    truth: Mapping[str, np.ndarray],
    teacher_forcing: bool | None = None,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[float, dict[str, float], np.ndarray]:
    """Objective, per-node losses and flat gradient for a batch (mean reduction)."""
    tf = model.config.teacher_forcing if teacher_forcing is None else teacher_forcing
    g = model.graph
    n = X.shape[0]
    trace = propagate(model, X, truth, teacher_forcing=tf, train=train, rng=rng, keep_cache=True)
    per_node = {}
    seeds = {}
    for node in g.non_root_ids:
        p = trace.reps[node]
        y = truth[node]
        nll = node_nll(p, y)
        per_node[node] = float(nll.mean())
        lam = model.loss_weights[node]
        if lam == 0.0:
            continue
        resid = p - one_hot(y, p.shape[1])
        py = np.take_along_axis(p, y[:, None], axis=1)
        resid *= py >= PROB_FLOOR  # clamped terms are flat
        seeds[node] = resid * (lam / n)
    total = float(sum(model.loss_weights[k] * v for k, v in per_node.items()))
    buf, _ = _backprop(model, trace, seeds, tf)
    return total, per_node, buf


def backward(
    model: GcpModel,
    batch: Sequence[AnnotatedSample],
    teacher_forcing: bool | None = None,
) -> dict[str, dict[str, np.ndarray]]:
    """Analytic gradients of the mean batch objective for every parameter."""
    if not batch:
        raise EmptyDataset("backward needs a nonempty batch")
    X, truth = annotations_to_arrays(model.graph, batch)
    _, _, buf = loss_and_grad(model, X, truth, teacher_forcing)
    return model._views(buf)


# optimisation ------------------------------------------------------------------


class AdamW:
    """Adam with decoupled weight decay over the model's flat parameter buffer."""

    def __init__(self, n_params: int, config: TrainConfig):
        self.cfg = config
        self.m = np.zeros(n_params)
        self.v = np.zeros(n_params)
        self.t = 0

    def step(self, flat: np.ndarray, grad: np.ndarray, slices: Sequence[slice]) -> None:
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1**self.t
        bc2 = 1.0 - c.beta2**self.t
        for s in slices:
            g = grad[s]
            m, v = self.m[s], self.v[s]
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            theta = flat[s]
            theta *= 1.0 - c.learning_rate * c.weight_decay
            theta -= c.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + c.eps)


def trainable_slices(model: GcpModel, frozen: Iterable[str]) -> list[slice]:
    frozen = set(frozen)
    return [model.node_slices[n] for n in model.graph.topo_order if n not in frozen]


def fit_arrays(
    model: GcpModel,
    X: np.ndarray,
    truth: Mapping[str, np.ndarray],
    config: TrainConfig | None = None,
    frozen: Iterable[str] = (),
) -> tuple[GcpModel, list[dict]]:
    """Minibatch AdamW training on arrays; see :func:`fit`."""
    cfg = config or model.config
    n = X.shape[0]
    if n == 0:
        raise EmptyDataset("cannot fit on an empty dataset")
    slices = trainable_slices(model, frozen)
    rng = np.random.default_rng(cfg.seed)
    opt = AdamW(model.n_params, cfg)
    # dropout uses the training config's rate; architecture stays the model's
    saved_rate = model.config.dropout_rate
    model.config.dropout_rate = cfg.dropout_rate
    history = []
    try:
        for epoch in range(cfg.max_epochs):
            order = rng.permutation(n)
            tot, per, seen = 0.0, {k: 0.0 for k in model.graph.non_root_ids}, 0
            for start in range(0, n, cfg.batch_size):
                idx = order[start : start + cfg.batch_size]
                tb = {k: v[idx] for k, v in truth.items()}
                total, per_node, grad = loss_and_grad(
                    model, X[idx], tb, cfg.teacher_forcing, train=True, rng=rng
                )
                if slices:
                    opt.step(model.flat, grad, slices)
                m = len(idx)
                tot += total * m
                for k, v in per_node.items():
                    per[k] += v * m
                seen += m
            history.append(
                {"epoch": epoch, "total": tot / seen, "per_node": {k: v / seen for k, v in per.items()}}
            )
    finally:
        model.config.dropout_rate = saved_rate
    if not model.all_finite():
        raise FloatingPointError("non-finite parameters after training")
    return model, history


def fit(
    model: GcpModel,
    data: Sequence[AnnotatedSample],
    config: TrainConfig | None = None,
    frozen: Iterable[str] = (),
) -> tuple[GcpModel, list[dict]]:
    """Train all non-frozen modules in place; returns the model and per-epoch history."""
    if not data:
        raise EmptyDataset("cannot fit on an empty dataset")
    X, truth = annotations_to_arrays(model.graph, data)
    return fit_arrays(model, X, truth, config, frozen)


# gradient embeddings ------------------------------------------------------------


def gradient_factors(
    model: GcpModel, X: np.ndarray, nodes: Sequence[str] | None = None
) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Factored pseudo-label gradient embeddings for a batch.

    For node i the gradient of the pseudo-label cross-entropy w.r.t. its final
    linear layer is ``outer(a, r)`` for W2 and ``r`` for b2, where ``a`` is the
    hidden activation and ``r = p - onehot(argmax p)``. Returns ``(A, R)`` with
    ``A = [a, 1]`` so that ``z = vec(outer(A, R))`` up to the b2 block ordering.
    """
    g = model.graph
    nodes = list(nodes or g.non_root_ids)
    if g.root_id in nodes:
        raise RootNodeHasNoDistribution("the root emits a latent vector, not a distribution")
    trace = propagate(model, X, keep_cache=True)
    out = {}
    for node in nodes:
        p = trace.reps[node]
        r = p - one_hot(np.argmax(p, axis=1), p.shape[1])
        z = trace.cache[node][2]
        A = np.concatenate([z, np.ones((z.shape[0], 1))], axis=1)
        out[node] = (A, r)
    return out


def node_gradient_embedding(model: GcpModel, sample, node: str) -> np.ndarray:
    """Flattened gradient of the node's pseudo-label loss w.r.t. (W2, b2)."""
    if node == model.graph.root_id:
        raise RootNodeHasNoDistribution("the root emits a latent vector, not a distribution")
    if node not in model.graph.non_root_ids:
        raise KeyError(node)
    feats = sample.features if isinstance(sample, Sample) else sample
    X, _ = _as_matrix(model, feats)
    A, R = gradient_factors(model, X, [node])[node]
    a, r = A[0, :-1], R[0]
    return np.concatenate([np.outer(a, r).ravel(), r])


# marginal inference --------------------------------------------------------------


def marginal_label_distribution(model: GcpModel, features, max_configs: int = 4096) -> np.ndarray:
    """p(y | x) by exact enumeration over joint concept assignments.

    Each concept predictor is read as the conditional p(c_j | x, c_pa(j)) it is
    trained to be under teacher forcing; the label distribution is the mixture
    of head outputs weighted by the product of those conditionals.
    """
    X, single = _as_matrix(model, features)
    g = model.graph
    concepts = g.concept_ids
    cards = [g.cardinality(c) for c in concepts]
    n_cfg = int(np.prod(cards)) if cards else 1
    if n_cfg > max_configs:
        raise ValueError(f"{n_cfg} concept configurations exceed max_configs={max_configs}")
    n = X.shape[0]
    total = np.zeros((n, g.cardinality(g.output_id)))
    for cfg in itertools.product(*[range(d) for d in cards]):
        truth = {c: np.full(n, v, dtype=np.int64) for c, v in zip(concepts, cfg)}
        trace = propagate(model, X, truth, teacher_forcing=True)
        w = np.ones(n)
        for c, v in zip(concepts, cfg):
            w *= trace.reps[c][:, v]
        total += w[:, None] * trace.reps[g.output_id]
    total /= total.sum(axis=1, keepdims=True)
    return total[0] if single else total


def require_truth(graph: ConceptGraph, truth: Mapping[str, np.ndarray], nodes: Iterable[str]) -> None:
    for n in nodes:
        if n not in truth:
            raise MissingAnnotation(f"no ground truth for node {n!r}")
