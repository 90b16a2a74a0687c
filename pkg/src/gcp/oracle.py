"""Annotator oracles: a table-driven synthetic teacher and a remote HTTP client."""
from __future__ import annotations

import itertools
import json
import logging
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Mapping, Protocol, Sequence

import numpy as np

from .data import AnnotatedSample, ConceptPair, DatasetBundle, Sample, validate_annotation
from .errors import (
    BudgetExhausted,
    InvalidNode,
    InvalidTable,
    MalformedResponse,
    OracleTimeout,
    OracleUnavailable,
    UnknownSample,
)
from .graph import ConceptGraph, build_graph

log = logging.getLogger(__name__)

TASK_FORMAT = "gcp-synthetic-task"
TASK_VERSION = 1


class Oracle(Protocol):
    cost: int

    def annotate(self, samples: Sequence[Sample], graph: ConceptGraph) -> list[AnnotatedSample]: ...

    def generate_pairs(self, node: str, K: int) -> list[ConceptPair]: ...


class _CostCounter:
    def __init__(self):
        self._lock = threading.Lock()
        self._value = 0

    def add(self, n: int) -> None:
        with self._lock:
            self._value += int(n)

    @property
    def value(self) -> int:
        return self._value


# synthetic task ---------------------------------------------------------------------


@dataclass
class SyntheticTask:
    """Generative process over x, a hidden cause u, concepts and the label.

    x is uniform on [-1, 1]^feature_dim and enters only through its region
    index: bit k of the region is set when ``normals[k] . x > offsets[k]``.
    Each non-root node has a table ``p(c | region, u, parent values)`` of shape
    ``(R, U, n_parent_configs, d)``; parent configurations are indexed in
    row-major order over the node's concept parents. With the confounder off
    every node draws its own independent copy of u.
    """

    name: str
    feature_dim: int
    graph: ConceptGraph
    normals: np.ndarray
    offsets: np.ndarray
    latent_prior: np.ndarray  # (R, U)
    tables: dict[str, np.ndarray]
    latent_confounder: bool = True
    seed: int = 0
    description: str = ""

    def __post_init__(self):
        self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, self.feature_dim)
        self.offsets = np.asarray(self.offsets, dtype=np.float64).reshape(-1)
        self.latent_prior = np.asarray(self.latent_prior, dtype=np.float64)
        self.tables = {k: np.asarray(v, dtype=np.float64) for k, v in self.tables.items()}
        self._validate()

    # structure ---------------------------------------------------------------
    @property
    def n_regions(self) -> int:
        return 2 ** self.normals.shape[0]

    @property
    def n_latent(self) -> int:
        return self.latent_prior.shape[1]

    def concept_parents(self, node: str) -> list[str]:
        return [p for p in self.graph.parents(node) if p != self.graph.root_id]

    def _validate(self) -> None:
        g = self.graph
        if self.offsets.shape[0] != self.normals.shape[0]:
            raise InvalidTable("one offset per region normal required")
        R = self.n_regions
        if self.latent_prior.ndim != 2 or self.latent_prior.shape[0] != R:
            raise InvalidTable(f"latent prior must have shape ({R}, U)")
        _check_stochastic("latent prior", self.latent_prior)
        if set(self.tables) != set(g.non_root_ids):
            raise InvalidTable("need exactly one table per non-root node")
        for n in g.non_root_ids:
            n_cfg = int(np.prod([g.cardinality(p) for p in self.concept_parents(n)]))
            want = (R, self.n_latent, n_cfg, g.cardinality(n))
            if self.tables[n].shape != want:
                raise InvalidTable(f"table for {n!r} has shape {self.tables[n].shape}, expected {want}")
            _check_stochastic(f"table {n!r}", self.tables[n])

    def region(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(X)
        bits = (X @ self.normals.T > self.offsets).astype(np.int64)
        return bits @ (1 << np.arange(bits.shape[1], dtype=np.int64))

    def parent_index(self, node: str, values: Mapping[str, np.ndarray]) -> np.ndarray:
        pa = self.concept_parents(node)
        if not pa:
            n = len(next(iter(values.values()))) if values else 1
            return np.zeros(n, dtype=np.int64)
        dims = [self.graph.cardinality(p) for p in pa]
        return np.ravel_multi_index([values[p] for p in pa], dims)

    # sampling ------------------------------------------------------------------
    def sample(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, dict[str, np.ndarray]]:
        """Draw n samples; returns features and per-node values (output included)."""
        X = rng.uniform(-1.0, 1.0, size=(n, self.feature_dim))
        return X, self.sample_given_x(X, rng)

    def sample_given_x(self, X: np.ndarray, rng: np.random.Generator) -> dict[str, np.ndarray]:
        r = self.region(X)
        n = len(r)
        shared = _draw(self.latent_prior[r], rng) if self.latent_confounder else None
        vals: dict[str, np.ndarray] = {}
        for node in self.graph.topo_order:
            if node == self.graph.root_id:
                continue
            u = shared if self.latent_confounder else _draw(self.latent_prior[r], rng)
            idx = self.parent_index(node, vals) if self.concept_parents(node) else np.zeros(n, dtype=np.int64)
            vals[node] = _draw(self.tables[node][r, u, idx], rng)
        return vals

    def label_distribution(self, X: np.ndarray) -> np.ndarray:
        """Exact p*(y | x) by enumeration over u and all concepts."""
        r = self.region(X)
        per_region = np.stack([self._joint_region(k)[1] for k in range(self.n_regions)])
        return per_region[r]

    def _joint_region(self, r: int) -> tuple[list[tuple[dict, float]], np.ndarray]:
        """All (assignment, probability) pairs for one region, plus p*(y | region)."""
        g = self.graph
        nodes = [n for n in g.topo_order if n != g.root_id]
        cards = [g.cardinality(n) for n in nodes]
        out = g.output_id
        py = np.zeros(g.cardinality(out))
        rows = []
        prior = self.latent_prior[r]
        for cfg in itertools.product(*[range(d) for d in cards]):
            vals = {n: np.array([v]) for n, v in zip(nodes, cfg)}
            if self.latent_confounder:
                pr = 0.0
                for u in range(self.n_latent):
                    term = prior[u]
                    for n in nodes:
                        term *= self.tables[n][r, u, self.parent_index(n, vals)[0], vals[n][0]]
                    pr += term
            else:
                pr = 1.0
                for n in nodes:
                    pr *= float(prior @ self.tables[n][r, :, self.parent_index(n, vals)[0], vals[n][0]])
            rows.append(({n: int(v) for n, v in zip(nodes, cfg)}, pr))
            py[cfg[nodes.index(out)]] += pr
        return rows, py

    def exact_conditional(self, node: str) -> tuple[np.ndarray, np.ndarray]:
        """p*(c_node | region, parent config) and the mass of each (region, config) cell."""
        g = self.graph
        pa = self.concept_parents(node)
        n_cfg = int(np.prod([g.cardinality(p) for p in pa]))
        d = g.cardinality(node)
        joint = np.zeros((self.n_regions, n_cfg, d))
        for r in range(self.n_regions):
            rows, _ = self._joint_region(r)
            for vals, pr in rows:
                j = self.parent_index(node, {p: np.array([vals[p]]) for p in pa})[0] if pa else 0
                joint[r, j, vals[node]] += pr
        mass = joint.sum(axis=2)
        with np.errstate(invalid="ignore", divide="ignore"):
            cond = np.where(mass[..., None] > 0, joint / mass[..., None], 1.0 / d)
        return cond, mass

    # serialization ---------------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "format": TASK_FORMAT,
            "version": TASK_VERSION,
            "name": self.name,
            "description": self.description,
            "feature_dim": self.feature_dim,
            "seed": self.seed,
            "latent_confounder": self.latent_confounder,
            "graph": self.graph.to_spec(),
            "regions": {"normals": self.normals.tolist(), "offsets": self.offsets.tolist()},
            "latent_prior": self.latent_prior.tolist(),
            "tables": {k: v.tolist() for k, v in self.tables.items()},
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "SyntheticTask":
        if d.get("format") != TASK_FORMAT:
            raise InvalidTable("not a synthetic task description")
        if d.get("version") != TASK_VERSION:
            raise InvalidTable(f"unsupported task version {d.get('version')}")
        try:
            return cls(
                name=d["name"],
                feature_dim=int(d["feature_dim"]),
                graph=build_graph(d["graph"]),
                normals=d["regions"]["normals"],
                offsets=d["regions"]["offsets"],
                latent_prior=d["latent_prior"],
                tables=d["tables"],
                latent_confounder=bool(d.get("latent_confounder", True)),
                seed=int(d.get("seed", 0)),
                description=d.get("description", ""),
            )
        except (KeyError, TypeError, ValueError) as e:
            if isinstance(e, InvalidTable):
                raise
            raise InvalidTable(f"malformed task description: {e}") from e

    def with_confounder(self, on: bool) -> "SyntheticTask":
        d = self.to_dict()
        d["latent_confounder"] = on
        return SyntheticTask.from_dict(d)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")


def _check_stochastic(what: str, t: np.ndarray) -> None:
    if not np.all(np.isfinite(t)) or np.any(t < 0):
        raise InvalidTable(f"{what}: entries must be finite and nonnegative")
    if not np.allclose(t.sum(axis=-1), 1.0, atol=1e-9, rtol=0):
        raise InvalidTable(f"{what}: rows must sum to 1")


def _draw(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One categorical draw per row of ``probs``."""
    c = np.cumsum(probs, axis=1)
    u = rng.random(len(probs))[:, None]
    return np.minimum((u >= c).sum(axis=1), probs.shape[1] - 1).astype(np.int64)


def load_task(name_or_path: str | Path) -> SyntheticTask:
    """Load a pinned task by name (``default``, ``confounded``) or from a JSON path."""
    p = Path(name_or_path)
    if p.suffix == ".json" and p.exists():
        return SyntheticTask.from_dict(json.loads(p.read_text()))
    try:
        text = resources.files("gcp.tasks").joinpath(f"{name_or_path}.json").read_text()
    except FileNotFoundError as e:
        raise InvalidTable(f"unknown task {name_or_path!r}") from e
    return SyntheticTask.from_dict(json.loads(text))


def _annotated(task: SyntheticTask, ids: Sequence[str], X: np.ndarray, vals: Mapping[str, np.ndarray]) -> list[AnnotatedSample]:
    g = task.graph
    out = []
    for i, sid in enumerate(ids):
        conc = {c: int(vals[c][i]) for c in g.concept_ids}
        out.append(AnnotatedSample(Sample(sid, X[i]), conc, int(vals[g.output_id][i])))
    return out


def synth_generate(task: SyntheticTask, n_pool: int, n_test: int, n_labeled: int = 0, seed: int | None = None) -> DatasetBundle:
    """Draw a pool (annotations held back for the teacher), optional labeled set and a test set."""
    rng = np.random.default_rng(task.seed if seed is None else seed)
    parts = {}
    for tag, n in (("p", n_pool), ("l", n_labeled), ("t", n_test)):
        X, vals = task.sample(n, rng)
        parts[tag] = _annotated(task, [f"{tag}{i:06d}" for i in range(n)], X, vals)
    store = {a.id: a for a in parts["p"]}
    return DatasetBundle([a.sample for a in parts["p"]], parts["l"], parts["t"], store)


# synthetic teacher -------------------------------------------------------------------


class StoredAnnotationOracle:
    """Serves annotations held back from the learner; cannot generate pairs."""

    def __init__(self, store: Mapping[str, AnnotatedSample]):
        self._store = dict(store)
        self._cost = _CostCounter()

    @property
    def cost(self) -> int:
        return self._cost.value

    def annotate(self, samples: Sequence[Sample], graph: ConceptGraph | None = None) -> list[AnnotatedSample]:
        out = []
        for s in samples:
            if s.id not in self._store:
                raise UnknownSample(s.id)
            out.append(self._store[s.id])
        self._cost.add(len(out))
        return out

    def generate_pairs(self, node: str, K: int) -> list[ConceptPair]:
        raise OracleUnavailable("stored annotations cannot generate parent-child pairs")


class SyntheticTeacher(StoredAnnotationOracle):
    """Answers from stored ground truth; generates pairs from the task's process."""

    def __init__(self, task: SyntheticTask, bundle: DatasetBundle, seed: int = 0):
        store = dict(bundle.oracle_store)
        store.update({a.id: a for a in bundle.labeled})
        store.update({a.id: a for a in bundle.test})
        super().__init__(store)
        self.task = task
        self._rng = np.random.default_rng(seed)
        self._rng_lock = threading.Lock()

    def generate_pairs(self, node: str, K: int) -> list[ConceptPair]:
        g = self.task.graph
        if node not in g.non_root_ids:
            raise InvalidNode(f"{node!r} has no parent-child pairs")
        if K <= 0:
            return []
        with self._rng_lock:
            X, vals = self.task.sample(K, self._rng)
        pa = self.task.concept_parents(node)
        needs_x = g.root_id in g.parents(node)
        pairs = [
            ConceptPair(node, {p: int(vals[p][i]) for p in pa}, int(vals[node][i]), X[i] if needs_x else None)
            for i in range(K)
        ]
        self._cost.add(K)
        return pairs


# remote annotator --------------------------------------------------------------------

ENV_URL = "GCP_ANNOTATOR_URL"
ENV_KEY = "GCP_ANNOTATOR_KEY"


@dataclass
class RemoteConfig:
    url: str | None = None  # falls back to $GCP_ANNOTATOR_URL
    api_key: str | None = field(default=None, repr=False)  # falls back to $GCP_ANNOTATOR_KEY
    timeout: float = 30.0
    batch_size: int = 16
    max_retries: int = 2
    max_inflight: int = 4
    budget: int | None = None  # maximum number of annotated samples

    def resolved(self) -> tuple[str, str | None]:
        url = self.url or os.environ.get(ENV_URL)
        if not url:
            raise OracleUnavailable(f"no annotator endpoint configured (set {ENV_URL})")
        return url.rstrip("/"), self.api_key or os.environ.get(ENV_KEY)


class RemoteAnnotator:
    """JSON-over-HTTP annotator: one POST /annotate per batch of samples."""

    def __init__(self, config: RemoteConfig | None = None, transport=None):
        import httpx

        self.config = config or RemoteConfig()
        url, key = self.config.resolved()
        headers = {"Authorization": f"Bearer {key}"} if key else {}
        self._client = httpx.Client(base_url=url, headers=headers, timeout=self.config.timeout, transport=transport)
        self._httpx = httpx
        self._cost = _CostCounter()
        self._reserve = threading.Lock()

    @property
    def cost(self) -> int:
        return self._cost.value

    def close(self) -> None:
        self._client.close()

    @staticmethod
    def request_body(samples: Sequence[Sample], graph: ConceptGraph) -> dict:
        nodes = [graph.node(n) for n in graph.non_root_ids]
        return {
            "graph": {"nodes": [{"name": n.name, "cardinality": n.cardinality, "description": n.description} for n in nodes]},
            "samples": [{"id": s.id, "text": s.text or ""} for s in samples],
        }

    def _post(self, body: dict) -> dict:
        last = None
        for _ in range(self.config.max_retries + 1):
            try:
                resp = self._client.post("/annotate", json=body)
                resp.raise_for_status()
                return resp.json()
            except self._httpx.TimeoutException as e:
                last = OracleTimeout("annotator request timed out")
                last.__cause__ = e
            except (self._httpx.HTTPError, ValueError) as e:
                last = OracleUnavailable(f"annotator request failed: {type(e).__name__}")
                last.__cause__ = e
        raise last

    @staticmethod
    def _parse_one(rec, sample: Sample, graph: ConceptGraph) -> AnnotatedSample | None:
        by_name = {graph.node(n).name: n for n in graph.concept_ids}
        try:
            conc = {by_name[k]: int(v) for k, v in rec["concepts"].items() if k in by_name}
            ann = AnnotatedSample(sample, conc, int(rec["label"]))
            validate_annotation(graph, ann)
            return ann
        except (KeyError, TypeError, ValueError, AttributeError):
            return None

    def _annotate_batch(self, batch: Sequence[Sample], graph: ConceptGraph) -> list[AnnotatedSample]:
        result: dict[str, AnnotatedSample] = {}
        pending = list(batch)
        for _ in range(self.config.max_retries + 1):
            data = self._post(self.request_body(pending, graph))
            recs = data.get("annotations") if isinstance(data, dict) else None
            got = {}
            if isinstance(recs, list):
                for rec in recs:
                    if isinstance(rec, dict) and "id" in rec:
                        got[rec["id"]] = rec
            still = []
            for s in pending:
                ann = self._parse_one(got[s.id], s, graph) if s.id in got else None
                if ann is None:
                    still.append(s)
                else:
                    result[s.id] = ann
            pending = still
            if not pending:
                break
        if pending:
            raise MalformedResponse(f"{len(pending)} samples still malformed after {self.config.max_retries} retries")
        return [result[s.id] for s in batch]

    def annotate(self, samples: Sequence[Sample], graph: ConceptGraph) -> list[AnnotatedSample]:
        names = [graph.node(n).name for n in graph.non_root_ids]
        if len(set(names)) != len(names):
            raise ValueError("node names must be unique for the wire protocol")
        with self._reserve:
            if self.config.budget is not None and self.cost + len(samples) > self.config.budget:
                raise BudgetExhausted(f"annotating {len(samples)} more samples would exceed the budget")
        bs = self.config.batch_size
        batches = [samples[i : i + bs] for i in range(0, len(samples), bs)]
        log.debug("annotating %d samples in %d batches", len(samples), len(batches))
        with ThreadPoolExecutor(max_workers=max(1, self.config.max_inflight)) as pool:
            parts = list(pool.map(lambda b: self._annotate_batch(b, graph), batches))
        out = [a for part in parts for a in part]
        self._cost.add(len(out))
        return out

    def generate_pairs(self, node: str, K: int) -> list[ConceptPair]:
        raise OracleUnavailable("the remote annotator does not generate parent-child pairs")


def remote_annotate(config: RemoteConfig, samples: Sequence[Sample], graph: ConceptGraph, transport=None) -> list[AnnotatedSample]:
    client = RemoteAnnotator(config, transport)
    try:
        return client.annotate(samples, graph)
    finally:
        client.close()


# dependence diagnostics -------------------------------------------------------------------


def sign_partition(X: np.ndarray) -> np.ndarray:
    """Cell index from the sign pattern of the first two coordinates."""
    X = np.atleast_2d(X)
    return (X[:, 0] > 0).astype(np.int64) + 2 * (X[:, 1] > 0).astype(np.int64)


def conditional_mutual_information(a: np.ndarray, b: np.ndarray, z: np.ndarray) -> float:
    """Plug-in estimate of I(a; b | z) in nats for discrete arrays."""
    a, b, z = (np.asarray(v, dtype=np.int64) for v in (a, b, z))
    n = len(a)
    total = 0.0
    for zv in np.unique(z):
        m = z == zv
        joint = np.zeros((a.max() + 1, b.max() + 1))
        np.add.at(joint, (a[m], b[m]), 1.0)
        joint /= m.sum()
        pa = joint.sum(axis=1, keepdims=True)
        pb = joint.sum(axis=0, keepdims=True)
        nz = joint > 0
        total += m.sum() / n * float(np.sum(joint[nz] * np.log(joint[nz] / (pa @ pb)[nz])))
    return max(total, 0.0)
