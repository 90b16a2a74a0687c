"""Samples, annotations, dataset bundles and text ingestion."""
from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import MissingAnnotation, MixedDimensions, ParseError
from .graph import ConceptGraph


@dataclass(frozen=True)
class Sample:
    id: str
    features: np.ndarray
    text: str | None = None

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        if x.ndim != 1:
            raise ValueError("features must be a vector")
        if not np.all(np.isfinite(x)):
            raise ValueError(f"sample {self.id!r} has non-finite features")
        object.__setattr__(self, "features", x)


@dataclass(frozen=True)
class AnnotatedSample:
    sample: Sample
    concepts: Mapping[str, int]
    label: int

    @property
    def id(self) -> str:
        return self.sample.id

    def truth(self, graph: ConceptGraph) -> dict[str, int]:
        """Ground-truth value per non-root node, output label included."""
        out = {}
        for n in graph.concept_ids:
            if n not in self.concepts:
                raise MissingAnnotation(f"sample {self.id!r} lacks a value for {n!r}")
            out[n] = int(self.concepts[n])
        out[graph.output_id] = int(self.label)
        return out


def validate_annotation(graph: ConceptGraph, ann: AnnotatedSample) -> None:
    for n, v in ann.truth(graph).items():
        d = graph.cardinality(n)
        if not 0 <= v < d:
            raise ValueError(f"sample {ann.id!r}: value {v} out of range for {n!r} (d={d})")


@dataclass(frozen=True)
class ConceptPair:
    """One parent-child supervision example for a single concept module.

    ``parents`` maps each concept parent to its value. ``features`` carries
    the raw input when the root is among the parents (None otherwise).
    """

    node: str
    parents: Mapping[str, int]
    child: int
    features: np.ndarray | None = None


def validate_pair(graph: ConceptGraph, pair: ConceptPair) -> bool:
    """True when the pair matches the node's parent set and value ranges."""
    node = pair.node
    if node not in graph.non_root_ids:
        return False
    want = [p for p in graph.parents(node) if p != graph.root_id]
    if sorted(pair.parents) != sorted(want):
        return False
    if graph.root_id in graph.parents(node) and pair.features is None:
        return False
    for p, v in pair.parents.items():
        if not (isinstance(v, (int, np.integer)) and 0 <= v < graph.cardinality(p)):
            return False
    return isinstance(pair.child, (int, np.integer)) and 0 <= pair.child < graph.cardinality(node)


@dataclass
class DatasetBundle:
    pool: list[Sample]
    labeled: list[AnnotatedSample]
    test: list[AnnotatedSample]
    # ground truth for pool samples, consulted only by the synthetic teacher
    oracle_store: dict[str, AnnotatedSample] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        ids = [s.id for s in self.pool] + [a.id for a in self.labeled] + [a.id for a in self.test]
        if len(ids) != len(set(ids)):
            raise ValueError("pool, labeled and test ids must be disjoint")
        dims = {len(s.features) for s in self.pool}
        dims |= {len(a.sample.features) for a in self.labeled + self.test}
        if len(dims) > 1:
            raise MixedDimensions(f"inconsistent feature dimensions {sorted(dims)}")

    @property
    def feature_dim(self) -> int:
        for s in self.pool:
            return len(s.features)
        for a in self.labeled + self.test:
            return len(a.sample.features)
        raise ValueError("empty bundle")


def stack_features(samples: Sequence[Sample]) -> np.ndarray:
    return np.stack([s.features for s in samples]) if samples else np.zeros((0, 0))


def annotations_to_arrays(
    graph: ConceptGraph, data: Sequence[AnnotatedSample]
) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Features matrix plus per-node integer truth arrays (output included)."""
    X = np.stack([a.sample.features for a in data])
    truths = [a.truth(graph) for a in data]
    truth = {n: np.array([t[n] for t in truths], dtype=np.int64) for n in graph.non_root_ids}
    return X, truth


# text featurization ---------------------------------------------------------


@dataclass(frozen=True)
class FeaturizerConfig:
    feature_dim: int = 256
    ngram: int = 3
    lowercase: bool = True


def hash_features(text: str, cfg: FeaturizerConfig) -> np.ndarray:
    """Hashed character n-gram counts, L2-normalized. Empty text maps to zeros."""
    v = np.zeros(cfg.feature_dim, dtype=np.float64)
    if cfg.lowercase:
        text = text.lower()
    if not text:
        return v
    padded = f" {text} " if len(text) >= cfg.ngram else text
    n = min(cfg.ngram, len(padded))
    for i in range(len(padded) - n + 1):
        gram = padded[i : i + n].encode("utf-8")
        v[zlib.crc32(gram) % cfg.feature_dim] += 1.0
    norm = np.linalg.norm(v)
    return v / norm if norm > 0 else v


def _parse_record(rec: Mapping, lineno: int, cfg: FeaturizerConfig) -> Sample:
    if "id" not in rec:
        raise ParseError(f"line {lineno}: missing 'id'")
    sid = str(rec["id"])
    if "features" in rec:
        try:
            feats = np.asarray(rec["features"], dtype=np.float64)
        except (TypeError, ValueError) as exc:
            raise ParseError(f"line {lineno}: bad 'features'") from exc
        if feats.ndim != 1:
            raise ParseError(f"line {lineno}: 'features' must be a flat array")
        return Sample(sid, feats, rec.get("text"))
    if "text" not in rec or not isinstance(rec["text"], str):
        raise ParseError(f"line {lineno}: record needs 'text' or 'features'")
    return Sample(sid, hash_features(rec["text"], cfg), rec["text"])


def read_jsonl(path: str | Path) -> Iterable[tuple[int, dict]]:
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}:{lineno}: {exc.msg}") from exc
            if not isinstance(rec, dict):
                raise ParseError(f"{path}:{lineno}: record is not an object")
            yield lineno, rec


def ingest_text(
    path: str | Path,
    featurizer: FeaturizerConfig | None = None,
    graph: ConceptGraph | None = None,
    as_test: bool = False,
) -> DatasetBundle:
    """Load a JSON-lines corpus.

    Records carrying a label and every concept of ``graph`` become annotated
    samples (the labeled set, or the test set with ``as_test``); everything
    else goes to the unlabeled pool.
    """
    cfg = featurizer or FeaturizerConfig()
    pool: list[Sample] = []
    annotated: list[AnnotatedSample] = []
    dims = set()
    for lineno, rec in read_jsonl(path):
        s = _parse_record(rec, lineno, cfg)
        dims.add(len(s.features))
        if len(dims) > 1:
            raise MixedDimensions(f"line {lineno}: feature length {len(s.features)} differs")
        concepts = rec.get("concepts") or {}
        if not isinstance(concepts, dict):
            raise ParseError(f"line {lineno}: 'concepts' must be an object")
        if graph is not None and "label" in rec:
            by_name = {graph.node(n).name: n for n in graph.concept_ids}
            mapped = {}
            for key, val in concepts.items():
                nid = by_name.get(key, key if key in graph.concept_ids else None)
                if nid is not None:
                    mapped[nid] = int(val)
            if all(n in mapped for n in graph.concept_ids):
                annotated.append(AnnotatedSample(s, mapped, int(rec["label"])))
                continue
        pool.append(s)
    if as_test:
        return DatasetBundle(pool=pool, labeled=[], test=annotated)
    return DatasetBundle(pool=pool, labeled=annotated, test=[])
