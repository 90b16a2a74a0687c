import json

import numpy as np
import pytest

from conftest import diamond_graph
from gcp.data import (
    AnnotatedSample,
    ConceptPair,
    DatasetBundle,
    FeaturizerConfig,
    Sample,
    annotations_to_arrays,
    hash_features,
    ingest_text,
    validate_annotation,
    validate_pair,
)
from gcp.errors import MissingAnnotation, MixedDimensions, ParseError


def write_jsonl(path, records):
    path.write_text("".join(json.dumps(r) + "\n" for r in records))
    return path


def test_sample_validation():
    with pytest.raises(ValueError):
        Sample("a", np.zeros((2, 2)))
    with pytest.raises(ValueError):
        Sample("a", np.array([1.0, np.nan]))
    assert Sample("a", [1, 2]).features.dtype == np.float64


def test_annotation_truth_and_validation():
    g = diamond_graph()
    ann = AnnotatedSample(Sample("a", np.zeros(2)), {"a": 1, "b": 2}, 0)
    assert ann.truth(g) == {"a": 1, "b": 2, "out": 0}
    validate_annotation(g, ann)
    with pytest.raises(ValueError):
        validate_annotation(g, AnnotatedSample(Sample("b", np.zeros(2)), {"a": 1, "b": 3}, 0))
    with pytest.raises(MissingAnnotation):
        AnnotatedSample(Sample("c", np.zeros(2)), {"a": 1}, 0).truth(g)
    X, truth = annotations_to_arrays(g, [ann, ann])
    assert X.shape == (2, 2) and list(truth["b"]) == [2, 2]


def test_validate_pair():
    g = diamond_graph()
    assert validate_pair(g, ConceptPair("out", {"a": 1, "b": 2}, 1))
    assert not validate_pair(g, ConceptPair("out", {"a": 1}, 1))
    assert not validate_pair(g, ConceptPair("out", {"a": 1, "b": 3}, 1))
    assert not validate_pair(g, ConceptPair("out", {"a": 1, "b": 2}, 2))
    # the root is a parent of b, so its pairs must carry features
    assert not validate_pair(g, ConceptPair("b", {"a": 0}, 1))
    assert validate_pair(g, ConceptPair("b", {"a": 0}, 1, np.zeros(3)))
    assert not validate_pair(g, ConceptPair("root", {}, 0))


def test_bundle_invariants():
    s = Sample("a", np.zeros(3))
    with pytest.raises(ValueError):
        DatasetBundle([s], [AnnotatedSample(s, {}, 0)], [])
    with pytest.raises(MixedDimensions):
        DatasetBundle([s, Sample("b", np.zeros(4))], [], [])
    assert DatasetBundle([s], [], []).feature_dim == 3


def test_hash_features_examples():
    cfg = FeaturizerConfig(feature_dim=32)
    a, b = hash_features("the cat sat", cfg), hash_features("the cat sat", cfg)
    assert np.array_equal(a, b)
    assert np.linalg.norm(a) == pytest.approx(1.0)
    assert np.array_equal(hash_features("", cfg), np.zeros(32))
    assert np.array_equal(hash_features("The Cat", cfg), hash_features("the cat", cfg))
    assert not np.array_equal(hash_features("dog", cfg), hash_features("cat", cfg))


def test_ingest_text_and_passthrough(tmp_path):
    g = diamond_graph()
    p = write_jsonl(
        tmp_path / "d.jsonl",
        [
            {"id": "1", "text": "hello world"},
            {"id": "2", "text": "hello world", "label": 1, "concepts": {"a": 0, "b": 2}},
            {"id": "3", "text": "partial", "label": 0, "concepts": {"a": 1}},
        ],
    )
    b = ingest_text(p, FeaturizerConfig(feature_dim=16), graph=g)
    assert [s.id for s in b.pool] == ["1", "3"] and [a.id for a in b.labeled] == ["2"]
    assert np.array_equal(b.pool[0].features, b.labeled[0].sample.features)
    assert len(b.pool[0].features) == 16
    t = ingest_text(p, FeaturizerConfig(feature_dim=16), graph=g, as_test=True)
    assert [a.id for a in t.test] == ["2"] and not t.labeled
    q = write_jsonl(tmp_path / "n.jsonl", [{"id": "n", "features": list(range(16))}])
    assert len(ingest_text(q).pool[0].features) == 16


@pytest.mark.parametrize(
    "lines,err",
    [
        (['{"text": "no id"}'], ParseError),
        (['{"id": "a"}'], ParseError),
        (["not json"], ParseError),
        (["[1, 2]"], ParseError),
        (['{"id": "a", "features": [[1]]}'], ParseError),
        (['{"id": "a", "features": [1, 2]}', '{"id": "b", "features": [1]}'], MixedDimensions),
    ],
)
def test_ingest_errors(tmp_path, lines, err):
    p = tmp_path / "bad.jsonl"
    p.write_text("\n".join(lines) + "\n")
    with pytest.raises(err):
        ingest_text(p)
