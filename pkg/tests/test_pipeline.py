import json
from dataclasses import replace

import numpy as np
import pytest

from conftest import small_config
from gcp.checkpoint import checkpoint_load
from gcp.data import annotations_to_arrays
from gcp.errors import EmptyTestSet
from gcp.model import GcpModel, fit_arrays, forward
from gcp.pipeline import (
    LoopConfig,
    _derive_seed,
    emit_metrics,
    evaluate,
    load_config,
    metrics_csv,
    prepare,
    read_metrics_csv,
    run_active_loop,
)


def tiny(**kw) -> LoopConfig:
    base = dict(
        task="default", n_pool=60, n_test=40, rounds=3, budget=10, retrain_budget=1, augment_pairs=20,
        stop_on_plateau=False, train=small_config(max_epochs=3),
    )
    return LoopConfig(**{**base, **kw})


class FailingOracle:
    """Delegates to a real oracle and raises on the n-th annotate call."""

    def __init__(self, inner, fail_at):
        self.inner, self.fail_at, self.calls = inner, fail_at, 0

    @property
    def cost(self):
        return self.inner.cost

    def annotate(self, samples, graph):
        self.calls += 1
        if self.calls == self.fail_at:
            raise RuntimeError("annotator went away")
        return self.inner.annotate(samples, graph)

    def generate_pairs(self, node, K):
        return self.inner.generate_pairs(node, K)


def read_tree(path):
    return {p.name: p.read_bytes() for p in sorted(path.iterdir()) if p.name != "timing.json"}


# config --------------------------------------------------------------------------------------


def test_config_validation():
    for bad in ({"rounds": 0}, {"budget": 0}, {"acquisition": "best"}, {"inference": "map"}, {"plateau_rounds": 1}, {"delta_holdout": 1.0}):
        with pytest.raises(ValueError):
            tiny(**bad)
    with pytest.raises(ValueError):
        LoopConfig.from_dict({"nonsense": 1})


def test_load_config_toml_and_json(tmp_path):
    (tmp_path / "c.toml").write_text('task = "default"\nrounds = 4\nbudget = 7\n[train]\nhidden_dim = 12\nmax_epochs = 2\n')
    c = load_config(tmp_path / "c.toml")
    assert (c.task, c.rounds, c.budget, c.train.hidden_dim, c.train.max_epochs) == ("default", 4, 7, 12, 2)
    assert c.train.dropout_rate == 0.1
    (tmp_path / "c.json").write_text(json.dumps(c.to_dict()))
    assert load_config(tmp_path / "c.json") == c


# evaluation ------------------------------------------------------------------------------------


def test_evaluate_recount_and_constant_model():
    cfg = tiny(n_test=400)
    graph, bundle, _ = prepare(cfg)
    m = GcpModel(graph, bundle.feature_dim, small_config())
    acc, per_node = evaluate(m, bundle.test)
    X, truth = annotations_to_arrays(graph, bundle.test)
    pred = forward(m, X).distributions["y"].argmax(1)
    assert acc == sum(int(p == t) for p, t in zip(pred, truth["y"])) / len(bundle.test)
    assert set(per_node) == set(graph.non_root_ids)
    # a constant head on a class-balanced test set
    m.params["y"]["W2"][:] = 0.0
    m.params["y"]["b2"][:] = [0.0, 5.0]
    ones = [t for t in bundle.test if t.label == 1]
    zeros = [t for t in bundle.test if t.label == 0]
    k = min(len(ones), len(zeros))
    acc, _ = evaluate(m, ones[:k] + zeros[:k])
    assert acc == 0.5
    with pytest.raises(EmptyTestSet):
        evaluate(m, [])


def test_evaluate_model_that_matches_truth():
    cfg = tiny()
    graph, bundle, _ = prepare(cfg)
    m = GcpModel(graph, bundle.feature_dim, small_config())
    X, _ = annotations_to_arrays(graph, bundle.test)
    pred = forward(m, X).distributions["y"].argmax(1)
    relabeled = [replace(a, label=int(p)) for a, p in zip(bundle.test, pred)]
    assert evaluate(m, relabeled)[0] == 1.0


# the loop ----------------------------------------------------------------------------------------


def test_loop_records_counts_and_cost(tmp_path):
    cfg = tiny(rounds=4)
    recs = run_active_loop(cfg, out_dir=tmp_path)
    assert [r.round for r in recs] == [1, 2, 3, 4]
    assert [r.annotated for r in recs] == [10, 20, 30, 40]
    pairs = 0
    for r in recs:
        pairs += cfg.augment_pairs * len(r.retrain_set)
        assert r.oracle_cost == r.annotated + pairs
        assert "y" not in r.retrain_set and len(r.retrain_set) <= 1
        assert r.fraction == pytest.approx(r.annotated / 60)
    for r in range(1, 5):
        for name in (f"acquisition_round_{r}.json", f"delta_round_{r}.json", f"checkpoint_round_{r}.bin"):
            assert (tmp_path / name).exists()
    acq = json.loads((tmp_path / "acquisition_round_2.json").read_text())
    assert acq["mode"] == "gcp" and len(acq["chosen"]) == 10
    assert json.loads((tmp_path / "acquisition_round_1.json").read_text())["mode"] == "random"


def test_loop_stops_when_pool_exhausted():
    recs = run_active_loop(tiny(n_pool=25, rounds=5, budget=10))
    assert [r.annotated for r in recs] == [10, 20, 25]


def test_loop_is_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    ra = run_active_loop(tiny(), out_dir=a)
    rb = run_active_loop(tiny(), out_dir=b)
    assert [replace(r, wall_clock=0) for r in ra] == [replace(r, wall_clock=0) for r in rb]
    assert read_tree(a) == read_tree(b)
    assert (a / "timing.json").exists()


def test_random_and_no_retrain_variants():
    rnd = run_active_loop(tiny(acquisition="random"))
    assert all(r.annotated == 10 * r.round for r in rnd)
    flat = run_active_loop(tiny(retrain=False))
    assert all(r.retrain_set == [] and r.oracle_cost == r.annotated for r in flat)


def test_single_round_full_budget_matches_direct_fit():
    cfg = tiny(n_pool=80, n_test=300, rounds=1, budget=80, train=small_config(max_epochs=15))
    recs = run_active_loop(cfg)
    graph, bundle, oracle = prepare(cfg)
    data = oracle.annotate(sorted(bundle.pool, key=lambda s: s.id), graph)
    tcfg = replace(cfg.train, seed=_derive_seed(cfg.seed, 4, 1))
    m = GcpModel(graph, bundle.feature_dim, tcfg)
    X, truth = annotations_to_arrays(graph, data)
    fit_arrays(m, X, truth, tcfg)
    direct, _ = evaluate(m, bundle.test)
    assert recs[0].accuracy >= direct - 0.005
    flat = run_active_loop(replace(cfg, retrain=False))
    assert flat[0].accuracy == direct


def test_crash_keeps_last_completed_checkpoint(tmp_path):
    cfg = tiny(rounds=4)
    graph, bundle, oracle = prepare(cfg)
    with pytest.raises(RuntimeError):
        run_active_loop(cfg, bundle, FailingOracle(oracle, fail_at=3), graph, out_dir=tmp_path / "crash")
    assert not (tmp_path / "crash" / "checkpoint_round_3.bin").exists()
    run_active_loop(replace(cfg, rounds=2), out_dir=tmp_path / "ok")
    restored = checkpoint_load(tmp_path / "crash" / "checkpoint_round_2.bin")
    reference = checkpoint_load(tmp_path / "ok" / "checkpoint_round_2.bin")
    assert restored.flat.tobytes() == reference.flat.tobytes()
    assert not list((tmp_path / "crash").glob("*.tmp"))


def test_plateau_stop():
    recs = run_active_loop(tiny(rounds=6, stop_on_plateau=True, plateau_rounds=2, plateau_tol=1.1))
    assert len(recs) == 2


def test_reinit_and_marginal_inference_run():
    recs = run_active_loop(tiny(rounds=2, reinit=True, inference="marginal"))
    assert len(recs) == 2 and all(0 <= r.accuracy <= 1 for r in recs)


# metrics files -------------------------------------------------------------------------------------


def test_metrics_roundtrip(tmp_path):
    recs = run_active_loop(tiny())
    csv_path, json_path = emit_metrics(recs, tmp_path)
    lines = csv_path.read_text().splitlines()
    assert len(lines) == 4
    rows = read_metrics_csv(csv_path)
    for rec, row in zip(recs, rows):
        assert float(row["accuracy"]) == rec.accuracy
        assert float(row["label_nll"]) == rec.label_nll
        for n, v in rec.node_nll.items():
            assert float(row[f"nll:{n}"]) == v
        assert int(row["oracle_cost"]) == rec.oracle_cost
    first = (csv_path.read_bytes(), json_path.read_bytes())
    emit_metrics(recs, tmp_path)
    assert (csv_path.read_bytes(), json_path.read_bytes()) == first
    assert json.loads(json_path.read_text())[0]["accuracy"] == recs[0].accuracy
    assert metrics_csv(recs) == csv_path.read_text()
