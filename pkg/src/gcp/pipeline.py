"""The closed active-distillation loop, evaluation and metrics files."""
from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .acquisition import AcquisitionConfig, acquire
from .checkpoint import checkpoint_save
from .counterfactual import (
    augment_node_data,
    delta_scores,
    module_nll,
    retrain_submodules,
    select_retrain_set,
)
from .data import AnnotatedSample, DatasetBundle, FeaturizerConfig, Sample, annotations_to_arrays, ingest_text
from .errors import EmptyTestSet, OracleUnavailable
from .graph import ConceptGraph, load_graph
from .model import GcpModel, TrainConfig, fit_arrays, forward, marginal_label_distribution, node_nll
from .oracle import (
    RemoteAnnotator,
    RemoteConfig,
    StoredAnnotationOracle,
    SyntheticTeacher,
    load_task,
    synth_generate,
)

log = logging.getLogger(__name__)


@dataclass
class LoopConfig:
    # data: a synthetic task name/path, or JSON-lines files plus a graph spec
    task: str | None = "confounded"
    n_pool: int = 5000
    n_test: int = 2000
    graph: str | None = None
    pool_path: str | None = None
    test_path: str | None = None
    oracle: str = "synthetic"  # synthetic | stored | remote
    feature_dim: int = 256
    # loop
    rounds: int = 10
    budget: int = 100
    candidate_k: int | None = None
    p_norm: float = 2.0
    medoid_iters: int = 20
    retrain_budget: int = 2
    augment_pairs: int = 200
    acquisition: str = "gcp"  # gcp | random
    retrain: bool = True
    reinit: bool = False
    inference: str = "forward"  # forward | marginal
    delta_holdout: float = 0.0
    stop_on_plateau: bool = True
    plateau_rounds: int = 3
    plateau_tol: float = 1e-3
    seed: int = 0
    train: TrainConfig = field(default_factory=TrainConfig)
    retrain_train: TrainConfig | None = None

    def __post_init__(self):
        if isinstance(self.train, Mapping):
            self.train = TrainConfig.from_dict(self.train)
        if isinstance(self.retrain_train, Mapping):
            self.retrain_train = TrainConfig.from_dict(self.retrain_train)
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.budget < 1 or self.retrain_budget < 0 or self.augment_pairs < 0:
            raise ValueError("budgets must be nonnegative (B >= 1)")
        if self.plateau_rounds < 2 or self.plateau_tol < 0:
            raise ValueError("plateau criterion needs >= 2 rounds and a nonnegative tolerance")
        if self.acquisition not in ("gcp", "random"):
            raise ValueError(f"unknown acquisition {self.acquisition!r}")
        if self.inference not in ("forward", "marginal"):
            raise ValueError(f"unknown inference {self.inference!r}")
        if self.oracle not in ("synthetic", "stored", "remote"):
            raise ValueError(f"unknown oracle {self.oracle!r}")
        if not 0.0 <= self.delta_holdout < 1.0:
            raise ValueError("delta_holdout must lie in [0, 1)")

    def acquisition_config(self) -> AcquisitionConfig:
        return AcquisitionConfig(B=self.budget, k=self.candidate_k, p_norm=self.p_norm, medoid_iters=self.medoid_iters, seed=self.seed)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["train"] = self.train.to_dict()
        d["retrain_train"] = None if self.retrain_train is None else self.retrain_train.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "LoopConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        return cls(**dict(d))


def load_config(path: str | Path) -> LoopConfig:
    """Read a TOML or JSON file mirroring :class:`LoopConfig`."""
    p = Path(path)
    text = p.read_text()
    if p.suffix == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:  # Python < 3.11
            import tomli as tomllib
        data = tomllib.loads(text)
    else:
        data = json.loads(text)
    return LoopConfig.from_dict(data)


@dataclass
class RoundRecord:
    round: int
    annotated: int
    fraction: float
    accuracy: float
    label_nll: float
    node_nll: dict[str, float]
    delta: dict[str, float]
    retrain_set: list[str]
    oracle_cost: int
    wall_clock: float = 0.0


# evaluation ---------------------------------------------------------------------------


def label_distribution(model: GcpModel, X: np.ndarray, inference: str = "forward") -> np.ndarray:
    if inference == "marginal":
        return marginal_label_distribution(model, X)
    return forward(model, X).distributions[model.graph.output_id]


def evaluate(model: GcpModel, test: Sequence[AnnotatedSample], inference: str = "forward") -> tuple[float, dict[str, float]]:
    """Test accuracy of the argmax label and per-node NLL of the forward pass.

    With ``inference="marginal"`` the label distribution comes from exact
    enumeration over concept values; the per-node NLL always uses the
    forward pass.
    """
    if not test:
        raise EmptyTestSet("evaluation needs a nonempty test set")
    g = model.graph
    X, truth = annotations_to_arrays(g, test)
    out = forward(model, X)
    per_node = {n: float(node_nll(out.distributions[n], truth[n]).mean()) for n in g.non_root_ids}
    py = out.distributions[g.output_id] if inference == "forward" else marginal_label_distribution(model, X)
    acc = float(np.mean(np.argmax(py, axis=1) == truth[g.output_id]))
    return acc, per_node


def _label_nll(model: GcpModel, test: Sequence[AnnotatedSample], inference: str) -> float:
    X, truth = annotations_to_arrays(model.graph, test)
    return float(node_nll(label_distribution(model, X, inference), truth[model.graph.output_id]).mean())


# setup ------------------------------------------------------------------------------------


def _derive_seed(seed: int, *path: int) -> int:
    return int(np.random.SeedSequence([seed, *path]).generate_state(1)[0])


def prepare(config: LoopConfig, transport=None) -> tuple[ConceptGraph, DatasetBundle, object]:
    """Build the graph, data bundle and oracle described by a loop config."""
    if config.pool_path:
        if not config.graph:
            raise ValueError("dataset files need a graph spec")
        graph = load_graph(config.graph)
        feat = FeaturizerConfig(feature_dim=config.feature_dim)
        pool_b = ingest_text(config.pool_path, feat, graph)
        test_b = ingest_text(config.test_path, feat, graph, as_test=True) if config.test_path else None
        test = test_b.test if test_b else []
        if config.oracle == "stored":
            store = {a.id: a for a in pool_b.labeled}
            bundle = DatasetBundle(pool_b.pool + [a.sample for a in pool_b.labeled], [], test, store)
            oracle = StoredAnnotationOracle(store)
        elif config.oracle == "remote":
            bundle = DatasetBundle(pool_b.pool, pool_b.labeled, test)
            oracle = RemoteAnnotator(RemoteConfig(), transport)
        else:
            raise ValueError("the synthetic oracle needs a synthetic task")
        return graph, bundle, oracle
    task = load_task(config.task)
    bundle = synth_generate(task, config.n_pool, config.n_test, seed=_derive_seed(config.seed, 1))
    return task.graph, bundle, SyntheticTeacher(task, bundle, seed=_derive_seed(config.seed, 2))


# the loop ------------------------------------------------------------------------------------


class _Writer:
    def __init__(self, out: Path | None):
        self.out = out
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)

    def json(self, name: str, obj) -> None:
        if self.out is not None:
            _atomic_write(self.out / name, json.dumps(obj, indent=1, sort_keys=True) + "\n")

    def checkpoint(self, r: int, model: GcpModel) -> None:
        if self.out is not None:
            checkpoint_save(model, self.out / f"checkpoint_round_{r}.bin")


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def _plateaued(accs: Sequence[float], rounds: int, tol: float) -> bool:
    if len(accs) < rounds:
        return False
    tail = accs[-rounds:]
    return max(tail) - min(tail) < tol


def run_active_loop(
    config: LoopConfig,
    bundle: DatasetBundle | None = None,
    oracle=None,
    graph: ConceptGraph | None = None,
    out_dir: str | Path | None = None,
) -> list[RoundRecord]:
    """Acquire, annotate, fit, score, retrain and evaluate for each round."""
    if bundle is None or oracle is None or graph is None:
        graph, bundle, oracle = prepare(config)
    if not bundle.test:
        raise EmptyTestSet("the loop needs an annotated test set")
    writer = _Writer(Path(out_dir) if out_dir is not None else None)
    rng = np.random.default_rng(_derive_seed(config.seed, 3))
    pool: dict[str, Sample] = {s.id: s for s in sorted(bundle.pool, key=lambda s: s.id)}
    n_total = len(pool) + len(bundle.labeled)
    annotated: list[AnnotatedSample] = list(bundle.labeled)
    acq_cfg = config.acquisition_config()
    model: GcpModel | None = None
    records: list[RoundRecord] = []
    timing = []
    for r in range(1, config.rounds + 1):
        if not pool:
            break
        t0 = time.perf_counter()
        B = min(config.budget, len(pool))
        ids = sorted(pool)
        report = {"round": r}
        if r == 1 or config.acquisition == "random" or model is None:
            chosen = [ids[i] for i in np.sort(rng.choice(len(ids), size=B, replace=False))]
            report.update({"mode": "random", "chosen": chosen})
        else:
            cfg = AcquisitionConfig(B=B, k=min(acq_cfg.k, len(pool)), p_norm=acq_cfg.p_norm, medoid_iters=acq_cfg.medoid_iters, seed=acq_cfg.seed)
            sel, scores = acquire(model, list(pool.values()), [a.sample for a in annotated], cfg)
            chosen = sel.consensus
            report.update({"mode": "gcp", **sel.to_dict(scores)})
        writer.json(f"acquisition_round_{r}.json", report)

        new = oracle.annotate([pool[i] for i in chosen], graph)
        for a in new:
            del pool[a.id]
        annotated.extend(new)

        tcfg = TrainConfig.from_dict({**config.train.to_dict(), "seed": _derive_seed(config.seed, 4, r)})
        if model is None or config.reinit:
            model = GcpModel(graph, len(annotated[0].sample.features), tcfg)
        X, truth = annotations_to_arrays(graph, annotated)
        fit_arrays(model, X, truth, tcfg)

        # Delta scores on the annotated pool (optionally a held-out slice of it)
        delta_data = annotated
        if config.delta_holdout > 0:
            k = max(1, int(round(config.delta_holdout * len(annotated))))
            delta_data = annotated[-k:]
        drep = delta_scores(model, delta_data)
        retrain_set: list[str] = []
        module_report = {}
        if config.retrain and config.retrain_budget > 0:
            retrain_set = select_retrain_set(drep.delta, config.retrain_budget, exclude=[graph.output_id])
            pairs = []
            for node in retrain_set:
                try:
                    pairs.extend(augment_node_data(oracle, graph, node, config.augment_pairs))
                except OracleUnavailable:
                    log.info("oracle cannot generate pairs; retraining %s on annotated data only", node)
            before = {n: module_nll(model, n, bundle.test) for n in retrain_set}
            rcfg = config.retrain_train or tcfg
            rcfg = TrainConfig.from_dict({**rcfg.to_dict(), "seed": _derive_seed(config.seed, 5, r)})
            if retrain_set:
                retrain_submodules(model, retrain_set, annotated, pairs, rcfg)
            module_report = {n: {"before": before[n], "after": module_nll(model, n, bundle.test)} for n in retrain_set}
        drep.retrain_set = retrain_set
        writer.json(f"delta_round_{r}.json", {"round": r, **drep.to_dict(), "held_out_module_nll": module_report})

        acc, per_node = evaluate(model, bundle.test, config.inference)
        label_nll = per_node[graph.output_id] if config.inference == "forward" else _label_nll(model, bundle.test, config.inference)
        writer.checkpoint(r, model)
        elapsed = time.perf_counter() - t0
        timing.append({"round": r, "seconds": elapsed})
        records.append(
            RoundRecord(r, len(annotated), len(annotated) / n_total, acc, label_nll, per_node, drep.delta, retrain_set, oracle.cost, elapsed)
        )
        log.info("round %d: %d annotated, accuracy %.4f", r, len(annotated), acc)
        if config.stop_on_plateau and _plateaued([x.accuracy for x in records], config.plateau_rounds, config.plateau_tol):
            break
    if writer.out is not None:
        emit_metrics(records, writer.out)
        writer.json("timing.json", timing)
    return records


# metrics files ----------------------------------------------------------------------------


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def metrics_columns(records: Sequence[RoundRecord]) -> list[str]:
    nodes = list(records[0].node_nll) if records else []
    cols = ["round", "annotated", "fraction", "accuracy", "label_nll", "oracle_cost", "retrain_set"]
    cols += [f"nll:{n}" for n in nodes] + [f"delta:{n}" for n in nodes]
    return cols


def metrics_csv(records: Sequence[RoundRecord]) -> str:
    cols = metrics_columns(records)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for rec in records:
        row = [rec.round, rec.annotated, _fmt(rec.fraction), _fmt(rec.accuracy), _fmt(rec.label_nll), rec.oracle_cost, ";".join(rec.retrain_set)]
        row += [_fmt(rec.node_nll[c[4:]]) for c in cols if c.startswith("nll:")]
        row += [_fmt(rec.delta.get(c[6:], float("nan"))) for c in cols if c.startswith("delta:")]
        w.writerow(row)
    return buf.getvalue()


def emit_metrics(records: Sequence[RoundRecord], out_dir: str | Path) -> tuple[Path, Path]:
    """Write metrics.csv and its JSON mirror; wall-clock time is left out of both."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = out / "metrics.csv", out / "metrics.json"
    _atomic_write(csv_path, metrics_csv(records))
    rows = []
    for rec in records:
        d = asdict(rec)
        d.pop("wall_clock")
        rows.append(d)
    _atomic_write(json_path, json.dumps(rows, indent=1, sort_keys=True) + "\n")
    return csv_path, json_path


def read_metrics_csv(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
