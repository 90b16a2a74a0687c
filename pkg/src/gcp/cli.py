"""Command-line entry point: ``gcp <subcommand> [--config FILE] [--seed S] [--out DIR]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .acquisition import acquire
from .bench import BenchConfig, bench_theorems
from .checkpoint import checkpoint_load, checkpoint_save
from .counterfactual import augment_node_data, delta_scores, module_nll, retrain_submodules, select_retrain_set
from .data import annotations_to_arrays
from .errors import GcpError, OracleUnavailable
from .graph import save_graph
from .model import GcpModel, fit_arrays
from .oracle import load_task, synth_generate
from .pipeline import LoopConfig, _derive_seed, evaluate, load_config, prepare, run_active_loop

log = logging.getLogger("gcp")

LABELED_FILE = "labeled_ids.json"
MODEL_FILE = "model.bin"


def _config(args) -> LoopConfig:
    cfg = load_config(args.config) if args.config else LoopConfig()
    over = {}
    for flag, name in (
        ("seed", "seed"),
        ("budget", "budget"),
        ("candidate_k", "candidate_k"),
        ("p_norm", "p_norm"),
        ("retrain_budget", "retrain_budget"),
        ("augment_pairs", "augment_pairs"),
        ("rounds", "rounds"),
    ):
        v = getattr(args, flag, None)
        if v is not None:
            over[name] = v
    if getattr(args, "reinit", False):
        over["reinit"] = True
    return replace(cfg, **over) if over else cfg


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dump(obj, path: Path | None = None) -> None:
    text = json.dumps(obj, indent=1, sort_keys=True)
    if path is not None:
        path.write_text(text + "\n")
    print(text)


def _checkpoint_path(args) -> Path:
    return Path(args.checkpoint) if args.checkpoint else Path(args.out) / MODEL_FILE


def _labeled(args, bundle, oracle, graph):
    """Annotated samples listed in the labeled-ids file next to the checkpoint."""
    path = Path(args.labeled) if getattr(args, "labeled", None) else _checkpoint_path(args).with_name(LABELED_FILE)
    ids = json.loads(path.read_text()) if path.exists() else []
    by_id = {s.id: s for s in bundle.pool}
    known = {a.id: a for a in bundle.labeled}
    fresh = [by_id[i] for i in ids if i in by_id and i not in known]
    return [known[i] for i in ids if i in known] + (oracle.annotate(fresh, graph) if fresh else [])


# subcommands ----------------------------------------------------------------------------


def cmd_synth(args) -> int:
    task = load_task(args.task)
    cfg = _config(args)
    bundle = synth_generate(task, args.n_pool, args.n_test, seed=cfg.seed)
    out = _out(args)
    save_graph(task.graph, out / "graph.json")
    task.save(out / "task.json")

    def rec(a):
        return {"id": a.id, "features": a.sample.features.tolist(), "concepts": dict(a.concepts), "label": a.label}

    with open(out / "pool.jsonl", "w") as fh:
        for s in bundle.pool:
            fh.write(json.dumps(rec(bundle.oracle_store[s.id])) + "\n")
    with open(out / "test.jsonl", "w") as fh:
        for a in bundle.test:
            fh.write(json.dumps(rec(a)) + "\n")
    _dump({"task": task.name, "pool": len(bundle.pool), "test": len(bundle.test), "out": str(out)})
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    graph, bundle, oracle = prepare(cfg)
    out = _out(args)
    labeled = list(bundle.labeled)
    if not labeled:
        n = min(args.n_labeled or cfg.budget, len(bundle.pool))
        rng = np.random.default_rng(_derive_seed(cfg.seed, 3))
        pick = np.sort(rng.choice(len(bundle.pool), size=n, replace=False))
        labeled = oracle.annotate([bundle.pool[i] for i in pick], graph)
    tcfg = replace(cfg.train, seed=_derive_seed(cfg.seed, 4, 0))
    model = GcpModel(graph, bundle.feature_dim, tcfg)
    X, truth = annotations_to_arrays(graph, labeled)
    _, history = fit_arrays(model, X, truth, tcfg)
    checkpoint_save(model, out / MODEL_FILE)
    (out / LABELED_FILE).write_text(json.dumps([a.id for a in labeled]) + "\n")
    report = {"annotated": len(labeled), "epochs": len(history), "checkpoint": str(out / MODEL_FILE)}
    if bundle.test:
        acc, per_node = evaluate(model, bundle.test, cfg.inference)
        report.update({"accuracy": acc, "node_nll": per_node})
    _dump(report, out / "train_report.json")
    return 0


def cmd_acquire(args) -> int:
    cfg = _config(args)
    graph, bundle, oracle = prepare(cfg)
    model = checkpoint_load(_checkpoint_path(args))
    labeled = _labeled(args, bundle, oracle, graph)
    taken = {a.id for a in labeled}
    pool = [s for s in bundle.pool if s.id not in taken]
    acfg = cfg.acquisition_config()
    acfg = replace(acfg, B=min(acfg.B, len(pool)), k=min(acfg.k, len(pool)))
    sel, scores = acquire(model, pool, [a.sample for a in labeled], acfg)
    out = _out(args)
    _dump(sel.to_dict(scores), out / "acquisition.json")
    return 0


def cmd_retrain(args) -> int:
    cfg = _config(args)
    graph, bundle, oracle = prepare(cfg)
    model = checkpoint_load(_checkpoint_path(args))
    labeled = _labeled(args, bundle, oracle, graph)
    rep = delta_scores(model, labeled)
    chosen = select_retrain_set(rep.delta, max(cfg.retrain_budget, 1), exclude=[graph.output_id])
    pairs = []
    for node in chosen:
        try:
            pairs.extend(augment_node_data(oracle, graph, node, cfg.augment_pairs))
        except OracleUnavailable:
            log.info("oracle cannot generate pairs; retraining %s on annotated data only", node)
    held = bundle.test or labeled
    before = {n: module_nll(model, n, held) for n in chosen}
    rcfg = replace(cfg.retrain_train or cfg.train, seed=_derive_seed(cfg.seed, 5, 0))
    if chosen:
        retrain_submodules(model, chosen, labeled, pairs, rcfg)
    rep.retrain_set = chosen
    out = _out(args)
    checkpoint_save(model, out / MODEL_FILE)
    report = {**rep.to_dict(), "held_out_module_nll": {n: {"before": before[n], "after": module_nll(model, n, held)} for n in chosen}}
    _dump(report, out / "delta.json")
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    _, bundle, _ = prepare(cfg)
    model = checkpoint_load(_checkpoint_path(args))
    acc, per_node = evaluate(model, bundle.test, cfg.inference)
    _dump({"accuracy": acc, "node_nll": per_node, "test_size": len(bundle.test)}, _out(args) / "eval.json")
    return 0


def cmd_loop(args) -> int:
    cfg = _config(args)
    records = run_active_loop(cfg, out_dir=_out(args))
    _dump([{"round": r.round, "annotated": r.annotated, "accuracy": r.accuracy} for r in records])
    return 0


def cmd_bench(args) -> int:
    cfg = BenchConfig(scaling=not args.skip_scaling, loop=args.loop, seed=args.seed or 0)
    report = bench_theorems(cfg)
    report["top_b"].pop("cases", None)
    _dump(report, _out(args) / "bench.json")
    return 0 if report["passed"] else 1


# parser ---------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML or JSON file with LoopConfig fields")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", default="gcp_out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    loopish = argparse.ArgumentParser(add_help=False)
    loopish.add_argument("--budget", type=int, help="samples annotated per round (B)")
    loopish.add_argument("--candidate-k", type=int, help="candidates per acquisition criterion")
    loopish.add_argument("--p-norm", type=float)
    loopish.add_argument("--retrain-budget", type=int, help="modules retrained per round (b)")
    loopish.add_argument("--augment-pairs", type=int, help="oracle pairs per retrained module (K)")

    model_in = argparse.ArgumentParser(add_help=False)
    model_in.add_argument("--checkpoint", help=f"model checkpoint (default: OUT/{MODEL_FILE})")
    model_in.add_argument("--labeled", help=f"JSON list of annotated ids (default: {LABELED_FILE} next to the checkpoint)")

    p = argparse.ArgumentParser(prog="gcp", description="Graph of concept predictors: active distillation toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="write a synthetic dataset as JSON lines")
    s.add_argument("--task", default="confounded", help="pinned task name or task JSON path")
    s.add_argument("--n-pool", type=int, default=5000)
    s.add_argument("--n-test", type=int, default=2000)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", parents=[common], help="fit a model on an initial labeled set")
    s.add_argument("--n-labeled", type=int, help="random pool samples to annotate (default: budget)")
    s.add_argument("--budget", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("acquire", parents=[common, loopish, model_in], help="select the next batch to annotate")
    s.set_defaults(func=cmd_acquire)

    s = sub.add_parser("retrain", parents=[common, loopish, model_in], help="score nodes by Delta and retrain the top modules")
    s.set_defaults(func=cmd_retrain)

    s = sub.add_parser("eval", parents=[common, model_in], help="evaluate a checkpoint on the test set")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("loop", parents=[common, loopish], help="run the full active-learning loop")
    s.add_argument("--rounds", type=int)
    s.add_argument("--reinit", action="store_true", help="train from scratch every round")
    s.set_defaults(func=cmd_loop)

    s = sub.add_parser("bench", parents=[common], help="run the benchmark checks")
    s.add_argument("--loop", action="store_true", help="also run the full/random/no-retrain loop comparison")
    s.add_argument("--skip-scaling", action="store_true")
    s.set_defaults(func=cmd_bench)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (GcpError, ValueError, OSError) as e:
        print(f"gcp {args.command}: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
