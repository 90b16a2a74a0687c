"""Builders for the pinned synthetic tasks shipped as JSON next to this file.

Run ``python -m gcp.tasks.builder`` to regenerate the JSON files; a test
checks that the shipped files match these builders exactly.
"""
from __future__ import annotations

import itertools
from pathlib import Path

import numpy as np

from ..graph import build_graph
from ..oracle import SyntheticTask

HERE = Path(__file__).resolve().parent


def _noisy(value: int, d: int, noise: float) -> list[float]:
    row = [noise / (d - 1)] * d
    row[value] = 1.0 - noise
    return row


def default_task(feature_dim: int = 8) -> SyntheticTask:
    """Two binary concepts sharing a fair hidden coin; label says whether they agree.

    c1 and c2 each copy u and flip with probability 0.1; y = 1[c1 = c2]. The
    four regions are the sign cells of the first two coordinates and play no
    role in the tables.
    """
    nodes = [
        {"id": "x", "name": "input", "cardinality": 0, "description": "raw features"},
        {"id": "c1", "name": "first reading", "cardinality": 2, "description": "noisy copy of the hidden coin"},
        {"id": "c2", "name": "second reading", "cardinality": 2, "description": "noisy copy of the hidden coin"},
        {"id": "y", "name": "agreement", "cardinality": 2, "description": "whether both readings agree"},
    ]
    edges = [["x", "c1"], ["x", "c2"], ["c1", "c2"], ["c1", "y"], ["c2", "y"]]
    g = build_graph({"nodes": nodes, "edges": edges})
    R = 4
    normals = np.eye(2, feature_dim)
    c1 = np.array([[[_noisy(u, 2, 0.1)] for u in range(2)]] * R)
    c2 = np.array([[[_noisy(u, 2, 0.1)] * 2 for u in range(2)]] * R)
    ycfg = [[0.0, 1.0] if a == b else [1.0, 0.0] for a, b in itertools.product(range(2), range(2))]
    y = np.array([[ycfg] * 2] * R)
    return SyntheticTask(
        name="default",
        feature_dim=feature_dim,
        graph=g,
        normals=normals,
        offsets=np.zeros(2),
        latent_prior=np.full((R, 2), 0.5),
        tables={"c1": c1, "c2": c2, "y": y},
        latent_confounder=True,
        seed=0,
        description="two noisy readings of one hidden coin; label is their agreement",
    )


def confounded_task(
    feature_dim: int = 8,
    n_factors: int = 5,
    flip_rate: float = 0.1,
    concept_noise: float = 0.01,
    label_noise: float = 0.01,
    seed: int = 20240611,
) -> SyntheticTask:
    """Parity of halfspace factors, all flipped together by a shared hidden cause.

    Factor j is ``s_j(x) = 1[n_j . x > 0]`` for a fixed random direction.
    The hidden cause u ~ Bern(flip_rate) flips every factor concept at once,
    and the indicator concept ``flip`` reports u directly. The label is the
    parity of the factor concepts, so the shared flips cancel in it while
    making the factor concepts strongly dependent given x.
    """
    rng = np.random.default_rng(seed)
    normals = rng.standard_normal((n_factors, feature_dim))
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    R = 2**n_factors
    factors = [f"f{j + 1}" for j in range(n_factors)]
    nodes = [{"id": "x", "name": "input", "cardinality": 0, "description": "raw features"}]
    nodes.append({"id": "flip", "name": "flip", "cardinality": 2, "description": "whether the hidden cause is active"})
    for j, f in enumerate(factors):
        nodes.append({"id": f, "name": f"factor {j + 1}", "cardinality": 2, "description": f"side of hyperplane {j + 1}, possibly flipped"})
    nodes.append({"id": "y", "name": "parity", "cardinality": 2, "description": "parity of the factor concepts"})
    edges = [["x", "flip"]]
    for f in factors:
        edges += [["x", f], ["flip", f], [f, "y"]]
    g = build_graph({"nodes": nodes, "edges": edges})

    bits = np.array([[(r >> j) & 1 for j in range(n_factors)] for r in range(R)])
    flip = np.array([[[_noisy(u, 2, concept_noise)] for u in range(2)] for _ in range(R)])
    tables = {"flip": flip}
    for j, f in enumerate(factors):
        # parent config index is the value of ``flip``; only u drives the flip
        t = np.empty((R, 2, 2, 2))
        for r in range(R):
            for u in range(2):
                t[r, u, :, :] = _noisy(int(bits[r, j] ^ u), 2, concept_noise)
        tables[f] = t
    ycfg = []
    for cfg in itertools.product(range(2), repeat=n_factors):
        ycfg.append(_noisy(int(sum(cfg) % 2), 2, label_noise))
    tables["y"] = np.array([[ycfg] * 2] * R)
    prior = np.tile([1.0 - flip_rate, flip_rate], (R, 1))
    return SyntheticTask(
        name="confounded",
        feature_dim=feature_dim,
        graph=g,
        normals=normals,
        offsets=np.zeros(n_factors),
        latent_prior=prior,
        tables=tables,
        latent_confounder=True,
        seed=seed,
        description="parity of hyperplane factors under a shared hidden flip",
    )


BUILDERS = {"default": default_task, "confounded": confounded_task}


def write_all(directory: Path = HERE) -> None:
    for name, build in BUILDERS.items():
        build().save(directory / f"{name}.json")


if __name__ == "__main__":
    write_all()
