"""Ensemble aggregation: voting rules, K-subset statistics, standardization,
weighted mixing with a constrained weight grid, and the bagging protocol."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np

from .evaluate import metrics
from .numerics import seeded_rng, softmax
from .pointcloud import BaggingSpec, LabeledDataset, make_split
from .scores import ScoreMatrix, check_aligned, predictions

METHODS = ("raw_mean", "soft_vote", "hard_vote")


def aggregate(matrices: Sequence[ScoreMatrix], method: str = "raw_mean") -> ScoreMatrix:
    """Combine K aligned score matrices.

    ``raw_mean`` averages raw activations, ``soft_vote`` averages per-row
    softmax distributions and ``hard_vote`` averages one-hot argmax votes.
    """
    if method not in METHODS:
        raise ValueError(f"unknown ensemble method {method!r}")
    if len(matrices) == 0:
        raise ValueError("cannot aggregate zero matrices")
    check_aligned(matrices)
    k = len(matrices)
    if method == "raw_mean":
        stack = np.stack([m.scores for m in matrices])
    elif method == "soft_vote":
        stack = np.stack([softmax(m.scores, axis=1) for m in matrices])
    else:
        c = matrices[0].n_classes
        votes = np.zeros(matrices[0].scores.shape)
        for m in matrices:
            votes += np.eye(c)[predictions(m)]
        return matrices[0].with_scores(votes / k, f"hard_vote[{k}]")
    # sort along the model axis so the mean does not depend on input order
    return matrices[0].with_scores(np.sort(stack, axis=0).mean(axis=0), f"{method}[{k}]")


@dataclass(frozen=True)
class SubsetPolicy:
    mode: str = "exhaustive_if_small"   # or "random_sample"
    cap: int = 5000
    n_random: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("exhaustive_if_small", "random_sample"):
            raise ValueError(f"unknown subset policy {self.mode!r}")
        if self.n_random < 1:
            raise ValueError("n_random must be >= 1")


@dataclass(frozen=True)
class SubsetStats:
    k: int
    method: str
    n_subsets: int
    instance_mean: float
    instance_std: float
    class_mean: float
    class_std: float


def choose_subsets(n: int, k: int, policy: SubsetPolicy) -> list[tuple[int, ...]]:
    if not 1 <= k <= n:
        raise ValueError(f"K={k} must be in [1, {n}]")
    total = math.comb(n, k)
    if policy.mode == "exhaustive_if_small" and total <= policy.cap:
        return list(itertools.combinations(range(n), k))
    rng = seeded_rng(policy.seed)
    want = min(policy.n_random, total)
    seen: list[tuple[int, ...]] = []
    while len(seen) < want:
        s = tuple(sorted(rng.choice(n, size=k, replace=False).tolist()))
        if s not in seen:
            seen.append(s)
    return seen


def evaluate_k_subsets(matrices: Sequence[ScoreMatrix], k: int, method: str = "raw_mean",
                       policy: SubsetPolicy = SubsetPolicy()) -> SubsetStats:
    """Mean and population std of instance / mean-class accuracy over K-subsets of the models."""
    check_aligned(matrices)
    subsets = choose_subsets(len(matrices), k, policy)
    c = matrices[0].n_classes
    inst, cls = [], []
    for s in subsets:
        ens = aggregate([matrices[i] for i in s], method)
        r = metrics(predictions(ens), ens.labels, c)
        inst.append(r.instance_accuracy)
        cls.append(r.mean_class_accuracy)
    return SubsetStats(k, method, len(subsets), float(np.mean(inst)), float(np.std(inst)),
                       float(np.mean(cls)), float(np.std(cls)))


def pooled_std(m: ScoreMatrix) -> float:
    return float(np.std(m.scores))


def standardize(target: ScoreMatrix, train_scores: ScoreMatrix) -> ScoreMatrix:
    """Divide ``target`` by the pooled standard deviation of all ``train_scores`` entries."""
    sigma = pooled_std(train_scores)
    if not sigma > 0:
        raise ValueError("training scores are constant; cannot standardize")
    return target.with_scores(target.scores / sigma)


def _check_weights(weights: Sequence[float]) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0):
        raise ValueError("weights must be non-negative")
    if abs(w.sum() - 1.0) > 1e-9:
        raise ValueError(f"weights sum to {w.sum()!r}, not 1")
    return w


def weighted_mix(sources: Sequence[ScoreMatrix], weights: Sequence[float]) -> ScoreMatrix:
    """Elementwise sum of ``weights[i] * sources[i].scores``."""
    if len(sources) != len(weights):
        raise ValueError("one weight per source is required")
    check_aligned(sources)
    w = _check_weights(weights)
    mixed = np.zeros(sources[0].scores.shape)
    for wi, s in zip(w, sources):
        mixed += wi * s.scores
    return sources[0].with_scores(mixed, "mix")


@dataclass(frozen=True)
class WeightRange:
    lo: float = 0.0
    hi: float = 1.0
    lo_open: bool = False
    hi_open: bool = False

    def contains(self, w: float, tol: float = 1e-9) -> bool:
        above = w > self.lo + tol if self.lo_open else w >= self.lo - tol
        below = w < self.hi - tol if self.hi_open else w <= self.hi + tol
        return above and below


@dataclass(frozen=True)
class GridResult:
    weights: tuple[float, ...]
    instance_accuracy: float
    mean_class_accuracy: float


def grid_units(step: float) -> int:
    m = int(round(1.0 / step))
    if step <= 0 or m < 1 or abs(m * step - 1.0) > 1e-9:
        raise ValueError(f"grid step {step} does not divide 1")
    return m


def weight_lattice(n_sources: int, step: float,
                   constraints: Mapping[int, WeightRange] | None = None) -> list[tuple[float, ...]]:
    """All weight vectors on the simplex lattice of spacing ``step`` that satisfy the ranges."""
    m = grid_units(step)
    constraints = dict(constraints or {})
    ok = [constraints.get(i, WeightRange()) for i in range(n_sources)]
    out = []

    def rec(prefix: list[int], left: int):
        i = len(prefix)
        if i == n_sources - 1:
            if ok[i].contains(left / m):
                out.append(tuple(u / m for u in prefix + [left]))
            return
        for u in range(left + 1):
            if ok[i].contains(u / m):
                rec(prefix + [u], left - u)

    rec([], m)
    if not out:
        raise ValueError("no weight vector on the grid satisfies the constraints")
    return out


def weight_grid_search(sources: Sequence[ScoreMatrix], step: float = 0.05,
                       constraints: Mapping[int, WeightRange] | None = None) -> list[GridResult]:
    """Evaluate every feasible weight vector on (standardized) validation scores.

    Sorted by instance accuracy (descending), then weights (ascending).
    """
    check_aligned(sources)
    c = sources[0].n_classes
    results = []
    for w in weight_lattice(len(sources), step, constraints):
        mix = weighted_mix(sources, w)
        r = metrics(predictions(mix), mix.labels, c)
        results.append(GridResult(w, r.instance_accuracy, r.mean_class_accuracy))
    results.sort(key=lambda g: (-g.instance_accuracy, g.weights))
    return results


@dataclass(frozen=True)
class BaggingRow:
    fraction: float
    variant: str             # without_replacement | with_replacement | simple
    n_models: int
    single_instance_mean: float
    single_instance_std: float
    ensemble_instance: float
    instance_gain: float
    single_class_mean: float
    ensemble_class: float
    class_gain: float


def _bag_summary(fraction, variant, mats, n_classes) -> BaggingRow:
    singles = [metrics(predictions(m), m.labels, n_classes) for m in mats]
    ens = aggregate(mats, "raw_mean")
    e = metrics(predictions(ens), ens.labels, n_classes)
    si = np.array([r.instance_accuracy for r in singles])
    sc = np.array([r.mean_class_accuracy for r in singles])
    return BaggingRow(fraction, variant, len(mats), float(si.mean()), float(si.std()),
                      e.instance_accuracy, e.instance_accuracy - float(si.mean()),
                      float(sc.mean()), e.mean_class_accuracy, e.mean_class_accuracy - float(sc.mean()))


def run_bagging_experiment(dataset: LabeledDataset, arch, cfg, train_indices: Sequence[int],
                           eval_indices: Sequence[int],
                           fractions: Sequence[float] = tuple(i / 10 for i in range(1, 10)),
                           n_instances: int = 10, seed_root: int = 0, jobs: int = 1) -> list[BaggingRow]:
    """Bagging without replacement per fraction, bagging with replacement and the
    simple (full training set) ensemble, each over ``n_instances`` models.

    Instance ``i`` uses split seed and model seeds ``seed_root + i``; the
    with/without-replacement and simple variants are trained once and repeated
    on every fraction row.
    """
    from .models import SeedBundle, predict_scores, train_many

    for f in fractions:
        if not 0.0 < f <= 1.0:
            raise ValueError(f"fraction {f} outside (0, 1]")
    pool = np.asarray(train_indices, dtype=np.int64)
    specs: list[tuple[str, float, BaggingSpec]] = []
    for f in fractions:
        specs += [("without_replacement", f, BaggingSpec("without_replacement", f, seed_root + i))
                  for i in range(n_instances)]
    specs += [("with_replacement", 1.0, BaggingSpec("with_replacement", 1.0, seed_root + i))
              for i in range(n_instances)]
    specs += [("simple", 1.0, BaggingSpec("full", 1.0, seed_root + i)) for i in range(n_instances)]
    tasks = [(arch, dataset, make_split(pool, spec), SeedBundle.varied(seed_root, spec.seed - seed_root), cfg)
             for _, _, spec in specs]
    models = train_many(tasks, jobs)
    mats = [predict_scores(m, dataset, eval_indices, f"{v}:{f}") for m, (v, f, _) in zip(models, specs)]

    def group(variant, frac=None):
        return [m for m, (v, f, _) in zip(mats, specs) if v == variant and (frac is None or f == frac)]

    c = dataset.n_classes
    with_rep = _bag_summary(1.0, "with_replacement", group("with_replacement"), c)
    simple = _bag_summary(1.0, "simple", group("simple"), c)
    rows = []
    for f in fractions:
        rows.append(_bag_summary(f, "without_replacement", group("without_replacement", f), c))
        rows.append(replace(with_rep, fraction=f))
        rows.append(replace(simple, fraction=f))
    return rows
