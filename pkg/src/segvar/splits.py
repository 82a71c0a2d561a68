"""Held-out test split, the nine overlapping training sets driving the
variance analysis, and plain k-folds for cross-validated evaluation.

All splits shuffle with a seeded generator and are deterministic per seed;
patient-level grouping (no patient straddles a boundary) is the default.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .imgcore import Manifest


@dataclass
class SplitPlan:
    """One test set plus n training sets, each the pool minus one fold."""

    test_ids: list
    training_sets: list
    seed: int

    def __post_init__(self):
        test = set(self.test_ids)
        for k, ids in enumerate(self.training_sets):
            overlap = test & set(ids)
            if overlap:
                raise ValueError(f"training set {k} overlaps the test set: {sorted(overlap)}")


@dataclass
class KfoldPlan:
    folds: list
    seed: int


def _units(manifest: Manifest, group_by_patient):
    """Shuffling units: (unit key, [record ids]) in first-appearance order."""
    if not group_by_patient:
        return [(r.id, [r.id]) for r in manifest.records]
    order = {}
    for r in manifest.records:
        order.setdefault(r.patient, []).append(r.id)
    return list(order.items())


def _shuffled(units, seed):
    perm = np.random.default_rng(seed).permutation(len(units))
    return [units[i] for i in perm]


def holdout_split(manifest: Manifest, test_frac, seed, group_by_patient=True):
    """Set apart ceil(test_frac * n_units) shuffled units as the test set."""
    if not 0 < test_frac < 1:
        raise ValueError(f"test_frac must lie in (0,1), got {test_frac}")
    units = _shuffled(_units(manifest, group_by_patient), seed)
    n_test = math.ceil(test_frac * len(units))
    if n_test >= len(units):
        raise ValueError("test split would empty the training pool")
    test_ids = [i for _, ids in units[:n_test] for i in ids]
    pool_ids = [i for _, ids in units[n_test:] for i in ids]
    return test_ids, pool_ids


def make_training_sets(pool_ids, n_sets, seed, patient_of=None):
    """Shuffle the pool, cut it into n folds, return the n leave-one-fold-out sets.

    `patient_of` (id -> patient) makes the folds respect patient boundaries;
    the discarded per-fold validation sets are not returned.
    """
    if patient_of is None:
        units = [(i, [i]) for i in pool_ids]
    else:
        order = {}
        for i in pool_ids:
            order.setdefault(patient_of[i], []).append(i)
        units = list(order.items())
    if len(units) < n_sets:
        raise ValueError(f"pool of {len(units)} units cannot form {n_sets} folds")
    units = _shuffled(units, seed)
    bounds = np.linspace(0, len(units), n_sets + 1).astype(int)
    folds = [units[bounds[k] : bounds[k + 1]] for k in range(n_sets)]
    training_sets = []
    for k in range(n_sets):
        kept = [u for j, fold in enumerate(folds) if j != k for u in fold]
        training_sets.append([i for _, ids in kept for i in ids])
    return training_sets


def kfold(manifest: Manifest, k, seed, group_by_patient=True):
    """Partition the manifest into k folds balanced by unit count."""
    if k < 2:
        raise ValueError("k must be at least 2")
    units = _units(manifest, group_by_patient)
    if len(units) < k:
        raise ValueError(f"{len(units)} units cannot fill {k} folds")
    units = _shuffled(units, seed)
    bounds = np.linspace(0, len(units), k + 1).astype(int)
    folds = [
        [i for _, ids in units[bounds[j] : bounds[j + 1]] for i in ids]
        for j in range(k)
    ]
    return KfoldPlan(folds=folds, seed=seed)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def save_split_plan(plan: SplitPlan, path):
    obj = {
        "seed": plan.seed,
        "test_ids": plan.test_ids,
        "training_sets": plan.training_sets,
    }
    Path(path).write_text(json.dumps(obj, indent=1) + "\n")


def load_split_plan(path):
    obj = json.loads(Path(path).read_text())
    return SplitPlan(
        test_ids=obj["test_ids"], training_sets=obj["training_sets"], seed=obj["seed"]
    )


def save_kfold_plan(plan: KfoldPlan, path):
    Path(path).write_text(
        json.dumps({"seed": plan.seed, "folds": plan.folds}, indent=1) + "\n"
    )


def load_kfold_plan(path):
    obj = json.loads(Path(path).read_text())
    return KfoldPlan(folds=obj["folds"], seed=obj["seed"])
