"""Overlap metrics (DSC, sensitivity, specificity) on binary masks and the
cross-validated evaluation harness comparing model kinds."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .augment import resize_eval
from .biasvar import paired_t_test
from .errors import DegenerateVarianceError
from .imgcore import BinaryMask, Manifest, load_pnm
from .learner import TrainConfig, predict_mask, train
from .splits import KfoldPlan


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self):
        return self.tp + self.fp + self.tn + self.fn


@dataclass
class EvalRow:
    kind: str
    task: str
    n: int
    dsc_mean: float
    dsc_std: float
    sens_mean: float
    sens_std: float
    spec_mean: float
    spec_std: float


@dataclass
class PairedComparison:
    kind_a: str
    kind_b: str
    task: str
    result: object  # TTestResult, or None when the differences are degenerate
    note: str = ""


def confusion(pred: BinaryMask, truth: BinaryMask):
    """Exact pixel counts of the 2x2 confusion table."""
    if pred.data.shape != truth.data.shape:
        raise ValueError("prediction and truth shapes differ")
    p = pred.data.astype(bool)
    t = truth.data.astype(bool)
    return ConfusionCounts(
        tp=int((p & t).sum()),
        fp=int((p & ~t).sum()),
        tn=int((~p & ~t).sum()),
        fn=int((~p & t).sum()),
    )


def dsc(pred: BinaryMask, truth: BinaryMask):
    """Dice similarity 2|A n B| / (|A| + |B|); 1 when both masks are empty."""
    c = confusion(pred, truth)
    denom = 2 * c.tp + c.fp + c.fn
    if denom == 0:
        return 1.0
    return 2.0 * c.tp / denom


def sensitivity(c: ConfusionCounts):
    """True-positive rate tp/(tp+fn); 1 when the positive class is empty."""
    if c.tp + c.fn == 0:
        return 1.0
    return c.tp / (c.tp + c.fn)


def specificity(c: ConfusionCounts):
    """True-negative rate tn/(tn+fp); 1 when the negative class is empty."""
    if c.tn + c.fp == 0:
        return 1.0
    return c.tn / (c.tn + c.fp)


# ---------------------------------------------------------------------------
# Cross-validated evaluation
# ---------------------------------------------------------------------------

_TASKS_BY_KIND = {
    "srsn-tumor": ("tumor",),
    "srsn-rectum": ("rectum",),
    "mrsn": ("tumor", "rectum"),
    "mrsn-aug": ("tumor", "rectum"),
}


def _default_fit(manifest, cfg, aug_cfg, seed):
    def fit(kind, train_ids, fold_idx):
        rng = np.random.default_rng([seed, fold_idx])
        aug = aug_cfg if kind == "mrsn-aug" else None
        return train(kind, train_ids, manifest, rng, cfg, aug_cfg=aug)

    return fit


def _default_predict(manifest, cfg, eval_size):
    def predict(model, record, task):
        img = load_pnm(manifest.resolve(record.image))
        img, _ = resize_eval(img, (), eval_size)
        return predict_mask(model, img, task, threshold=cfg.threshold)

    return predict


def _eval_truth(manifest, record, task, eval_size):
    path = record.tumor_mask if task == "tumor" else record.rectum_mask
    mask = load_pnm(manifest.resolve(path))
    _, (out,) = resize_eval(
        load_pnm(manifest.resolve(record.image)), (mask,), eval_size
    )
    return out


def crossval_evaluate(
    manifest: Manifest,
    plan: KfoldPlan,
    kinds,
    cfg: TrainConfig,
    seed,
    eval_size=64,
    aug_cfg=None,
    fit_fn=None,
    predict_fn=None,
):
    """Train on k-1 folds, score the held-out fold, for every kind.

    Every sample is evaluated exactly once per kind, never by a model that
    trained on it. Returns (rows, comparisons, per_sample) where rows hold
    mean +- std (over samples, ddof=1) and comparisons the paired t-tests
    between kinds on per-sample DSC.
    """
    plan_ids = sorted(i for fold in plan.folds for i in fold)
    if plan_ids != sorted(manifest.ids()):
        raise ValueError("k-fold plan does not cover the manifest exactly")
    fit = fit_fn or _default_fit(manifest, cfg, aug_cfg, seed)
    predict = predict_fn or _default_predict(manifest, cfg, eval_size)

    per_sample = {}
    for kind in kinds:
        for task in _TASKS_BY_KIND[kind]:
            per_sample[(kind, task)] = {}

    for fold_idx, fold in enumerate(plan.folds):
        held_out = set(fold)
        train_ids = [i for i in manifest.ids() if i not in held_out]
        for kind in kinds:
            model = fit(kind, train_ids, fold_idx)
            for sample_id in fold:
                record = manifest.by_id(sample_id)
                for task in _TASKS_BY_KIND[kind]:
                    pred = predict(model, record, task)
                    truth = _eval_truth(manifest, record, task, eval_size)
                    c = confusion(pred, truth)
                    per_sample[(kind, task)][sample_id] = (
                        dsc(pred, truth),
                        sensitivity(c),
                        specificity(c),
                    )

    rows = []
    for (kind, task), scores in per_sample.items():
        arr = np.array([scores[i] for i in manifest.ids() if i in scores])
        std = arr.std(axis=0, ddof=1) if arr.shape[0] > 1 else np.zeros(3)
        rows.append(
            EvalRow(
                kind=kind,
                task=task,
                n=arr.shape[0],
                dsc_mean=float(arr[:, 0].mean()),
                dsc_std=float(std[0]),
                sens_mean=float(arr[:, 1].mean()),
                sens_std=float(std[1]),
                spec_mean=float(arr[:, 2].mean()),
                spec_std=float(std[2]),
            )
        )

    comparisons = []
    for task in ("tumor", "rectum"):
        capable = [k for k in kinds if task in _TASKS_BY_KIND[k]]
        for i in range(len(capable)):
            for j in range(i + 1, len(capable)):
                a_scores = per_sample[(capable[i], task)]
                b_scores = per_sample[(capable[j], task)]
                ids = [s for s in manifest.ids() if s in a_scores and s in b_scores]
                a = [a_scores[s][0] for s in ids]
                b = [b_scores[s][0] for s in ids]
                try:
                    res = paired_t_test(a, b)
                    note = ""
                except DegenerateVarianceError:
                    res = None
                    note = "degenerate variance of differences"
                comparisons.append(
                    PairedComparison(capable[i], capable[j], task, res, note)
                )
    return rows, comparisons, per_sample
