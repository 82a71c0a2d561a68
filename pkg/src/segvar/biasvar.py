"""Pixel-wise bias / variance / expected zero-one loss decomposition over a
prediction ensemble, ROI-restricted expectations, per-sample summaries, and
the paired t-test.

The per-pixel quantities are kept as integer disagreement counts over the
ensemble size D, so the decomposition identity

    E[L] = B + c2 * V,   c2 = +1 on unbiased pixels, -1 on biased ones

is checked exactly, with no floating-point tolerance. D must be odd so the
majority vote (the main prediction under zero-one loss) is unique.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DecompositionError, DegenerateVarianceError
from .imgcore import BinaryMask, ValueMap


@dataclass
class PredictionEnsemble:
    """The D binary predictions of one test image, one per training set."""

    sample_id: str
    predictions: list

    def __post_init__(self):
        d = len(self.predictions)
        if d < 3 or d % 2 == 0:
            raise ValueError(f"ensemble size must be odd and >= 3, got {d}")
        shape = self.predictions[0].data.shape
        for m in self.predictions:
            if m.data.shape != shape:
                raise ValueError("ensemble predictions differ in resolution")

    @property
    def d(self):
        return len(self.predictions)

    def votes(self):
        """Per-pixel count of positive predictions, in [0, D]."""
        acc = np.zeros(self.predictions[0].data.shape, dtype=np.int64)
        for m in self.predictions:
            acc += m.data
        return acc


@dataclass
class DecompositionMaps:
    main: BinaryMask
    bias: BinaryMask
    variance: ValueMap
    expected_loss: ValueMap
    d: int
    var_counts: np.ndarray   # disagreements with the main prediction
    loss_counts: np.ndarray  # disagreements with the ground truth


@dataclass(frozen=True)
class RegionStats:
    e_bias: float
    e_var: float
    e_loss: float
    n_pixels: int


@dataclass
class SampleExpectations:
    """ROI means of bias, variance, and expected loss for one test sample.

    `positive` is None when the sample has an empty ground-truth-positive
    region; such samples still contribute to `total`.
    """

    sample_id: str
    positive: RegionStats | None
    total: RegionStats


@dataclass(frozen=True)
class TTestResult:
    t: float
    df: int
    p: float
    n: int


def main_prediction(ensemble: PredictionEnsemble):
    """Per-pixel majority vote; unique because D is odd."""
    votes = ensemble.votes()
    return BinaryMask((2 * votes > ensemble.d).astype(np.uint8))


def bias_map(truth: BinaryMask, main: BinaryMask):
    """Zero-one loss between truth and main prediction: their XOR."""
    if truth.data.shape != main.data.shape:
        raise ValueError("truth and main prediction shapes differ")
    return BinaryMask(truth.data ^ main.data)


def variance_map(ensemble: PredictionEnsemble, main: BinaryMask):
    """Fraction of predictions disagreeing with the main prediction."""
    if main.data.shape != ensemble.predictions[0].data.shape:
        raise ValueError("main prediction shape differs from the ensemble")
    counts = _disagreement_counts(ensemble.votes(), main.data, ensemble.d)
    return ValueMap(counts / ensemble.d)


def _disagreement_counts(votes, reference, d):
    return np.where(reference == 1, d - votes, votes)


def expected_loss_map(truth: BinaryMask, ensemble: PredictionEnsemble):
    """Fraction of predictions disagreeing with the truth.

    Also asserts, in integer arithmetic, that the value equals
    bias + c2 * variance at every pixel; a violation is an internal error.
    """
    if truth.data.shape != ensemble.predictions[0].data.shape:
        raise ValueError("truth shape differs from the ensemble")
    d = ensemble.d
    votes = ensemble.votes()
    main = (2 * votes > d).astype(np.uint8)
    bias = truth.data ^ main
    var_counts = _disagreement_counts(votes, main, d)
    loss_counts = _disagreement_counts(votes, truth.data, d)
    _check_identity(bias, var_counts, loss_counts, d)
    return ValueMap(loss_counts / d)


def _check_identity(bias, var_counts, loss_counts, d):
    # E[L]*D == B*D + c2 * V*D with c2 = +1 unbiased / -1 biased, exactly
    c2 = 1 - 2 * bias.astype(np.int64)
    expected = bias.astype(np.int64) * d + c2 * var_counts
    if not np.array_equal(expected, loss_counts):
        bad = int((expected != loss_counts).sum())
        raise DecompositionError(
            f"loss identity violated at {bad} pixel(s) for D={d}"
        )


def roi_expectation(value_map, roi: BinaryMask):
    """Arithmetic mean of a map (or mask) over the ROI-positive pixels."""
    if value_map.data.shape != roi.data.shape:
        raise ValueError("map and ROI shapes differ")
    sel = roi.data == 1
    n = int(sel.sum())
    if n == 0:
        raise ValueError("empty ROI")
    return float(value_map.data[sel].mean())


def decompose_sample(truth: BinaryMask, ensemble: PredictionEnsemble, roi_positive=None):
    """Full decomposition of one sample plus its ROI expectation row.

    The positive ROI defaults to the ground-truth-positive pixels of the
    test image; the total row always averages over the whole image.
    """
    d = ensemble.d
    votes = ensemble.votes()
    main = BinaryMask((2 * votes > d).astype(np.uint8))
    bias = bias_map(truth, main)
    var_counts = _disagreement_counts(votes, main.data, d)
    loss_counts = _disagreement_counts(votes, truth.data, d)
    _check_identity(bias.data, var_counts, loss_counts, d)
    maps = DecompositionMaps(
        main=main,
        bias=bias,
        variance=ValueMap(var_counts / d),
        expected_loss=ValueMap(loss_counts / d),
        d=d,
        var_counts=var_counts,
        loss_counts=loss_counts,
    )
    roi = truth if roi_positive is None else roi_positive
    if int(roi.data.sum()) > 0:
        positive = RegionStats(
            e_bias=roi_expectation(bias, roi),
            e_var=roi_expectation(maps.variance, roi),
            e_loss=roi_expectation(maps.expected_loss, roi),
            n_pixels=int(roi.data.sum()),
        )
    else:
        positive = None
    total = RegionStats(
        e_bias=float(bias.data.mean()),
        e_var=float(maps.variance.data.mean()),
        e_loss=float(maps.expected_loss.data.mean()),
        n_pixels=int(truth.data.size),
    )
    expectations = SampleExpectations(
        sample_id=ensemble.sample_id, positive=positive, total=total
    )
    return maps, expectations


# ---------------------------------------------------------------------------
# Summaries and statistics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SummaryStats:
    mean_bias: float
    mean_var: float
    mean_loss: float
    std_bias: float | None
    std_var: float | None
    std_loss: float | None
    n: int


@dataclass
class TableSummary:
    positive: SummaryStats | None
    total: SummaryStats


def _stats(triples):
    arr = np.asarray(triples, dtype=np.float64)
    means = arr.mean(axis=0)
    if arr.shape[0] > 1:
        stds = arr.std(axis=0, ddof=1)
        std_vals = [float(s) for s in stds]
    else:
        std_vals = [None, None, None]
    return SummaryStats(
        mean_bias=float(means[0]),
        mean_var=float(means[1]),
        mean_loss=float(means[2]),
        std_bias=std_vals[0],
        std_var=std_vals[1],
        std_loss=std_vals[2],
        n=arr.shape[0],
    )


def summarize_table(rows):
    """Mean +- sample std (ddof=1) of the per-sample expectations.

    Samples with an empty positive ROI are excluded from the positive
    columns but still counted in the total columns.
    """
    if not rows:
        raise ValueError("no expectation rows to summarize")
    pos = [
        (r.positive.e_bias, r.positive.e_var, r.positive.e_loss)
        for r in rows
        if r.positive is not None
    ]
    tot = [(r.total.e_bias, r.total.e_var, r.total.e_loss) for r in rows]
    return TableSummary(
        positive=_stats(pos) if pos else None,
        total=_stats(tot),
    )


def _betacf(a, b, x, max_iter=300, eps=3e-14):
    """Continued fraction for the incomplete beta (modified Lentz form)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    return h


def betainc_reg(a, b, x):
    """Regularized incomplete beta function I_x(a, b)."""
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_bt = (
        math.lgamma(a + b)
        - math.lgamma(a)
        - math.lgamma(b)
        + a * math.log(x)
        + b * math.log(1.0 - x)
    )
    bt = math.exp(ln_bt)
    if x < (a + 1.0) / (a + b + 2.0):
        return bt * _betacf(a, b, x) / a
    return 1.0 - bt * _betacf(b, a, 1.0 - x) / b


def paired_t_test(a, b):
    """Two-sided paired t-test on per-sample values.

    t = mean(d) / (std(d)/sqrt(n)) with d = a - b and the n-1 std; the
    p value comes from the t distribution via the regularized incomplete
    beta function.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("paired samples must be 1-D and of equal length")
    n = a.size
    if n < 2:
        raise ValueError("need at least two pairs")
    d = a - b
    sd = float(d.std(ddof=1))
    if sd == 0.0:
        raise DegenerateVarianceError("all pairwise differences are equal")
    t = float(d.mean()) / (sd / math.sqrt(n))
    df = n - 1
    p = betainc_reg(df / 2.0, 0.5, df / (df + t * t))
    return TTestResult(t=t, df=df, p=p, n=n)
