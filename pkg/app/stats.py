from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Literal, Optional, Sequence

import numpy as np
from scipy import stats as sps
from sklearn.metrics import auc as sk_auc
from sklearn.metrics import confusion_matrix as sk_confusion_matrix
from sklearn.metrics import roc_curve

from app.models import BlandAltmanResult, IccResult, IntervalEstimate, RateEstimate

logger = logging.getLogger(__name__)

Z_95 = 1.96
BOOTSTRAP_RESAMPLES = 2000


@dataclass(frozen=True)
class AnovaTable:
    """两因素 (subjects × raters) 方差分析的均方。"""

    n_subjects: int
    n_raters: int
    ms_r: float
    ms_c: float
    ms_e: float
    ss_total: float


@dataclass
class RocResult:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auc: IntervalEstimate


@dataclass
class ConfusionSummary:
    labels: list[str]
    matrix: np.ndarray
    accuracy: float
    recall: dict[str, Optional[float]]
    precision: dict[str, Optional[float]]
    macro_recall: float
    macro_precision: float


@dataclass(frozen=True)
class Descriptive:
    n: int
    median: float
    p25: float
    p75: float
    mean: float
    sd: float


def _paired(a: Sequence[float], b: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("paired measurements must be two 1-D sequences of equal length")
    if a.size < 2:
        raise ValueError("need at least 2 paired measurements")
    if not (np.isfinite(a).all() and np.isfinite(b).all()):
        raise ValueError("paired measurements must be finite")
    return a, b


def anova_table(ratings: np.ndarray) -> AnovaTable:
    ratings = np.asarray(ratings, dtype=float)
    n, k = ratings.shape
    if n < 2:
        raise ValueError("One subject only. Add more subjects for ICC.")
    ss_total = float(ratings.var(ddof=1) * (n * k - 1))
    ms_r = float(ratings.mean(axis=1).var(ddof=1) * k)
    ms_c = float(ratings.mean(axis=0).var(ddof=1) * n)
    ms_e = (ss_total - ms_r * (n - 1) - ms_c * (k - 1)) / ((n - 1) * (k - 1))
    # 舍入残差归零
    if ms_e < 1e-12 * max(ss_total, 1.0):
        ms_e = 0.0
    return AnovaTable(n, k, ms_r, ms_c, ms_e, ss_total)


def _icc_value(t: AnovaTable) -> float:
    denom = t.ms_r + (t.n_raters - 1) * t.ms_e + (t.n_raters / t.n_subjects) * (t.ms_c - t.ms_e)
    if denom <= 0:
        return 0.0
    return (t.ms_r - t.ms_e) / denom


def _icc_f_interval(t: AnovaTable, icc: float, alpha: float) -> tuple[float, float]:
    n, k = t.n_subjects, t.n_raters
    f_j = t.ms_c / t.ms_e
    v_n = (k - 1) * (n - 1) * (k * icc * f_j + n * (1 + (k - 1) * icc) - k * icc) ** 2
    v_d = (n - 1) * k**2 * icc**2 * f_j**2 + (n * (1 + (k - 1) * icc) - k * icc) ** 2
    v = v_n / v_d
    f_l = sps.f.ppf(1 - alpha / 2, n - 1, v)
    f_u = sps.f.ppf(1 - alpha / 2, v, n - 1)
    tmp = k * t.ms_c + (k * n - k - n) * t.ms_e
    low = (n * (t.ms_r - f_l * t.ms_e)) / (f_l * tmp + n * t.ms_r)
    high = (n * (f_u * t.ms_r - t.ms_e)) / (tmp + n * f_u * t.ms_r)
    return float(low), float(high)


def _icc_bootstrap_interval(ratings: np.ndarray, alpha: float, seed: int, resamples: int) -> tuple[float, float]:
    rng = np.random.default_rng(seed)
    n = ratings.shape[0]
    values = np.empty(resamples)
    for i in range(resamples):
        sample = ratings[rng.integers(0, n, size=n)]
        if sample.var() == 0:
            values[i] = 1.0
            continue
        values[i] = _icc_value(anova_table(sample))
    low, high = np.quantile(values, [alpha / 2, 1 - alpha / 2])
    return float(low), float(high)


def icc_a1(
    a: Sequence[float],
    b: Sequence[float],
    confidence: float = 0.95,
    method: Literal["auto", "f", "bootstrap"] = "auto",
    seed: int = 0,
    resamples: int = BOOTSTRAP_RESAMPLES,
) -> IccResult:
    """ICC(A,1)：两因素随机效应、绝对一致、单次测量。

    auto 模式下用 F 分布区间；残差均方为 0（F 区间无定义）时退回自助法。
    """
    a, b = _paired(a, b)
    ratings = np.column_stack([a, b])
    n = ratings.shape[0]
    if np.array_equal(a, b):
        if ratings.var() == 0:
            raise ValueError("ICC undefined: all measurements identical")
        return IccResult(value=1.0, ci_low=1.0, ci_high=1.0, method="exact", n=n)
    if ratings.var() == 0:
        raise ValueError("ICC undefined: zero total variance")
    table = anova_table(ratings)
    icc = _icc_value(table)
    alpha = 1.0 - confidence

    used = method
    bounds: Optional[tuple[float, float]] = None
    if method in ("auto", "f") and table.ms_e > 0:
        with np.errstate(divide="ignore", invalid="ignore"):
            bounds = _icc_f_interval(table, icc, alpha)
        if not all(math.isfinite(x) for x in bounds):
            bounds = None
        used = "f"
    if bounds is None:
        if method == "f":
            raise ValueError("F-based ICC interval undefined for zero residual variance")
        bounds = _icc_bootstrap_interval(ratings, alpha, seed, resamples)
        used = "bootstrap"
    low = min(bounds[0], icc)
    high = max(bounds[1], icc)
    return IccResult(value=float(icc), ci_low=float(low), ci_high=float(high), method=used, n=n)


def bland_altman(a: Sequence[float], b: Sequence[float]) -> BlandAltmanResult:
    a, b = _paired(a, b)
    diff = a - b
    bias = float(diff.mean())
    sd = float(diff.std(ddof=1))
    half = Z_95 * sd
    loa_low, loa_high = bias - half, bias + half
    within = float(np.mean((diff >= loa_low - 1e-12) & (diff <= loa_high + 1e-12)))
    return BlandAltmanResult(n=int(diff.size), bias=bias, sd=sd, loa_low=loa_low, loa_high=loa_high, within_fraction=within)


def proportion_ci(successes: int, n: int, method: Literal["wald", "wilson"] = "wald", z: float = Z_95) -> RateEstimate:
    if n <= 0:
        raise ValueError("proportion of an empty group")
    if not 0 <= successes <= n:
        raise ValueError(f"successes={successes} outside [0, {n}]")
    p = successes / n
    if method == "wilson":
        denom = 1 + z**2 / n
        center = (p + z**2 / (2 * n)) / denom
        half = z * math.sqrt(p * (1 - p) / n + z**2 / (4 * n**2)) / denom
        low, high = center - half, center + half
    else:
        half = z * math.sqrt(p * (1 - p) / n)
        low, high = p - half, p + half
    return RateEstimate(value=p, ci_low=max(0.0, min(low, p)), ci_high=min(1.0, max(high, p)), n=n)


def wald_interval(p: float, n: int, z: float = Z_95) -> tuple[float, float]:
    """直接按比例值与样本量计算 Wald 区间，结果截断到 [0, 1]。"""
    if n <= 0:
        raise ValueError("n must be positive")
    half = z * math.sqrt(p * (1 - p) / n)
    return max(0.0, p - half), min(1.0, p + half)


def sens_spec_ci(
    tp: int,
    fn: int,
    tn: int,
    fp: int,
    method: Literal["wald", "wilson"] = "wald",
) -> tuple[Optional[RateEstimate], Optional[RateEstimate]]:
    """sensitivity = tp/(tp+fn)，specificity = tn/(tn+fp)；分母为 0 时对应项为 None。"""
    sens = proportion_ci(tp, tp + fn, method) if tp + fn else None
    spec = proportion_ci(tn, tn + fp, method) if tn + fp else None
    return sens, spec


def hanley_mcneil_se(auc_value: float, n_pos: int, n_neg: int) -> float:
    q1 = auc_value / (2 - auc_value)
    q2 = 2 * auc_value**2 / (1 + auc_value)
    var = (
        auc_value * (1 - auc_value)
        + (n_pos - 1) * (q1 - auc_value**2)
        + (n_neg - 1) * (q2 - auc_value**2)
    ) / (n_pos * n_neg)
    return math.sqrt(max(var, 0.0))


def roc_auc(scores: Sequence[float], labels: Sequence[int]) -> RocResult:
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(int)
    if scores.shape != labels.shape or scores.size == 0:
        raise ValueError("scores and labels must be non-empty and equally long")
    n_pos = int(labels.sum())
    n_neg = int(labels.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs both positive and negative labels")
    fpr, tpr, thresholds = roc_curve(labels, scores, drop_intermediate=False)
    value = float(sk_auc(fpr, tpr))
    se = hanley_mcneil_se(value, n_pos, n_neg)
    estimate = IntervalEstimate(
        value=value,
        ci_low=max(0.0, min(value, value - Z_95 * se)),
        ci_high=min(1.0, max(value, value + Z_95 * se)),
    )
    return RocResult(fpr=fpr, tpr=tpr, thresholds=thresholds, auc=estimate)


def confusion_matrix(truth: Sequence[str], predicted: Sequence[str], labels: Sequence[str]) -> np.ndarray:
    """行 = 参考标注，列 = 预测。"""
    if len(truth) != len(predicted):
        raise ValueError("truth and prediction lengths differ")
    return sk_confusion_matrix(list(truth), list(predicted), labels=list(labels))


def confusion_metrics(matrix: np.ndarray, labels: Optional[Sequence[str]] = None) -> ConfusionSummary:
    cm = np.asarray(matrix, dtype=float)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise ValueError("confusion matrix must be square")
    if (cm < 0).any():
        raise ValueError("confusion counts must be non-negative")
    total = cm.sum()
    if total == 0:
        raise ValueError("empty confusion matrix")
    labels = list(labels) if labels is not None else [str(i) for i in range(cm.shape[0])]
    diag = np.diag(cm)
    rows = cm.sum(axis=1)
    cols = cm.sum(axis=0)
    recall = {lab: (float(diag[i] / rows[i]) if rows[i] > 0 else None) for i, lab in enumerate(labels)}
    precision = {lab: (float(diag[i] / cols[i]) if cols[i] > 0 else None) for i, lab in enumerate(labels)}
    return ConfusionSummary(
        labels=labels,
        matrix=cm.astype(int),
        accuracy=float(diag.sum() / total),
        recall=recall,
        precision=precision,
        macro_recall=macro_mean(recall.values()),
        macro_precision=macro_mean(precision.values()),
    )


def macro_mean(values) -> float:
    """空行/空列对应的类别 (None) 不参与平均。"""
    kept = [v for v in values if v is not None]
    return float(np.mean(kept)) if kept else float("nan")


def cohen_kappa(matrix: np.ndarray) -> float:
    cm = np.asarray(matrix, dtype=float)
    total = cm.sum()
    if total == 0:
        raise ValueError("empty confusion matrix")
    p_o = np.trace(cm) / total
    p_e = float((cm.sum(axis=0) * cm.sum(axis=1)).sum() / total**2)
    if math.isclose(p_e, 1.0):
        return 1.0 if math.isclose(p_o, 1.0) else 0.0
    return float((p_o - p_e) / (1 - p_e))


def grouped_kfold(
    subject_ids: Sequence[str],
    labels: Sequence[str],
    k: int = 4,
    seed: int = 0,
) -> list[int]:
    """按受试者分组、按标签分层的 k 折划分，返回与输入一一对应的 test fold 编号。

    各类别内部打乱后首尾相接、依次轮转分配，折大小差 ≤1，且每折各类别数与比例值相差 ≤1。
    """
    if len(subject_ids) != len(labels):
        raise ValueError("subject_ids and labels must align")
    if k < 2:
        raise ValueError("k must be >= 2")
    label_of: dict[str, str] = {}
    for sid, lab in zip(subject_ids, labels):
        lab = getattr(lab, "value", str(lab))
        if label_of.setdefault(sid, lab) != lab:
            raise ValueError(f"subject {sid} carries more than one label")
    if len(label_of) < k:
        raise ValueError(f"{len(label_of)} subjects cannot fill {k} folds")

    rng = np.random.default_rng(seed)
    ordered: list[str] = []
    for lab in sorted(set(label_of.values())):
        members = sorted(sid for sid, l in label_of.items() if l == lab)
        ordered.extend(members[i] for i in rng.permutation(len(members)))
    fold_of = {sid: i % k for i, sid in enumerate(ordered)}
    return [fold_of[sid] for sid in subject_ids]


def describe(values: Sequence[float]) -> Descriptive:
    arr = np.asarray(values, dtype=float)
    arr = arr[np.isfinite(arr)]
    if arr.size == 0:
        raise ValueError("describe() of an empty sample")
    p25, median, p75 = np.percentile(arr, [25, 50, 75], method="linear")
    return Descriptive(
        n=int(arr.size),
        median=float(median),
        p25=float(p25),
        p75=float(p75),
        mean=float(arr.mean()),
        sd=float(arr.std(ddof=1)) if arr.size > 1 else 0.0,
    )
