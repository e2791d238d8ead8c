"""Evaluation metrics, grouped stratified splitting, and fold statistics.

AUROC is the Mann-Whitney rank form (ties get half credit). Splits and
folds always keep all admissions of one patient together and stratify on
the patient-level "has any 30-day readmission" indicator via a greedy
proportional-fill deal. The normality test is the AS R94 approximation
(valid for 3 <= n <= 5000); t-tests default to the paired form since
models share folds, with Welch's unpaired variant behind a flag.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import (
    ConfigError,
    DegenerateSampleError,
    MetricUndefinedError,
    NumericError,
)
from .ingest import Cohort

P_VALUE_FLOOR = 1e-12
SIGNIFICANCE_ALPHA = 0.05

_MASK64 = (1 << 64) - 1


def _mix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


# ---------------------------------------------------------------------------
# Metrics

def _tied_ranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties assigned the group average."""
    _, inverse, counts = np.unique(x, return_inverse=True, return_counts=True)
    ends = np.cumsum(counts)
    starts = ends - counts
    avg = (starts + ends + 1) / 2.0
    return avg[inverse]


def auroc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """P(score_pos > score_neg) + 0.5 * P(tie), via the rank statistic."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricUndefinedError("auroc requires both classes")
    ranks = _tied_ranks(scores)
    return (ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def balanced_accuracy(pred_labels: Sequence[int], labels: Sequence[int]) -> float:
    pred = np.asarray(pred_labels).reshape(-1).astype(bool)
    y = np.asarray(labels).reshape(-1).astype(bool)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricUndefinedError("balanced accuracy requires both classes")
    sensitivity = np.sum(pred & y) / n_pos
    specificity = np.sum(~pred & ~y) / n_neg
    return (sensitivity + specificity) / 2.0


# ---------------------------------------------------------------------------
# Patient-grouped stratified splits and folds

@dataclass(frozen=True)
class SplitSpec:
    fractions: tuple[float, float, float] = (0.6, 0.2, 0.2)
    seed: int = 0


@dataclass
class Splits:
    train_mask: np.ndarray
    val_mask: np.ndarray
    test_mask: np.ndarray

    @property
    def masks(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return (self.train_mask, self.val_mask, self.test_mask)


@dataclass
class FoldPlan:
    k: int
    fold_of_patient: dict[int, int]
    train_masks: list[np.ndarray]
    test_masks: list[np.ndarray]


def _patient_groups(cohort: Cohort) -> list[tuple[int, list[int], bool]]:
    """(patient_id, row indices, has-any-positive) per patient."""
    rows_by_patient: dict[int, list[int]] = {}
    for i, r in enumerate(cohort.records):
        rows_by_patient.setdefault(r.patient_id, []).append(i)
    out = []
    for pid, rows in rows_by_patient.items():
        label = any(cohort.records[i].label_readmit_30d for i in rows)
        out.append((pid, rows, label))
    return out


def _greedy_deal(
    groups: list[tuple[int, list[int], bool]],
    targets: Sequence[float],
    seed: int,
) -> dict[int, int]:
    """Deal patients to bins, balancing admission counts against targets.

    Patients are sorted by (label, admission count, seeded hash) so each
    stratum streams through the proportional-fill rule evenly.
    """
    seed_mix = _mix64(seed & _MASK64)
    order = sorted(
        groups,
        key=lambda g: (g[2], len(g[1]), _mix64(g[0] ^ seed_mix)),
    )
    assigned = [0.0] * len(targets)
    out: dict[int, int] = {}
    for pid, rows, _label in order:
        w = len(rows)
        best = min(
            range(len(targets)), key=lambda s: ((assigned[s] + w) / targets[s], s)
        )
        out[pid] = best
        assigned[best] += w
    return out


def make_splits(cohort: Cohort, spec: SplitSpec) -> Splits:
    if len(cohort.records) == 0:
        raise ConfigError("cannot split an empty cohort")
    fractions = tuple(spec.fractions)
    if len(fractions) != 3 or any(f <= 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must be three positives summing to 1, got {fractions}")
    groups = _patient_groups(cohort)
    bin_of = _greedy_deal(groups, fractions, spec.seed)
    masks = [np.zeros(len(cohort.records), dtype=bool) for _ in range(3)]
    for pid, rows, _ in groups:
        masks[bin_of[pid]][rows] = True
    return Splits(train_mask=masks[0], val_mask=masks[1], test_mask=masks[2])


def make_folds(cohort: Cohort, k: int, seed: int) -> FoldPlan:
    groups = _patient_groups(cohort)
    if k < 2:
        raise ConfigError(f"k must be at least 2, got {k}")
    if k > len(groups):
        raise ConfigError(f"k={k} folds infeasible for {len(groups)} patients")
    bin_of = _greedy_deal(groups, [1.0 / k] * k, seed)
    n = len(cohort.records)
    test_masks = [np.zeros(n, dtype=bool) for _ in range(k)]
    for pid, rows, _ in groups:
        test_masks[bin_of[pid]][rows] = True
    train_masks = [~m for m in test_masks]
    return FoldPlan(k=k, fold_of_patient=bin_of, train_masks=train_masks, test_masks=test_masks)


# ---------------------------------------------------------------------------
# Normal distribution helpers

def _norm_sf(z: float) -> float:
    return 0.5 * math.erfc(z / math.sqrt(2.0))


def _norm_ppf(p: float) -> float:
    """Inverse standard normal CDF (Wichura's PPND16, AS 241)."""
    if not 0.0 < p < 1.0:
        raise ConfigError(f"norm_ppf requires p in (0,1), got {p}")
    q = p - 0.5
    if abs(q) <= 0.425:
        r = 0.180625 - q * q
        num = (((((((2.5090809287301226727e3 * r + 3.3430575583588128105e4) * r
                    + 6.7265770927008700853e4) * r + 4.5921953931549871457e4) * r
                  + 1.3731693765509461125e4) * r + 1.9715909503065514427e3) * r
                + 1.3314166789178437745e2) * r + 3.3871328727963666080e0)
        den = (((((((5.2264952788528545610e3 * r + 2.8729085735721942674e4) * r
                    + 3.9307895800092710610e4) * r + 2.1213794301586595867e4) * r
                  + 5.3941960214247511077e3) * r + 6.8718700749205790830e2) * r
                + 4.2313330701600911252e1) * r + 1.0)
        return q * num / den
    r = p if q < 0 else 1.0 - p
    r = math.sqrt(-math.log(r))
    if r <= 5.0:
        r -= 1.6
        num = (((((((7.74545014278341407640e-4 * r + 2.27238449892691845833e-2) * r
                    + 2.41780725177450611770e-1) * r + 1.27045825245236838258e0) * r
                  + 3.64784832476320460504e0) * r + 5.76949722146069140550e0) * r
                + 4.63033784615654529590e0) * r + 1.42343711074968357734e0)
        den = (((((((1.05075007164441684324e-9 * r + 5.47593808499534494600e-4) * r
                    + 1.51986665636164571966e-2) * r + 1.48103976427480074590e-1) * r
                  + 6.89767334985100004550e-1) * r + 1.67638483018380384940e0) * r
                + 2.05319162663775882187e0) * r + 1.0)
    else:
        r -= 5.0
        num = (((((((2.01033439929228813265e-7 * r + 2.71155556874348757815e-5) * r
                    + 1.24266094738807843860e-3) * r + 2.65321895265761230930e-2) * r
                  + 2.96560571828504891230e-1) * r + 1.78482653991729133580e0) * r
                + 5.46378491116411436990e0) * r + 6.65790464350110377720e0)
        den = (((((((2.04426310338993978564e-15 * r + 1.42151175831644588870e-7) * r
                    + 1.84631831751005468180e-5) * r + 7.86869131145613259100e-4) * r
                  + 1.48753612908506148525e-2) * r + 1.36929880922735805310e-1) * r
                + 5.99832206555887937690e-1) * r + 1.0)
    value = num / den
    return -value if q < 0 else value


# ---------------------------------------------------------------------------
# Shapiro-Wilk (AS R94)

_SW_C1 = (0.0, 0.221157, -0.147981, -2.071190, 4.434685, -2.706056)
_SW_C2 = (0.0, 0.042981, -0.293762, -1.752461, 5.682633, -3.582633)
_SW_C3 = (0.5440, -0.39978, 0.025054, -6.714e-4)
_SW_C4 = (1.3822, -0.77857, 0.062767, -2.0322e-3)
_SW_C5 = (-1.5861, -0.31082, -0.083751, 3.8915e-3)
_SW_C6 = (-0.4803, -0.082676, 3.0302e-3)
_SW_G = (-2.273, 0.459)


def _poly(coeffs: Sequence[float], x: float) -> float:
    out = 0.0
    for c in reversed(coeffs):
        out = out * x + c
    return out


def shapiro_wilk(x: Sequence[float]) -> tuple[float, float]:
    """AS R94 Shapiro-Wilk normality test. Returns (W, p)."""
    xs = np.sort(np.asarray(x, dtype=np.float64).reshape(-1))
    n = xs.size
    if n < 3 or n > 5000:
        raise ConfigError(f"shapiro_wilk requires 3 <= n <= 5000, got {n}")
    ssq = float(np.sum((xs - xs.mean()) ** 2))
    if ssq <= 0.0 or xs[0] == xs[-1]:
        raise DegenerateSampleError("shapiro_wilk requires non-zero sample variance")

    n2 = n // 2
    weights = np.zeros(n2)
    if n == 3:
        weights[0] = math.sqrt(0.5)
    else:
        an25 = n + 0.25
        m_half = np.array([_norm_ppf((i - 0.375) / an25) for i in range(1, n2 + 1)])
        summ2 = 2.0 * float(np.sum(m_half**2))
        ssumm2 = math.sqrt(summ2)
        rsn = 1.0 / math.sqrt(n)
        a1 = _poly(_SW_C1, rsn) - m_half[0] / ssumm2
        if n > 5:
            first_scaled = 2
            a2 = -m_half[1] / ssumm2 + _poly(_SW_C2, rsn)
            fac = math.sqrt(
                (summ2 - 2.0 * m_half[0] ** 2 - 2.0 * m_half[1] ** 2)
                / (1.0 - 2.0 * a1**2 - 2.0 * a2**2)
            )
            weights[1] = a2
        else:
            first_scaled = 1
            fac = math.sqrt((summ2 - 2.0 * m_half[0] ** 2) / (1.0 - 2.0 * a1**2))
        weights[0] = a1
        weights[first_scaled:] = -m_half[first_scaled:] / fac

    sax = float(np.sum(weights * (xs[::-1][:n2] - xs[:n2])))
    w = sax * sax / ssq
    if w > 1.0:
        w = 1.0

    if n == 3:
        pi6 = 6.0 / math.pi
        stqr = math.asin(math.sqrt(0.75))
        pw = pi6 * (math.asin(math.sqrt(w)) - stqr)
        return w, min(max(pw, 0.0), 1.0)

    y = math.log1p(-w)
    if n <= 11:
        gamma = _poly(_SW_G, float(n))
        if y >= gamma:
            return w, P_VALUE_FLOOR
        y = -math.log(gamma - y)
        mu = _poly(_SW_C3, float(n))
        sd = math.exp(_poly(_SW_C4, float(n)))
    else:
        ln_n = math.log(n)
        mu = _poly(_SW_C5, ln_n)
        sd = math.exp(_poly(_SW_C6, ln_n))
    return w, min(max(_norm_sf((y - mu) / sd), 0.0), 1.0)


# ---------------------------------------------------------------------------
# t-test via regularized incomplete beta (continued fraction)

def _betacf(a: float, b: float, x: float) -> float:
    max_iter, eps, fpmin = 300, 3e-16, 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < fpmin:
        d = fpmin
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < fpmin:
            d = fpmin
        c = 1.0 + aa / c
        if abs(c) < fpmin:
            c = fpmin
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < fpmin:
            d = fpmin
        c = 1.0 + aa / c
        if abs(c) < fpmin:
            c = fpmin
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise NumericError(f"incomplete beta continued fraction failed for a={a}, b={b}, x={x}")


def _betainc(a: float, b: float, x: float) -> float:
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_bt = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
        + a * math.log(x) + b * math.log(1.0 - x)
    )
    bt = math.exp(ln_bt)
    if x < (a + 1.0) / (a + b + 2.0):
        return bt * _betacf(a, b, x) / a
    return 1.0 - bt * _betacf(b, a, 1.0 - x) / b


def _student_sf(t: float, df: float) -> float:
    """P(T > t) for t >= 0 under Student's t with df degrees of freedom."""
    if math.isinf(t):
        return 0.0
    x = df / (df + t * t)
    return 0.5 * _betainc(df / 2.0, 0.5, x)


def t_test(
    a: Sequence[float], b: Sequence[float], paired: bool = True
) -> tuple[float, float]:
    """Two-sided t-test. Paired Student form by default (models share
    folds); Welch's unpaired form with paired=False. Zero-variance paired
    differences with a non-zero mean report (+-inf, 1e-12)."""
    av = np.asarray(a, dtype=np.float64).reshape(-1)
    bv = np.asarray(b, dtype=np.float64).reshape(-1)
    if paired:
        if av.size != bv.size:
            raise ConfigError(f"paired t-test needs equal lengths, got {av.size}, {bv.size}")
        if av.size < 2:
            raise ConfigError(f"t-test requires n >= 2, got {av.size}")
        d = av - bv
        mean = float(d.mean())
        sd = float(d.std(ddof=1))
        n = d.size
        if sd == 0.0:
            if mean == 0.0:
                return 0.0, 1.0
            return math.copysign(math.inf, mean), P_VALUE_FLOOR
        stat = mean / (sd / math.sqrt(n))
        df = n - 1
    else:
        if av.size < 2 or bv.size < 2:
            raise ConfigError("t-test requires n >= 2 in both samples")
        va, vb = av.var(ddof=1), bv.var(ddof=1)
        na, nb = av.size, bv.size
        denom_sq = va / na + vb / nb
        diff = float(av.mean() - bv.mean())
        if denom_sq == 0.0:
            if diff == 0.0:
                return 0.0, 1.0
            return math.copysign(math.inf, diff), P_VALUE_FLOOR
        stat = diff / math.sqrt(denom_sq)
        df = denom_sq**2 / ((va / na) ** 2 / (na - 1) + (vb / nb) ** 2 / (nb - 1))
    p = 2.0 * _student_sf(abs(stat), df)
    p = min(max(p, 0.0), 1.0)
    if p == 0.0:
        p = P_VALUE_FLOOR
    return float(stat), p


# ---------------------------------------------------------------------------
# Model comparison report

@dataclass
class PairwiseTest:
    model_a: str
    model_b: str
    metric: str
    statistic: float
    pvalue: float
    significant: bool


@dataclass
class StatReport:
    models: tuple[str, ...]
    metrics: tuple[str, ...]
    fold_metrics: dict[str, dict[str, list[float]]]
    shapiro: dict[str, dict[str, tuple[float, float]]]
    ttests: list[PairwiseTest] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "models": list(self.models),
            "metrics": list(self.metrics),
            "fold_metrics": self.fold_metrics,
            "shapiro": {
                m: {k: {"W": v[0], "p": v[1]} for k, v in per.items()}
                for m, per in self.shapiro.items()
            },
            "ttests": [
                {
                    "models": f"{t.model_a} vs. {t.model_b}",
                    "metric": t.metric,
                    "statistic": t.statistic,
                    "pvalue": t.pvalue,
                    "significant": t.significant,
                }
                for t in self.ttests
            ],
        }


def compare_models(
    fold_metrics: dict[str, dict[str, Sequence[float]]],
    paired: bool = True,
    alpha: float = SIGNIFICANCE_ALPHA,
) -> StatReport:
    """Shapiro-Wilk per model/metric, then pairwise t-tests per metric."""
    models = tuple(fold_metrics)
    if len(models) < 2:
        raise ConfigError("compare_models requires at least two models")
    metrics = tuple(fold_metrics[models[0]])
    counts = {
        (m, k): len(fold_metrics[m][k]) for m in models for k in fold_metrics[m]
    }
    if len(set(counts.values())) != 1:
        raise ConfigError(f"mismatched fold counts across models: {counts}")
    for m in models:
        if tuple(fold_metrics[m]) != metrics:
            raise ConfigError(f"model {m} reports different metrics than {models[0]}")

    shapiro = {
        m: {k: shapiro_wilk(fold_metrics[m][k]) for k in metrics} for m in models
    }
    ttests = []
    for metric in metrics:
        for a, b in itertools.combinations(models, 2):
            stat, p = t_test(fold_metrics[a][metric], fold_metrics[b][metric], paired=paired)
            ttests.append(
                PairwiseTest(
                    model_a=a,
                    model_b=b,
                    metric=metric,
                    statistic=stat,
                    pvalue=p,
                    significant=p < alpha,
                )
            )
    clean = {m: {k: [float(v) for v in fold_metrics[m][k]] for k in metrics} for m in models}
    return StatReport(
        models=models,
        metrics=metrics,
        fold_metrics=clean,
        shapiro=shapiro,
        ttests=ttests,
    )
