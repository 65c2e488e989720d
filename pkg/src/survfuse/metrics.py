"""Concordance, median-risk stratification, Kaplan-Meier and the log-rank test."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .survival import SurvivalRecord


class UndefinedConcordance(ValueError):
    """No comparable pairs: the concordance index is undefined."""


class ZeroVarianceWarning(UserWarning):
    pass


def _arrays(records):
    t = np.array([r.time for r in records], dtype=np.float64)
    e = np.array([r.event for r in records], dtype=np.int64)
    return t, e


def c_index(risks, records, tie_score: float = 0.0) -> tuple[float, int]:
    """Concordance over event-anchored pairs ``(i, j)`` with ``s_j > s_i``.

    A pair is concordant when ``f_i > f_j``.  Equal risks score ``tie_score``
    (0 by default, i.e. the strict inequality; 0.5 gives the usual Harrell
    convention).  Returns ``(c, M)`` with ``M`` the number of comparable pairs.
    """
    f = np.asarray(risks, dtype=np.float64)
    t, e = _arrays(records)
    if len(f) != len(t):
        raise ValueError(f"{len(f)} risks for {len(t)} records")
    if len(f) < 2:
        raise ValueError("c_index needs at least two patients")
    anchors = e == 1
    comparable = (t[None, :] > t[:, None]) & anchors[:, None]
    M = int(comparable.sum())
    if M == 0:
        raise UndefinedConcordance("no comparable pairs")
    higher = (f[:, None] > f[None, :]) & comparable
    ties = (f[:, None] == f[None, :]) & comparable
    return (higher.sum() + tie_score * ties.sum()) / M, M


def stratify_by_median(risks) -> np.ndarray:
    """``True`` for high risk.  Low means ``f <= median``; even counts use the lower middle."""
    f = np.asarray(risks, dtype=np.float64)
    if len(f) < 2:
        raise ValueError("need at least two risks to stratify")
    med = np.sort(f)[(len(f) - 1) // 2]
    return f > med


@dataclass
class KMCurve:
    times: np.ndarray  # distinct event times
    survival: np.ndarray  # S(t) just after each time
    at_risk: np.ndarray
    events: np.ndarray

    def __call__(self, t) -> np.ndarray:
        """Evaluate the right-continuous step function at ``t``."""
        t = np.asarray(t, dtype=np.float64)
        idx = np.searchsorted(self.times, t, side="right")
        s = np.concatenate([[1.0], self.survival])
        return s[idx]

    def steps(self) -> list[tuple[float, float]]:
        return list(zip(self.times.tolist(), self.survival.tolist()))


def kaplan_meier(records) -> KMCurve:
    t, e = _arrays(records)
    if not len(t):
        raise ValueError("kaplan_meier needs a non-empty group")
    event_times = np.unique(t[e == 1])
    s = 1.0
    surv, n_risk, n_ev = [], [], []
    for tk in event_times:
        n_k = int(np.sum(t >= tk))
        d_k = int(np.sum((t == tk) & (e == 1)))
        s *= 1.0 - d_k / n_k
        surv.append(s)
        n_risk.append(n_k)
        n_ev.append(d_k)
    return KMCurve(event_times, np.array(surv), np.array(n_risk, dtype=int), np.array(n_ev, dtype=int))


def chi2_sf_1dof(x: float) -> float:
    return math.erfc(math.sqrt(max(x, 0.0) / 2.0))


@dataclass
class LogRankResult:
    statistic: float
    p_value: float
    observed_a: float
    expected_a: float
    variance: float
    table: list[dict] = field(default_factory=list)
    degenerate: bool = False


def log_rank(group_a, group_b) -> LogRankResult:
    """Two-group log-rank test with the hypergeometric variance."""
    if not group_a or not group_b:
        raise ValueError("log_rank needs two non-empty groups")
    ta, ea = _arrays(group_a)
    tb, eb = _arrays(group_b)
    times = np.unique(np.concatenate([ta[ea == 1], tb[eb == 1]]))
    O = E = V = 0.0
    table = []
    for tk in times:
        na = int(np.sum(ta >= tk))
        nb = int(np.sum(tb >= tk))
        da = int(np.sum((ta == tk) & (ea == 1)))
        db = int(np.sum((tb == tk) & (eb == 1)))
        n, d = na + nb, da + db
        exp_a = d * na / n
        var = d * (na / n) * (nb / n) * (n - d) / (n - 1) if n > 1 else 0.0
        O += da
        E += exp_a
        V += var
        table.append(dict(time=float(tk), n_a=na, n_b=nb, d_a=da, d_b=db, expected_a=exp_a, variance=var))
    if V <= 0:
        warnings.warn("log-rank variance is zero; reporting statistic 0, p = 1", ZeroVarianceWarning, stacklevel=2)
        return LogRankResult(0.0, 1.0, O, E, V, table, degenerate=True)
    stat = (O - E) ** 2 / V
    return LogRankResult(stat, chi2_sf_1dof(stat), O, E, V, table)


@dataclass
class CohortEvaluation:
    risks: np.ndarray
    records: list[SurvivalRecord]
    c_index: float
    pair_count: int
    high_risk: np.ndarray
    km_low: KMCurve
    km_high: KMCurve | None
    logrank: LogRankResult | None


def evaluate_cohort(risks, records, tie_score: float = 0.0, high_risk=None) -> CohortEvaluation:
    """Concordance, median split, per-group KM curves and the log-rank test.

    ``high_risk`` overrides the median split (e.g. labels pooled across folds).
    """
    risks = np.asarray(risks, dtype=np.float64)
    c, M = c_index(risks, records, tie_score)
    high = stratify_by_median(risks) if high_risk is None else np.asarray(high_risk, dtype=bool)
    low_recs = [r for r, h in zip(records, high) if not h]
    high_recs = [r for r, h in zip(records, high) if h]
    km_low = kaplan_meier(low_recs) if low_recs else None
    km_high = kaplan_meier(high_recs) if high_recs else None
    lr = log_rank(low_recs, high_recs) if low_recs and high_recs else None
    return CohortEvaluation(risks, list(records), c, M, high, km_low, km_high, lr)
