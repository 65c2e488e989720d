"""Cox loss, concordance, Kaplan-Meier and the log-rank test on small fixtures."""

import math

import numpy as np

from survfuse.metrics import c_index, kaplan_meier, log_rank, stratify_by_median
from survfuse.survival import SurvivalRecord, cox_loss


def recs(times, events, tag="p"):
    return [SurvivalRecord(f"{tag}{i}", float(t), int(e)) for i, (t, e) in enumerate(zip(times, events))]


print("Cox loss, equal risks, two events:", cox_loss(np.zeros(2), recs([1, 2], [1, 1])).item(), "=", math.log(2))

cohort = recs([2, 5, 7], [1, 1, 0])
c, M = c_index([0.9, 0.5, 0.7], cohort)
print(f"C-index {c:.4f} over {M} comparable pairs")

km = kaplan_meier(recs([1, 2, 2, 3, 4], [0, 1, 1, 0, 1]))
for t, s in km.steps():
    print(f"  S({t:g}) = {s}")

a = recs([1, 3, 5], [1, 1, 0], "a")
b = recs([2, 4, 6], [1, 1, 1], "b")
res = log_rank(a, b)
print(f"log-rank statistic {res.statistic:.6f} (32/433 = {32 / 433:.6f}), p = {res.p_value:.3f}")
for row in res.table:
    print("  ", row)

risks = np.array([0.3, 0.8, 0.1, 0.5, 0.9, 0.2])
print("high-risk labels", stratify_by_median(risks).astype(int).tolist())
