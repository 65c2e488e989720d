"""Risk head and Cox negative log partial likelihood."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .layers import init_linear


class AllCensoredWarning(UserWarning):
    """The cohort has no events, so the partial likelihood is empty."""


@dataclass
class SurvivalRecord:
    patient_id: str
    time: float  # months
    event: int  # 1 = event observed, 0 = censored

    def __post_init__(self):
        if not self.time >= 0:
            raise ValueError(f"{self.patient_id}: survival time must be >= 0, got {self.time}")
        if self.event not in (0, 1):
            raise ValueError(f"{self.patient_id}: event flag must be 0 or 1, got {self.event}")


@dataclass
class RiskOutput:
    z: Tensor  # joint feature
    X: Tensor  # last hidden activation
    R: Tensor  # risk score


def init_head(rng, in_dim: int, hidden: Sequence[int] = (64, 32)) -> dict:
    h1, h2 = hidden
    return {
        "fc1": init_linear(rng, in_dim, h1),
        "fc2": init_linear(rng, h1, h2),
        "out": init_linear(rng, h2, 1),
    }


def mlp_head(params: dict, y_p, y_g, use_sigmoid: bool = True) -> RiskOutput:
    z = ag.concat([y_p, y_g], axis=-1)
    h = ag.relu(ag.linear(z, params["fc1"]["W"], params["fc1"]["b"]))
    X = ag.relu(ag.linear(h, params["fc2"]["W"], params["fc2"]["b"]))
    logit = ag.linear(X, params["out"]["W"], params["out"]["b"])
    logit = ag.reshape(logit, logit.shape[:-1])
    R = ag.sigmoid(logit) if use_sigmoid else logit
    return RiskOutput(z, X, R)


def _times_events(records) -> tuple[np.ndarray, np.ndarray]:
    times = np.array([r.time for r in records], dtype=np.float64)
    events = np.array([r.event for r in records], dtype=np.float64)
    return times, events


def risk_set_matrix(times: np.ndarray) -> np.ndarray:
    """``A[i, j] = 1`` when ``t_j >= t_i`` (ties included)."""
    return (times[None, :] >= times[:, None]).astype(np.float64)


def cox_loss(risks, records) -> Tensor:
    """Sum over events of ``-R_i + log sum_{j: t_j >= t_i} exp(R_j)``.

    Risk sets span every record passed in.  No normalisation by the event
    count is applied.
    """
    risks = ag.as_tensor(risks)
    n = len(records)
    if n == 0:
        raise ValueError("cox_loss needs at least one record")
    if risks.shape != (n,):
        raise ValueError(f"{risks.shape[0] if risks.ndim else 0} risks for {n} records")
    times, events = _times_events(records)
    if not events.any():
        warnings.warn("all records are censored; Cox loss is 0", AllCensoredWarning, stacklevel=2)
        return ag.mul(ag.sum(risks), 0.0)
    shift = float(risks.data.max())
    e = ag.exp(ag.sub(risks, shift))
    denom = ag.matmul(risk_set_matrix(times), ag.reshape(e, (n, 1)))
    log_denom = ag.add(ag.log(ag.reshape(denom, (n,))), shift)
    return ag.sum(ag.mul(ag.sub(log_denom, risks), events))


def cox_loss_values(risks: np.ndarray, times: np.ndarray, events: np.ndarray) -> np.ndarray:
    """Plain-numpy Cox loss over the last axis; leading axes are independent cohorts."""
    risks = np.asarray(risks, dtype=np.float64)
    shift = risks.max(axis=-1, keepdims=True)
    denom = np.exp(risks - shift) @ risk_set_matrix(np.asarray(times)).T
    terms = np.log(denom) + shift - risks
    return (terms * np.asarray(events, dtype=np.float64)).sum(axis=-1)
