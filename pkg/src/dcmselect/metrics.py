"""Parameter recovery and examinee classification accuracy."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
from numpy.typing import NDArray

PARAMETER_CLASSES = ("intercept", "main", "two_way", "three_way")


def parameter_class(order: int) -> str:
    if order >= len(PARAMETER_CLASSES):
        return f"order_{order}"
    return PARAMETER_CLASSES[order]


@dataclass
class RecoveryCell:
    bias: float
    rmse: float
    n_values: int


@dataclass
class RecoveryReport:
    cells: dict[str, RecoveryCell]

    def __getitem__(self, key: str) -> RecoveryCell:
        return self.cells[key]

    def __contains__(self, key: str) -> bool:
        return key in self.cells

    def to_json(self) -> dict:
        return {k: {"bias": c.bias, "rmse": c.rmse, "n": c.n_values} for k, c in self.cells.items()}


def compute_bias_rmse(estimates, truth, classes: Sequence[str]) -> RecoveryReport:
    """Bias and RMSE of ``estimates - truth`` per parameter class.

    ``estimates`` is ``(R, K)`` for ``R`` replications of ``K`` parameters
    (a single ``(K,)`` vector counts as one replication); ``truth`` is
    ``(K,)`` or ``(R, K)``; ``classes[k]`` labels parameter ``k``.
    """
    est = np.atleast_2d(np.asarray(estimates, dtype=float))
    err = est - np.asarray(truth, dtype=float)
    classes = np.asarray(classes)
    if err.shape[1] != classes.size:
        raise ValueError("one class label per parameter is required")
    cells = {}
    for label in dict.fromkeys(classes.tolist()):
        e = err[:, classes == label].ravel()
        cells[label] = RecoveryCell(
            bias=float(e.mean()), rmse=float(np.sqrt(np.mean(e**2))), n_values=int(e.size)
        )
    return RecoveryReport(cells)


class Classification(NamedTuple):
    profiles: NDArray[np.int_]  # (N, A) MAP profile
    marginals: NDArray[np.int_]  # (N, A) thresholded marginal mastery
    marginal_probs: NDArray[np.float64]  # (N, A)


def classify_examinees(membership_probs: NDArray, lattice: NDArray) -> Classification:
    """MAP profile (ties to the lowest class index) and marginal mastery (> 0.5; ties to 0)."""
    post = np.asarray(membership_probs, dtype=float)
    lattice = np.asarray(lattice)
    profiles = lattice[np.argmax(post, axis=1)]
    marginal_probs = post @ lattice
    return Classification(profiles, (marginal_probs > 0.5).astype(np.int_), marginal_probs)


@dataclass
class ClassificationReport:
    profile_rate: float
    marginal_rates: tuple[float, ...]

    @property
    def mean_marginal_rate(self) -> float:
        return float(np.mean(self.marginal_rates))

    def to_json(self) -> dict:
        return {"profile_rate": self.profile_rate, "marginal_rates": list(self.marginal_rates)}


def classification_rates(calls: Classification | NDArray, truth: NDArray) -> ClassificationReport:
    """Share of exact profile matches and of per-attribute matches.

    ``calls`` is a :class:`Classification` or a bare ``(N, A)`` profile
    array (then used for both rates).
    """
    truth = np.asarray(truth)
    if isinstance(calls, Classification):
        profiles, marginals = calls.profiles, calls.marginals
    else:
        profiles = marginals = np.asarray(calls)
    if profiles.shape != truth.shape:
        raise ValueError("calls and truth must have the same shape")
    profile_rate = float((profiles == truth).all(axis=1).mean())
    marginal_rates = tuple(float(r) for r in (marginals == truth).mean(axis=0))
    return ClassificationReport(profile_rate, marginal_rates)
