"""Alternate uncertainty machinery: binary entropy, split conformal
prediction sets with marginal coverage, and the confidence-band filter."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import IO, Iterable, Sequence

import numpy as np

from .errors import EmptyCalibration

LN2 = math.log(2.0)


def binary_entropy(p) -> np.ndarray | float:
    """-[p ln p + (1-p) ln(1-p)] with 0 * ln 0 := 0; lies in [0, ln 2]."""
    arr = np.asarray(p, dtype=float)
    if np.any((arr < 0.0) | (arr > 1.0)):
        raise ValueError("probabilities must lie in [0, 1]")
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = -(arr * np.log(arr)) - (1.0 - arr) * np.log(1.0 - arr)
    out = np.where((arr == 0.0) | (arr == 1.0), 0.0, terms)
    return float(out) if np.isscalar(p) or out.ndim == 0 else out


@dataclass(frozen=True)
class ConformalCalibrator:
    """Split-conformal threshold for binary prediction sets.

    ``q_hat`` is the ceil((n+1)(1-eps))/n empirical quantile of the
    calibration nonconformity scores (1 minus true-class probability),
    clamped to [0, 1].
    """

    epsilon: float
    q_hat: float
    calibration_size: int
    score_kind: str = "one-minus-true-class-probability"


def conformal_calibrate(probs: Sequence[float], truths: Sequence[int], epsilon: float) -> ConformalCalibrator:
    p = np.asarray(probs, dtype=float)
    a = np.asarray(truths, dtype=int)
    if p.size == 0:
        raise EmptyCalibration("no calibration rows")
    if p.shape != a.shape:
        raise ValueError("probs and truths must have equal length")
    if not 0.0 < epsilon < 1.0:
        raise ValueError("epsilon must lie in (0, 1)")
    scores = np.where(a == 1, 1.0 - p, p)
    n = scores.size
    rank = math.ceil((n + 1) * (1.0 - epsilon))
    if rank > n:
        q_hat = 1.0
    else:
        q_hat = float(np.sort(scores)[rank - 1])
        q_hat = min(max(q_hat, 0.0), 1.0)
    return ConformalCalibrator(epsilon, q_hat, n)


@dataclass(frozen=True)
class PredictionSet:
    """Subset of {0, 1} for one sample; possibly empty."""

    sample_id: int
    members: frozenset[int]

    @property
    def certain(self) -> bool:
        return len(self.members) == 1


def conformal_set(cal: ConformalCalibrator, p_group: float, sample_id: int) -> PredictionSet:
    """Label a enters the set iff its score 1 - p(a) is within the threshold,
    where p(1) = p_group and p(0) = 1 - p_group."""
    members = set()
    if 1.0 - p_group <= cal.q_hat:
        members.add(1)
    if p_group <= cal.q_hat:
        members.add(0)
    return PredictionSet(int(sample_id), frozenset(members))


def conformal_sets(cal: ConformalCalibrator, p_groups: Sequence[float],
                   sample_ids: Sequence[int]) -> list[PredictionSet]:
    return [conformal_set(cal, p, i) for p, i in zip(p_groups, sample_ids)]


def partition_by_certainty(sets: Iterable[PredictionSet]) -> tuple[list[int], list[int]]:
    """Singleton sets are certain; empty or two-element sets are uncertain."""
    certain, uncertain = [], []
    for s in sets:
        (certain if s.certain else uncertain).append(s.sample_id)
    return certain, uncertain


def confidence_band_filter(probs: Sequence[float], ids: Sequence[int],
                           tau: float) -> tuple[list[int], list[int]]:
    """Low-uncertainty iff p <= 1 - tau or p >= tau; tau in [0.5, 1]."""
    if not 0.5 <= tau <= 1.0:
        raise ValueError("tau must lie in [0.5, 1]")
    low, high = [], []
    for p, i in zip(np.asarray(probs, dtype=float), ids):
        if p <= 1.0 - tau or p >= tau:
            low.append(int(i))
        else:
            high.append(int(i))
    return low, high


# --- prediction-set file -----------------------------------------------------

_SET_TOKEN = {frozenset(): "", frozenset({0}): "0", frozenset({1}): "1",
              frozenset({0, 1}): "01"}
_TOKEN_SET = {v: k for k, v in _SET_TOKEN.items()}


def write_prediction_sets(fh: IO[str], sets: Iterable[PredictionSet]) -> None:
    fh.write("sample_id,set\n")
    for s in sets:
        fh.write(f"{s.sample_id},{_SET_TOKEN[s.members]}\n")


def read_prediction_sets(fh: IO[str]) -> list[PredictionSet]:
    header = fh.readline().strip()
    if header != "sample_id,set":
        raise ValueError("not a prediction-set file")
    out = []
    for line in fh:
        line = line.rstrip("\n")
        if not line:
            continue
        sid, _, token = line.partition(",")
        out.append(PredictionSet(int(sid), _TOKEN_SET[token]))
    return out
