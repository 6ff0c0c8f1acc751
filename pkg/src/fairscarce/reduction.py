"""Fair classification by reduction: a cost-sensitive logistic-regression
oracle inside an exponentiated-gradient saddle-point loop, plus the
uncertainty-driven row selections (certain / weighted / uncertain) and the
nearest-neighbor imputation baseline.

The reduction alternates (1) a best-response fit against signed per-row costs
built from the current multipliers with (2) a multiplicative-weights update
of the multipliers by the observed constraint violations, and returns a
mixture of the iterates chosen by a duality-gap criterion.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import IO, Iterable, Sequence

import numpy as np
from scipy.optimize import linprog

from .errors import (
    DegenerateCell,
    DegenerateGroup,
    EmptySelection,
    NonFiniteCost,
)
from .tabular import Dataset
from .uncertainty import LN2

DEMOGRAPHIC_PARITY = "dp"
EQUALIZED_ODDS = "eod"
EQUAL_OPPORTUNITY = "eop"

_MIXTURE_MAGIC = "fairscarce-mixture"
_MIXTURE_VERSION = 1


@dataclass(frozen=True)
class WeightedSample:
    """One training row for the fair phase: features, task label, proxy
    attribute, and the weight its fairness-constraint terms receive."""

    sample_id: int
    features: np.ndarray
    label: int
    a_hat: int | None
    fairness_weight: float = 1.0


def stack_samples(rows: Sequence[WeightedSample]):
    x = np.vstack([r.features for r in rows])
    y = np.array([r.label for r in rows], dtype=float)
    a = np.array([-1 if r.a_hat is None else r.a_hat for r in rows], dtype=int)
    w = np.array([r.fairness_weight for r in rows], dtype=float)
    ids = np.array([r.sample_id for r in rows], dtype=int)
    return x, y, a, w, ids


@dataclass(frozen=True)
class LinearModel:
    """Thresholded linear scorer: predicts 1 iff x @ coef + intercept >= 0."""

    coef: np.ndarray
    intercept: float

    def decision(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=float) @ self.coef + self.intercept

    def predict(self, x: np.ndarray) -> np.ndarray:
        return (self.decision(x) >= 0.0).astype(float)


def fit_cost_sensitive(features: np.ndarray, signed_costs: np.ndarray, seed: int = 0,
                       max_iter: int = 5000, tol: float = 1e-6,
                       ridge: float = 1e-3) -> LinearModel:
    """Best-response oracle: minimize sum_i c_i * h(x_i) over linear
    classifiers, trained as weighted logistic regression with targets
    1{c_i < 0} and weights |c_i|.

    A small L2 penalty applies to the coefficients but not the intercept,
    so constant-within-subset one-hot blocks settle into the intercept
    instead of acting as phantom offsets on out-of-subset rows, and rare
    one-hot levels cannot be memorized with huge weights.

    Full-batch gradient descent with line-halving, stopping when the
    gradient 2-norm drops below ``tol`` or after ``max_iter`` iterations.
    Deterministic: the start point is always zero.
    """
    del seed  # fit is seed-free; parameter kept for interface stability
    x = np.asarray(features, dtype=float)
    c = np.asarray(signed_costs, dtype=float)
    if not np.isfinite(c).all():
        raise NonFiniteCost("signed costs contain NaN or infinity")
    n, d = x.shape
    targets = (c < 0).astype(float)
    weights = np.abs(c)
    total = weights.sum()
    if total == 0.0:
        return LinearModel(np.zeros(d), 0.0)
    weights = weights * (n / total)  # mean-one weights keep gradients scale-free

    design = np.column_stack([x, np.ones(n)])
    theta = np.zeros(d + 1)
    penalty_mask = np.ones(d + 1)
    penalty_mask[-1] = 0.0  # free intercept

    def loss_and_grad(th):
        z = design @ th
        per_row = np.maximum(z, 0.0) - z * targets + np.log1p(np.exp(-np.abs(z)))
        value = float((weights * per_row).mean())
        value += 0.5 * ridge * float((penalty_mask * th * th).sum())
        sig = np.empty_like(z)
        pos = z >= 0
        sig[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
        ez = np.exp(z[~pos])
        sig[~pos] = ez / (1.0 + ez)
        g = design.T @ (weights * (sig - targets)) / n + ridge * penalty_mask * th
        return value, g

    value, g = loss_and_grad(theta)
    step = 1.0
    for _ in range(max_iter):
        gnorm2 = float(g @ g)
        if math.sqrt(gnorm2) < tol:
            break
        accepted_first_try = True
        while True:
            candidate = theta - step * g
            cand_value, cand_grad = loss_and_grad(candidate)
            if cand_value <= value - 1e-4 * step * gnorm2 or step < 1e-16:
                break
            step *= 0.5
            accepted_first_try = False
        theta, value, g = candidate, cand_value, cand_grad
        if accepted_first_try:
            step = min(step * 2.0, 1e6)
    return LinearModel(theta[:-1], float(theta[-1]))


@dataclass(frozen=True)
class MomentConstraint:
    """A group-fairness moment set with slack.

    Each base gap (positive-rate gap for dp, the per-label-slice rate gaps
    for eod/eop) appears with both inequality directions, so the signed
    constraint count is 2 for dp, 4 for eod, 2 for eop.
    """

    kind: str
    slack: float

    def __post_init__(self):
        if self.kind not in (DEMOGRAPHIC_PARITY, EQUALIZED_ODDS, EQUAL_OPPORTUNITY):
            raise ValueError(f"unknown constraint kind {self.kind!r}")
        if self.slack < 0:
            raise ValueError("slack must be nonnegative")

    def label_slices(self, y: np.ndarray) -> list[np.ndarray]:
        if self.kind == DEMOGRAPHIC_PARITY:
            return [np.ones(len(y), dtype=bool)]
        if self.kind == EQUAL_OPPORTUNITY:
            return [y == 1]
        return [y == 0, y == 1]


class _ConstraintSet:
    """Signed conditional-rate constraints over proxy-attribute cells."""

    def __init__(self, constraint: MomentConstraint, y, a, w):
        self.slack = constraint.slack
        self.grads = []  # per signed constraint: d(violation)/d(h_i) vector
        for sl in constraint.label_slices(y):
            cell0 = (a == 0) & sl
            cell1 = (a == 1) & sl
            w0 = float(w[cell0].sum())
            w1 = float(w[cell1].sum())
            if w0 <= 0.0 or w1 <= 0.0:
                exc = DegenerateGroup if constraint.kind == DEMOGRAPHIC_PARITY else DegenerateCell
                raise exc("a constraint cell has no weight mass")
            base = np.where(cell0, w / w0, 0.0) - np.where(cell1, w / w1, 0.0)
            self.grads.append(base)
            self.grads.append(-base)
        self.matrix = np.vstack(self.grads)  # (K, n)

    @property
    def count(self) -> int:
        return len(self.grads)

    def violations(self, preds: np.ndarray) -> np.ndarray:
        """Signed gaps g_k(h); the constraints read g_k <= slack."""
        return self.matrix @ preds

    def cost_contribution(self, lambdas: np.ndarray) -> np.ndarray:
        return lambdas @ self.matrix


@dataclass(frozen=True)
class RandomizedClassifier:
    """Mixture of linear members; evaluation uses expected prediction rates."""

    members: tuple[LinearModel, ...]
    mix_weights: np.ndarray

    def __post_init__(self):
        if abs(float(self.mix_weights.sum()) - 1.0) > 1e-9 or (self.mix_weights < 0).any():
            raise ValueError("mixture weights must be nonnegative and sum to 1")

    def expected_predictions(self, x: np.ndarray) -> np.ndarray:
        out = np.zeros(len(x))
        for q, member in zip(self.mix_weights, self.members):
            if q > 0.0:
                out += q * member.predict(x)
        return out


@dataclass
class ExpGradLog:
    converged: bool
    best_gap: float
    iterations: int
    oracle_calls: int
    final_violations: np.ndarray
    max_violation: float
    error: float
    lambda_history: list[np.ndarray] = field(default_factory=list)


def exp_grad_train(rows: Sequence[WeightedSample], constraint: MomentConstraint,
                   iters: int = 50, eta: float = 2.0, bound: float = 100.0,
                   gap_tol: float = 1e-3, seed: int = 0,
                   oracle_max_iter: int = 5000,
                   hull_step: bool = True) -> tuple[RandomizedClassifier, ExpGradLog]:
    """Train a randomized fair classifier by exponentiated gradient.

    Per iteration: form signed costs from the current multipliers, fit the
    best response, measure its constraint violations, and update the
    multipliers multiplicatively (log-weights shifted by (eta / bound) *
    (violation - slack); the exponentiated-weights normalization keeps their
    1-norm below ``bound``). Candidate solutions are the uniform mixture over
    iterates and, when ``hull_step`` is on, the small LP re-mix over all
    generated classifiers; the candidate with the smallest duality gap is
    returned and ``converged`` says whether that gap beat ``gap_tol``.
    """
    if not rows:
        raise ValueError("no training rows")
    x, y, a, w, _ = stack_samples(rows)
    if (a < 0).any():
        raise ValueError("every row needs a proxy attribute under fairness constraints")
    cons = _ConstraintSet(constraint, y, a, w)
    n = len(rows)
    base_cost = (1.0 - 2.0 * y) / n  # derivative of expected error wrt h_i

    members: list[LinearModel] = []
    member_err: list[float] = []
    member_viol: list[np.ndarray] = []

    def fit_and_register(costs) -> int:
        model = fit_cost_sensitive(x, costs, seed=seed, max_iter=oracle_max_iter)
        preds = model.predict(x)
        members.append(model)
        member_err.append(float(np.abs(preds - y).mean()))
        member_viol.append(cons.violations(preds))
        return len(members) - 1

    theta = np.zeros(cons.count)
    lambda_sum = np.zeros(cons.count)
    eta_step = eta / bound
    chosen: list[int] = []
    log = ExpGradLog(False, math.inf, 0, 0, np.zeros(cons.count), 0.0, 0.0)
    best_mix: np.ndarray | None = None
    best_lam: np.ndarray | None = None

    fit_and_register(base_cost)  # unconstrained seed, used by the gap bound
    log.oracle_calls += 1

    def gap_of(mix, lam_vec) -> tuple[float, float, np.ndarray]:
        """Duality gap of the pair (mix, lam_vec) with the lower bound taken
        over the members generated so far."""
        errors = np.array(member_err)
        viols = np.vstack(member_viol)
        mix_err = float(mix @ errors)
        mix_viol = mix @ viols
        l_mid = mix_err + float(lam_vec @ (mix_viol - cons.slack))
        l_low = float(np.min(errors + viols @ lam_vec)) - cons.slack * float(lam_vec.sum())
        l_high = mix_err + bound * max(0.0, float((mix_viol - cons.slack).max()))
        return max(l_mid - l_low, l_high - l_mid), mix_err, mix_viol

    def hull_lp() -> tuple[np.ndarray, np.ndarray] | None:
        """Cheapest mixture of collected members (max violation beyond the
        slack priced at ``bound``) and the dual multipliers of its
        constraints, which form the lambda of the candidate pair."""
        errors = np.array(member_err)
        viols = np.vstack(member_viol)
        m = len(errors)
        res = linprog(c=np.concatenate([errors, [bound]]),
                      A_ub=np.column_stack([viols.T, -np.ones(cons.count)]),
                      b_ub=np.full(cons.count, cons.slack),
                      A_eq=np.concatenate([np.ones(m), [0.0]])[None, :],
                      b_eq=[1.0],
                      bounds=[(0, None)] * m + [(0, None)], method="highs")
        if not res.success:
            return None
        return res.x[:m], np.maximum(-res.ineqlin.marginals, 0.0)

    def consider(mix, lam_vec, verify: bool) -> None:
        """Track the candidate; on a would-converge gap, certify the lower
        bound with one fresh best response against the candidate's lambda."""
        gap, mix_err, mix_viol = gap_of(mix, lam_vec)
        if verify and gap < gap_tol:
            fit_and_register(base_cost + cons.cost_contribution(lam_vec))
            log.oracle_calls += 1
            gap, mix_err, mix_viol = gap_of(np.pad(mix, (0, 1)), lam_vec)
            mix = np.pad(mix, (0, 1))
        if gap < log.best_gap:
            log.best_gap = gap
            nonlocal best_mix, best_lam
            best_mix = np.array(mix, dtype=float)
            best_lam = np.array(lam_vec, dtype=float)
            log.final_violations = mix_viol
            log.max_violation = float(mix_viol.max())
            log.error = mix_err

    for t in range(iters):
        expt = np.exp(theta - theta.max())
        lam = bound * expt / (math.exp(-theta.max()) + expt.sum())
        log.lambda_history.append(lam)
        lambda_sum += lam

        idx = fit_and_register(base_cost + cons.cost_contribution(lam))
        log.oracle_calls += 1
        chosen.append(idx)

        uniform = np.zeros(len(members))
        for i in chosen:
            uniform[i] += 1.0 / len(chosen)
        consider(uniform, lambda_sum / (t + 1), verify=True)
        if hull_step and log.best_gap >= gap_tol:
            lp_pair = hull_lp()
            if lp_pair is not None:
                consider(np.pad(lp_pair[0], (0, len(members) - len(lp_pair[0]))),
                         lp_pair[1], verify=True)
        log.iterations = t + 1
        if log.best_gap < gap_tol:
            log.converged = True
            break

        theta = theta + eta_step * (member_viol[idx] - cons.slack)

    assert best_mix is not None
    best_mix = np.pad(best_mix, (0, len(members) - len(best_mix)))
    keep = best_mix > 1e-12
    kept_members = tuple(m for m, k in zip(members, keep) if k)
    kept_weights = best_mix[keep]
    kept_weights = kept_weights / kept_weights.sum()
    return RandomizedClassifier(kept_members, kept_weights), log


def unconstrained_train(rows: Sequence[WeightedSample], seed: int = 0,
                        oracle_max_iter: int = 5000) -> RandomizedClassifier:
    """Plain accuracy-only logistic fit wrapped as a single-member mixture."""
    x, y, _, _, _ = stack_samples(rows)
    model = fit_cost_sensitive(x, (1.0 - 2.0 * y) / len(rows), seed=seed,
                               max_iter=oracle_max_iter)
    return RandomizedClassifier((model,), np.array([1.0]))


# --- uncertainty-driven selections -------------------------------------------

def _proxy_lookup(proxies) -> dict[int, tuple[int, float]]:
    table = {}
    for rec in proxies:
        table[int(rec.sample_id)] = (int(rec.a_hat), float(rec.u))
    return table


def _require_coverage(table, ids):
    missing = [int(i) for i in ids if int(i) not in table]
    if missing:
        raise ValueError(f"proxies missing for {len(missing)} rows, e.g. id {missing[0]}")


def filter_certain(proxies, d1: Dataset, threshold: float) -> list[WeightedSample]:
    """Rows whose proxy uncertainty is at most the threshold (inclusive),
    each with weight 1 and its proxy attribute attached."""
    table = _proxy_lookup(proxies)
    _require_coverage(table, d1.sample_ids)
    if d1.labels is None:
        raise ValueError("d1 must carry labels")
    out = []
    for i in range(len(d1)):
        a_hat, u = table[int(d1.sample_ids[i])]
        if u <= threshold:
            out.append(WeightedSample(int(d1.sample_ids[i]), d1.features[i],
                                      int(d1.labels[i]), a_hat, 1.0))
    if not out:
        raise EmptySelection(f"no row has uncertainty <= {threshold}")
    return out


def weight_from_uncertainty(proxies, d1: Dataset, scheme: str = "scaled") -> list[WeightedSample]:
    """Every row kept; fairness weight 1 - u/ln2 (``scaled``, endpoints 1 and
    0) or 1 - u (``raw``). Only constraint terms see these weights."""
    if scheme not in ("scaled", "raw"):
        raise ValueError("scheme must be 'scaled' or 'raw'")
    table = _proxy_lookup(proxies)
    _require_coverage(table, d1.sample_ids)
    if d1.labels is None:
        raise ValueError("d1 must carry labels")
    out = []
    for i in range(len(d1)):
        a_hat, u = table[int(d1.sample_ids[i])]
        weight = 1.0 - (u / LN2 if scheme == "scaled" else u)
        out.append(WeightedSample(int(d1.sample_ids[i]), d1.features[i],
                                  int(d1.labels[i]), a_hat, max(weight, 0.0)))
    return out


def select_uncertain(proxies, d1: Dataset, threshold: float) -> Dataset:
    """Rows with uncertainty >= threshold, labels kept, no attributes attached
    (downstream training is unconstrained)."""
    table = _proxy_lookup(proxies)
    _require_coverage(table, d1.sample_ids)
    keep = [i for i in range(len(d1)) if table[int(d1.sample_ids[i])][1] >= threshold]
    if not keep:
        raise EmptySelection(f"no row has uncertainty >= {threshold}")
    sub = d1.take(np.array(keep))
    return Dataset(sub.features, sub.sample_ids, labels=sub.labels)


def knn_impute(d1: Dataset, d2: Dataset, k: int) -> np.ndarray:
    """Majority sensitive value among each d1 row's k Euclidean-nearest d2
    rows; ties resolve to 1."""
    if not 1 <= k <= len(d2):
        raise ValueError("k must lie in [1, |d2|]")
    if d2.sensitive is None:
        raise ValueError("d2 must carry sensitive attributes")
    ref = d2.features
    ref_norm2 = np.einsum("ij,ij->i", ref, ref)
    out = np.empty(len(d1), dtype=int)
    chunk = max(1, int(2_000_000 // max(len(d2), 1)))
    for start in range(0, len(d1), chunk):
        block = d1.features[start:start + chunk]
        d2dist = ref_norm2[None, :] - 2.0 * (block @ ref.T)  # + ||x||^2, constant per row
        if k < len(d2):
            nearest = np.argpartition(d2dist, k - 1, axis=1)[:, :k]
        else:
            nearest = np.broadcast_to(np.arange(len(d2)), (len(block), len(d2)))
        votes = d2.sensitive[nearest].sum(axis=1)
        out[start:start + len(block)] = (2 * votes >= k).astype(int)
    return out


# --- mixture model io ---------------------------------------------------------

def write_mixture(fh: IO[str], model: RandomizedClassifier) -> None:
    dim = len(model.members[0].coef)
    fh.write(f"{_MIXTURE_MAGIC} {_MIXTURE_VERSION}\n")
    fh.write(f"members {len(model.members)} dim {dim}\n")
    for q, member in zip(model.mix_weights, model.members):
        parts = [repr(float(q)), repr(float(member.intercept))]
        parts.extend(repr(float(v)) for v in member.coef)
        fh.write(" ".join(parts) + "\n")


def read_mixture(fh: IO[str]) -> RandomizedClassifier:
    magic = fh.readline().split()
    if magic[:1] != [_MIXTURE_MAGIC] or int(magic[1]) != _MIXTURE_VERSION:
        raise ValueError("not a fairscarce mixture file")
    _, m, _, dim = fh.readline().split()
    m, dim = int(m), int(dim)
    members, weights = [], []
    for _ in range(m):
        parts = [float(v) for v in fh.readline().split()]
        weights.append(parts[0])
        members.append(LinearModel(np.array(parts[2:2 + dim]), parts[1]))
    return RandomizedClassifier(tuple(members), np.array(weights))


def save_mixture(path, model: RandomizedClassifier) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        write_mixture(fh, model)


def load_mixture(path) -> RandomizedClassifier:
    with open(path, "r", encoding="utf-8") as fh:
        return read_mixture(fh)
