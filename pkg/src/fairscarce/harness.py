"""End-to-end orchestration: attribute-model runs, threshold tuning, sweep
cells across (variant, slack, seed), median aggregation, Pareto fronts, and
the CSV artifacts every table and figure is built from.

A run directory produced by the attribute phase caches the encoded split,
the trained checkpoint, the proxy records, and the conformal inputs; every
later command (train-fair, sweep, fig2, table) works off that directory.
"""
from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import attribute as attr
from . import metrics, reduction, tabular, uncertainty
from .configio import read_kv_file
from .errors import ConfigError, DegenerateCell, DegenerateGroup, EmptySelection
from .uncertainty import LN2

VARIANTS = ("vanilla", "clean", "proxy-dnn", "proxy-knn", "certain", "weighted", "uncertain")
RESULTS_HEADER = "variant,constraint,eps_fair,seed,H,uncertainty_source,accuracy,dp,eop,eod"
PARETO_HEADER = ("variant,metric,eps_fair,accuracy_median,unfairness_median,"
                 "accuracy_min,accuracy_max")
FIG2_HEADER = "H,seed,n_rows,accuracy,dp,eop,eod"
WORKERS_ENV = "FAIRSCARCE_WORKERS"


# --- run directory -----------------------------------------------------------

@dataclass
class RunArtifacts:
    """Everything the fair phase needs, loaded from a run directory."""

    split: tabular.ScarceSplit
    state: attr.StudentTeacherState
    proxies: list[attr.ProxyRecord]
    calib_probs: np.ndarray
    calib_truth: np.ndarray
    d1_eval_probs: np.ndarray  # teacher eval probabilities, d1 rows in sample_id order
    config: dict


def run_attribute_phase(csv_path, schema_path, out_dir, ratio: float = 0.2,
                        test_fraction: float = 0.3, seed: int = 0,
                        train_config: attr.AttrTrainConfig | None = None,
                        lenient: bool = False) -> RunArtifacts:
    """Phase 1 end to end: split, train, emit proxies plus conformal inputs,
    and cache everything under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    schema = tabular.Schema.from_file(schema_path)
    split, _ = tabular.prepare_split(csv_path, schema, ratio, test_fraction, seed,
                                     strict=not lenient)
    cfg = train_config if train_config is not None else attr.AttrTrainConfig(seed=seed)
    result = attr.train_attribute_classifier(split, cfg)
    state = result.state

    proxies = attr.predict_proxy(state, split.d1, cfg.mc_passes, seed=seed + 4099,
                                 config_proxy_source=cfg.proxy_source)

    # conformal inputs: eval-mode teacher probabilities on the reserved
    # calibration slice of d2 and on d1
    calib_pos = np.isin(split.d2.sample_ids, result.calib_ids)
    calib_ds = split.d2.take(np.flatnonzero(calib_pos))
    calib_probs = attr.teacher_eval_probs(state, calib_ds)
    calib_truth = calib_ds.sensitive
    order = np.argsort(split.d1.sample_ids)
    d1_eval_probs = attr.teacher_eval_probs(state, split.d1.take(order))

    tabular.save_dataset(out / "d1.ds", split.d1)
    tabular.save_dataset(out / "d2.ds", split.d2)
    tabular.save_dataset(out / "test.ds", split.test)
    attr.save_checkpoint(out / "attr_checkpoint.txt", state)
    attr.save_proxies(out / "proxies.csv", proxies)
    with open(out / "attr_log.csv", "w", encoding="utf-8") as fh:
        fh.write("epoch,loss_supervised,loss_consistency,lambda,r,mean_batch_u,val_accuracy\n")
        for row in result.log:
            fh.write(f"{row.epoch},{repr(row.loss_supervised)},{repr(row.loss_consistency)},"
                     f"{repr(row.lambda_value)},{repr(row.r_value)},"
                     f"{repr(row.mean_batch_uncertainty)},{repr(row.val_accuracy)}\n")
    _write_csv(out / "calibration.csv", "sample_id,p_eval,a_true",
               [f"{int(i)},{repr(float(p))},{int(a)}"
                for i, p, a in zip(calib_ds.sample_ids, calib_probs, calib_truth)])
    _write_csv(out / "d1_eval_probs.csv", "sample_id,p_eval",
               [f"{int(i)},{repr(float(p))}"
                for i, p in zip(split.d1.sample_ids[order], d1_eval_probs)])

    import platform

    from . import __version__
    u_vals = np.array([r.u for r in proxies])
    test_logits_probs = attr.teacher_eval_probs(state, split.test)
    test_attr_acc = float(((test_logits_probs >= 0.5).astype(int)
                           == tabular.oracle_sensitive(split.test)).mean())
    summary = {
        "package_version": __version__,
        "python": platform.python_version(),
        "seed": seed,
        "ratio": ratio,
        "test_fraction": test_fraction,
        "train_config": asdict(cfg),
        "epochs_run": len(result.log),
        "best_epoch": result.best_epoch,
        "val_accuracy_last": result.log[-1].val_accuracy if result.log else None,
        "test_attr_accuracy": test_attr_acc,
        "d1_mean_uncertainty": float(u_vals.mean()),
    }
    with open(out / "attr_summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return RunArtifacts(split, state, proxies, calib_probs, calib_truth.copy(),
                        d1_eval_probs, summary)


def load_run(run_dir) -> RunArtifacts:
    run = Path(run_dir)
    split = tabular.ScarceSplit(
        tabular.load_dataset(run / "d1.ds"),
        tabular.load_dataset(run / "d2.ds"),
        tabular.load_dataset(run / "test.ds"),
        group_labeled_ratio=float(json.loads((run / "attr_summary.json").read_text())["ratio"]),
    )
    state = attr.load_checkpoint(run / "attr_checkpoint.txt")
    proxies = attr.load_proxies(run / "proxies.csv")
    calib_ids, calib_probs, calib_truth = [], [], []
    for line in (run / "calibration.csv").read_text().splitlines()[1:]:
        i, p, a = line.split(",")
        calib_ids.append(int(i)); calib_probs.append(float(p)); calib_truth.append(int(a))
    d1_probs = []
    for line in (run / "d1_eval_probs.csv").read_text().splitlines()[1:]:
        _, p = line.split(",")
        d1_probs.append(float(p))
    config = json.loads((run / "attr_summary.json").read_text())
    return RunArtifacts(split, state, proxies, np.array(calib_probs),
                        np.array(calib_truth), np.array(d1_probs), config)


def _write_csv(path, header: str, rows: Sequence[str]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(header + "\n")
        for row in rows:
            fh.write(row + "\n")


# --- uncertainty sources -------------------------------------------------------

@dataclass(frozen=True)
class UncertaintySource:
    """How phase 2 decides which rows count as reliably labeled.

    kind 'mc-dropout' thresholds the proxy entropy at H; 'conformal' builds
    split-conformal sets at its epsilon and calls singletons certain;
    'confidence' applies the probability band at its tau.
    """

    kind: str = "mc-dropout"
    epsilon: float = 0.1
    tau: float = 0.9

    def describe(self) -> str:
        if self.kind == "conformal":
            return f"conformal({self.epsilon})"
        if self.kind == "confidence":
            return f"confidence({self.tau})"
        return self.kind


def parse_uncertainty_source(text: str) -> UncertaintySource:
    text = text.strip()
    if text in ("mc-dropout", "mc_dropout", "mc"):
        return UncertaintySource("mc-dropout")
    for kind, param in (("conformal", "epsilon"), ("confidence", "tau")):
        if text.startswith(kind):
            inner = text[len(kind):].strip("()")
            if not inner:
                return UncertaintySource(kind)
            return UncertaintySource(kind, **{param: float(inner)})
    raise ConfigError(f"unknown uncertainty source {text!r}")


def _certainty_flags(artifacts: RunArtifacts, source: UncertaintySource,
                     threshold: float) -> dict[int, bool]:
    """sample_id -> certain? under the given uncertainty machinery."""
    if source.kind == "mc-dropout":
        return {r.sample_id: r.u <= threshold for r in artifacts.proxies}
    ordered_ids = sorted(r.sample_id for r in artifacts.proxies)
    if source.kind == "conformal":
        cal = uncertainty.conformal_calibrate(artifacts.calib_probs,
                                              artifacts.calib_truth, source.epsilon)
        sets = uncertainty.conformal_sets(cal, artifacts.d1_eval_probs, ordered_ids)
        return {s.sample_id: s.certain for s in sets}
    if source.kind == "confidence":
        low, high = uncertainty.confidence_band_filter(artifacts.d1_eval_probs,
                                                       ordered_ids, source.tau)
        flags = {i: True for i in low}
        flags.update({i: False for i in high})
        return flags
    raise ConfigError(f"unknown uncertainty source kind {source.kind!r}")


# --- one sweep cell ------------------------------------------------------------

def _d1_train_eval(artifacts: RunArtifacts, seed: int,
                   train_fraction: float = 0.7) -> tuple[np.ndarray, np.ndarray]:
    """Per-seed resample of d1 into training and evaluation row indices."""
    n = len(artifacts.split.d1)
    order = np.random.default_rng((seed, 97)).permutation(n)
    cut = int(round(train_fraction * n))
    return np.sort(order[:cut]), np.sort(order[cut:])


def _training_rows(artifacts: RunArtifacts, variant: str, rows: np.ndarray,
                   threshold: float, source: UncertaintySource,
                   weight_scheme: str = "scaled") -> list[reduction.WeightedSample]:
    d1 = artifacts.split.d1.take(rows)
    proxy_map = {r.sample_id: r for r in artifacts.proxies}
    if variant == "clean":
        true_a = tabular.oracle_sensitive(d1)
        return [reduction.WeightedSample(int(d1.sample_ids[i]), d1.features[i],
                                         int(d1.labels[i]), int(true_a[i]), 1.0)
                for i in range(len(d1))]
    if variant == "proxy-knn":
        imputed = reduction.knn_impute(d1, artifacts.split.d2, k=5)
        return [reduction.WeightedSample(int(d1.sample_ids[i]), d1.features[i],
                                         int(d1.labels[i]), int(imputed[i]), 1.0)
                for i in range(len(d1))]
    if variant in ("vanilla", "proxy-dnn"):
        attach = variant == "proxy-dnn"
        return [reduction.WeightedSample(int(d1.sample_ids[i]), d1.features[i],
                                         int(d1.labels[i]),
                                         proxy_map[int(d1.sample_ids[i])].a_hat if attach else None,
                                         1.0)
                for i in range(len(d1))]
    flags = _certainty_flags(artifacts, source, threshold)
    if variant == "certain":
        out = [reduction.WeightedSample(int(d1.sample_ids[i]), d1.features[i],
                                        int(d1.labels[i]),
                                        proxy_map[int(d1.sample_ids[i])].a_hat, 1.0)
               for i in range(len(d1)) if flags[int(d1.sample_ids[i])]]
        if not out:
            raise EmptySelection("certain variant kept no rows")
        return out
    if variant == "weighted":
        if source.kind == "mc-dropout":
            return reduction.weight_from_uncertainty(
                [proxy_map[int(i)] for i in d1.sample_ids], d1, scheme=weight_scheme)
        return [reduction.WeightedSample(int(d1.sample_ids[i]), d1.features[i],
                                         int(d1.labels[i]),
                                         proxy_map[int(d1.sample_ids[i])].a_hat,
                                         1.0 if flags[int(d1.sample_ids[i])] else 0.0)
                for i in range(len(d1))]
    if variant == "uncertain":
        out = [reduction.WeightedSample(int(d1.sample_ids[i]), d1.features[i],
                                        int(d1.labels[i]), None, 1.0)
               for i in range(len(d1)) if not flags[int(d1.sample_ids[i])]]
        if not out:
            raise EmptySelection("uncertain variant kept no rows")
        return out
    raise ConfigError(f"unknown variant {variant!r}")


def run_cell(artifacts: RunArtifacts, variant: str, constraint_kind: str,
             eps_fair: float, seed: int, threshold: float,
             source: UncertaintySource = UncertaintySource(),
             exp_grad_kw: dict | None = None,
             train_fraction: float = 0.7) -> metrics.FairnessReport:
    """Train one variant on a per-seed 70 percent slice of d1 and score it on
    the held-out 30 percent against the true (masked) sensitive attributes."""
    train_rows, eval_rows = _d1_train_eval(artifacts, seed, train_fraction)
    rows = _training_rows(artifacts, variant, train_rows, threshold, source)
    kw = dict(exp_grad_kw or {})
    if variant in ("vanilla", "uncertain"):
        model = reduction.unconstrained_train(rows, seed=seed,
                                              oracle_max_iter=kw.get("oracle_max_iter", 5000))
    else:
        constraint = reduction.MomentConstraint(constraint_kind, eps_fair)
        model, _ = reduction.exp_grad_train(rows, constraint, seed=seed, **kw)
    d1_eval = artifacts.split.d1.take(eval_rows)
    preds = model.expected_predictions(d1_eval.features)
    return metrics.evaluate_report(preds, d1_eval.labels,
                                   tabular.oracle_sensitive(d1_eval))


def unconstrained_subset_cell(artifacts: RunArtifacts, side: str, seed: int,
                              source: UncertaintySource, threshold: float = 0.0,
                              oracle_max_iter: int = 5000,
                              train_fraction: float = 0.7) -> metrics.FairnessReport:
    """Plain (no fairness constraint) model trained on the certain or the
    uncertain side of the partition, scored like any other cell. This is the
    conformal-ablation protocol: certain rows are singleton prediction sets,
    uncertain rows empty or two-element sets."""
    if side not in ("certain", "uncertain", "all"):
        raise ConfigError("side must be certain, uncertain, or all")
    train_rows, eval_rows = _d1_train_eval(artifacts, seed, train_fraction)
    d1 = artifacts.split.d1.take(train_rows)
    if side == "all":
        keep = list(range(len(d1)))
    else:
        flags = _certainty_flags(artifacts, source, threshold)
        want = side == "certain"
        keep = [i for i in range(len(d1)) if flags[int(d1.sample_ids[i])] == want]
    if not keep:
        raise EmptySelection(f"{side} side kept no rows")
    rows = [reduction.WeightedSample(int(d1.sample_ids[i]), d1.features[i],
                                     int(d1.labels[i]), None, 1.0) for i in keep]
    model = reduction.unconstrained_train(rows, seed=seed, oracle_max_iter=oracle_max_iter)
    d1_eval = artifacts.split.d1.take(eval_rows)
    preds = model.expected_predictions(d1_eval.features)
    return metrics.evaluate_report(preds, d1_eval.labels,
                                   tabular.oracle_sensitive(d1_eval))


# --- threshold tuning ----------------------------------------------------------

@dataclass
class TuneResult:
    threshold: float
    table: list[tuple[float, float, float, float]]  # H, accuracy, dp, objective


def tune_threshold(artifacts: RunArtifacts, tune_range: tuple[float, float] = (0.1, LN2),
                   validation_fraction: float = 0.1, grid_step: float = 0.05,
                   constraint_kind: str = reduction.DEMOGRAPHIC_PARITY,
                   eps_fair: float = 0.01, seed: int = 0,
                   budget: dict | None = None) -> TuneResult:
    """Pick the uncertainty cutoff for the certain variant: train candidates
    on d1's training portion minus a validation slice, score
    (accuracy - dp_diff) on that slice, return the argmax (ties to the
    smallest H). The tuning loop runs on a reduced budget: fewer reduction
    iterations and a row cap, both overridable."""
    budget = dict(budget or {})
    iters = budget.get("iters", 10)
    max_rows = budget.get("max_rows", 8000)
    oracle_max_iter = budget.get("oracle_max_iter", 600)

    train_rows, _ = _d1_train_eval(artifacts, seed)
    k_val = max(1, int(round(validation_fraction * len(train_rows))))
    order = np.random.default_rng((seed, 131)).permutation(len(train_rows))
    val_rows = np.sort(train_rows[order[:k_val]])
    fit_rows = np.sort(train_rows[order[k_val:]])
    if len(fit_rows) > max_rows:
        fit_rows = np.sort(fit_rows[np.random.default_rng((seed, 137)).permutation(len(fit_rows))[:max_rows]])

    d1_val = artifacts.split.d1.take(val_rows)
    val_truth = tabular.oracle_sensitive(d1_val)

    lo, hi = tune_range
    n_steps = int(round((hi - lo) / grid_step))
    grid = [round(lo + i * grid_step, 10) for i in range(n_steps + 1)]
    table = []
    best_h, best_obj = None, -math.inf
    for h_cand in grid:
        try:
            rows = _training_rows(artifacts, "certain", fit_rows, h_cand,
                                  UncertaintySource("mc-dropout"))
            model, _ = reduction.exp_grad_train(
                rows, reduction.MomentConstraint(constraint_kind, eps_fair),
                iters=iters, seed=seed, oracle_max_iter=oracle_max_iter)
        except (EmptySelection, DegenerateGroup, DegenerateCell):
            # a candidate that keeps no rows, or rows from one group only,
            # simply cannot win the tuning
            table.append((h_cand, math.nan, math.nan, -math.inf))
            continue
        preds = model.expected_predictions(d1_val.features)
        report = metrics.evaluate_report(preds, d1_val.labels, val_truth)
        objective = report.accuracy - report.dp_diff
        table.append((h_cand, report.accuracy, report.dp_diff, objective))
        if objective > best_obj + 1e-12:
            best_obj, best_h = objective, h_cand
    if best_h is None:
        raise EmptySelection("no tuning candidate kept any rows")
    return TuneResult(best_h, table)


# --- pareto front ---------------------------------------------------------------

@dataclass(frozen=True)
class ParetoPoint:
    eps_fair: float
    accuracy_median: float
    unfairness_median: float
    accuracy_min: float
    accuracy_max: float


def pareto_front(points: Sequence[tuple[float, float]]) -> list[tuple[float, float]]:
    """Non-dominated subset (higher accuracy, lower unfairness; strict in at
    least one coordinate), sorted by accuracy. Exact ties survive."""
    if not points:
        raise ValueError("pareto_front needs at least one point")
    kept = []
    for i, (acc_i, unf_i) in enumerate(points):
        dominated = False
        for j, (acc_j, unf_j) in enumerate(points):
            if j == i:
                continue
            if acc_j >= acc_i and unf_j <= unf_i and (acc_j > acc_i or unf_j < unf_i):
                dominated = True
                break
        if not dominated:
            kept.append((acc_i, unf_i))
    return sorted(kept)


# --- sweep ----------------------------------------------------------------------

@dataclass
class SweepConfig:
    data: str = ""
    schema: str = ""
    run_dir: str = ""
    out_dir: str = ""
    variants: tuple[str, ...] = ("certain",)
    constraint: str = reduction.DEMOGRAPHIC_PARITY
    eps_grid: tuple[float, ...] = field(default_factory=tuple)
    seeds: int = 7
    base_seed: int = 0
    threshold: float | None = None  # fixed H; None means tune
    tune_lo: float = 0.1
    tune_hi: float = LN2
    source: UncertaintySource = UncertaintySource()
    ratio: float = 0.2
    test_fraction: float = 0.3
    exp_grad_iters: int = 50
    oracle_max_iter: int = 5000

    def __post_init__(self):
        if self.seeds < 1:
            raise ConfigError("seeds must be >= 1")
        if not self.eps_grid:
            self.eps_grid = tuple(round(float(v), 12) for v in
                                  np.geomspace(0.001, 0.3, 12))
        for v in self.variants:
            if v not in VARIANTS:
                raise ConfigError(f"unknown variant {v!r}")


def parse_sweep_config(path) -> SweepConfig:
    kv = read_kv_file(path)
    def split_list(text):
        return tuple(t.strip() for t in text.split(",") if t.strip())
    cfg = SweepConfig(
        data=kv.get("data", ""),
        schema=kv.get("schema", ""),
        run_dir=kv.get("run_dir", ""),
        out_dir=kv.get("out_dir", kv.get("run_dir", "sweep_out")),
        variants=split_list(kv.get("variants", "certain")) or ("certain",),
        constraint=kv.get("constraint", "dp"),
        eps_grid=tuple(float(v) for v in split_list(kv.get("eps_grid", ""))),
        seeds=int(kv.get("seeds", "7")),
        base_seed=int(kv.get("base_seed", "0")),
        threshold=(float(kv["H"]) if "H" in kv else None),
        tune_lo=float(kv.get("tune_lo", "0.1")),
        # the entropy scale tops out at ln 2, so a nominal 0.7 upper end
        # (a common way to say "no upper cut") clamps to it
        tune_hi=min(float(kv.get("tune_hi", str(LN2))), LN2),
        source=parse_uncertainty_source(kv.get("uncertainty_source", "mc-dropout")),
        ratio=float(kv.get("ratio", "0.2")),
        test_fraction=float(kv.get("test_fraction", "0.3")),
        exp_grad_iters=int(kv.get("exp_grad_iters", "50")),
        oracle_max_iter=int(kv.get("oracle_max_iter", "5000")),
    )
    if not 0 < cfg.tune_lo <= cfg.tune_hi <= LN2 + 1e-9:
        raise ConfigError("tune range must lie within (0, ln 2]")
    return cfg


@dataclass
class SweepOutcome:
    results_path: Path
    pareto_path: Path
    manifest_path: Path
    n_failed: int


def _worker_count() -> int:
    value = os.environ.get(WORKERS_ENV, "1")
    try:
        return max(1, int(value))
    except ValueError:
        return 1


def run_sweep(config: SweepConfig, artifacts: RunArtifacts | None = None,
              progress: Callable[[str], None] | None = None) -> SweepOutcome:
    """Execute every (variant, eps, seed) cell, write results.csv, pareto.csv
    and a manifest sufficient to reproduce both byte for byte."""
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    say = progress or (lambda _msg: None)

    if artifacts is None:
        if config.run_dir and (Path(config.run_dir) / "attr_summary.json").exists():
            artifacts = load_run(config.run_dir)
        elif config.data and config.schema:
            run_dir = config.run_dir or str(out / "attr_run")
            say(f"training attribute model into {run_dir}")
            artifacts = run_attribute_phase(config.data, config.schema, run_dir,
                                            ratio=config.ratio,
                                            test_fraction=config.test_fraction,
                                            seed=config.base_seed)
        else:
            raise ConfigError("sweep needs either run_dir with artifacts or data+schema")

    if config.threshold is not None:
        threshold = config.threshold
        tune_table = []
    else:
        say("tuning uncertainty threshold")
        tuned = tune_threshold(artifacts, (config.tune_lo, config.tune_hi),
                               seed=config.base_seed)
        threshold = tuned.threshold
        tune_table = tuned.table
        _write_csv(out / "tuning.csv", "H,accuracy,dp,objective",
                   [f"{h},{repr(a)},{repr(d)},{repr(o)}" for h, a, d, o in tune_table])

    cells = [(variant, eps, config.base_seed + j)
             for variant in config.variants
             for eps in config.eps_grid
             for j in range(config.seeds)]
    exp_grad_kw = {"iters": config.exp_grad_iters,
                   "oracle_max_iter": config.oracle_max_iter}

    def execute(cell):
        variant, eps, seed = cell
        try:
            report = run_cell(artifacts, variant, config.constraint, eps, seed,
                              threshold, config.source, exp_grad_kw)
            return cell, report, None
        except Exception as exc:  # recorded, never fabricated
            return cell, None, f"{type(exc).__name__}: {exc}"

    n_workers = _worker_count()
    say(f"running {len(cells)} cells on {n_workers} worker(s)")
    if n_workers == 1:
        outcomes = [execute(c) for c in cells]
    else:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            outcomes = list(pool.map(execute, cells))

    result_rows = []
    cell_status = []
    grouped: dict[tuple[str, float], list[metrics.FairnessReport]] = {}
    for (variant, eps, seed), report, error in outcomes:
        if error is None:
            result_rows.append(
                f"{variant},{config.constraint},{repr(eps)},{seed},{repr(threshold)},"
                f"{config.source.describe()},{repr(report.accuracy)},{repr(report.dp_diff)},"
                f"{repr(report.eop_diff)},{repr(report.eod_diff)}")
            grouped.setdefault((variant, eps), []).append(report)
        cell_status.append({"variant": variant, "eps_fair": eps, "seed": seed,
                            "status": "ok" if error is None else "failed",
                            "error": error})
    _write_csv(out / "results.csv", RESULTS_HEADER, result_rows)

    pareto_rows = []
    for variant in config.variants:
        for metric_name, getter in (("dp", lambda r: r.dp_diff),
                                    ("eop", lambda r: r.eop_diff),
                                    ("eod", lambda r: r.eod_diff)):
            pts = []
            for eps in config.eps_grid:
                reports = grouped.get((variant, eps), [])
                if not reports:
                    continue
                accs = sorted(r.accuracy for r in reports)
                unfs = sorted(getter(r) for r in reports)
                pts.append(ParetoPoint(eps, float(np.median(accs)), float(np.median(unfs)),
                                       accs[0], accs[-1]))
            if not pts:
                continue
            front = set(pareto_front([(p.accuracy_median, p.unfairness_median) for p in pts]))
            for p in pts:
                if (p.accuracy_median, p.unfairness_median) in front:
                    pareto_rows.append(
                        f"{variant},{metric_name},{repr(p.eps_fair)},{repr(p.accuracy_median)},"
                        f"{repr(p.unfairness_median)},{repr(p.accuracy_min)},{repr(p.accuracy_max)}")
    _write_csv(out / "pareto.csv", PARETO_HEADER, pareto_rows)

    manifest = {
        "config": {
            "data": config.data, "schema": config.schema, "run_dir": config.run_dir,
            "out_dir": str(config.out_dir), "variants": list(config.variants),
            "constraint": config.constraint, "eps_grid": list(config.eps_grid),
            "seeds": config.seeds, "base_seed": config.base_seed,
            "H": threshold, "tuned": config.threshold is None,
            "uncertainty_source": config.source.describe(),
            "ratio": config.ratio, "test_fraction": config.test_fraction,
            "exp_grad_iters": config.exp_grad_iters,
            "oracle_max_iter": config.oracle_max_iter,
        },
        "cells": cell_status,
    }
    manifest_path = out / "manifest.json"
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    n_failed = sum(1 for c in cell_status if c["status"] == "failed")
    return SweepOutcome(out / "results.csv", out / "pareto.csv", manifest_path, n_failed)


# --- H study (unconstrained model on high-uncertainty rows) ---------------------

def fig2_study(artifacts: RunArtifacts, out_path,
               h_grid: Sequence[float] = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6),
               seeds: int = 7, base_seed: int = 0,
               oracle_max_iter: int = 5000) -> list[tuple[float, int, metrics.FairnessReport]]:
    """Unconstrained models trained on rows with uncertainty >= H, one row of
    metrics per (H, seed)."""
    rows_out = []
    results = []
    proxy_map = {r.sample_id: r for r in artifacts.proxies}
    for h_cut in h_grid:
        for j in range(seeds):
            seed = base_seed + j
            train_rows, eval_rows = _d1_train_eval(artifacts, seed)
            d1_train = artifacts.split.d1.take(train_rows)
            keep = [i for i in range(len(d1_train))
                    if proxy_map[int(d1_train.sample_ids[i])].u >= h_cut]
            if not keep:
                raise EmptySelection(f"H={h_cut} keeps no rows")
            samples = [reduction.WeightedSample(int(d1_train.sample_ids[i]),
                                                d1_train.features[i],
                                                int(d1_train.labels[i]), None, 1.0)
                       for i in keep]
            model = reduction.unconstrained_train(samples, seed=seed,
                                                  oracle_max_iter=oracle_max_iter)
            d1_eval = artifacts.split.d1.take(eval_rows)
            preds = model.expected_predictions(d1_eval.features)
            report = metrics.evaluate_report(preds, d1_eval.labels,
                                             tabular.oracle_sensitive(d1_eval))
            results.append((h_cut, seed, report))
            rows_out.append(f"{h_cut},{seed},{len(keep)},{repr(report.accuracy)},"
                            f"{repr(report.dp_diff)},{repr(report.eop_diff)},{repr(report.eod_diff)}")
    _write_csv(out_path, FIG2_HEADER, rows_out)
    return results


# --- table summaries -------------------------------------------------------------

def table_summary(results_csv) -> list[str]:
    """Mean and std per (variant, eps) group from a results.csv, one line per
    group in the file's first-seen order."""
    lines = Path(results_csv).read_text().splitlines()
    if not lines or lines[0] != RESULTS_HEADER:
        raise ConfigError(f"{results_csv} is not a results file")
    groups: dict[tuple[str, str], list[list[float]]] = {}
    order: list[tuple[str, str]] = []
    for line in lines[1:]:
        parts = line.split(",")
        key = (parts[0], parts[2])
        if key not in groups:
            groups[key] = []
            order.append(key)
        groups[key].append([float(parts[6]), float(parts[7]), float(parts[8]), float(parts[9])])
    out = ["variant,eps_fair,n_runs,accuracy_mean,accuracy_std,dp_mean,dp_std,"
           "eop_mean,eop_std,eod_mean,eod_std"]
    for key in order:
        arr = np.array(groups[key])
        cells = [key[0], key[1], str(len(arr))]
        for col in range(4):
            cells.append(repr(float(arr[:, col].mean())))
            cells.append(repr(float(arr[:, col].std())))
        out.append(",".join(cells))
    return out
