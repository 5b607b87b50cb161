"""
Anomaly scores, percentile thresholds, point adjustment and P/R/F1, plus the
alpha/tau grid search and ablation harnesses built on top of them.
"""

from __future__ import annotations

import csv
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .data import NormStats, TimeSeries, inference_windows, zscore
from .errors import ContractError, ShapeError
from .losses import cad
from .model import AmadParams, ModelConfig, model_forward

log = logging.getLogger(__name__)

DEFAULT_ALPHAS = (0.3, 0.6, 0.9)
DEFAULT_TAUS = (0.07, 0.21, 0.35)

# (min, max, contrastive, automask) in the row order of the published ablation table
ABLATION_ROWS = (
    (False, False, False, False),
    (False, False, True, True),
    (True, True, False, True),
    (False, True, False, True),
    (False, False, False, True),
    (True, True, True, True),
)


@dataclass
class ScoreReport:
    scores: np.ndarray
    threshold: float
    flags_raw: np.ndarray
    flags_adjusted: np.ndarray
    ar: float
    labels: np.ndarray | None = None


@dataclass
class EvalReport:
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int


def _softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def anomaly_score(x_window, recon_window, cad_window=None) -> np.ndarray:
    """softmax(-CAD) over positions times per-position squared L2 error.

    Works on a single N x d window or a batch B x N x d. ``cad_window=None``
    gives uniform weights (used when the AutoMask branch is off).
    """
    x = np.asarray(x_window, dtype=np.float64)
    r = np.asarray(recon_window, dtype=np.float64)
    if x.shape != r.shape:
        raise ShapeError(f"anomaly_score: input {x.shape} vs reconstruction {r.shape}")
    err = ((x - r) ** 2).sum(axis=-1)
    if cad_window is None:
        weights = np.full_like(err, 1.0 / err.shape[-1])
    else:
        c = np.asarray(cad_window, dtype=np.float64)
        if c.shape != err.shape:
            raise ShapeError(f"anomaly_score: CAD {c.shape} vs positions {err.shape}")
        if not np.isfinite(c).all():
            raise ContractError("anomaly_score: CAD contains non-finite values")
        weights = _softmax(-c)
    return weights * err


def score_windows(params: AmadParams, windows: np.ndarray, automask: bool = True, batch: int = 256) -> np.ndarray:
    out = []
    with T.no_grad():
        for i in range(0, len(windows), batch):
            xb = windows[i:i + batch]
            fo = model_forward(xb, params, automask=automask)
            c = cad(fo.attn).data if automask else None
            out.append(anomaly_score(xb, fo.recon.data, c))
    return np.concatenate(out)


def score_series(params: AmadParams, values: np.ndarray, automask: bool = True) -> np.ndarray:
    """Per-timestamp scores of an already-normalised N x d array."""
    wins, mask = inference_windows(values, params.cfg.window_len)
    s = score_windows(params, wins, automask)
    return s[mask]


def threshold_from_percentile(scores, ar: float) -> float:
    """(100 - ar)-th percentile with linear interpolation between order statistics."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    if s.size == 0:
        raise ContractError("cannot threshold an empty score population")
    if not 0.0 < ar < 100.0:
        raise ContractError(f"anomaly ratio must be in (0, 100), got {ar}")
    return float(np.percentile(s, 100.0 - ar, method="linear"))


def _segments(gt: np.ndarray):
    """(start, stop) of maximal runs of ones."""
    d = np.diff(np.r_[0, gt.astype(np.int8), 0])
    return zip(np.flatnonzero(d == 1), np.flatnonzero(d == -1))


def point_adjust(flags, ground_truth) -> np.ndarray:
    f = np.asarray(flags).astype(np.int64).copy()
    gt = np.asarray(ground_truth).astype(np.int64)
    if f.shape != gt.shape:
        raise ShapeError(f"point_adjust: {f.shape} flags vs {gt.shape} labels")
    for a, b in _segments(gt):
        if f[a:b].any():
            f[a:b] = 1
    return f


def precision_recall_f1(flags, ground_truth) -> EvalReport:
    f = np.asarray(flags).astype(bool)
    gt = np.asarray(ground_truth).astype(bool)
    if f.shape != gt.shape:
        raise ShapeError(f"precision_recall_f1: {f.shape} flags vs {gt.shape} labels")
    tp = int((f & gt).sum())
    fp = int((f & ~gt).sum())
    fn = int((~f & gt).sum())
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    return EvalReport(p, r, f1, tp, fp, fn)


def build_report(test_scores, ar: float, labels=None, train_scores=None) -> ScoreReport:
    """Threshold over train+test scores when ``train_scores`` is given, test-only otherwise."""
    test_scores = np.asarray(test_scores, dtype=np.float64)
    pop = test_scores if train_scores is None else np.concatenate([np.asarray(train_scores), test_scores])
    thr = threshold_from_percentile(pop, ar)
    raw = (test_scores > thr).astype(np.int64)
    adj = point_adjust(raw, labels) if labels is not None else raw.copy()
    return ScoreReport(test_scores, thr, raw, adj, ar, None if labels is None else np.asarray(labels))


def detect(params: AmadParams, stats: NormStats, train: TimeSeries, test: TimeSeries, ar: float,
           population: str = "train+test", automask: bool = True) -> ScoreReport:
    test_s = score_series(params, zscore(test.values, stats), automask)
    train_s = score_series(params, zscore(train.values, stats), automask) if population == "train+test" else None
    return build_report(test_s, ar, test.labels, train_s)


# -- CSV outputs -------------------------------------------------------------
SCORE_COLUMNS = ("timestamp", "score", "flag_raw", "flag_adjusted", "gt")
EVAL_COLUMNS = ("mode", "P", "R", "F1", "TP", "FP", "FN")


def write_score_csv(path, rep: ScoreReport) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SCORE_COLUMNS)
        for t, s in enumerate(rep.scores):
            gt = "" if rep.labels is None else int(rep.labels[t])
            w.writerow([t, repr(float(s)), int(rep.flags_raw[t]), int(rep.flags_adjusted[t]), gt])


def read_score_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    scores = np.array([float(r["score"]) for r in rows])
    raw = np.array([int(r["flag_raw"]) for r in rows])
    gt = None if not rows or rows[0]["gt"] == "" else np.array([int(r["gt"]) for r in rows])
    return scores, raw, gt


def evaluate_flags(flags_raw, labels) -> dict[str, EvalReport]:
    return {
        "raw": precision_recall_f1(flags_raw, labels),
        "adjusted": precision_recall_f1(point_adjust(flags_raw, labels), labels),
    }


def write_eval_csv(path, reports: dict[str, EvalReport]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EVAL_COLUMNS)
        for mode, r in reports.items():
            w.writerow([mode, f"{r.precision:.4f}", f"{r.recall:.4f}", f"{r.f1:.4f}", r.tp, r.fp, r.fn])


# -- harnesses ---------------------------------------------------------------
@dataclass
class Experiment:
    """Everything one train/score/evaluate cell needs."""

    train: TimeSeries
    test: TimeSeries
    cfg: ModelConfig
    tcfg: object  # TrainConfig; kept loose to avoid an import cycle in pickling
    ar: float = 1.0
    population: str = "train+test"
    seed: int = 7


def run_experiment(exp: Experiment) -> EvalReport:
    from .train import fit

    res = fit(exp.train, exp.cfg, exp.tcfg, exp.seed)
    rep = detect(res.params, res.stats, exp.train, exp.test, exp.ar, exp.population,
                 automask=exp.tcfg.enable_automask)
    return precision_recall_f1(rep.flags_adjusted, exp.test.labels)


def _safe_run(exp: Experiment):
    try:
        return run_experiment(exp), None
    except Exception as e:  # recorded per cell, never fatal
        log.warning("cell failed: %s", e)
        return None, f"{type(e).__name__}: {e}"


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("AMAD_THREADS", "1")))
    except ValueError:
        return 1


def _run_cells(exps: list[Experiment]):
    n = min(_workers(), len(exps))
    if n <= 1:
        return [_safe_run(e) for e in exps]
    with ProcessPoolExecutor(max_workers=n) as pool:
        # map preserves submission order, so merging is by cell index
        return list(pool.map(_safe_run, exps))


@dataclass
class GridRow:
    kind: str  # cell | alpha_marginal | tau_marginal
    alpha: float | None
    tau: float | None
    report: EvalReport | None
    error: str | None = None


def _mean_report(reps: list[EvalReport]) -> EvalReport | None:
    reps = [r for r in reps if r is not None]
    if not reps:
        return None
    m = lambda a: float(np.mean([getattr(r, a) for r in reps]))  # noqa: E731
    return EvalReport(m("precision"), m("recall"), m("f1"), int(sum(r.tp for r in reps)),
                      int(sum(r.fp for r in reps)), int(sum(r.fn for r in reps)))


def grid_search(base: Experiment, alphas=DEFAULT_ALPHAS, taus=DEFAULT_TAUS) -> list[GridRow]:
    if not alphas or not taus:
        raise ContractError("grid search needs non-empty alpha and tau grids")
    cells = [(a, t) for a in alphas for t in taus]
    exps = [replace(base, cfg=replace(base.cfg, mixup_alpha=a), tcfg=replace(base.tcfg, tau=t)) for a, t in cells]
    results = _run_cells(exps)
    rows = [GridRow("cell", a, t, rep, err) for (a, t), (rep, err) in zip(cells, results)]
    by_cell = {(r.alpha, r.tau): r.report for r in rows}
    for a in alphas:
        rows.append(GridRow("alpha_marginal", a, None, _mean_report([by_cell[(a, t)] for t in taus])))
    for t in taus:
        rows.append(GridRow("tau_marginal", None, t, _mean_report([by_cell[(a, t)] for a in alphas])))
    return rows


GRID_COLUMNS = ("kind", "alpha", "tau", "P", "R", "F1", "error")


def write_grid_csv(path, rows: list[GridRow]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(GRID_COLUMNS)
        for r in rows:
            metrics = ["", "", ""] if r.report is None else [
                f"{r.report.precision:.4f}", f"{r.report.recall:.4f}", f"{r.report.f1:.4f}"]
            w.writerow([r.kind, "" if r.alpha is None else r.alpha, "" if r.tau is None else r.tau,
                        *metrics, r.error or ""])


@dataclass
class AblationRow:
    flags: tuple[bool, bool, bool, bool]
    reports: dict[str, EvalReport | None]
    errors: dict[str, str | None]

    @property
    def avg_f1(self) -> float | None:
        f1s = [r.f1 for r in self.reports.values() if r is not None]
        return float(np.mean(f1s)) if f1s else None


def ablation_run(datasets: dict[str, Experiment], rows=ABLATION_ROWS) -> list[AblationRow]:
    """Train each flag row on each dataset from the same seed."""
    for flags in rows:
        if len(flags) != 4:
            raise ContractError(f"ablation rows need 4 flags, got {flags}")
    keys = []
    exps = []
    for flags in rows:
        mn, mx, con, am = flags
        for name, base in datasets.items():
            tcfg = replace(base.tcfg, enable_min=mn, enable_max=mx, enable_contrastive=con, enable_automask=am)
            keys.append((tuple(flags), name))
            exps.append(replace(base, tcfg=tcfg))
    results = dict(zip(keys, _run_cells(exps)))
    out = []
    for flags in rows:
        f = tuple(flags)
        out.append(AblationRow(f, {n: results[(f, n)][0] for n in datasets},
                               {n: results[(f, n)][1] for n in datasets}))
    return out


def write_ablation_csv(path, rows: list[AblationRow]) -> None:
    names = list(rows[0].reports) if rows else []
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        header = ["Min Strategy", "Max Strategy", "Contrastive Strategy", "AutoMask Module"]
        for n in names:
            header += [f"{n} P", f"{n} R", f"{n} F1"]
        w.writerow(header + ["Avg F1"])
        for r in rows:
            cells = ["yes" if b else "w/o" for b in r.flags]
            for n in names:
                rep = r.reports[n]
                cells += ["", "", ""] if rep is None else [f"{rep.precision:.4f}", f"{rep.recall:.4f}", f"{rep.f1:.4f}"]
            cells.append("" if r.avg_f1 is None else f"{r.avg_f1:.4f}")
            w.writerow(cells)
