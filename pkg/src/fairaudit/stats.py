"""Privacy-risk metrics, method comparisons and outcome-fairness metrics."""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError

log = logging.getLogger(__name__)


@dataclass
class RiskReport:
    sample_ids: np.ndarray
    groups: np.ndarray
    acc_i: np.ndarray
    adv_i: np.ndarray
    adv_k: np.ndarray  # NaN for groups without audited samples
    delta: float
    counts: np.ndarray
    excluded_groups: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "delta": self.delta,
            "adv_k": [None if math.isnan(v) else float(v) for v in self.adv_k],
            "counts": self.counts.tolist(),
            "excluded_groups": self.excluded_groups,
            "mean_acc": float(self.acc_i.mean()),
            "mean_adv": float(self.adv_i.mean()),
        }


def risk_report(G, H, groups, num_groups: int | None = None, sample_ids=None) -> RiskReport:
    """Per-sample accuracy and advantage, per-group advantage and their max-min spread."""
    G, H = np.asarray(G), np.asarray(H)
    if G.shape != H.shape or G.ndim != 2:
        raise ContractError("G and H must be matrices of one shape")
    groups = np.asarray(groups, dtype=np.int64)
    m = G.shape[1]
    if groups.shape != (m,):
        raise ContractError("need one group label per column")
    K = int(num_groups if num_groups is not None else groups.max() + 1)
    acc = (G == H).mean(axis=0)
    adv = 2.0 * acc - 1.0
    counts = np.bincount(groups, minlength=K)
    adv_k = np.full(K, np.nan)
    for k in np.flatnonzero(counts):
        adv_k[k] = adv[groups == k].mean()
    excluded = [int(k) for k in np.flatnonzero(counts == 0)]
    if excluded:
        log.info("groups without audited samples excluded from delta: %s", excluded)
    present = adv_k[~np.isnan(adv_k)]
    delta = float(present.max() - present.min()) if present.size else math.nan
    ids = np.arange(m) if sample_ids is None else np.asarray(sample_ids, dtype=np.int64)
    return RiskReport(ids, groups, acc, adv, adv_k, delta, counts, excluded)


@dataclass
class Comparison:
    mean_abs_diff: float
    mean_signed_diff: float
    diffs: np.ndarray
    sample_ids: np.ndarray
    groups: np.ndarray


def compare_traces(a: RiskReport, b: RiskReport) -> Comparison:
    """Acc_i(a) - Acc_i(b), aligned on sample id."""
    if set(a.sample_ids.tolist()) != set(b.sample_ids.tolist()) or a.sample_ids.size != b.sample_ids.size:
        raise ContractError("reports cover different sample ids")
    pos = {sid: j for j, sid in enumerate(b.sample_ids.tolist())}
    order = np.array([pos[s] for s in a.sample_ids.tolist()], dtype=np.int64)
    diffs = a.acc_i - b.acc_i[order]
    return Comparison(float(np.abs(diffs).mean()), float(diffs.mean()), diffs, a.sample_ids.copy(), a.groups.copy())


# ---------------------------------------------------------------- ranks and tests


def midranks(values) -> np.ndarray:
    """1-based ranks with ties sharing the average rank."""
    v = np.asarray(values, dtype=np.float64)
    order = np.argsort(v, kind="mergesort")
    ranks = np.empty(v.size)
    sv = v[order]
    start = 0
    for end in range(1, v.size + 1):
        if end == v.size or sv[end] != sv[start]:
            ranks[order[start:end]] = 0.5 * (start + end - 1) + 1.0
            start = end
    return ranks


_GAMMA_EPS = 1e-15
_GAMMA_ITMAX = 10_000


def _gamma_series(a: float, x: float) -> float:
    # Lower regularized P(a, x) by its power series; converges fast for x < a + 1.
    term = total = 1.0 / a
    ap = a
    for _ in range(_GAMMA_ITMAX):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * _GAMMA_EPS:
            break
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))


def _gamma_cfrac(a: float, x: float) -> float:
    # Upper regularized Q(a, x) by the modified Lentz continued fraction; for x >= a + 1.
    tiny = 1e-300
    b = x + 1.0 - a
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, _GAMMA_ITMAX):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < tiny:
            d = tiny
        c = b + an / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        step = d * c
        h *= step
        if abs(step - 1.0) < _GAMMA_EPS:
            break
    return h * math.exp(-x + a * math.log(x) - math.lgamma(a))


def gammaincc(a: float, x: float) -> float:
    """Upper regularized incomplete gamma Q(a, x)."""
    if a <= 0:
        raise ContractError("shape must be positive")
    if x <= 0:
        return 1.0
    if x < a + 1.0:
        return 1.0 - _gamma_series(a, x)
    return _gamma_cfrac(a, x)


def chi2_sf(x: float, dof: int) -> float:
    return gammaincc(dof / 2.0, x / 2.0)


def kruskal_wallis(values, groups) -> tuple[float, float]:
    """H statistic (tie-corrected) and chi-square p value with K - 1 degrees of freedom."""
    v = np.asarray(values, dtype=np.float64)
    g = np.asarray(groups)
    labels = [lab for lab in np.unique(g) if np.any(g == lab)]
    if len(labels) < 2:
        raise ContractError("Kruskal-Wallis needs at least two non-empty groups")
    N = v.size
    if np.all(v == v[0]):
        return 0.0, 1.0
    r = midranks(v)
    rbar = (N + 1) / 2.0
    ss = sum(np.sum(g == lab) * (r[g == lab].mean() - rbar) ** 2 for lab in labels)
    H = 12.0 / (N * (N + 1)) * ss
    _, tie_counts = np.unique(v, return_counts=True)
    correction = 1.0 - float(np.sum(tie_counts**3 - tie_counts)) / (N**3 - N)
    H /= correction
    return float(H), float(chi2_sf(H, len(labels) - 1))


# ---------------------------------------------------------------- outcome fairness


@dataclass
class FairnessReport:
    ap: float
    dmp: float | None
    eop: float | None
    eod: float | None
    per_group: dict
    excluded: dict

    def to_dict(self) -> dict:
        return {"ap": self.ap, "dmp": self.dmp, "eop": self.eop, "eod": self.eod, "per_group": self.per_group, "excluded": self.excluded}


def _spread(values: dict):
    vals = [v for v in values.values() if v is not None]
    return float(max(vals) - min(vals)) if vals else None


def fairness_from_predictions(y_true, y_pred, groups, num_groups: int | None = None, binary: bool | None = None) -> FairnessReport:
    """Max-minus-min over groups of accuracy, positive rate, TPR and TPR + FPR (positive class 1)."""
    y, p, g = (np.asarray(a, dtype=np.int64) for a in (y_true, y_pred, groups))
    K = int(num_groups if num_groups is not None else g.max() + 1)
    if binary is None:
        binary = max(y.max(initial=0), p.max(initial=0)) <= 1
    acc, pos, tpr, odds = {}, {}, {}, {}
    excluded = {"ap": [], "dmp": [], "eop": [], "eod": []}
    for k in range(K):
        sel = g == k
        if not sel.any():
            for key in excluded:
                excluded[key].append(k)
            continue
        acc[k] = float((y[sel] == p[sel]).mean())
        if not binary:
            continue
        pos[k] = float((p[sel] == 1).mean())
        positives, negatives = sel & (y == 1), sel & (y == 0)
        if positives.any():
            tpr[k] = float((p[positives] == 1).mean())
        else:
            excluded["eop"].append(k)
        if positives.any() and negatives.any():
            odds[k] = tpr[k] + float((p[negatives] == 1).mean())
        else:
            excluded["eod"].append(k)
    for key, groups_out in excluded.items():
        if groups_out:
            log.info("fairness metric %s excludes groups %s", key, groups_out)
    per_group = {
        str(k): {"accuracy": acc.get(k), "positive_rate": pos.get(k), "tpr": tpr.get(k), "tpr_plus_fpr": odds.get(k)}
        for k in range(K)
    }
    return FairnessReport(
        _spread(acc),
        _spread(pos) if binary else None,
        _spread(tpr) if binary else None,
        _spread(odds) if binary else None,
        per_group,
        excluded,
    )


def outcome_fairness(params, ds, test_indices) -> FairnessReport:
    from .model import batch_predict

    idx = np.asarray(test_indices, dtype=np.int64)
    pred = batch_predict(params, ds.features[idx])
    return fairness_from_predictions(ds.labels[idx], pred, ds.groups[idx], ds.num_groups, binary=ds.num_classes == 2)


# ---------------------------------------------------------------- GRC vs GPR


@dataclass
class Correlation:
    spearman: float | None
    pearson: float | None
    permutation_p: float | None
    note: str = ""


def _pearson(a: np.ndarray, b: np.ndarray) -> float | None:
    a, b = a - a.mean(), b - b.mean()
    denom = math.sqrt(float(a @ a) * float(b @ b))
    return None if denom == 0 else float(a @ b) / denom


def grc_correlation(grc, adv_k, permutations: int = 10_000, seed: int = 0) -> Correlation:
    """Spearman rho of per-group GRC against per-group advantage, with a one-sided permutation p."""
    x, y = np.asarray(grc, dtype=np.float64), np.asarray(adv_k, dtype=np.float64)
    keep = ~(np.isnan(x) | np.isnan(y))
    x, y = x[keep], y[keep]
    if x.size < 3:
        log.info("GRC correlation over fewer than 3 groups is not meaningful")
    if x.size < 2 or np.all(x == x[0]) or np.all(y == y[0]):
        return Correlation(None, None, None, "undefined: constant or too-short vector")
    rx, ry = midranks(x), midranks(y)
    rho = _pearson(rx, ry)
    if x.size <= 8:
        perms = (np.array(p) for p in itertools.permutations(range(x.size)))
        null = [_pearson(rx, ry[p]) for p in perms]
    else:
        rng = np.random.default_rng(seed)
        null = [_pearson(rx, ry[rng.permutation(x.size)]) for _ in range(permutations)]
    p = float(np.mean([v >= rho - 1e-12 for v in null]))
    return Correlation(rho, _pearson(x, y), p)
