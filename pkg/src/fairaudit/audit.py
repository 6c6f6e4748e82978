"""Membership-inference auditing games and optimal-threshold adversaries.

A trace holds ``2R`` rows (one per trained model) and ``m`` columns (one per
audited record). ``O[t, i]`` is the loss of record ``i`` under model ``t`` and
``H[t, i]`` is 1 when the record was in that model's training set. Rows
``2r`` and ``2r + 1`` (0-based) are the two models of round ``r``.
"""

from __future__ import annotations

import csv
import enum
import hashlib
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataio import Dataset
from .errors import ConfigError, ContractError, FairAuditError, RoundFailure
from .model import ModelSpec, batch_losses
from .seeding import derive_seed, rng_for
from .train import TrainConfig, train

log = logging.getLogger(__name__)

WORKERS_ENV = "FAIRAUDIT_WORKERS"


class Method(str, enum.Enum):
    GA = "GA"
    GBA = "GBA"
    LOOA = "LOOA"
    ALOOA = "ALOOA"


class ThresholdRule(str, enum.Enum):
    LOWER_LOSS_MEMBER = "LOWER_LOSS_MEMBER"
    HIGHER_LOSS_MEMBER = "HIGHER_LOSS_MEMBER"
    BIDIRECTIONAL_BEST = "BIDIRECTIONAL_BEST"


# Comparator names: "lt" guesses member iff loss < beta, "ge" iff loss >= beta.
LT, GE = "lt", "ge"


@dataclass
class AuditPlan:
    method: Method
    rounds: int
    audit_indices: np.ndarray
    train_indices: np.ndarray
    train_config: TrainConfig
    model_spec: ModelSpec
    master_seed: int = 0
    target_index: int | None = None
    threshold_rule: ThresholdRule = ThresholdRule.LOWER_LOSS_MEMBER
    workers: int | None = None

    def __post_init__(self):
        self.method = Method(self.method)
        self.threshold_rule = ThresholdRule(self.threshold_rule)
        self.audit_indices = np.asarray(self.audit_indices, dtype=np.int64)
        self.train_indices = np.asarray(self.train_indices, dtype=np.int64)
        if self.rounds < 1:
            raise ConfigError("need at least one round")
        if self.method is Method.LOOA:
            if self.target_index is None:
                raise ConfigError("LOOA needs exactly one target_index")
            self.audit_indices = np.array([self.target_index], dtype=np.int64)
        if self.audit_indices.size < 1:
            raise ConfigError("audit set is empty")
        if not np.isin(self.audit_indices, self.train_indices).all():
            raise ConfigError("audit samples must belong to the training set")


@dataclass
class AuditTrace:
    O: np.ndarray
    H: np.ndarray
    method: Method
    sample_ids: np.ndarray
    round_seeds: list
    sample_groups: np.ndarray | None = None

    def __post_init__(self):
        self.O = np.asarray(self.O, dtype=np.float64)
        self.H = np.asarray(self.H, dtype=np.uint8)
        self.method = Method(self.method)
        self.sample_ids = np.asarray(self.sample_ids, dtype=np.int64)
        if self.O.shape != self.H.shape or self.O.shape[1] != self.sample_ids.size:
            raise ContractError("trace shapes disagree")

    @property
    def trials(self) -> int:
        return self.O.shape[0]

    def head(self, trials: int) -> "AuditTrace":
        """The first ``trials`` rows; a prefix of a longer run is a valid shorter run."""
        r = trials // 2
        if self.round_seeds and isinstance(self.round_seeds[0], (list, tuple)):
            seeds = [list(s[:r]) for s in self.round_seeds]
        else:
            seeds = self.round_seeds[:r]
        return AuditTrace(self.O[:trials], self.H[:trials], self.method, self.sample_ids, seeds, self.sample_groups)


@dataclass
class GuessMatrix:
    G: np.ndarray
    thresholds: np.ndarray
    directions: np.ndarray
    unit: str  # "sample", "trial" or "trial-group"
    fallbacks: list = field(default_factory=list)


# ---------------------------------------------------------------- thresholds


def optimal_threshold(scores, statuses, rule=ThresholdRule.LOWER_LOSS_MEMBER):
    """Best single threshold over ``scores`` for predicting ``statuses``.

    Candidates are -inf, the midpoints between adjacent distinct scores and
    +inf; together they realise every partition a real threshold can make.
    Ties go to the smaller threshold, then to the "lt" comparator. Returns
    ``(beta, direction, accuracy)``.
    """
    s = np.asarray(scores, dtype=np.float64)
    h = np.asarray(statuses).astype(bool)
    if s.size == 0 or s.shape != h.shape:
        raise ContractError("scores and statuses must be non-empty and equally long")
    rule = ThresholdRule(rule)
    betas, correct_lt = _sweep(s, h)
    n = s.size
    if rule is ThresholdRule.LOWER_LOSS_MEMBER:
        j = int(np.argmax(correct_lt))
        return float(betas[j]), LT, correct_lt[j] / n
    correct_ge = n - correct_lt
    if rule is ThresholdRule.HIGHER_LOSS_MEMBER:
        j = int(np.argmax(correct_ge))
        return float(betas[j]), GE, correct_ge[j] / n
    best_lt, best_ge = correct_lt.max(), correct_ge.max()
    if best_lt >= best_ge:
        j = int(np.argmax(correct_lt))
        if best_lt > best_ge or j <= int(np.argmax(correct_ge)):
            return float(betas[j]), LT, best_lt / n
    j = int(np.argmax(correct_ge))
    return float(betas[j]), GE, best_ge / n


def _sweep(s: np.ndarray, h: np.ndarray):
    """Candidate thresholds (ascending) and the "lt" correct count at each."""
    order = np.argsort(s, kind="stable")
    ss, hh = s[order], h[order]
    last = np.flatnonzero(np.r_[ss[1:] != ss[:-1], True])  # last index of each distinct value
    distinct = ss[last]
    lo, hi = distinct[:-1], distinct[1:]
    mid = lo + (hi - lo) / 2
    # A rounded midpoint equal to the lower value would put it on the wrong side.
    mid = np.where((mid > lo) & (mid <= hi), mid, hi)
    betas = np.concatenate([[-math.inf], mid, [math.inf]])
    members_below = np.concatenate([[0], np.cumsum(hh)[last]])
    below = np.concatenate([[0], last + 1])
    nonmembers_total = int((~hh).sum())
    nonmembers_above = nonmembers_total - (below - members_below)
    return betas, members_below + nonmembers_above


def apply_threshold(scores, beta: float, direction: str) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    return (scores < beta) if direction == LT else (scores >= beta)


def guesses_from_trace(trace: AuditTrace, rule=ThresholdRule.LOWER_LOSS_MEMBER) -> GuessMatrix:
    """Per-sample thresholds, each fitted on that sample's 2R trials."""
    trials, m = trace.O.shape
    G = np.zeros((trials, m), dtype=np.uint8)
    betas, dirs = np.empty(m), np.empty(m, dtype=object)
    for i in range(m):
        beta, d, _ = optimal_threshold(trace.O[:, i], trace.H[:, i], rule)
        betas[i], dirs[i] = beta, d
        G[:, i] = apply_threshold(trace.O[:, i], beta, d)
    return GuessMatrix(G, betas, dirs, "sample")


def guesses_global(trace: AuditTrace, rule=ThresholdRule.LOWER_LOSS_MEMBER) -> GuessMatrix:
    """One threshold per trained model, fitted over all audited samples of that model."""
    trials, m = trace.O.shape
    G = np.zeros((trials, m), dtype=np.uint8)
    betas, dirs = np.empty(trials), np.empty(trials, dtype=object)
    for t in range(trials):
        beta, d, _ = optimal_threshold(trace.O[t], trace.H[t], rule)
        betas[t], dirs[t] = beta, d
        G[t] = apply_threshold(trace.O[t], beta, d)
    return GuessMatrix(G, betas, dirs, "trial")


def guesses_by_group(trace: AuditTrace, groups, num_groups: int | None = None, rule=ThresholdRule.LOWER_LOSS_MEMBER) -> GuessMatrix:
    """One threshold per (trained model, group); empty groups inherit the model's global threshold."""
    groups = np.asarray(groups, dtype=np.int64)
    trials, m = trace.O.shape
    if groups.shape != (m,):
        raise ContractError("need one group label per audited sample")
    K = int(num_groups if num_groups is not None else groups.max() + 1)
    G = np.zeros((trials, m), dtype=np.uint8)
    betas = np.empty((trials, K))
    dirs = np.empty((trials, K), dtype=object)
    fallbacks = []
    for t in range(trials):
        global_beta = global_dir = None
        for k in range(K):
            cols = np.flatnonzero(groups == k)
            if cols.size == 0:
                if global_beta is None:
                    global_beta, global_dir, _ = optimal_threshold(trace.O[t], trace.H[t], rule)
                betas[t, k], dirs[t, k] = global_beta, global_dir
                fallbacks.append((t, k))
                continue
            beta, d, _ = optimal_threshold(trace.O[t, cols], trace.H[t, cols], rule)
            betas[t, k], dirs[t, k] = beta, d
            G[t, cols] = apply_threshold(trace.O[t, cols], beta, d)
    if fallbacks:
        log.info("GBA: %d (trial, group) cells had no audited samples and used the global threshold", len(fallbacks))
    return GuessMatrix(G, betas, dirs, "trial-group", fallbacks)


def guesses_for(trace: AuditTrace, rule=ThresholdRule.LOWER_LOSS_MEMBER, groups=None, num_groups=None) -> GuessMatrix:
    if trace.method is Method.GA:
        return guesses_global(trace, rule)
    if trace.method is Method.GBA:
        return guesses_by_group(trace, trace.sample_groups if groups is None else groups, num_groups, rule)
    return guesses_from_trace(trace, rule)


# ---------------------------------------------------------------- games


_WORKER_STATE = {}


def _init_worker(ds, plan):
    _WORKER_STATE["ds"] = ds
    _WORKER_STATE["plan"] = plan


def _fit_and_score(ds: Dataset, plan: AuditPlan, keep_mask: np.ndarray, seed: int) -> np.ndarray:
    cfg = TrainConfig(**{**plan.train_config.__dict__, "seed": seed})
    art = train(ds, plan.train_indices[keep_mask], plan.model_spec, cfg, track_grc=False, keep_log=False)
    ids = plan.audit_indices
    losses = batch_losses(art.final_params, ds.features[ids], ds.labels[ids])
    if not np.all(np.isfinite(losses)):
        raise FairAuditError("non-finite audit losses")
    return losses


def _round(ds: Dataset, plan: AuditPlan, r: int):
    """Both models of round ``r``; returns (losses (2, m), membership (2, m), seed used)."""
    m = plan.audit_indices.size
    pos = np.searchsorted(plan.train_indices, plan.audit_indices)
    if plan.method is Method.LOOA:
        h = np.zeros(1, dtype=np.uint8)
    else:
        h = rng_for(plan.master_seed, r, 0).integers(0, 2, size=m).astype(np.uint8)
    last_exc = None
    for attempt in range(2):
        seed = derive_seed(plan.master_seed, r, 1, attempt)
        try:
            rows = []
            for half, status in enumerate((h, 1 - h)):
                keep = np.ones(plan.train_indices.size, dtype=bool)
                # Model `half` drops the audited records whose membership bit is 0 in its row.
                keep[pos[status == 0]] = False
                rows.append(_fit_and_score(ds, plan, keep, derive_seed(seed, half)))
            return np.stack(rows), np.stack([h, 1 - h]), seed
        except FairAuditError as exc:
            last_exc = exc
            log.warning("round %d attempt %d failed: %s", r, attempt, exc)
    raise RoundFailure(f"round {r} failed twice: {last_exc}", r, seed)


def _round_task(r: int):
    return _round(_WORKER_STATE["ds"], _WORKER_STATE["plan"], r)


def default_workers() -> int:
    env = os.environ.get(WORKERS_ENV)
    if env:
        try:
            value = int(env)
        except ValueError:
            raise ConfigError(f"{WORKERS_ENV} must be an integer, got {env!r}") from None
        if value < 1:
            raise ConfigError(f"{WORKERS_ENV} must be >= 1")
        return value
    return os.cpu_count() or 1


def _generate(ds: Dataset, plan: AuditPlan) -> AuditTrace:
    workers = plan.workers or default_workers()
    R = plan.rounds
    if workers <= 1 or R == 1:
        results = [_round(ds, plan, r) for r in range(R)]
    else:
        with ProcessPoolExecutor(max_workers=min(workers, R), initializer=_init_worker, initargs=(ds, plan)) as pool:
            results = list(pool.map(_round_task, range(R)))
    O = np.concatenate([res[0] for res in results])
    H = np.concatenate([res[1] for res in results])
    # LOOA rows are (without z, with z), i.e. H columns read 0, 1, 0, 1, ...
    return AuditTrace(O, H, plan.method, plan.audit_indices, [res[2] for res in results], ds.groups[plan.audit_indices])


def run_alooa(ds: Dataset, plan: AuditPlan) -> AuditTrace:
    """Approximate leave-one-out game: fair coins per audited record, two complementary models per round."""
    if plan.method is not Method.ALOOA:
        raise ConfigError("run_alooa needs method ALOOA")
    return _generate(ds, plan)


def run_looa(ds: Dataset, plan: AuditPlan) -> AuditTrace:
    """Leave-one-out game on a single target: per round one model without it, one with it."""
    if plan.method is not Method.LOOA:
        raise ConfigError("run_looa needs method LOOA")
    return _generate(ds, plan)


def run_looa_targets(ds: Dataset, plan: AuditPlan, targets) -> AuditTrace:
    """LOOA run separately for every target, assembled into one trace with a column per target.

    Each target gets its own seed stream, keyed by its dataset index, and
    ``round_seeds`` holds one list per target.
    """
    targets = [int(t) for t in targets]
    if not targets:
        raise ConfigError("no LOOA targets given")
    cols, seeds = [], []
    for t in targets:
        sub = AuditPlan(
            Method.LOOA, plan.rounds, [t], plan.train_indices, plan.train_config, plan.model_spec,
            derive_seed(plan.master_seed, t), t, plan.threshold_rule, plan.workers,
        )
        tr = _generate(ds, sub)
        cols.append(tr)
        seeds.append(tr.round_seeds)
    O = np.concatenate([c.O for c in cols], axis=1)
    H = np.concatenate([c.H for c in cols], axis=1)
    ids = np.array(targets, dtype=np.int64)
    return AuditTrace(O, H, Method.LOOA, ids, seeds, ds.groups[ids])


def run_ga(ds: Dataset, plan: AuditPlan) -> tuple[AuditTrace, GuessMatrix]:
    if plan.method is not Method.GA:
        raise ConfigError("run_ga needs method GA")
    trace = _generate(ds, plan)
    return trace, guesses_global(trace, plan.threshold_rule)


def run_gba(ds: Dataset, plan: AuditPlan) -> tuple[AuditTrace, GuessMatrix]:
    if plan.method is not Method.GBA:
        raise ConfigError("run_gba needs method GBA")
    trace = _generate(ds, plan)
    return trace, guesses_by_group(trace, trace.sample_groups, ds.num_groups, plan.threshold_rule)


def run_game(ds: Dataset, plan: AuditPlan) -> tuple[AuditTrace, GuessMatrix]:
    if plan.method is Method.ALOOA:
        trace = run_alooa(ds, plan)
    elif plan.method is Method.LOOA:
        trace = run_looa(ds, plan)
    elif plan.method is Method.GA:
        return run_ga(ds, plan)
    else:
        return run_gba(ds, plan)
    return trace, guesses_from_trace(trace, plan.threshold_rule)


# ---------------------------------------------------------------- files


def write_trace(trace: AuditTrace, path, sidecar: dict | None = None, header_lines=()) -> Path:
    """CSV rows (round, model_half, sample_id, loss, is_member) plus a JSON sidecar."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        w = csv.writer(fh)
        w.writerow(["round", "model_half", "sample_id", "loss", "is_member"])
        for t in range(trace.trials):
            for i, sid in enumerate(trace.sample_ids):
                w.writerow([t // 2, t % 2, int(sid), repr(float(trace.O[t, i])), int(trace.H[t, i])])
    meta = {
        "method": trace.method.value,
        "trials": trace.trials,
        "sample_ids": trace.sample_ids.tolist(),
        "sample_groups": None if trace.sample_groups is None else np.asarray(trace.sample_groups).tolist(),
        "round_seeds": _plain(trace.round_seeds),
    }
    if sidecar:
        meta.update(sidecar)
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path


def read_trace(path) -> tuple[AuditTrace, dict]:
    path = Path(path)
    meta_path = path.with_suffix(".json")
    if not path.exists() or not meta_path.exists():
        raise FileNotFoundError(f"trace {path} or its sidecar is missing")
    meta = json.loads(meta_path.read_text())
    ids = meta["sample_ids"]
    col = {sid: i for i, sid in enumerate(ids)}
    O = np.zeros((meta["trials"], len(ids)))
    H = np.zeros((meta["trials"], len(ids)), dtype=np.uint8)
    with open(path, newline="") as fh:
        rows = csv.reader(line for line in fh if not line.startswith("#"))
        next(rows)
        for rnd, half, sid, loss, member in rows:
            t = 2 * int(rnd) + int(half)
            O[t, col[int(sid)]] = float(loss)
            H[t, col[int(sid)]] = int(member)
    groups = meta.get("sample_groups")
    trace = AuditTrace(O, H, meta["method"], np.array(ids), meta["round_seeds"], None if groups is None else np.array(groups))
    return trace, meta


def write_guesses(trace: AuditTrace, guesses: GuessMatrix, path, header_lines=()) -> Path:
    """Mirror of the trace with each cell's guess and the (beta, direction) that produced it."""
    path = Path(path)
    groups = trace.sample_groups
    with open(path, "w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        w = csv.writer(fh)
        w.writerow(["round", "model_half", "sample_id", "guess", "beta", "direction"])
        for t in range(trace.trials):
            for i, sid in enumerate(trace.sample_ids):
                if guesses.unit == "sample":
                    beta, d = guesses.thresholds[i], guesses.directions[i]
                elif guesses.unit == "trial":
                    beta, d = guesses.thresholds[t], guesses.directions[t]
                else:
                    beta, d = guesses.thresholds[t, groups[i]], guesses.directions[t, groups[i]]
                w.writerow([t // 2, t % 2, int(sid), int(guesses.G[t, i]), repr(float(beta)), d])
    return path


def _plain(seeds):
    return [_plain(s) if isinstance(s, (list, tuple)) else int(s) for s in seeds]


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
