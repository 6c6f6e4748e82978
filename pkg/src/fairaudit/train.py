"""SGD, DP-SGD and DP-SGD-S training loops with GRC instrumentation.

All three share one Poisson sampler and one parameter-update path so that a
DP run whose clipping and noise are inactive follows the SGD trajectory bit
for bit. Updates always divide by the nominal batch size ``b``.
"""

from __future__ import annotations

import csv
import enum
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import accountant
from .dataio import Dataset, SplitPlan
from .errors import ConfigError, TrainingDiverged
from .model import ModelParams, ModelSpec, batch_per_sample_grads, init_params
from .seeding import derive_seed, rng_for

log = logging.getLogger(__name__)

STAT_NOISE_RATIO = 10.0
_NORM_FLOOR = 1e-12


class Algorithm(str, enum.Enum):
    SGD = "SGD"
    DPSGD = "DPSGD"
    DPSGDS = "DPSGDS"


class GroupDenominator(str, enum.Enum):
    POPULATION = "population"  # |D^k| over the whole training set, as in the pseudocode
    BATCH = "batch"  # |B ∩ D^k| of the current batch
    EXPECTED = "expected"  # q * |D^k|, the expected batch share


@dataclass
class TrainConfig:
    algorithm: Algorithm = Algorithm.SGD
    epochs: int = 20
    batch_size: int = 256
    learning_rate: float = 0.1
    clip_bound: float = 10.0
    noise_multiplier: float | None = None
    stat_noise_multiplier: float | None = None
    scale_bound: float = 2.0
    target_epsilon: float | None = None
    target_delta: float = 1e-5
    seed: int = 0
    persist_clip_across_iterations: bool = True
    group_denominator: GroupDenominator = GroupDenominator.POPULATION
    shared_numerator_noise: bool = True

    def __post_init__(self):
        self.algorithm = Algorithm(self.algorithm)
        self.group_denominator = GroupDenominator(self.group_denominator)
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if not self.clip_bound > 0:
            raise ConfigError("clip_bound must be positive")
        if self.scale_bound < 1:
            raise ConfigError("scale_bound must be >= 1")
        if self.target_epsilon is not None and (
            self.noise_multiplier is not None or self.stat_noise_multiplier is not None
        ):
            raise ConfigError("give either a target (epsilon, delta) or noise multipliers, not both")
        if self.algorithm is not Algorithm.SGD:
            if self.target_epsilon is None and self.noise_multiplier is None:
                raise ConfigError(f"{self.algorithm.value} needs a noise multiplier or a target epsilon")
            if self.noise_multiplier is not None and self.noise_multiplier < 0:
                raise ConfigError("noise multiplier must be nonnegative")

    def to_dict(self) -> dict:
        out = dict(self.__dict__)
        out["algorithm"] = self.algorithm.value
        out["group_denominator"] = self.group_denominator.value
        return out


@dataclass
class IterationRecord:
    iteration: int
    realized_batch: int
    clip_bounds: tuple = ()
    clip_used: float = math.nan
    norm_min: float = math.nan
    norm_mean: float = math.nan
    norm_max: float = math.nan
    note: str = ""


@dataclass
class GrcAccumulator:
    """Running mean of each group's relative gradient contribution."""

    num_groups: int
    sums: np.ndarray = None
    iterations: int = 0
    excluded: int = 0

    def __post_init__(self):
        if self.sums is None:
            self.sums = np.zeros(self.num_groups)

    @property
    def grc(self) -> np.ndarray:
        if self.iterations == 0:
            return np.zeros(self.num_groups)
        return self.sums / self.iterations


def record_grc(batch_grads: np.ndarray, batch_groups, group_sizes, acc: GrcAccumulator) -> GrcAccumulator:
    """Fold one iteration into ``acc``.

    The ratio for group k is ||sum_{B∩D^k} g_i / |D^k| || / ||sum_B g_i / |B| ||
    on raw gradients; groups absent from the batch contribute 0.
    """
    batch_grads = np.asarray(batch_grads, dtype=np.float64)
    batch_groups = np.asarray(batch_groups, dtype=np.int64)
    group_sizes = np.asarray(group_sizes, dtype=np.float64)
    B = batch_grads.shape[0]
    whole = np.linalg.norm(batch_grads.sum(axis=0) / B) if B else 0.0
    if B == 0 or whole == 0.0:
        acc.excluded += 1
        log.debug("GRC: iteration excluded (zero whole-batch gradient)")
        return acc
    onehot = np.zeros((acc.num_groups, B))
    onehot[batch_groups, np.arange(B)] = 1.0
    group_sums = onehot @ batch_grads
    with np.errstate(divide="ignore", invalid="ignore"):
        norms = np.linalg.norm(group_sums, axis=1) / group_sizes
    ratios = np.where((onehot.sum(axis=1) > 0) & (group_sizes > 0), norms / whole, 0.0)
    acc.sums += ratios
    acc.iterations += 1
    return acc


@dataclass
class TrainArtifacts:
    final_params: ModelParams
    initial_params: ModelParams
    grc: np.ndarray
    ledger: accountant.PrivacyLedger | None
    iteration_log: list = field(default_factory=list)
    sigma: float | None = None
    stat_sigma: float | None = None
    iterations: int = 0
    sampling_rate: float = 0.0
    grc_excluded: int = 0


def resolve_noise(cfg: TrainConfig, n_train: int, num_groups: int):
    """Return (sigma, stat_sigma, ledger) for a run over ``n_train`` records."""
    if cfg.algorithm is Algorithm.SGD:
        return None, None, None
    q, T = sampling_rate_and_steps(cfg, n_train)
    stat_count = 2 if cfg.shared_numerator_noise else num_groups + 1
    if cfg.algorithm is Algorithm.DPSGD:
        shape = accountant.DPSGD_ENTRIES
    else:
        shape = ((STAT_NOISE_RATIO, stat_count), (1.0, 1))
    if cfg.target_epsilon is not None:
        sigma = accountant.calibrate_sigma(cfg.target_epsilon, cfg.target_delta, q, T, shape)
        stat_sigma = STAT_NOISE_RATIO * sigma if cfg.algorithm is Algorithm.DPSGDS else None
    else:
        sigma = float(cfg.noise_multiplier)
        stat_sigma = None
        if cfg.algorithm is Algorithm.DPSGDS:
            stat_sigma = (
                float(cfg.stat_noise_multiplier) if cfg.stat_noise_multiplier is not None else STAT_NOISE_RATIO * sigma
            )
    entries = [(sigma, 1)] if cfg.algorithm is Algorithm.DPSGD else [(stat_sigma, stat_count), (sigma, 1)]
    ledger = accountant.compose(accountant.PrivacyLedger(q, delta=cfg.target_delta), T, entries)
    return sigma, stat_sigma, ledger


def sampling_rate_and_steps(cfg: TrainConfig, n_train: int) -> tuple[float, int]:
    if cfg.batch_size > n_train:
        raise ConfigError(f"batch size {cfg.batch_size} exceeds training set size {n_train}")
    return cfg.batch_size / n_train, cfg.epochs * math.ceil(n_train / cfg.batch_size)


def _clip_factors(norms: np.ndarray, bound) -> np.ndarray:
    # Gradients already within the bound get a factor of exactly 1.0.
    bound = np.broadcast_to(np.asarray(bound, dtype=np.float64), norms.shape)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(norms > bound, bound / norms, 1.0)


def clip_rows(grads: np.ndarray, bound, norms: np.ndarray | None = None) -> np.ndarray:
    """Scale each row to norm at most ``bound`` (scalar or per-row)."""
    if norms is None:
        norms = np.linalg.norm(grads, axis=1)
    return grads * _clip_factors(norms, bound)[:, None]


def train(
    ds: Dataset,
    indices,
    spec: ModelSpec,
    cfg: TrainConfig,
    *,
    track_grc: bool = True,
    keep_log: bool = True,
) -> TrainArtifacts:
    """Train on ``ds`` restricted to ``indices`` with the configured algorithm."""
    indices = np.asarray(indices, dtype=np.int64)
    X, y, g = ds.features[indices], ds.labels[indices], ds.groups[indices]
    n, K = indices.size, ds.num_groups
    q, T = sampling_rate_and_steps(cfg, n)
    sigma, stat_sigma, ledger = resolve_noise(cfg, n, K)
    b = float(cfg.batch_size)
    group_sizes = np.bincount(g, minlength=K)

    init = init_params(spec, derive_seed(cfg.seed, 0))
    sample_rng = rng_for(cfg.seed, 1)
    noise_rng = rng_for(cfg.seed, 2)
    theta = init.theta.copy()
    P = theta.size
    lr = cfg.learning_rate
    C = float(cfg.clip_bound)
    present = np.flatnonzero(group_sizes > 0)
    grc_acc = GrcAccumulator(K)
    records = []

    for t in range(T):
        batch = np.flatnonzero(sample_rng.random(n) < q)
        if batch.size == 0:
            if keep_log:
                records.append(IterationRecord(t, 0, note="empty batch skipped"))
            continue
        gb = g[batch]
        params = ModelParams(spec, theta)
        G = batch_per_sample_grads(params, X[batch], y[batch])
        if track_grc:
            record_grc(G, gb, group_sizes, grc_acc)
        norms = np.linalg.norm(G, axis=1)
        rec = IterationRecord(t, int(batch.size), norm_min=float(norms.min()), norm_mean=float(norms.mean()), norm_max=float(norms.max()))

        if cfg.algorithm is Algorithm.SGD:
            total = G.sum(axis=0)
        elif cfg.algorithm is Algorithm.DPSGD:
            total = clip_rows(G, C, norms).sum(axis=0)
            if sigma > 0:
                total = total + noise_rng.normal(0.0, sigma * C, P)
            rec.clip_used = C
        else:
            bounds, C_used = _group_bounds(G, norms, gb, group_sizes, present, C, b, q, cfg, stat_sigma, noise_rng, K)
            clipped = clip_rows(G, bounds[gb], norms)
            total = clipped.sum(axis=0)
            if sigma > 0:
                total = total + noise_rng.normal(0.0, sigma * C_used, P)
            rec.clip_bounds = tuple(float(v) for v in bounds)
            rec.clip_used = C_used
            C = C_used if cfg.persist_clip_across_iterations else float(cfg.clip_bound)

        theta = theta - lr * (total / b)
        if keep_log:
            records.append(rec)

    if not np.all(np.isfinite(theta)):
        raise TrainingDiverged("training produced non-finite parameters")
    return TrainArtifacts(
        final_params=ModelParams(spec, theta),
        initial_params=init,
        grc=grc_acc.grc,
        ledger=ledger,
        iteration_log=records,
        sigma=sigma,
        stat_sigma=stat_sigma,
        iterations=T,
        sampling_rate=q,
        grc_excluded=grc_acc.excluded,
    )


def _group_bounds(G, norms, gb, group_sizes, present, C, b, q, cfg, stat_sigma, noise_rng, K):
    """Per-group clipping bounds C^k for one DP-SGD-S iteration."""
    P = G.shape[1]
    unit = clip_rows(G, 1.0, norms)

    def noise():
        return noise_rng.normal(0.0, stat_sigma, P) if stat_sigma > 0 else 0.0

    whole = unit.sum(axis=0)
    numerator = np.linalg.norm((whole + noise()) / b)
    bounds = np.full(K, np.nan)
    for k in present:
        if not cfg.shared_numerator_noise:
            numerator = np.linalg.norm((whole + noise()) / b)
        in_k = gb == k
        group_sum = unit[in_k].sum(axis=0) + noise()
        if cfg.group_denominator is GroupDenominator.POPULATION:
            denom = float(group_sizes[k])
        elif cfg.group_denominator is GroupDenominator.BATCH:
            denom = float(in_k.sum())
        else:
            denom = q * float(group_sizes[k])
        if denom == 0:
            # Only reachable with batch-level counts: the group has no gradients to clip.
            continue
        dn = np.linalg.norm(group_sum) / denom
        if dn < _NORM_FLOOR:
            ratio = math.inf
            log.debug("DP-SGD-S: degenerate group-norm denominator for group %d", k)
        else:
            ratio = numerator / dn
        bounds[k] = C * min(cfg.scale_bound, ratio)
    return bounds, float(np.nanmax(bounds))


def _check(cfg: TrainConfig, algorithm: Algorithm):
    if cfg.algorithm is not algorithm:
        raise ConfigError(f"config algorithm is {cfg.algorithm.value}, expected {algorithm.value}")


def train_sgd(ds: Dataset, split: SplitPlan, spec: ModelSpec, cfg: TrainConfig, **kw) -> TrainArtifacts:
    _check(cfg, Algorithm.SGD)
    return train(ds, split.train_indices, spec, cfg, **kw)


def train_dpsgd(ds: Dataset, split: SplitPlan, spec: ModelSpec, cfg: TrainConfig, **kw) -> TrainArtifacts:
    _check(cfg, Algorithm.DPSGD)
    return train(ds, split.train_indices, spec, cfg, **kw)


def train_dpsgds(ds: Dataset, split: SplitPlan, spec: ModelSpec, cfg: TrainConfig, **kw) -> TrainArtifacts:
    _check(cfg, Algorithm.DPSGDS)
    return train(ds, split.train_indices, spec, cfg, **kw)


def write_iteration_log(records, path, num_groups: int, header_lines=()) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        w = csv.writer(fh)
        w.writerow(
            ["iteration", "realized_batch"]
            + [f"clip_bound_{k}" for k in range(num_groups)]
            + ["clip_used", "grad_norm_min", "grad_norm_mean", "grad_norm_max", "note"]
        )
        for r in records:
            bounds = list(r.clip_bounds) or [math.nan] * num_groups
            w.writerow(
                [r.iteration, r.realized_batch]
                + [repr(float(v)) for v in bounds]
                + [repr(float(r.clip_used)), repr(r.norm_min), repr(r.norm_mean), repr(r.norm_max), r.note]
            )
    return path
