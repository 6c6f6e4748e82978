"""Independent reference computations shared by unit and acceptance tests."""

import itertools
import math

import mpmath
import numpy as np

from fairaudit.model import ModelParams, forward_loss, init_params, per_sample_grad


def fd_relative_errors(spec, probes, coords=20, seed=0, h=1e-5, floor=1e-4, recheck_above=None, fine_h=1e-7):
    """Central-difference check of per_sample_grad at random params, inputs and coordinates.

    Relative error is |fd - g| / max(|fd|, |g|, floor); the floor keeps
    near-zero components, where the difference quotient is all roundoff,
    from dominating. With ``recheck_above`` set, a coordinate whose error
    exceeds it is measured again with step ``fine_h``: max-pool and other
    piecewise maps have switch points, and a step straddling one measures
    the kink rather than the gradient. Returns ``(worst, rechecked)``.
    """
    rng = np.random.default_rng(seed)
    worst, rechecked = 0.0, 0

    def rel_err(params, theta, x, y, g, j, step):
        up, down = theta.copy(), theta.copy()
        up[j] += step
        down[j] -= step
        fd = (forward_loss(ModelParams(spec, up), x, y) - forward_loss(ModelParams(spec, down), x, y)) / (2 * step)
        return abs(fd - g[j]) / max(abs(fd), abs(g[j]), floor)

    for _ in range(probes):
        params = init_params(spec, int(rng.integers(2**63)))
        # Moving off the init point exercises the bias paths too.
        theta = params.theta + 0.1 * rng.standard_normal(params.theta.size)
        params = ModelParams(spec, theta)
        x = rng.random(spec.input_size)
        y = int(rng.integers(spec.num_classes))
        g = per_sample_grad(params, x, y)
        for j in rng.choice(theta.size, size=min(coords, theta.size), replace=False):
            err = rel_err(params, theta, x, y, g, j, h)
            if recheck_above is not None and err > recheck_above:
                err = rel_err(params, theta, x, y, g, j, fine_h)
                rechecked += 1
            worst = max(worst, err)
    return worst, rechecked


def xent_mp(z, y, dps=40):
    """-log softmax(z)[y] at high precision."""
    with mpmath.workdps(dps):
        zs = [mpmath.mpf(float(v)) for v in z]
        return mpmath.log(mpmath.fsum(mpmath.exp(v) for v in zs)) - zs[y]


def rdp_alpha2_mp(q, sigma, dps=50):
    """Order-2 RDP of the Poisson-subsampled Gaussian: ln(1 + q^2 (e^{1/sigma^2} - 1))."""
    with mpmath.workdps(dps):
        q, s = mpmath.mpf(q), mpmath.mpf(sigma)
        return mpmath.log(1 + q**2 * (mpmath.exp(1 / s**2) - 1))


def brute_force_threshold_accuracy(scores, statuses):
    """Best accuracy of any real threshold in either direction, by trying every cut of the sorted values."""
    s = np.asarray(scores, dtype=float)
    h = np.asarray(statuses).astype(bool)
    vals = np.unique(s)
    cuts = [vals[0] - 1.0] + [(a + b) / 2 for a, b in zip(vals[:-1], vals[1:])] + [vals[-1] + 1.0]
    best_lt = max(((s < c) == h).mean() for c in cuts)
    best_ge = max(((s >= c) == h).mean() for c in cuts)
    return best_lt, best_ge


def spearman_exact(x, y):
    def ranks(v):
        v = list(v)
        out = [0.0] * len(v)
        for i, a in enumerate(v):
            out[i] = 1 + sum(b < a for b in v) + 0.5 * (sum(b == a for b in v) - 1)
        return out

    rx, ry = ranks(x), ranks(y)
    mx, my = sum(rx) / len(rx), sum(ry) / len(ry)
    num = sum((a - mx) * (b - my) for a, b in zip(rx, ry))
    den = math.sqrt(sum((a - mx) ** 2 for a in rx) * sum((b - my) ** 2 for b in ry))
    return num / den


def all_partitions_best(scores, statuses):
    """Exhaustive check over every subset realisable by a threshold, independent of midpoints."""
    s = np.asarray(scores, dtype=float)
    h = np.asarray(statuses).astype(bool)
    best = 0
    for c in itertools.chain([-math.inf], np.unique(s), [math.inf]):
        for guess in (s < c, s <= c, s >= c, s > c):
            best = max(best, int((guess == h).sum()))
    return best / s.size
