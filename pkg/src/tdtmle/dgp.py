"""Synthetic longitudinal data-generating processes and ground truth.

Four processes are provided:

* ``simple-cont`` / ``simple-surv``: one-dimensional Markovian covariates
  with a logistic treatment mechanism and (continuous or absorbing-binary)
  outcomes.
* ``complex``: p-dimensional covariates with tanh/tan link functions and a
  dependency window of length h (h=1 is Markovian).
* ``micro``: a two-period all-binary process with conditional
  probabilities bounded inside (0.05, 0.95), small enough to enumerate
  exhaustively; used as an exact oracle.

Reproducibility: every trajectory draws from its own counter-based
substream keyed by (seed, trajectory index), so individual trajectories do
not depend on the batch size, chunking, or parallelism.  Each generator
draws a fixed per-trajectory noise block; interventions replace the
treatment assignment but consume the same block.
"""

import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from tdtmle.data import CONTINUOUS, SURVIVAL, Batch
from tdtmle.policies import _window_stats
from tdtmle.rng import PARAM_STREAM, substream as trajectory_rng

log = logging.getLogger(__name__)

_CHUNK = 65536

_MAX_RESAMPLE = 100


def _sigmoid(x):
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


# ---------------------------------------------------------------------------
# Configurations


@dataclass(frozen=True)
class SimpleDGPConfig:
    n: int
    tau: int
    seed: int
    variant: str = SURVIVAL  # "survival" | "continuous"

    def __post_init__(self):
        if self.n < 1 or self.tau < 1:
            raise ValueError("SimpleDGPConfig requires n >= 1 and tau >= 1")


@dataclass(frozen=True)
class ComplexDGPConfig:
    n: int
    tau: int
    seed: int
    p: int = 5
    h: int = 1

    def __post_init__(self):
        if self.n < 1 or self.tau < 1 or self.p < 1 or self.h < 1:
            raise ValueError("ComplexDGPConfig requires positive n, tau, p, h")


@dataclass(frozen=True)
class TabularMicroConfig:
    n: int
    seed: int

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("TabularMicroConfig requires n >= 1")


@dataclass(frozen=True)
class TruthEstimate:
    psi0: float
    mc_se: float
    m: int  # 0 for exhaustive enumeration


# ---------------------------------------------------------------------------
# Simple process (continuous and survival variants)


def _simple_chunk(seed, lo, hi, tau, survival, policy):
    n = hi - lo
    z = np.empty((n, tau + 1))
    u = np.empty((n, 2 * tau))
    for i in range(n):
        rng = trajectory_rng(seed, lo + i)
        z[i] = rng.standard_normal(tau + 1)
        u[i] = rng.random(2 * tau)

    w = z[:, 0]
    l = np.zeros((n, tau, 1))
    a = np.zeros((n, tau), dtype=np.int64)
    y = np.zeros((n, tau))
    alive = np.ones(n, dtype=bool)

    for t in range(1, tau + 1):
        if t == 1:
            l_t = 0.1 * w + z[:, t]
            p_a = _sigmoid(-0.5 * w + l_t)
        else:
            l_t = 0.1 * w - 0.1 * a[:, t - 2] + z[:, t]
            p_a = _sigmoid(-0.5 + 0.3 * w + 0.3 * l_t + 2.0 * a[:, t - 2])
        if policy is None:
            a_t = (u[:, 2 * (t - 1)] < p_a).astype(np.int64)
        else:
            view = _GenView(n, l, t, l_t)
            a_t = np.asarray(policy.vector_rule(view, t, a[:, : t - 1]), dtype=np.int64)
        lin = -3.0 + 0.2 * w + 0.2 * l_t - 2.0 * a_t
        if survival:
            y_t = (u[:, 2 * t - 1] < _sigmoid(lin)).astype(np.float64)
        elif t == 1:
            y_t = (u[:, 2 * t - 1] < _sigmoid(lin)).astype(np.float64)
        else:
            y_t = _sigmoid(lin)

        if survival and t > 1:
            # degeneracy: frozen nodes repeat the event-time values
            dead = ~alive
            l_t = np.where(dead, l[:, t - 2, 0], l_t)
            a_t = np.where(dead, a[:, t - 2], a_t)
            y_t = np.where(dead, 1.0, y_t)
        l[:, t - 1, 0] = l_t
        a[:, t - 1] = a_t
        y[:, t - 1] = y_t
        if survival:
            alive &= y_t < 1.0

    mode = SURVIVAL if survival else CONTINUOUS
    return Batch(w=w[:, None], l=l, a=a, y=y, mode=mode)


class _GenView:
    """Batch-like view handed to vectorized policy rules during
    generation; exposes the covariate history through the current period."""

    def __init__(self, n, l, t, l_t):
        self.n = n
        self.l = l.copy()
        self.l[:, t - 1, :] = np.atleast_2d(l_t).T if l_t.ndim == 1 else l_t

    # replay policies need observed actions, which do not exist while
    # intervening; accessing .a is therefore an error by construction.


def gen_simple_continuous(cfg):
    """Simple process with a continuous final outcome (deterministic
    sigmoid outcomes after the first period)."""
    return DgpSpec("simple-cont", tau=cfg.tau).sample(cfg.n, cfg.seed)


def gen_simple_survival(cfg):
    """Simple process with an absorbing binary failure outcome."""
    return DgpSpec("simple-surv", tau=cfg.tau).sample(cfg.n, cfg.seed)


# ---------------------------------------------------------------------------
# Complex process


def complex_params(seed, h):
    """Process-level coefficient draws shared by all trajectories."""
    rng = trajectory_rng(seed, PARAM_STREAM)
    ks = np.arange(1, h + 1)
    alpha = rng.normal(1.0 / (ks + 1.0), 0.02)
    beta = rng.normal(1.0 / (ks + 1.0), 0.02)
    gamma = 2.0 * (rng.random(h) < 0.5).astype(np.float64) - 1.0
    return alpha, beta, gamma


def _complex_chunk(seed, lo, hi, tau, p, h, policy):
    alpha, beta, gamma = complex_params(seed, h)
    n = hi - lo
    rngs = [trajectory_rng(seed, lo + i) for i in range(n)]

    def draw(idx):
        eps = np.empty((len(idx), tau, p + 2))
        u = np.empty((len(idx), tau))
        for row, i in enumerate(idx):
            eps[row] = rngs[i].standard_normal((tau, p + 2))
            u[row] = rngs[i].random(tau)
        return eps, u

    todo = np.arange(n)
    eps = np.empty((n, tau, p + 2))
    u_y = np.empty((n, tau))
    l = np.zeros((n, tau, p))
    a = np.zeros((n, tau), dtype=np.int64)
    y = np.zeros((n, tau))
    resamples = 0

    for attempt in range(_MAX_RESAMPLE):
        e, u = draw(todo)
        eps[todo] = e
        u_y[todo] = u
        _complex_run(
            l, a, y, eps, u_y, todo, tau, p, h, alpha, beta, gamma, policy
        )
        bad = todo[
            ~(
                np.isfinite(l[todo]).all(axis=(1, 2))
                & np.isfinite(y[todo]).all(axis=1)
            )
        ]
        if bad.size == 0:
            break
        resamples += bad.size
        todo = bad
    else:
        raise RuntimeError("complex process produced non-finite values after 100 resamples")
    if resamples:
        log.info("complex process resampled %d trajectories with non-finite values", resamples)
    return Batch(w=np.zeros((n, 0)), l=l, a=a, y=y, mode=SURVIVAL), resamples


def _complex_run(l, a, y, eps, u_y, rows, tau, p, h, alpha, beta, gamma, policy):
    """Run the time loop in place for the given rows."""
    lr = np.zeros((rows.size, tau, p))
    ar = np.zeros((rows.size, tau), dtype=np.int64)
    yr = np.zeros((rows.size, tau))
    er = eps[rows]
    ur = u_y[rows]
    alive = np.ones(rows.size, dtype=bool)

    for t in range(1, tau + 1):
        acc = np.zeros((rows.size, p))
        for k in range(1, h + 1):
            # values at non-positive periods are taken as zero
            if t - k >= 1:
                past_l = lr[:, t - 1 - k, :]
                past_a = ar[:, t - 1 - k].astype(np.float64)
            else:
                past_l = np.zeros((rows.size, p))
                past_a = np.zeros(rows.size)
            acc += alpha[k - 1] * past_l
            acc += (beta[k - 1] * gamma[k - 1] * (2.0 * past_a - 1.0))[:, None]
        l_t = np.tanh(acc) + er[:, t - 1, :p]
        lr[:, t - 1, :] = l_t

        lbar, abar = _window_stats(lr, ar[:, : t - 1].astype(np.float64), t, h)
        prod_l = np.prod(lbar, axis=-1)
        if policy is None:
            s_t = np.tan(prod_l + abar) + 0.2 * er[:, t - 1, p]
            a_t = (_sigmoid(s_t) + 0.05 * er[:, t - 1, p + 1] > 0.5).astype(np.int64)
        else:
            view = _GenView(rows.size, lr, t, l_t)
            a_t = np.asarray(policy.vector_rule(view, t, ar[:, : t - 1]), dtype=np.int64)
        ar[:, t - 1] = a_t

        # hazard windows include the current period's covariates and action
        k_a = min(h, t)
        abar_full = ar[:, t - k_a : t].mean(axis=1)
        p_t = np.tan(prod_l - 0.7 * (abar_full - 0.5)) - 4.5
        y_t = (ur[:, t - 1] < _sigmoid(p_t)).astype(np.float64)

        if t > 1:
            dead = ~alive
            lr[:, t - 1, :] = np.where(dead[:, None], lr[:, t - 2, :], lr[:, t - 1, :])
            ar[:, t - 1] = np.where(dead, ar[:, t - 2], ar[:, t - 1])
            y_t = np.where(dead, 1.0, y_t)
        yr[:, t - 1] = y_t
        alive &= y_t < 1.0

    l[rows] = lr
    a[rows] = ar
    y[rows] = yr


def gen_complex_survival(cfg):
    """Survival process with p-dimensional covariates and tan links."""
    return DgpSpec("complex", tau=cfg.tau, p=cfg.p, h=cfg.h).sample(cfg.n, cfg.seed)


# ---------------------------------------------------------------------------
# Tabular micro process (exactly enumerable)

# Logistic coefficients; absolute row sums stay below logit(0.95) = 2.944
# so every conditional probability lies in (0.05, 0.95) by construction.
MICRO_TABLE = {
    "w": 0.0,  # logit P(W=1)
    "l1": (-0.3, 0.8),  # 1, W
    "a1": (-0.4, 0.5, 0.9),  # 1, W, L1
    "y1": (-1.2, 0.4, 0.8, -0.9),  # 1, W, L1, A1
    "l2": (0.2, -0.5, 0.7, 0.6),  # 1, W, L1, A1
    "a2": (-0.3, 0.4, 0.5, 1.0, 0.6),  # 1, W, L1, A1, L2
    "y2": (-1.4, 0.3, 0.3, -0.5, 0.9, -1.0),  # 1, W, L1, A1, L2, A2
}

MICRO_TAU = 2


def _lp(coefs, *parents):
    return coefs[0] + float(np.dot(coefs[1:], parents))


def micro_prob(node, *parents, table=MICRO_TABLE):
    """Conditional probability that ``node`` equals one given its parents."""
    if node == "w":
        return 1.0 / (1.0 + math.exp(-table["w"]))
    return 1.0 / (1.0 + math.exp(-_lp(table[node], *parents)))


def _micro_chunk(seed, lo, hi, policy, table):
    n = hi - lo
    u = np.empty((n, 7))
    for i in range(n):
        u[i] = trajectory_rng(seed, lo + i).random(7)

    w = (u[:, 0] < micro_prob("w", table=table)).astype(np.float64)
    l1 = (u[:, 1] < _vec_prob("l1", table, w)).astype(np.float64)
    if policy is None:
        a1 = (u[:, 2] < _vec_prob("a1", table, w, l1)).astype(np.int64)
    else:
        lmat = np.zeros((n, 2, 1))
        lmat[:, 0, 0] = l1
        view = _GenView(n, lmat, 1, l1[:, None])
        a1 = np.asarray(policy.vector_rule(view, 1, np.zeros((n, 0), dtype=np.int64)))
    y1 = (u[:, 3] < _vec_prob("y1", table, w, l1, a1)).astype(np.float64)

    alive = y1 < 1.0
    l2 = np.where(alive, (u[:, 4] < _vec_prob("l2", table, w, l1, a1)).astype(np.float64), l1)
    if policy is None:
        a2_free = (u[:, 5] < _vec_prob("a2", table, w, l1, a1, l2)).astype(np.int64)
    else:
        lmat = np.zeros((n, 2, 1))
        lmat[:, 0, 0] = l1
        lmat[:, 1, 0] = l2
        view = _GenView(n, lmat, 2, l2[:, None])
        a2_free = np.asarray(policy.vector_rule(view, 2, a1[:, None]))
    a2 = np.where(alive, a2_free, a1)
    y2 = np.where(alive, (u[:, 6] < _vec_prob("y2", table, w, l1, a1, l2, a2)).astype(np.float64), 1.0)

    l = np.stack([l1, l2], axis=1)[:, :, None]
    a = np.stack([a1, a2], axis=1).astype(np.int64)
    y = np.stack([y1, y2], axis=1)
    return Batch(w=w[:, None], l=l, a=a, y=y, mode=SURVIVAL)


def _vec_prob(node, table, *parents):
    coefs = np.asarray(table[node])
    lin = coefs[0] + sum(c * np.asarray(p, dtype=np.float64) for c, p in zip(coefs[1:], parents))
    return _sigmoid(np.asarray(lin, dtype=np.float64))


def gen_tabular_micro(cfg, table=MICRO_TABLE):
    return _concat_chunks(
        lambda lo, hi: _micro_chunk(cfg.seed, lo, hi, None, table), cfg.n
    )


def _micro_policy_actions(policy, w, l1, a1=None, l2=None):
    """Evaluate a policy rule on micro histories (scalar helper)."""
    from tdtmle.data import Trajectory

    tau = MICRO_TAU
    if a1 is None:
        traj = Trajectory(
            w=np.array([w]), l=np.array([[l1], [0.0]]), a=np.zeros(tau, dtype=np.int64),
            y=np.zeros(tau),
        )
        return int(policy.rule(traj, 1, np.zeros(0, dtype=np.int64)))
    traj = Trajectory(
        w=np.array([w]), l=np.array([[l1], [l2]]), a=np.array([a1, 0], dtype=np.int64),
        y=np.zeros(tau),
    )
    return int(policy.rule(traj, 2, np.array([a1], dtype=np.int64)))


def micro_enumeration(policy, table=MICRO_TABLE):
    """Exact functionals of the micro process under a deterministic policy.

    Returns a dict with the target mean ``psi0`` and lookups for the true
    propensities, conditional outcome means, and values:

    * ``pi1(w, l1)``, ``pi2(w, l1, a1, l2)``: treatment probabilities,
    * ``q2(w, l1, a1, l2, a2)``: terminal conditional mean among survivors,
    * ``q1(w, l1, a1)``: conditional mean of the final outcome with the
      second-period treatment assigned by the policy,
    * ``v2(w, l1, a1, y1, l2)`` and ``v1(w, l1)``: values under the policy,
    * ``a1g(w, l1)`` / ``a2g(w, l1, a1, l2)``: the policy's actions.
    """
    if policy.label == "replay":
        raise ValueError("enumeration under the replay policy is the observational mean")

    def pi1(w, l1):
        return micro_prob("a1", w, l1, table=table)

    def pi2(w, l1, a1, l2):
        return micro_prob("a2", w, l1, a1, l2, table=table)

    def a1g(w, l1):
        return _micro_policy_actions(policy, w, l1)

    def a2g(w, l1, a1, l2):
        return _micro_policy_actions(policy, w, l1, a1, l2)

    def q2(w, l1, a1, l2, a2):
        return micro_prob("y2", w, l1, a1, l2, a2, table=table)

    def q1(w, l1, a1):
        p_y1 = micro_prob("y1", w, l1, a1, table=table)
        total = p_y1
        for l2 in (0.0, 1.0):
            p_l2 = micro_prob("l2", w, l1, a1, table=table)
            p_l2 = p_l2 if l2 == 1.0 else 1.0 - p_l2
            total += (1.0 - p_y1) * p_l2 * q2(w, l1, a1, l2, a2g(w, l1, a1, l2))
        return total

    def v2(w, l1, a1, y1, l2):
        if y1 >= 1.0:
            return 1.0
        return q2(w, l1, a1, l2, a2g(w, l1, a1, l2))

    def v1(w, l1):
        return q1(w, l1, a1g(w, l1))

    psi0 = 0.0
    for w in (0.0, 1.0):
        p_w = micro_prob("w", table=table)
        p_w = p_w if w == 1.0 else 1.0 - p_w
        for l1 in (0.0, 1.0):
            p_l1 = micro_prob("l1", w, table=table)
            p_l1 = p_l1 if l1 == 1.0 else 1.0 - p_l1
            psi0 += p_w * p_l1 * v1(w, l1)

    return {
        "psi0": psi0,
        "pi1": pi1,
        "pi2": pi2,
        "q1": q1,
        "q2": q2,
        "v1": v1,
        "v2": v2,
        "a1g": a1g,
        "a2g": a2g,
    }


# ---------------------------------------------------------------------------
# Unified sampling and ground truth


@dataclass(frozen=True)
class DgpSpec:
    """A process identity without sample size or seed; the unit the
    benchmark harness and the truth oracle work with."""

    kind: str  # "simple-cont" | "simple-surv" | "complex" | "micro"
    tau: int = MICRO_TAU
    p: int = 5
    h: int = 1

    def __post_init__(self):
        if self.kind not in ("simple-cont", "simple-surv", "complex", "micro"):
            raise ValueError(f"unknown process kind {self.kind!r}")
        if self.kind == "micro" and self.tau != MICRO_TAU:
            raise ValueError("micro process has a fixed two-period horizon")

    @property
    def mode(self):
        return CONTINUOUS if self.kind == "simple-cont" else SURVIVAL

    def _chunk(self, seed, lo, hi, policy):
        if self.kind in ("simple-cont", "simple-surv"):
            return _simple_chunk(seed, lo, hi, self.tau, self.kind == "simple-surv", policy)
        if self.kind == "complex":
            return _complex_chunk(seed, lo, hi, self.tau, self.p, self.h, policy)[0]
        return _micro_chunk(seed, lo, hi, policy, MICRO_TABLE)

    def iter_chunks(self, n, seed, policy=None):
        """Yield batches covering trajectory indices 0..n-1 in order;
        trajectory i is identical whatever the chunking."""
        if policy is not None and policy.label == "replay":
            policy = None
        for lo in range(0, n, _CHUNK):
            yield self._chunk(seed, lo, min(lo + _CHUNK, n), policy)

    def sample(self, n, seed, policy=None):
        """Draw n trajectories; with ``policy`` the treatment mechanism is
        replaced by the policy (interventional sampling)."""
        return _stack(list(self.iter_chunks(n, seed, policy)))


def monte_carlo_truth(dgp, g, m, seed):
    """Ground-truth counterfactual mean of the final outcome under ``g``.

    ``m = 0`` requests exact exhaustive enumeration (micro process only);
    otherwise m >= 1000 interventional trajectories are simulated and the
    Monte Carlo standard error is reported.
    """
    if m == 0:
        if dgp.kind != "micro":
            raise ValueError("exact enumeration is only available for the micro process")
        return TruthEstimate(psi0=micro_enumeration(g)["psi0"], mc_se=0.0, m=0)
    if m < 1000:
        raise ValueError("monte_carlo_truth requires m >= 1000 (or m = 0 for exact mode)")
    total = 0.0
    total_sq = 0.0
    for batch in dgp.iter_chunks(m, seed, policy=g):
        vals = batch.final_outcome
        total += vals.sum()
        total_sq += (vals * vals).sum()
    psi0 = total / m
    var = max(0.0, (total_sq - m * psi0 * psi0) / (m - 1)) if m > 1 else 0.0
    return TruthEstimate(psi0=psi0, mc_se=math.sqrt(var / m), m=m)


def _concat_chunks(chunk_fn, n):
    batches = [chunk_fn(lo, min(lo + _CHUNK, n)) for lo in range(0, n, _CHUNK)]
    return _stack(batches)


def _stack(batches):
    if len(batches) == 1:
        return batches[0]
    first = batches[0]
    return Batch(
        w=np.concatenate([b.w for b in batches]),
        l=np.concatenate([b.l for b in batches]),
        a=np.concatenate([b.a for b in batches]),
        y=np.concatenate([b.y for b in batches]),
        mode=first.mode,
        c=None if first.c is None else np.concatenate([b.c for b in batches]),
    )


def inject_censoring(batch, rate, seed):
    """Add independent Bernoulli censoring to an uncensored survival batch.

    Censoring at period t freezes all later nodes at their last observed
    values (and zeroes the period's outcome, which is observed after the
    censoring indicator).  Intended for exercising the censoring pathway in
    tests and demos; this is not one of the benchmark processes.
    """
    if batch.censoring:
        raise ValueError("batch already carries censoring indicators")
    if batch.mode != SURVIVAL:
        raise ValueError("censoring injection requires survival mode")
    n, tau = batch.n, batch.tau
    l = batch.l.copy()
    a = batch.a.copy()
    y = batch.y.copy()
    c = np.zeros((n, tau), dtype=np.int64)
    for i in range(n):
        u = trajectory_rng(seed, i).random(tau)
        for t in range(1, tau + 1):
            if y[i, t - 1] >= 1.0:
                break  # event first: never censored afterwards
            if u[t - 1] < rate:
                c[i, t - 1 :] = 1
                y[i, t - 1 :] = y[i, t - 2] if t > 1 else 0.0
                l[i, t - 1 :] = l[i, t - 1]
                a[i, t - 1 :] = a[i, t - 1]
                break
    return Batch(w=batch.w, l=l, a=a, y=y, mode=SURVIVAL, c=c)
