"""Longitudinal trajectories, treatment policies, and outcome scaling.

A trajectory records baseline covariates, then per period t = 1..tau the
covariates L_t, binary treatment A_t, optional binary censoring C_t, and
outcome Y_t.  In survival mode Y is a monotone failure indicator and the
process degenerates after the first event or censoring: later nodes repeat
the last observed values.  The stopping time T is the first period with an
event or censoring, else tau.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

SURVIVAL = "survival"
CONTINUOUS = "continuous"


@dataclass
class Trajectory:
    w: np.ndarray  # (d_w,)
    l: np.ndarray  # (tau, d_l)
    a: np.ndarray  # (tau,) in {0, 1}
    y: np.ndarray  # (tau,) in [0, 1]
    mode: str = SURVIVAL
    c: Optional[np.ndarray] = None  # (tau,) in {0, 1}

    @property
    def tau(self):
        return self.a.shape[0]

    @property
    def stop(self):
        return stopping_time(self)


@dataclass
class Batch:
    """n trajectories with shared tau and covariate dimensions.

    Arrays are made read-only on construction; derive modified copies
    instead of mutating.
    """

    w: np.ndarray  # (n, d_w)
    l: np.ndarray  # (n, tau, d_l)
    a: np.ndarray  # (n, tau)
    y: np.ndarray  # (n, tau)
    mode: str = SURVIVAL
    c: Optional[np.ndarray] = None  # (n, tau)
    stop: np.ndarray = field(init=False)  # (n,) stopping times in 1..tau

    def __post_init__(self):
        self.w = np.ascontiguousarray(self.w, dtype=np.float64)
        self.l = np.ascontiguousarray(self.l, dtype=np.float64)
        self.a = np.ascontiguousarray(self.a, dtype=np.int64)
        self.y = np.ascontiguousarray(self.y, dtype=np.float64)
        if self.c is not None:
            self.c = np.ascontiguousarray(self.c, dtype=np.int64)
        if self.mode not in (SURVIVAL, CONTINUOUS):
            raise ValueError(f"unknown mode {self.mode!r}")
        self.stop = _batch_stops(self)
        for arr in (self.w, self.l, self.a, self.y, self.c, self.stop):
            if arr is not None:
                arr.flags.writeable = False

    @property
    def n(self):
        return self.w.shape[0]

    @property
    def tau(self):
        return self.a.shape[1]

    @property
    def d_w(self):
        return self.w.shape[1]

    @property
    def d_l(self):
        return self.l.shape[2]

    @property
    def censoring(self):
        return self.c is not None

    @property
    def valid_mask(self):
        """(n, tau) indicator of t <= T, 1-based periods."""
        return (np.arange(1, self.tau + 1)[None, :] <= self.stop[:, None]).astype(np.float64)

    @property
    def final_outcome(self):
        """Y_T per subject."""
        return self.y[np.arange(self.n), self.stop - 1]

    def trajectory(self, i):
        return Trajectory(
            w=self.w[i],
            l=self.l[i],
            a=self.a[i],
            y=self.y[i],
            mode=self.mode,
            c=None if self.c is None else self.c[i],
        )

    def subset(self, idx):
        idx = np.asarray(idx)
        return Batch(
            w=self.w[idx],
            l=self.l[idx],
            a=self.a[idx],
            y=self.y[idx],
            mode=self.mode,
            c=None if self.c is None else self.c[idx],
        )

    def with_actions(self, a):
        """Copy with the action matrix replaced (used for counterfactual
        evaluation); censoring indicators are forced to zero as the
        counterfactual suppresses censoring."""
        return Batch(
            w=self.w,
            l=self.l,
            a=a,
            y=self.y,
            mode=self.mode,
            c=None if self.c is None else np.zeros_like(self.c),
        )


def _batch_stops(batch):
    n, tau = batch.a.shape
    if batch.mode == CONTINUOUS:
        return np.full(n, tau, dtype=np.int64)
    jump = batch.y >= 1.0
    if batch.c is not None:
        jump = jump | (batch.c == 1)
    any_jump = jump.any(axis=1)
    first = np.where(any_jump, jump.argmax(axis=1) + 1, tau)
    return first.astype(np.int64)


def stopping_time(traj):
    """First period with an event or censoring, else tau."""
    tau = traj.tau
    if traj.mode == CONTINUOUS:
        return tau
    jump = traj.y >= 1.0
    if traj.c is not None:
        jump = jump | (traj.c == 1)
    hits = np.flatnonzero(jump)
    return int(hits[0]) + 1 if hits.size else tau


@dataclass
class PolicySpec:
    """Deterministic dynamic treatment rule.

    ``rule(traj, t, a_prev)`` returns the action for period t (1-based)
    given the observed trajectory and the previously assigned
    counterfactual actions ``a_prev`` (length t-1).  ``vector_rule`` is an
    optional batched twin taking (batch, t, a_prev_matrix) and returning
    an (n,) action vector; it must agree with ``rule`` row by row.
    """

    label: str
    rule: Callable
    vector_rule: Optional[Callable] = None
    action_arity: int = 2


def apply_policy(data, g):
    """Counterfactual action sequence on the observed covariate path.

    Actions are assigned recursively: the action at period t may depend on
    previously assigned counterfactual actions, never on observed ones.
    Accepts a Trajectory (returns (tau,)) or a Batch (returns (n, tau)).
    """
    if isinstance(data, Trajectory):
        tau = data.tau
        out = np.zeros(tau, dtype=np.int64)
        for t in range(1, tau + 1):
            action = int(g.rule(data, t, out[: t - 1]))
            if action not in range(g.action_arity):
                raise ValueError(
                    f"policy {g.label!r} returned {action}, expected 0..{g.action_arity - 1}"
                )
            out[t - 1] = action
        return out

    batch = data
    out = np.zeros((batch.n, batch.tau), dtype=np.int64)
    for t in range(1, batch.tau + 1):
        if g.vector_rule is not None:
            actions = np.asarray(g.vector_rule(batch, t, out[:, : t - 1]), dtype=np.int64)
        else:
            actions = np.fromiter(
                (g.rule(batch.trajectory(i), t, out[i, : t - 1]) for i in range(batch.n)),
                dtype=np.int64,
                count=batch.n,
            )
        if actions.min(initial=0) < 0 or actions.max(initial=0) >= g.action_arity:
            raise ValueError(f"policy {g.label!r} returned non-binary actions at t={t}")
        out[:, t - 1] = actions
    return out


@dataclass(frozen=True)
class OutcomeScaler:
    """Affine map of outcomes onto [0, 1] and back."""

    lo: float
    hi: float

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError(f"scaler requires lo < hi, got ({self.lo}, {self.hi})")

    @classmethod
    def identity(cls):
        return cls(0.0, 1.0)

    @classmethod
    def from_batch(cls, batch, margin=0.01):
        """Min/max of observed outcomes padded by ``margin`` of the range,
        so rescaled values stay strictly inside (0, 1)."""
        lo = float(batch.y.min())
        hi = float(batch.y.max())
        if hi <= lo:
            hi = lo + 1.0
        pad = margin * (hi - lo)
        return cls(lo - pad, hi + pad)

    @property
    def span(self):
        return self.hi - self.lo


def rescale(batch, scaler):
    """Map outcomes through (y - lo) / (hi - lo)."""
    y = (batch.y - scaler.lo) / scaler.span
    if y.min() < 0.0 or y.max() > 1.0:
        raise ValueError("scaler does not cover the observed outcome range")
    return Batch(w=batch.w, l=batch.l, a=batch.a, y=y, mode=batch.mode, c=batch.c)


def unscale(psi, sigma, scaler):
    """Map an estimate and its standard error back to original units."""
    return scaler.lo + scaler.span * psi, scaler.span * sigma


def validate(batch):
    """Check all trajectory invariants; returns a list of violations
    (empty when the batch is well formed).  Never mutates."""
    out = []
    n, tau = batch.a.shape
    if n < 1:
        out.append("batch: n must be >= 1")
    if batch.w.shape[0] != n or batch.l.shape[:2] != (n, tau) or batch.y.shape != (n, tau):
        out.append("batch: inhomogeneous array dimensions")
        return out
    if batch.c is not None and batch.c.shape != (n, tau):
        out.append("batch: censoring indicator dimensions")
        return out
    if not np.isfinite(batch.w).all() or not np.isfinite(batch.l).all():
        out.append("batch: non-finite covariates")
    if not np.isin(batch.a, (0, 1)).all():
        out.append("batch: non-binary treatments")
    if batch.y.min() < 0.0 or batch.y.max() > 1.0:
        out.append("batch: outcomes outside [0, 1]")
    if batch.c is not None and not np.isin(batch.c, (0, 1)).all():
        out.append("batch: non-binary censoring indicators")

    survival = batch.mode == SURVIVAL
    for i in range(n):
        y, c, stop = batch.y[i], None if batch.c is None else batch.c[i], batch.stop[i]
        if survival:
            if not np.isin(y, (0.0, 1.0)).all():
                out.append(f"subject {i}: survival outcomes must be binary")
                continue
            if np.any(np.diff(y) < 0):
                out.append(f"subject {i}: monotonicity")
                continue
            if np.any(y[stop - 1 :] != y[stop - 1]):
                out.append(f"subject {i}: post-event outcome not frozen")
        if c is not None:
            first_c = np.flatnonzero(c == 1)
            had_event = survival and np.any(y == 1.0)
            if had_event and first_c.size:
                # C precedes Y within a period, so a censored subject's
                # outcome stays carried forward and never jumps.
                out.append(f"subject {i}: both event and censoring jumps")
                continue
            if first_c.size:
                tc = int(first_c[0]) + 1  # 1-based censoring period
                frozen = (
                    np.all(c[tc - 1 :] == 1)
                    and np.all(y[tc - 1 :] == (y[tc - 2] if tc > 1 else 0.0))
                    and np.all(batch.l[i, tc - 1 :] == batch.l[i, tc - 1])
                    and np.all(batch.a[i, tc - 1 :] == batch.a[i, tc - 1])
                )
                if not frozen:
                    out.append(f"subject {i}: post-censoring degeneracy")
    return out


# ---------------------------------------------------------------------------
# Dataset files: JSON Lines records plus a sidecar header.


def _fmt(x):
    return format(float(x), ".17g")


def _fmt_vec(vs):
    return "[" + ",".join(_fmt(v) for v in vs) + "]"


def _fmt_mat(m):
    return "[" + ",".join(_fmt_vec(row) for row in m) + "]"


def meta_path(path):
    return Path(path).with_suffix(".meta.json")


def write_jsonl(batch, path, seed=None):
    """Write one JSON object per trajectory plus a sidecar header.

    Floats are serialized with 17 significant digits, which round-trips
    float64 exactly.
    """
    path = Path(path)
    with path.open("w") as fh:
        for i in range(batch.n):
            parts = [
                f'"w":{_fmt_vec(batch.w[i])}',
                f'"l":{_fmt_mat(batch.l[i])}',
                f'"a":[{",".join(str(int(v)) for v in batch.a[i])}]',
                f'"y":{_fmt_vec(batch.y[i])}',
            ]
            if batch.c is not None:
                parts.append(f'"c":[{",".join(str(int(v)) for v in batch.c[i])}]')
            fh.write("{" + ",".join(parts) + "}\n")
    header = {
        "tau": batch.tau,
        "d_w": batch.d_w,
        "d_l": batch.d_l,
        "mode": batch.mode,
        "censoring": batch.censoring,
    }
    if seed is not None:
        header["seed"] = int(seed)
    meta_path(path).write_text(json.dumps(header, indent=2) + "\n")


def read_jsonl(path):
    path = Path(path)
    header = json.loads(meta_path(path).read_text())
    tau, d_w, d_l = header["tau"], header["d_w"], header["d_l"]
    ws, ls, as_, ys, cs = [], [], [], [], []
    with path.open() as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            ws.append(rec["w"])
            ls.append(rec["l"])
            as_.append(rec["a"])
            ys.append(rec["y"])
            if header["censoring"]:
                cs.append(rec["c"])
    n = len(ws)
    batch = Batch(
        w=np.asarray(ws, dtype=np.float64).reshape(n, d_w),
        l=np.asarray(ls, dtype=np.float64).reshape(n, tau, d_l),
        a=np.asarray(as_, dtype=np.int64),
        y=np.asarray(ys, dtype=np.float64),
        mode=header["mode"],
        c=np.asarray(cs, dtype=np.int64) if header["censoring"] else None,
    )
    return batch, header
