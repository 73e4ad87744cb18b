"""Named deterministic treatment policies.

All policies assign actions from the observed covariate path and the
previously assigned counterfactual actions; see
:func:`tdtmle.data.apply_policy`.
"""

import numpy as np

from tdtmle.data import PolicySpec


def always_treat():
    return PolicySpec(
        label="always-treat",
        rule=lambda traj, t, a_prev: 1,
        vector_rule=lambda batch, t, a_prev: np.ones(batch.n, dtype=np.int64),
    )


def never_treat():
    return PolicySpec(
        label="never-treat",
        rule=lambda traj, t, a_prev: 0,
        vector_rule=lambda batch, t, a_prev: np.zeros(batch.n, dtype=np.int64),
    )


def replay():
    """Re-issues the observed treatment; useful as a diagnostic identity
    policy (the counterfactual world coincides with the observed one)."""
    return PolicySpec(
        label="replay",
        rule=lambda traj, t, a_prev: int(traj.a[t - 1]),
        vector_rule=lambda batch, t, a_prev: batch.a[:, t - 1].copy(),
    )


def _window_stats(l, a_prev, t, h):
    """Running means over the trailing h-window: covariate means include
    the current period, action means cover previous periods only (empty
    window means zero)."""
    lw = l[..., max(0, t - h) : t, :]
    lbar = lw.mean(axis=-2)
    k = min(h, t - 1)
    if k == 0:
        abar = np.zeros(lbar.shape[:-1])
    else:
        abar = a_prev[..., t - 1 - k : t - 1].mean(axis=-1)
    return lbar, abar


def threshold_rule(h=1):
    """Treat when the sigmoid of the covariate/treatment summary signal
    exceeds one half, i.e. when tan(prod_j lbar_j + abar) > 0.

    This is the noise-free version of the treatment mechanism of the
    complex synthetic process; ``h`` is that process's dependency length.
    """

    def rule(traj, t, a_prev):
        lbar, abar = _window_stats(traj.l, np.asarray(a_prev, dtype=np.float64), t, h)
        return int(np.tan(np.prod(lbar) + abar) > 0.0)

    def vector_rule(batch, t, a_prev):
        lbar, abar = _window_stats(batch.l, a_prev.astype(np.float64), t, h)
        return (np.tan(np.prod(lbar, axis=-1) + abar) > 0.0).astype(np.int64)

    return PolicySpec(label="dgp-threshold", rule=rule, vector_rule=vector_rule)


_FACTORIES = {
    "always-treat": always_treat,
    "never-treat": never_treat,
    "replay": replay,
    "dgp-threshold": threshold_rule,
}


def by_name(name, **kwargs):
    """Look up a policy by CLI name."""
    try:
        factory = _FACTORIES[name]
    except KeyError:
        raise ValueError(f"unknown policy {name!r}; choose from {sorted(_FACTORIES)}") from None
    return factory(**kwargs)
