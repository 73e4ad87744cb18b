"""Temporal-difference training of the transformer.

The conditional final-outcome mean at period t is supervised by the
bootstrapped value at t+1 (evaluated under the policy, gradients blocked)
and by the observed outcome at the stopping time; propensities (and
censoring hazards) are supervised by the observed treatments (indicators)
with cross-entropy.  Per subject the masked per-period terms are summed,
then averaged over the minibatch.

Two update schedules are available: ``joint`` (default) sums all periods
into one objective per minibatch; ``backward`` applies one update per
period from the horizon backwards, recomputing bootstrapped targets
before each update.
"""

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from tdtmle import autodiff as ad
from tdtmle.data import CONTINUOUS, OutcomeScaler, apply_policy, rescale
from tdtmle.model import TDHT
from tdtmle.rng import DROPOUT_STREAM, SHUFFLE_STREAM, SPLIT_STREAM, substream

log = logging.getLogger(__name__)


@dataclass
class TrainReport:
    seed: int
    batch_size: int
    n_train: int
    n_val: int
    selected_epoch: int = 0
    epochs_run: int = 0
    wall_seconds: float = 0.0
    train_loss_q: list = field(default_factory=list)
    train_loss_e: list = field(default_factory=list)
    train_loss_c: list = field(default_factory=list)
    val_loss_q: list = field(default_factory=list)
    val_loss_e: list = field(default_factory=list)
    val_loss_c: list = field(default_factory=list)


def td_targets(model, batch, g, a_policy=None):
    """Per-(subject, period) regression targets for the outcome head.

    The target at period t is the bootstrapped value before the period
    t+1 treatment for t < T and the observed terminal outcome at t = T;
    entries past the stopping time are meaningless and must be masked.
    Values are computed without recording on any tape, so no gradient
    flows through the targets.
    """
    v_hat = model.eval_v(batch, g, a_policy=a_policy)
    return v_hat[:, 1:]


def training_loss(model, batch, g, cfg, targets=None, a_policy=None,
                  training=False, rng=None, period=None):
    """Masked training objective on a batch.

    Returns (loss tensor, components dict); components are plain floats
    (per-subject sums averaged over the batch).  ``targets`` may be
    precomputed (frozen) to make the objective a pure function of the
    parameters, which the gradient checks rely on.  ``period`` restricts
    the objective to a single 1-based period (backward schedule).
    """
    if targets is None:
        targets = td_targets(model, batch, g, a_policy=a_policy)
    mask = batch.valid_mask
    if period is not None:
        col = np.zeros_like(mask)
        col[:, period - 1] = 1.0
        mask = mask * col
    n = batch.n

    outs = model.outputs(batch, training=training, rng=rng)
    mask_t = ad.Tensor(mask)

    def masked_mean(elem):
        return ad.scale(ad.vsum(ad.mul(elem, mask_t)), 1.0 / n)

    loss_q = masked_mean(ad.bce(outs["q"], np.clip(targets, 0.0, 1.0)))
    loss_e = masked_mean(ad.bce(outs["pi"], batch.a.astype(np.float64)))
    loss = ad.add(loss_q, ad.scale(loss_e, cfg.alpha))
    parts = {"q": float(loss_q.data), "e": float(loss_e.data), "c": 0.0}
    if model.censoring:
        loss_c = masked_mean(ad.bce(outs["lambda_c"], batch.c.astype(np.float64)))
        loss = ad.add(loss, ad.scale(loss_c, cfg.beta))
        parts["c"] = float(loss_c.data)
    return loss, parts


def _eval_components(model, batch, g, cfg, a_policy):
    loss, parts = training_loss(model, batch, g, cfg, a_policy=a_policy, training=False)
    return parts


def train(dataset, g, cfg, scaler=None):
    """Fit a transformer on a dataset under a policy.

    Splits 70/30 into train/validation, runs ``cfg.epochs`` epochs of
    minibatch updates, and returns (model, report) with the parameters of
    the epoch minimizing the validation loss.  Continuous outcomes are
    rescaled to [0, 1] internally; the scaler is stored on the model, and
    estimates are mapped back when reporting.
    """
    if dataset.n < 10:
        raise ValueError("training requires at least 10 subjects")
    if scaler is None:
        scaler = (
            OutcomeScaler.from_batch(dataset)
            if dataset.mode == CONTINUOUS
            else OutcomeScaler.identity()
        )
    batch = rescale(dataset, scaler) if dataset.mode == CONTINUOUS else dataset

    t_start = time.perf_counter()
    n = batch.n
    perm = substream(cfg.seed, SPLIT_STREAM).permutation(n)
    n_val = int(round(0.3 * n))
    if n_val == 0 or n_val == n:
        raise ValueError(f"degenerate validation split for n={n}")
    val_idx = np.sort(perm[:n_val])
    train_idx = np.sort(perm[n_val:])

    model = TDHT(
        cfg, d_w=batch.d_w, d_l=batch.d_l, tau=batch.tau,
        censoring=batch.censoring, scaler=scaler,
    )
    model.standardize_from(batch, train_idx)
    a_policy = apply_policy(batch, g)

    report = TrainReport(
        seed=cfg.seed, batch_size=cfg.batch_size,
        n_train=len(train_idx), n_val=len(val_idx),
    )
    train_batch = batch.subset(train_idx)
    val_batch = batch.subset(val_idx)
    a_pol_train = a_policy[train_idx]
    a_pol_val = a_policy[val_idx]

    optimizer = ad.Adam(model.parameters(), lr=cfg.lr)
    shuffle_rng = substream(cfg.seed, SHUFFLE_STREAM)
    dropout_rng = substream(cfg.seed, DROPOUT_STREAM)

    best_val = math.inf
    best_state = model.state_dict()
    best_epoch = 0

    for epoch in range(1, cfg.epochs + 1):
        order = shuffle_rng.permutation(len(train_idx))
        sums = {"q": 0.0, "e": 0.0, "c": 0.0}
        n_seen = 0
        for lo in range(0, len(order), cfg.batch_size):
            rows = order[lo : lo + cfg.batch_size]
            sub = train_batch.subset(rows)
            sub_pol = a_pol_train[rows]
            if cfg.td_schedule == "joint":
                parts = _step(model, sub, g, cfg, optimizer, dropout_rng, sub_pol, None)
            else:
                for t in range(batch.tau, 0, -1):
                    parts = _step(model, sub, g, cfg, optimizer, dropout_rng, sub_pol, t)
            for k in sums:
                sums[k] += parts[k] * len(rows)
            n_seen += len(rows)
        report.train_loss_q.append(sums["q"] / n_seen)
        report.train_loss_e.append(sums["e"] / n_seen)
        report.train_loss_c.append(sums["c"] / n_seen)

        val = _eval_components(model, val_batch, g, cfg, a_pol_val)
        report.val_loss_q.append(val["q"])
        report.val_loss_e.append(val["e"])
        report.val_loss_c.append(val["c"])
        score = val["q"] + val["e"] + val["c"]
        if score < best_val:
            best_val = score
            best_state = model.state_dict()
            best_epoch = epoch
        report.epochs_run = epoch

    if cfg.epochs > 0:
        model.load_state_dict(best_state)
    report.selected_epoch = best_epoch
    report.wall_seconds = time.perf_counter() - t_start
    log.info(
        "trained %d epochs in %.1fs; selected epoch %d (val %.5f)",
        report.epochs_run, report.wall_seconds, best_epoch, best_val,
    )
    return model, report


def _step(model, sub, g, cfg, optimizer, dropout_rng, a_policy, period):
    targets = td_targets(model, sub, g, a_policy=a_policy)
    with ad.Tape() as tape:
        loss, parts = training_loss(
            model, sub, g, cfg, targets=targets, training=True,
            rng=dropout_rng, period=period,
        )
    if not math.isfinite(float(loss.data)):
        raise FloatingPointError(
            f"non-finite training loss (components {parts}); "
            "check the learning rate and input scaling"
        )
    ad.backward(tape, loss, params=model.parameters())
    optimizer.step()
    optimizer.zero_grad()
    return parts
