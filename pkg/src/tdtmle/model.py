"""Heterogeneous-token transformer over longitudinal trajectories.

Each observed node becomes one token: baseline covariates first, then per
period the covariates, treatment, optional censoring indicator, and
outcome.  Tokens pass through a type-specific linear embedding, are
concatenated with a learnable type encoding and a learnable positional
(period) encoding, projected to the hidden width, and fed through
causally masked pre-norm decoder blocks.  A joint linear head emits, at
each position, a treatment logit and an outcome logit (plus a censoring
logit when censoring nodes are present):

* the propensity pi_t is the treatment slice read at the L_t position,
* the conditional final-outcome mean q_t is the outcome slice read at the
  last pre-outcome position (A_t, or C_t with censoring),
* the censoring hazard is the censoring slice read at the A_t position.

Tokens after the stopping time are fed with their frozen values; training
masks them out of every loss.
"""

import io
import json
import math
import zipfile
from dataclasses import asdict, dataclass, field

import numpy as np

from tdtmle import autodiff as ad
from tdtmle.autodiff import Tensor
from tdtmle.data import OutcomeScaler, apply_policy
from tdtmle.rng import INIT_STREAM, substream

CHECKPOINT_FORMAT = "tdtmle-checkpoint-v1"

TYPE_W, TYPE_L, TYPE_A, TYPE_C, TYPE_Y = 0, 1, 2, 3, 4


@dataclass(frozen=True)
class ModelConfig:
    """Architecture and optimization settings."""

    embedding_dim: int = 16
    hidden_size: int = 32
    n_layers: int = 2
    n_heads: int = 4
    dropout: float = 0.0
    lr: float = 1e-3
    alpha: float = 0.1  # propensity loss weight
    beta: float = 0.0  # censoring loss weight
    epochs: int = 100
    seed: int = 0
    batch_size: int = 64
    ff_mult: int = 4
    td_schedule: str = "joint"  # "joint" | "backward"

    def __post_init__(self):
        if self.hidden_size % self.n_heads != 0:
            raise ValueError("hidden_size must be divisible by n_heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.alpha < 0.0 or self.beta < 0.0:
            raise ValueError("loss weights alpha and beta must be nonnegative")
        if self.td_schedule not in ("joint", "backward"):
            raise ValueError("td_schedule must be 'joint' or 'backward'")


@dataclass
class SequenceLayout:
    """Token bookkeeping for a horizon (fixed given tau and censoring)."""

    tau: int
    censoring: bool
    types: np.ndarray = field(init=False)  # (S,)
    positions: np.ndarray = field(init=False)  # (S,)
    l_pos: np.ndarray = field(init=False)
    a_pos: np.ndarray = field(init=False)
    c_pos: np.ndarray = field(init=False)
    y_pos: np.ndarray = field(init=False)

    def __post_init__(self):
        k = 4 if self.censoring else 3
        # type ids index the encoding table, so they stay contiguous:
        # W=0, L=1, A=2, then C=3 and Y=4 with censoring, else Y=3
        type_y = TYPE_C + 1 if self.censoring else TYPE_C
        per_period = [TYPE_L, TYPE_A] + ([TYPE_C] if self.censoring else []) + [type_y]
        self.types = np.array([TYPE_W] + per_period * self.tau, dtype=np.intp)
        self.positions = np.array(
            [0] + [t for t in range(1, self.tau + 1) for _ in range(k)], dtype=np.intp
        )
        base = 1 + k * np.arange(self.tau, dtype=np.intp)
        self.l_pos = base
        self.a_pos = base + 1
        self.c_pos = base + 2 if self.censoring else None
        self.y_pos = base + (k - 1)

    @property
    def n_tokens(self):
        return 1 + (4 if self.censoring else 3) * self.tau

    @property
    def q_read_pos(self):
        """Positions whose output carries q_t (last token before Y_t)."""
        return self.c_pos if self.censoring else self.a_pos


@dataclass
class FitOutputs:
    """Per-subject, per-period quantities produced by a fitted model.

    Column j of ``v_hat`` holds the value before the period-(j+1)
    treatment; column T holds the terminal outcome Y_T, which also fills
    all later columns (the process is degenerate there).  Entries with
    t > T in the per-period arrays are ignored by every consumer.
    """

    pi_hat: np.ndarray  # (n, tau)
    q_hat: np.ndarray  # (n, tau)
    v_hat: np.ndarray  # (n, tau + 1)
    valid: np.ndarray  # (n, tau) indicator of t <= T
    stop: np.ndarray  # (n,)
    y_term: np.ndarray  # (n,) Y_T
    a_policy: np.ndarray  # (n, tau) counterfactual actions
    lambda_c_hat: np.ndarray | None = None  # (n, tau)


def _linear_init(rng, fan_in, fan_out):
    std = 1.0 / math.sqrt(max(1, fan_in))
    return rng.normal(0.0, std, size=(fan_in, fan_out))


class TDHT:
    """Transformer fit of propensities and conditional final-outcome means."""

    def __init__(self, config, d_w, d_l, tau, censoring=False, scaler=None):
        self.config = config
        self.d_w = d_w
        self.d_l = d_l
        self.tau = tau
        self.censoring = censoring
        self.scaler = scaler if scaler is not None else OutcomeScaler.identity()
        self.layout = SequenceLayout(tau, censoring)
        self.n_types = 5 if censoring else 4
        self.out_dim = 3 if censoring else 2
        # standardization of covariate tokens (set from the training split)
        self.w_loc = np.zeros(d_w)
        self.w_scale = np.ones(d_w)
        self.l_loc = np.zeros(d_l)
        self.l_scale = np.ones(d_l)
        self.params = {}
        self._init_params()

    # -- parameters ---------------------------------------------------------

    def _add(self, name, value):
        self.params[name] = Tensor(np.ascontiguousarray(value), requires_grad=True)

    def _init_params(self):
        cfg = self.config
        rng = substream(cfg.seed, INIT_STREAM)
        de, dh = cfg.embedding_dim, cfg.hidden_size
        for name, fan_in in (
            ("emb_w", self.d_w),
            ("emb_l", self.d_l),
            ("emb_a", 1),
            ("emb_c", 1 if self.censoring else None),
            ("emb_y", 1),
        ):
            if fan_in is None:
                continue
            self._add(f"{name}.weight", _linear_init(rng, fan_in, de))
            self._add(f"{name}.bias", np.zeros(de))
        self._add("type_enc", rng.normal(0.0, 0.02, size=(self.n_types, de)))
        self._add("pos_enc", rng.normal(0.0, 0.02, size=(self.tau + 1, de)))
        self._add("in_proj.weight", _linear_init(rng, 3 * de, dh))
        self._add("in_proj.bias", np.zeros(dh))
        ff = cfg.ff_mult * dh
        for i in range(cfg.n_layers):
            p = f"block{i}"
            self._add(f"{p}.ln1.gain", np.ones(dh))
            self._add(f"{p}.ln1.bias", np.zeros(dh))
            for proj in ("q", "k", "v"):
                self._add(f"{p}.attn.{proj}.weight", _linear_init(rng, dh, dh))
                self._add(f"{p}.attn.{proj}.bias", np.zeros(dh))
            self._add(f"{p}.attn.out.weight", _linear_init(rng, dh, dh))
            self._add(f"{p}.attn.out.bias", np.zeros(dh))
            self._add(f"{p}.ln2.gain", np.ones(dh))
            self._add(f"{p}.ln2.bias", np.zeros(dh))
            self._add(f"{p}.ff.w1", _linear_init(rng, dh, ff))
            self._add(f"{p}.ff.b1", np.zeros(ff))
            self._add(f"{p}.ff.w2", _linear_init(rng, ff, dh))
            self._add(f"{p}.ff.b2", np.zeros(dh))
        self._add("ln_f.gain", np.ones(dh))
        self._add("ln_f.bias", np.zeros(dh))
        self._add("head.weight", _linear_init(rng, dh, self.out_dim))
        self._add("head.bias", np.zeros(self.out_dim))
        s = self.layout.n_tokens
        self._mask = np.where(
            np.arange(s)[None, :] > np.arange(s)[:, None], -np.inf, 0.0
        )

    def num_params(self):
        return sum(p.data.size for p in self.params.values())

    def parameters(self):
        return list(self.params.values())

    def set_standardization(self, w_loc, w_scale, l_loc, l_scale):
        self.w_loc, self.w_scale = np.asarray(w_loc), np.asarray(w_scale)
        self.l_loc, self.l_scale = np.asarray(l_loc), np.asarray(l_scale)

    def standardize_from(self, batch, rows=None):
        """Set covariate standardization from (a subset of) a batch; only
        pre-stopping covariate entries contribute."""
        rows = np.arange(batch.n) if rows is None else np.asarray(rows)
        w = batch.w[rows]
        self.w_loc = w.mean(axis=0) if w.size else np.zeros(self.d_w)
        self.w_scale = _safe_scale(w.std(axis=0)) if w.size else np.ones(self.d_w)
        mask = batch.valid_mask[rows].astype(bool)
        lv = batch.l[rows][mask]
        self.l_loc = lv.mean(axis=0) if lv.size else np.zeros(self.d_l)
        self.l_scale = _safe_scale(lv.std(axis=0)) if lv.size else np.ones(self.d_l)

    # -- forward ------------------------------------------------------------

    def _embed(self, w, l, a, y, c):
        P = self.params
        n = w.shape[0]
        tau, de = self.tau, self.config.embedding_dim
        ws = (w - self.w_loc) / self.w_scale
        ls = (l - self.l_loc) / self.l_scale
        e_w = ad.reshape(
            ad.linear(Tensor(ws), P["emb_w.weight"], P["emb_w.bias"]), (n, 1, de)
        )
        e_l = ad.linear(Tensor(ls), P["emb_l.weight"], P["emb_l.bias"])
        per = [ad.reshape(e_l, (n, tau, 1, de))]
        for name, vals in (("emb_a", a), ("emb_c", c), ("emb_y", y)):
            if name == "emb_c" and not self.censoring:
                continue
            e = ad.linear(
                Tensor(vals.astype(np.float64)[:, :, None]),
                P[f"{name}.weight"],
                P[f"{name}.bias"],
            )
            per.append(ad.reshape(e, (n, tau, 1, de)))
        period_tokens = ad.reshape(
            ad.concat(per, axis=2), (n, tau * len(per), de)
        )
        tokens = ad.concat([e_w, period_tokens], axis=1)  # (n, S, de)
        enc = ad.concat(
            [
                ad.index_select(P["type_enc"], 0, self.layout.types),
                ad.index_select(P["pos_enc"], 0, self.layout.positions),
            ],
            axis=-1,
        )  # (S, 2de)
        s = self.layout.n_tokens
        h = ad.concat([tokens, ad.expand(enc, (n, s, 2 * de))], axis=-1)
        return ad.linear(h, P["in_proj.weight"], P["in_proj.bias"])

    def _block(self, x, i, n, training, rng):
        P = self.params
        cfg = self.config
        dh, nh = cfg.hidden_size, cfg.n_heads
        dk = dh // nh
        s = self.layout.n_tokens
        pre = f"block{i}"

        def heads(name, scaled=False):
            t = ad.linear(x_norm, P[f"{pre}.attn.{name}.weight"], P[f"{pre}.attn.{name}.bias"])
            if scaled:
                t = ad.scale(t, 1.0 / math.sqrt(dk))
            return ad.transpose(ad.reshape(t, (n, s, nh, dk)), (0, 2, 1, 3))

        x_norm = ad.layer_norm(x, P[f"{pre}.ln1.gain"], P[f"{pre}.ln1.bias"])
        q = heads("q", scaled=True)
        k = heads("k")
        v = heads("v")
        scores = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2)))
        probs = ad.softmax_masked(scores, self._mask)
        probs = ad.dropout(probs, cfg.dropout, rng, training)
        ctx = ad.reshape(ad.transpose(ad.matmul(probs, v), (0, 2, 1, 3)), (n, s, dh))
        attn = ad.linear(ctx, P[f"{pre}.attn.out.weight"], P[f"{pre}.attn.out.bias"])
        x = ad.add(x, ad.dropout(attn, cfg.dropout, rng, training))

        h2 = ad.layer_norm(x, P[f"{pre}.ln2.gain"], P[f"{pre}.ln2.bias"])
        ff = ad.gelu(ad.linear(h2, P[f"{pre}.ff.w1"], P[f"{pre}.ff.b1"]))
        ff = ad.linear(ff, P[f"{pre}.ff.w2"], P[f"{pre}.ff.b2"])
        return ad.add(x, ad.dropout(ff, cfg.dropout, rng, training))

    def _logits(self, w, l, a, y, c, training=False, rng=None):
        """(n, S, out_dim) head logits over the full token sequence."""
        n = w.shape[0]
        x = self._embed(w, l, a, y, c)
        blocks = [x]
        for i in range(self.config.n_layers):
            x = self._block(x, i, n, training, rng)
            blocks.append(x)
        x = ad.layer_norm(x, self.params["ln_f.gain"], self.params["ln_f.bias"])
        out = ad.linear(x, self.params["head.weight"], self.params["head.bias"])
        if not np.all(np.isfinite(out.data)):
            for i, b in enumerate(blocks):
                if not np.all(np.isfinite(b.data)):
                    where = "embedding" if i == 0 else f"layer {i - 1}"
                    raise FloatingPointError(f"non-finite activations after {where}")
            raise FloatingPointError("non-finite activations in the output head")
        return out

    def outputs(self, batch, actions=None, training=False, rng=None):
        """Propensity / outcome-mean (/ censoring-hazard) tensors.

        ``actions`` overrides the treatment tokens (counterfactual
        evaluation); outputs are read causally so entries at period t only
        see tokens up to their own position.
        """
        lay = self.layout
        a = batch.a if actions is None else actions
        c = batch.c if self.censoring else None
        if self.censoring and c is None:
            raise ValueError("model was built with censoring nodes; batch has none")
        logits = self._logits(batch.w, batch.l, a, batch.y, c, training, rng)
        tau = self.tau

        def read(pos, slot):
            n = logits.shape[0]
            sel = ad.index_select(logits, 1, pos)
            return ad.sigmoid(ad.reshape(ad.narrow(sel, -1, slot, 1), (n, tau)))

        out = {"pi": read(lay.l_pos, 0), "q": read(lay.q_read_pos, self.out_dim - 1)}
        if self.censoring:
            out["lambda_c"] = read(lay.a_pos, 1)
        return out

    def eval_v(self, batch, g, eps=0.0, a_policy=None):
        """Values under the policy: q read on the fully action-substituted
        sequence, fluctuated by ``eps`` on the logit scale; the terminal
        column is the observed Y_T, never fluctuated."""
        if a_policy is None:
            a_policy = apply_policy(batch, g)
        cf = batch.with_actions(a_policy)
        q_cf = self.outputs(cf)["q"].data
        v = fluctuate(np.clip(q_cf, ad.EPS_PROB, 1.0 - ad.EPS_PROB), eps)
        n, tau = batch.n, batch.tau
        v_hat = np.empty((n, tau + 1))
        v_hat[:, :tau] = v
        v_hat[:, tau] = 0.0
        cols = np.arange(tau + 1)[None, :]
        y_term = batch.final_outcome
        return np.where(cols < batch.stop[:, None], v_hat, y_term[:, None])

    def predict(self, batch, g):
        """FitOutputs on a batch: observed-sequence propensities and
        outcome means plus policy-substituted values."""
        a_policy = apply_policy(batch, g)
        outs = self.outputs(batch)
        clip = lambda x: np.clip(x, ad.EPS_PROB, 1.0 - ad.EPS_PROB)
        return FitOutputs(
            pi_hat=clip(outs["pi"].data),
            q_hat=clip(outs["q"].data),
            v_hat=self.eval_v(batch, g, a_policy=a_policy),
            valid=batch.valid_mask,
            stop=batch.stop.copy(),
            y_term=batch.final_outcome,
            a_policy=a_policy,
            lambda_c_hat=clip(outs["lambda_c"].data) if self.censoring else None,
        )

    # -- persistence --------------------------------------------------------

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state_dict(self, state):
        for name, value in state.items():
            p = self.params[name]
            if p.data.shape != value.shape:
                raise ValueError(f"parameter {name} has shape {value.shape}, "
                                 f"expected {p.data.shape}")
            p.data = np.ascontiguousarray(value, dtype=np.float64)

    def save(self, path):
        meta = {
            "format": CHECKPOINT_FORMAT,
            "config": asdict(self.config),
            "d_w": self.d_w,
            "d_l": self.d_l,
            "tau": self.tau,
            "censoring": self.censoring,
            "scaler": {"lo": self.scaler.lo, "hi": self.scaler.hi},
        }
        arrays = {f"param/{k}": v.data for k, v in self.params.items()}
        arrays["std/w_loc"] = self.w_loc
        arrays["std/w_scale"] = self.w_scale
        arrays["std/l_loc"] = self.l_loc
        arrays["std/l_scale"] = self.l_scale
        buf = io.BytesIO()
        np.savez(buf, **arrays)
        with zipfile.ZipFile(path, "w") as zf:
            zf.writestr("meta.json", json.dumps(meta, indent=2))
            zf.writestr("arrays.npz", buf.getvalue())

    @classmethod
    def load(cls, path):
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read("meta.json"))
            if meta.get("format") != CHECKPOINT_FORMAT:
                raise ValueError(f"unrecognized checkpoint format {meta.get('format')!r}")
            with zf.open("arrays.npz") as fh:
                arrays = dict(np.load(io.BytesIO(fh.read())))
        cfg = ModelConfig(**meta["config"])
        model = cls(
            cfg,
            d_w=meta["d_w"],
            d_l=meta["d_l"],
            tau=meta["tau"],
            censoring=meta["censoring"],
            scaler=OutcomeScaler(**meta["scaler"]),
        )
        model.load_state_dict(
            {k[len("param/") :]: v for k, v in arrays.items() if k.startswith("param/")}
        )
        model.set_standardization(
            arrays["std/w_loc"], arrays["std/w_scale"],
            arrays["std/l_loc"], arrays["std/l_scale"],
        )
        return model


def fluctuate(q, eps):
    """Logit-shift update sigma(logit(q) + eps); q must lie in (0, 1)."""
    if eps == 0.0:
        return np.asarray(q, dtype=np.float64).copy()
    logit = np.log(q) - np.log1p(-np.asarray(q, dtype=np.float64))
    out = logit + eps
    return np.where(out >= 0, 1.0 / (1.0 + np.exp(-out)), np.exp(out) / (1.0 + np.exp(out)))


def _safe_scale(s):
    s = np.asarray(s, dtype=np.float64).copy()
    s[s < 1e-12] = 1.0
    return s
