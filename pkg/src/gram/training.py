"""Trainers: end-to-end backprop, accumulated alternating training with a
pseudo-target cache, two content-free baselines, optimizers, and the
gradient-equivalence verifier.

Training modes
--------------
``e2e``
    One joint graph per batch: the content encoder runs once per
    interaction *occurrence* and both modules step simultaneously.
``gram``
    Alternating: the collaborative filter trains on item representations
    held as grad-enabled leaves. Each step stores the pseudo-target
    h~ = h - dL/dh (plain subtraction: SGD on the representation with
    learning rate exactly 1). Every ``accum_steps`` batches the encoder
    regresses onto the accumulated pseudo-targets and the cache is
    cleared. Within a window a re-encountered item reuses its carried
    h~ as the representation, so the encoder runs once per *distinct*
    item per window.
``no_content``
    A trainable item-embedding table replaces the encoder entirely.
``no_finetune``
    Encoder outputs are computed once at init and frozen as CF inputs.

With ``accum_steps == 1`` the encoder gradient of the regression loss
equals the end-to-end encoder gradient at equal parameters, so the two
trainers walk the same trajectory; ``verify_equivalence`` measures this.
Larger windows trade representation staleness for fewer encoder calls
and make no equivalence claim.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Tensor
from .dataset import Batch, Dataset, UserSequence, batch_iter, cold_start_split, split_users
from .instrument import (
    ActivationAccountant,
    CostCounters,
    PhaseTimer,
    e2e_ce_flops_per_batch,
    gram_ce_flops_per_batch,
)
from .metrics import ScoredLabel, UndefinedMetricError, auc, cs_auc, group_by, mrr, ndcg_at_k
from .model import (
    CeParams,
    CfParams,
    ModelConfig,
    batch_scores,
    batch_sequence_loss,
    ce_encode,
    init_params,
)
from .report import RunReport

MODES = ("e2e", "gram", "no_content", "no_finetune")
LATENCY_PRESETS = ("1S", "10S", "0.5E", "1E")

# Training-phase timer keys; eval time is tracked but not part of the
# run's wall_clock_ns counter.
_TRAIN_PHASES = ("e2e", "cf", "ce")


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


class NumericalAbort(RuntimeError):
    """Training produced non-finite values; the message says where."""


# ---------------------------------------------------------------------------
# Optimizers
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    """One optimizer: update rule, learning-rate schedule, moment buffers.

    ``kind`` is "sgd" or "adam". The "noam" schedule is
    lr * model_dim^-0.5 * min(step^-0.5, step * warmup^-1.5), which peaks
    at step == warmup; "constant" ignores the step count.
    """

    kind: str = "adam"
    lr: float = 1e-4
    schedule: str = "constant"
    model_dim: int = 16
    warmup: int = 400
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def validate(self) -> "OptimizerState":
        if self.kind not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer kind {self.kind!r}")
        if self.schedule not in ("constant", "noam"):
            raise ConfigError(f"unknown lr schedule {self.schedule!r}")
        if self.lr < 0:
            raise ConfigError("learning rate must be non-negative")
        if self.warmup < 1 or self.model_dim < 1:
            raise ConfigError("warmup and model_dim must be positive")
        return self

    def fresh(self) -> "OptimizerState":
        """A zeroed copy (step 0, empty moments) of the same settings."""
        return replace(self, step=0, m={}, v={})

    def lr_at(self, step: int) -> float:
        if self.schedule == "noam":
            return self.lr * self.model_dim ** -0.5 * min(step ** -0.5, step * self.warmup ** -1.5)
        return self.lr


def optimizer_apply(opt: OptimizerState, params: dict, grads: dict) -> dict:
    """One optimizer step over named parameters.

    ``params`` maps name -> leaf Tensor, ``grads`` maps name -> ndarray;
    parameters without a gradient entry are left untouched. Parameter
    arrays are replaced, not mutated, so consumed graphs stay valid.
    """
    opt.step += 1
    lr = opt.lr_at(opt.step)
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if np.shape(g) != p.data.shape:
            raise ConfigError(
                f"gradient shape {np.shape(g)} does not match parameter {name} {p.data.shape}")
        if opt.kind == "sgd":
            p.data = p.data - lr * g
            continue
        m = opt.m.get(name)
        if m is None:
            m = opt.m[name] = np.zeros_like(p.data)
            opt.v[name] = np.zeros_like(p.data)
        v = opt.v[name]
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * (g * g)
        m_hat = m / (1.0 - opt.beta1 ** opt.step)
        v_hat = v / (1.0 - opt.beta2 ** opt.step)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + opt.eps)
    return params


def clip_by_global_norm(grads: dict, max_norm: float) -> dict:
    """Scale the whole gradient set so its global L2 norm is <= max_norm."""
    total = math.sqrt(sum(float(np.sum(np.square(g))) for g in grads.values()))
    if total > max_norm > 0.0:
        s = max_norm / total
        return {k: g * s for k, g in grads.items()}
    return grads


def _named_grads(named: dict, gmap: dict) -> dict:
    """Pull this parameter set's gradients out of a backward() result."""
    out = {}
    for name, p in named.items():
        g = gmap.get(p)
        if g is not None:
            out[name] = g.data
    return out


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------


def seed_streams(master: int) -> dict:
    """Independent integer seeds derived from one master seed.

    Fixed derivation order (documented so runs can be dissected):
    data, init, shuffle, split, val.
    """
    words = np.random.SeedSequence(master).generate_state(5)
    names = ("data", "init", "shuffle", "split", "val")
    return {k: int(w) for k, w in zip(names, words)}


@dataclass
class TrainConfig:
    """Everything a run needs besides the dataset itself.

    ``seed`` is the master seed; init / shuffle / split streams derive
    from it via ``seed_streams`` so different modes see identical splits
    and initial parameters. ``ce_batch_size`` 0 means the whole cache is
    regressed in a single optimizer step.
    """

    model: ModelConfig = field(default_factory=ModelConfig)
    accum_steps: int = 1           # window size N; 1 = single-step
    latency: str | None = None     # optional preset overriding accum_steps
    cf_batch_size: int = 16
    ce_batch_size: int = 8
    ce_passes: int = 1             # regression passes over the cache per window
    recompute_encodings: bool = False
    opt_ce: OptimizerState = field(default_factory=OptimizerState)
    opt_cf: OptimizerState = field(default_factory=OptimizerState)
    clip_norm: float | None = None
    max_epochs: int = 50
    patience: int = 10
    val_frac: float = 0.15
    test_frac: float = 0.2
    # cold-start AUC is a noisy statistic of few held-out items; 24 gives
    # it enough pairs to be a meaningful chance-level check
    n_cs_items: int = 24
    eval_batch_size: int = 64
    precision: str = "f64"
    seed: int = 2024

    def validate(self) -> "TrainConfig":
        self.model.validate()
        self.opt_ce.validate()
        self.opt_cf.validate()
        if self.accum_steps < 1:
            raise ConfigError("accum_steps must be >= 1")
        if self.latency is not None and self.latency not in LATENCY_PRESETS:
            raise ConfigError(f"unknown latency preset {self.latency!r}; "
                              f"expected one of {LATENCY_PRESETS}")
        if self.cf_batch_size < 1 or self.eval_batch_size < 1:
            raise ConfigError("batch sizes must be positive")
        if self.ce_batch_size < 0:
            raise ConfigError("ce_batch_size must be >= 0 (0 = whole cache)")
        if self.ce_passes < 1:
            raise ConfigError("ce_passes must be >= 1")
        if not (0.0 < self.val_frac < 1.0 and 0.0 < self.test_frac < 1.0):
            raise ConfigError("val_frac and test_frac must lie in (0, 1)")
        if self.max_epochs < 1 or self.patience < 0:
            raise ConfigError("max_epochs must be >= 1 and patience >= 0")
        if self.n_cs_items < 1:
            raise ConfigError("n_cs_items must be positive")
        if self.precision not in ("f64", "f32"):
            raise ConfigError(f"precision must be f64 or f32, got {self.precision!r}")
        return self


def accumulation_latency(preset: str, steps_per_epoch: int) -> int:
    """Window size N for a named latency preset."""
    if steps_per_epoch < 1:
        raise ConfigError("steps_per_epoch must be positive")
    if preset == "1S":
        return 1
    if preset == "10S":
        return 10
    if preset == "0.5E":
        return math.ceil(steps_per_epoch / 2)
    if preset == "1E":
        return steps_per_epoch
    raise ConfigError(f"unknown latency preset {preset!r}")


# ---------------------------------------------------------------------------
# Trainer state
# ---------------------------------------------------------------------------


@dataclass
class CacheEntry:
    h: np.ndarray        # representation the CF graph saw this window
    h_tilde: np.ndarray  # h minus the accumulated loss gradient
    first_step: int
    touch_count: int = 1


class PseudoTargetCache:
    """Item-keyed pseudo-target store for one accumulation window.

    Entries keep first-touch order; the regression phase walks them in
    that order and ``clear`` empties the cache exactly once per window.
    """

    def __init__(self):
        self.entries: dict[int, CacheEntry] = {}

    def __len__(self):
        return len(self.entries)

    def __contains__(self, item_id):
        return item_id in self.entries

    def get(self, item_id: int) -> CacheEntry:
        return self.entries[item_id]

    def put(self, item_id: int, entry: CacheEntry) -> None:
        self.entries[item_id] = entry

    def item_ids(self) -> list:
        return list(self.entries)

    def clear(self) -> None:
        self.entries.clear()


@dataclass
class TrainerState:
    """Mutable state of one training run (confined to one thread)."""

    mode: str
    cfg: TrainConfig
    ce: CeParams | None
    cf: CfParams
    opt_ce: OptimizerState
    opt_cf: OptimizerState
    item_tokens: dict
    accum_steps: int = 1
    t: int = 0                      # batches processed so far
    cache: PseudoTargetCache = field(default_factory=PseudoTargetCache)
    counters: CostCounters = field(default_factory=CostCounters)
    accountant: ActivationAccountant = field(default_factory=ActivationAccountant)
    timer: PhaseTimer = field(default_factory=PhaseTimer)
    # no_content extras
    item_embedding: Tensor | None = None
    embed_row: dict | None = None
    # no_finetune extras
    frozen_enc: Tensor | None = None
    frozen_row: dict | None = None

    def train_wall_ns(self) -> int:
        return sum(self.timer.totals_ns.get(k, 0) for k in _TRAIN_PHASES)


def init_trainer(dataset: Dataset, mode: str, cfg: TrainConfig,
                 accum_steps: int | None = None) -> TrainerState:
    """Build a TrainerState: parameters, optimizers, mode-specific extras.

    ``dataset`` supplies the item universe (tokens for every item the run
    may ever encode, including evaluation-only items).
    """
    cfg.validate()
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}; expected one of {MODES}")
    seeds = seed_streams(cfg.seed)
    ce, cf = init_params(cfg.model, seeds["init"])
    state = TrainerState(
        mode=mode, cfg=cfg, ce=ce, cf=cf,
        opt_ce=cfg.opt_ce.fresh(), opt_cf=cfg.opt_cf.fresh(),
        item_tokens={it.item_id: it.tokens for it in dataset.items},
        accum_steps=accum_steps if accum_steps is not None else cfg.accum_steps,
    )
    if state.accum_steps < 1:
        raise ConfigError("accumulation window must be >= 1 step")
    ids = sorted(state.item_tokens)
    if mode == "no_content":
        # Xavier-style table; rows of items never seen in training stay at
        # their random init, which is the point of this baseline.
        rng = np.random.default_rng([seeds["init"], 1])
        a = math.sqrt(6.0 / (len(ids) + cfg.model.d))
        table = rng.uniform(-a, a, size=(len(ids), cfg.model.d))
        state.item_embedding = Tensor(table.astype(ad.default_dtype()), grad_enabled=True)
        state.embed_row = {i: k for k, i in enumerate(ids)}
        state.ce = None
    elif mode == "no_finetune":
        with ad.no_grad():
            rows = [ce_encode(state.item_tokens[i], ce).data for i in ids]
        state.frozen_enc = Tensor(np.concatenate(rows, axis=0))
        state.frozen_row = {i: k for k, i in enumerate(ids)}
        state.counters.ce_forward_calls += len(ids)
    return state


def _require_mode(state: TrainerState, mode: str) -> None:
    if state.mode != mode:
        raise ConfigError(f"{mode}_step called on a {state.mode!r} trainer")


# ---------------------------------------------------------------------------
# Steps
# ---------------------------------------------------------------------------


def e2e_step(batch: Batch, state: TrainerState) -> dict:
    """One joint step: encoder forward per interaction occurrence, a
    single backward, simultaneous update of both modules."""
    _require_mode(state, "e2e")
    c = state.counters
    with state.timer.measure("e2e"), ad.track_activations(state.accountant):
        try:
            rows, rewritten, lens = [], [], []
            occ = 0
            for u in batch.users:
                renumbered = []
                for item_id, resp in u.interactions:
                    tokens = state.item_tokens[item_id]
                    rows.append(ce_encode(tokens, state.ce))
                    lens.append(min(len(tokens), state.ce.cfg.max_token_len))
                    renumbered.append((occ, resp))
                    occ += 1
                rewritten.append(UserSequence(u.user_id, tuple(renumbered)))
            # each occurrence owns an encoding row, so gradients flow into
            # the encoder once per occurrence
            enc = ad.concat(rows, axis=0)
            loss, n_preds = batch_sequence_loss(
                rewritten, {k: k for k in range(occ)}, enc, state.cf)
            gmap = ad.backward(loss)
        except NonFiniteError as e:
            raise NumericalAbort(f"e2e step {state.t}: {e}") from e
        grads = _named_grads(state.ce.named(), gmap)
        grads.update(_named_grads(state.cf.named(), gmap))
        if state.cfg.clip_norm is not None:
            grads = clip_by_global_norm(grads, state.cfg.clip_norm)
        optimizer_apply(state.opt_ce, state.ce.named(), grads)
        optimizer_apply(state.opt_cf, state.cf.named(), grads)
    c.ce_forward_calls += occ
    c.ce_backward_calls += occ
    c.cf_forward_calls += len(batch.users)
    c.flop_estimate += e2e_ce_flops_per_batch(
        len(batch.users), occ / len(batch.users), float(np.mean(lens)), state.ce.cfg.d)
    c.activation_elements_peak = state.accountant.peak
    state.t += 1
    return {"loss": loss.item(), "n_predictions": n_preds, "step": state.t,
            "grads_applied": len(grads)}


def gram_step(batch: Batch, state: TrainerState) -> dict:
    """One accumulated step.

    In order: (1) encode cache-missing items (hits reuse the carried
    pseudo-target as their representation), (2) one backward through the
    CF graph over the batch, (3) CF optimizer step, (4) store
    h~ = h - dL/dh per item, (5) advance the clock and, at a window
    boundary, regress the encoder onto the cached pseudo-targets and
    clear the cache.
    """
    _require_mode(state, "gram")
    c = state.counters
    cache = state.cache
    with state.timer.measure("cf"), ad.track_activations(state.accountant):
        try:
            leaves = {}
            for item_id in batch.unique_items:
                if item_id in cache and not state.cfg.recompute_encodings:
                    entry = cache.get(item_id)
                    entry.h = entry.h_tilde      # carried representation
                    entry.touch_count += 1
                else:
                    with ad.no_grad():
                        h = ce_encode(state.item_tokens[item_id], state.ce).data
                    c.ce_forward_calls += 1
                    if item_id in cache:         # recompute-encodings refresh
                        entry = cache.get(item_id)
                        entry.h = h
                        entry.touch_count += 1
                    else:
                        cache.put(item_id, CacheEntry(
                            h=h, h_tilde=h, first_step=state.t))
                leaves[item_id] = Tensor(cache.get(item_id).h, grad_enabled=True)
            order = list(batch.unique_items)
            enc = ad.concat([leaves[i] for i in order], axis=0)
            row_of = {item_id: k for k, item_id in enumerate(order)}
            loss, n_preds = batch_sequence_loss(batch.users, row_of, enc, state.cf)
            gmap = ad.backward(loss)
        except NonFiniteError as e:
            raise NumericalAbort(f"gram step {state.t}: {e}") from e
        cf_grads = _named_grads(state.cf.named(), gmap)
        if state.cfg.clip_norm is not None:
            cf_grads = clip_by_global_norm(cf_grads, state.cfg.clip_norm)
        optimizer_apply(state.opt_cf, state.cf.named(), cf_grads)
        for item_id, leaf in leaves.items():
            entry = cache.get(item_id)
            g = gmap.get(leaf)
            h_tilde = entry.h - g.data if g is not None else entry.h
            if not np.all(np.isfinite(h_tilde)):
                raise NumericalAbort(
                    f"gram step {state.t}: pseudo-target for item {item_id} is non-finite")
            entry.h_tilde = h_tilde
    c.cf_forward_calls += len(batch.users)
    state.t += 1
    report = {"loss": loss.item(), "n_predictions": n_preds, "step": state.t,
              "cache_size": len(cache), "window_closed": False}
    if state.t % state.accum_steps == 0:
        with state.timer.measure("ce"), ad.track_activations(state.accountant):
            report.update(_ce_update_phase(state))
        report["window_closed"] = True
    c.activation_elements_peak = state.accountant.peak
    return report


def _ce_update_phase(state: TrainerState) -> dict:
    """Regress the encoder onto the cached pseudo-targets, then clear.

    One optimizer step per mini-batch of ``ce_batch_size`` items (0 =
    whole cache at once), ``ce_passes`` passes over the cache.
    """
    cache = state.cache
    ids = cache.item_ids()
    if not ids:
        return {"ce_items": 0, "ce_opt_steps": 0}
    bs = state.cfg.ce_batch_size or len(ids)
    opt_steps = 0
    last_loss = 0.0
    for _ in range(state.cfg.ce_passes):
        for lo in range(0, len(ids), bs):
            chunk = ids[lo:lo + bs]
            try:
                outs = [ce_encode(state.item_tokens[i], state.ce) for i in chunk]
                pred = ad.concat(outs, axis=0) if len(outs) > 1 else outs[0]
                target = Tensor(np.concatenate(
                    [cache.get(i).h_tilde for i in chunk], axis=0))
                ploss = ad.mse_half(target, pred)
                gmap = ad.backward(ploss)
            except NonFiniteError as e:
                raise NumericalAbort(
                    f"encoder regression at step {state.t} "
                    f"(items {chunk[0]}..{chunk[-1]}): {e}") from e
            grads = _named_grads(state.ce.named(), gmap)
            if state.cfg.clip_norm is not None:
                grads = clip_by_global_norm(grads, state.cfg.clip_norm)
            optimizer_apply(state.opt_ce, state.ce.named(), grads)
            state.counters.ce_backward_calls += len(chunk)
            opt_steps += 1
            last_loss = ploss.item()
    lens = [min(len(state.item_tokens[i]), state.ce.cfg.max_token_len) for i in ids]
    state.counters.flop_estimate += gram_ce_flops_per_batch(
        len(ids), float(np.mean(lens)), state.ce.cfg.d)
    n_items = len(ids)
    cache.clear()
    return {"ce_items": n_items, "ce_opt_steps": opt_steps, "pseudo_loss": last_loss}


def no_content_step(batch: Batch, state: TrainerState) -> dict:
    """Baseline step: gather rows of the trainable item table instead of
    running any encoder; the table trains on the CE optimizer."""
    _require_mode(state, "no_content")
    with state.timer.measure("cf"), ad.track_activations(state.accountant):
        try:
            rows = np.array([state.embed_row[i] for i in batch.unique_items])
            enc = ad.gather(state.item_embedding, rows)
            row_of = {item_id: k for k, item_id in enumerate(batch.unique_items)}
            loss, n_preds = batch_sequence_loss(batch.users, row_of, enc, state.cf)
            gmap = ad.backward(loss)
        except NonFiniteError as e:
            raise NumericalAbort(f"no_content step {state.t}: {e}") from e
        cf_grads = _named_grads(state.cf.named(), gmap)
        table = {"item_embedding": state.item_embedding}
        table_grads = _named_grads(table, gmap)
        if state.cfg.clip_norm is not None:
            cf_grads = clip_by_global_norm(cf_grads, state.cfg.clip_norm)
            table_grads = clip_by_global_norm(table_grads, state.cfg.clip_norm)
        optimizer_apply(state.opt_cf, state.cf.named(), cf_grads)
        optimizer_apply(state.opt_ce, table, table_grads)
    state.counters.cf_forward_calls += len(batch.users)
    state.counters.activation_elements_peak = state.accountant.peak
    state.t += 1
    return {"loss": loss.item(), "n_predictions": n_preds, "step": state.t}


def no_finetune_step(batch: Batch, state: TrainerState) -> dict:
    """Baseline step: frozen init-time encodings feed the CF; only the CF
    trains."""
    _require_mode(state, "no_finetune")
    with state.timer.measure("cf"), ad.track_activations(state.accountant):
        try:
            rows = np.array([state.frozen_row[i] for i in batch.unique_items])
            enc = Tensor(state.frozen_enc.data[rows])
            row_of = {item_id: k for k, item_id in enumerate(batch.unique_items)}
            loss, n_preds = batch_sequence_loss(batch.users, row_of, enc, state.cf)
            gmap = ad.backward(loss)
        except NonFiniteError as e:
            raise NumericalAbort(f"no_finetune step {state.t}: {e}") from e
        cf_grads = _named_grads(state.cf.named(), gmap)
        if state.cfg.clip_norm is not None:
            cf_grads = clip_by_global_norm(cf_grads, state.cfg.clip_norm)
        optimizer_apply(state.opt_cf, state.cf.named(), cf_grads)
    state.counters.cf_forward_calls += len(batch.users)
    state.counters.activation_elements_peak = state.accountant.peak
    state.t += 1
    return {"loss": loss.item(), "n_predictions": n_preds, "step": state.t}


_STEP_FNS = {"e2e": e2e_step, "gram": gram_step,
             "no_content": no_content_step, "no_finetune": no_finetune_step}


def train_step(batch: Batch, state: TrainerState) -> dict:
    return _STEP_FNS[state.mode](batch, state)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def eval_encodings(state: TrainerState):
    """(row_of, enc) giving each known item's current representation.

    For encoder-bearing modes this re-encodes every item with the current
    parameters (what deployment would serve); baselines use their table /
    frozen matrix. Never touches the cost counters.
    """
    if state.mode == "no_content":
        return state.embed_row, state.item_embedding
    if state.mode == "no_finetune":
        return state.frozen_row, state.frozen_enc
    ids = sorted(state.item_tokens)
    with ad.no_grad():
        rows = [ce_encode(state.item_tokens[i], state.ce).data for i in ids]
    return {i: k for k, i in enumerate(ids)}, Tensor(np.concatenate(rows, axis=0))


def scored_pairs(users, row_of, enc: Tensor, cf: CfParams, batch_size: int = 64):
    """Model scores for every predictable position, grouped per user."""
    pairs = []
    base = 0
    for b in batch_iter(users, batch_size):
        probs, labels, item_ids, user_idx = batch_scores(b.users, row_of, enc, cf)
        pairs.extend(
            ScoredLabel(float(s), int(y), item_id=int(i), group_id=base + int(u))
            for s, y, i, u in zip(probs, labels, item_ids, user_idx))
        base += len(b.users)
    return pairs


def evaluate(state: TrainerState, users, cs_items=None) -> dict:
    """AUC (optionally cold-start AUC) plus per-user ranking metrics."""
    row_of, enc = eval_encodings(state)
    pairs = scored_pairs(users, row_of, enc, state.cf, state.cfg.eval_batch_size)
    out = {"auc": auc(pairs), "n_predictions": len(pairs)}
    if cs_items is not None:
        try:
            out["cs_auc"] = cs_auc(pairs, cs_items)
        except UndefinedMetricError:
            out["cs_auc"] = None
    groups = [g for g in group_by(pairs) if any(p.label == 1 for p in g)]
    if groups:
        out["mrr"] = mrr(groups)
        out["ndcg@5"] = ndcg_at_k(groups, 5)
        out["ndcg@10"] = ndcg_at_k(groups, 10)
    return out


# ---------------------------------------------------------------------------
# The training loop
# ---------------------------------------------------------------------------


def _snapshot(state: TrainerState) -> dict:
    params = {}
    if state.ce is not None:
        params.update({f"ce.{k}": v.data.copy() for k, v in state.ce.named().items()})
    params.update({f"cf.{k}": v.data.copy() for k, v in state.cf.named().items()})
    if state.item_embedding is not None:
        params["item_embedding"] = state.item_embedding.data.copy()
    return params


def _restore(state: TrainerState, snap: dict) -> None:
    if state.ce is not None:
        for k, v in state.ce.named().items():
            v.data = snap[f"ce.{k}"].copy()
    for k, v in state.cf.named().items():
        v.data = snap[f"cf.{k}"].copy()
    if state.item_embedding is not None:
        state.item_embedding.data = snap["item_embedding"].copy()


def _config_echo(cfg: TrainConfig, mode: str, accum_steps: int) -> dict:
    m = cfg.model
    return {
        "mode": mode,
        "seed": cfg.seed,
        "precision": cfg.precision,
        "model": {"d": m.d, "d_ff": m.d_ff, "l_ce": m.l_ce, "d_h": m.d_h,
                  "vocab_size": m.vocab_size, "max_token_len": m.max_token_len,
                  "max_interactions": m.max_interactions,
                  "cf_variant": m.cf_variant,
                  "positional_encoding": m.positional_encoding},
        "accum_steps": accum_steps,
        "latency": cfg.latency,
        "cf_batch_size": cfg.cf_batch_size,
        "ce_batch_size": cfg.ce_batch_size,
        "ce_passes": cfg.ce_passes,
        "recompute_encodings": cfg.recompute_encodings,
        "opt_ce": {"kind": cfg.opt_ce.kind, "lr": cfg.opt_ce.lr,
                   "schedule": cfg.opt_ce.schedule, "warmup": cfg.opt_ce.warmup},
        "opt_cf": {"kind": cfg.opt_cf.kind, "lr": cfg.opt_cf.lr,
                   "schedule": cfg.opt_cf.schedule, "warmup": cfg.opt_cf.warmup},
        "clip_norm": cfg.clip_norm,
        "max_epochs": cfg.max_epochs,
        "patience": cfg.patience,
        "val_frac": cfg.val_frac,
        "test_frac": cfg.test_frac,
        "n_cs_items": cfg.n_cs_items,
    }


def train(dataset: Dataset, mode: str, cfg: TrainConfig):
    """Full run: split, epoch loop with validation-AUC early stopping,
    best-checkpoint restore, final test metrics.

    Returns (RunReport, TrainerState); the state carries the restored
    best parameters for checkpointing.
    """
    cfg.validate()
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}; expected one of {MODES}")
    seeds = seed_streams(cfg.seed)
    prev_dtype = ad.default_dtype()
    ad.set_default_dtype(np.float64 if cfg.precision == "f64" else np.float32)
    try:
        train_ds, test_ds, cs_items = cold_start_split(
            dataset, cfg.n_cs_items, seeds["split"], cfg.test_frac)
        train_users, val_users = split_users(train_ds.users, cfg.val_frac, seeds["val"])
        steps_per_epoch = math.ceil(len(train_users) / cfg.cf_batch_size)
        if cfg.latency is not None:
            accum = accumulation_latency(cfg.latency, steps_per_epoch)
        else:
            accum = cfg.accum_steps
        if mode == "gram" and accum > steps_per_epoch:
            raise ConfigError(
                f"accumulation window {accum} exceeds {steps_per_epoch} steps per epoch")

        state = init_trainer(dataset, mode, cfg, accum_steps=accum)
        history = []
        best_auc, best_epoch, bad_epochs = -1.0, -1, 0
        best_params = _snapshot(state)
        for epoch in range(cfg.max_epochs):
            loss_sum, pred_sum = 0.0, 0
            for batch in batch_iter(train_users, cfg.cf_batch_size,
                                    shuffle_seed=[seeds["shuffle"], epoch]):
                rep = train_step(batch, state)
                loss_sum += rep["loss"]
                pred_sum += rep["n_predictions"]
            with state.timer.measure("eval"):
                val = evaluate(state, val_users)
            history.append({
                "epoch": epoch,
                "train_loss": loss_sum / max(1, pred_sum),
                "val_auc": val["auc"],
                "ce_forward_calls": state.counters.ce_forward_calls,
                "wall_ns": state.train_wall_ns(),
            })
            if val["auc"] > best_auc:
                best_auc, best_epoch, bad_epochs = val["auc"], epoch, 0
                best_params = _snapshot(state)
            else:
                bad_epochs += 1
                if bad_epochs >= cfg.patience > 0:
                    break
        _restore(state, best_params)

        with state.timer.measure("eval"):
            final = evaluate(state, test_ds.users, cs_items=cs_items)
        final["val_auc"] = best_auc
        c = state.counters
        c.wall_clock_ns = state.train_wall_ns()
        c.activation_elements_peak = state.accountant.peak
        report = RunReport(
            mode=mode,
            config=_config_echo(cfg, mode, accum),
            history=history,
            final_metrics=final,
            counters=c.as_dict(),
            speed={"phase_wall_ns": dict(state.timer.totals_ns)},
            best_epoch=best_epoch,
        )
        return report, state
    finally:
        ad.set_default_dtype(prev_dtype)


# ---------------------------------------------------------------------------
# Equivalence verification
# ---------------------------------------------------------------------------


def max_rel_err(a: dict, b: dict) -> float:
    """Worst per-tensor relative gap: |a-b|_inf / (|a|_inf + |b|_inf)."""
    if set(a) != set(b):
        raise ValueError(f"mismatched tensor sets: {sorted(set(a) ^ set(b))}")
    worst = 0.0
    for k in a:
        x = np.asarray(a[k])
        y = np.asarray(b[k])
        gap = float(np.max(np.abs(x - y))) if x.size else 0.0
        ref = float(np.max(np.abs(x)) + np.max(np.abs(y))) if x.size else 0.0
        worst = max(worst, gap / (ref + 1e-12))
    return worst


def e2e_gradients(batch: Batch, ce: CeParams, cf: CfParams, item_tokens: dict):
    """Loss and named parameter gradients of one joint-backprop batch,
    without applying any update."""
    rows, rewritten = [], []
    occ = 0
    for u in batch.users:
        renumbered = []
        for item_id, resp in u.interactions:
            rows.append(ce_encode(item_tokens[item_id], ce))
            renumbered.append((occ, resp))
            occ += 1
        rewritten.append(UserSequence(u.user_id, tuple(renumbered)))
    enc = ad.concat(rows, axis=0)
    loss, _ = batch_sequence_loss(rewritten, {k: k for k in range(occ)}, enc, cf)
    gmap = ad.backward(loss)
    grads = {f"ce.{k}": v for k, v in _named_grads(ce.named(), gmap).items()}
    grads.update({f"cf.{k}": v for k, v in _named_grads(cf.named(), gmap).items()})
    return loss.item(), grads


def gram_gradients(batch: Batch, ce: CeParams, cf: CfParams, item_tokens: dict):
    """Gradients of one accumulated step at unchanged parameters.

    CF gradients come from the leaf-encoding graph; CE gradients from the
    pseudo-target regression loss over the whole batch in one chunk.
    Returns (loss, named grads) shaped like ``e2e_gradients`` output.
    """
    order = list(batch.unique_items)
    with ad.no_grad():
        h_data = {i: ce_encode(item_tokens[i], ce).data for i in order}
    leaves = {i: Tensor(h_data[i], grad_enabled=True) for i in order}
    enc = ad.concat([leaves[i] for i in order], axis=0)
    row_of = {item_id: k for k, item_id in enumerate(order)}
    loss, _ = batch_sequence_loss(batch.users, row_of, enc, cf)
    gmap = ad.backward(loss)
    grads = {f"cf.{k}": v for k, v in _named_grads(cf.named(), gmap).items()}

    h_tilde = {}
    for i in order:
        g = gmap.get(leaves[i])
        h_tilde[i] = h_data[i] - g.data if g is not None else h_data[i]
    outs = [ce_encode(item_tokens[i], ce) for i in order]
    pred = ad.concat(outs, axis=0) if len(outs) > 1 else outs[0]
    target = Tensor(np.concatenate([h_tilde[i] for i in order], axis=0))
    pmap = ad.backward(ad.mse_half(target, pred))
    grads.update({f"ce.{k}": v for k, v in _named_grads(ce.named(), pmap).items()})
    return loss.item(), grads


def _run_steps(dataset: Dataset, mode: str, cfg: TrainConfig, k_steps: int) -> dict:
    """k training steps over cycling epochs; returns the parameter snapshot."""
    state = init_trainer(dataset, mode, cfg)
    done = 0
    epoch = 0
    seeds = seed_streams(cfg.seed)
    while done < k_steps:
        for batch in batch_iter(dataset.users, cfg.cf_batch_size,
                                shuffle_seed=[seeds["shuffle"], epoch]):
            train_step(batch, state)
            done += 1
            if done == k_steps:
                break
        epoch += 1
    return _snapshot(state)


def verify_equivalence(dataset: Dataset, cfg: TrainConfig, n_trials: int = 10,
                       k_steps: int = 50, sgd_lr: float = 1e-2,
                       adam_lr: float = 1e-3, trajectory: bool = True) -> dict:
    """Measure how closely accumulated single-step training matches
    end-to-end backprop on this dataset/config.

    Per trial: fresh parameters, one batch, both gradient paths compared
    per tensor. Then (optionally) two k-step trajectory comparisons, one
    with plain SGD on both modules and one with Adam. All numbers are
    worst-case relative errors; exact arithmetic would give zeros.
    """
    cfg.validate()
    if cfg.precision != "f64":
        raise ConfigError("equivalence verification requires f64 precision")
    item_tokens = {it.item_id: it.tokens for it in dataset.items}
    max_ce = 0.0
    max_cf = 0.0
    for trial in range(n_trials):
        init_seed = int(np.random.SeedSequence([cfg.seed, trial]).generate_state(1)[0])
        ce, cf = init_params(cfg.model, init_seed)
        batch = next(batch_iter(dataset.users, cfg.cf_batch_size,
                                shuffle_seed=[init_seed, 1]))
        _, ref = e2e_gradients(batch, ce, cf, item_tokens)
        _, alt = gram_gradients(batch, ce, cf, item_tokens)
        ce_names = [k for k in ref if k.startswith("ce.")]
        cf_names = [k for k in ref if k.startswith("cf.")]
        max_ce = max(max_ce, max_rel_err({k: ref[k] for k in ce_names},
                                         {k: alt[k] for k in ce_names}))
        max_cf = max(max_cf, max_rel_err({k: ref[k] for k in cf_names},
                                         {k: alt[k] for k in cf_names}))
    out = {
        "n_trials": n_trials,
        "max_ce_grad_rel_err": max_ce,
        "max_cf_grad_rel_err": max_cf,
        "max_param_grad_rel_err": max(max_ce, max_cf),
    }
    if trajectory:
        # single-step windows, whole cache in one regression step, so each
        # trainer applies exactly one optimizer step per module per batch
        for kind, lr in (("sgd", sgd_lr), ("adam", adam_lr)):
            opt = OptimizerState(kind=kind, lr=lr, schedule="constant")
            tcfg = replace(cfg, accum_steps=1, ce_batch_size=0, latency=None,
                           opt_ce=opt, opt_cf=replace(opt))
            ref = _run_steps(dataset, "e2e", tcfg, k_steps)
            alt = _run_steps(dataset, "gram", tcfg, k_steps)
            out[f"max_trajectory_rel_err_{kind}"] = max_rel_err(ref, alt)
        out["k_steps"] = k_steps
        out["max_trajectory_rel_err"] = max(out["max_trajectory_rel_err_sgd"],
                                            out["max_trajectory_rel_err_adam"])
    return out
