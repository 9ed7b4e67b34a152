"""ELBO assembly, Adam optimization, and the training loop.

The per-batch loss is

    kl_weight * model_kl  +  sum_i w_i * bce(logit_i, y_i)

with a single posterior draw for the likelihood term and n_samples Monte
Carlo draws inside the KL.  Under the default ``per_batch_count`` scaling
(kl_weight = 1/num_batches) one epoch sums to the full dataset objective.
Positive examples can be up-weighted to counter class imbalance; the
default weight is the negative/positive ratio of the training split.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import GraphNode, Tensor, backward, constant
from .distributions import GumbelConfig
from .errors import Divergence, InvalidConfig, LabelDomain, NonFiniteValue
from .layers import BnnModel, ForwardMode, save_checkpoint

__all__ = [
    "TrainConfig",
    "EpochRecord",
    "TrainReport",
    "ElboParts",
    "elbo_loss",
    "AdamState",
    "adam_step",
    "Adam",
    "train",
    "validation_loss",
    "validation_rng",
    "default_class_weight",
]

KL_SCALE_MODES = ("per_dataset", "per_batch_count", "fixed_beta")
_VAL_STREAM = 2


@dataclass
class TrainConfig:
    epochs: int = 400
    batch_size: int = 256
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    kl_scale_mode: str = "per_batch_count"
    fixed_beta: float = 1.0
    tau: float = 0.5
    mc_samples: int = 1000
    s_val: int = 8
    seed: int = 0
    class_weight_positive: float | None = None
    checkpoint_dir: str | None = None

    def __post_init__(self):
        if self.epochs < 0:
            raise InvalidConfig(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise InvalidConfig(f"batch_size must be >= 1, got {self.batch_size}")
        if self.tau < 0.5:
            raise InvalidConfig(f"training tau must be >= 0.5, got {self.tau}")
        if self.mc_samples < 1:
            raise InvalidConfig(f"mc_samples must be >= 1, got {self.mc_samples}")
        if self.s_val < 1:
            raise InvalidConfig(f"s_val must be >= 1, got {self.s_val}")
        if self.kl_scale_mode not in KL_SCALE_MODES:
            raise InvalidConfig(f"unknown kl_scale_mode {self.kl_scale_mode!r}")
        if self.class_weight_positive is not None and self.class_weight_positive < 1:
            raise InvalidConfig("class_weight_positive must be >= 1")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    kl_term: float
    nll_term: float
    val_loss: float
    wall_time_s: float
    val_rng_key: list[int]

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainReport:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int | None = None
    best_val_loss: float | None = None

    def write_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")


@dataclass
class ElboParts:
    loss: GraphNode
    kl_value: float
    nll_value: float


def _check_labels(y: np.ndarray) -> None:
    if y.size == 0:
        raise LabelDomain("batch is empty")
    if not np.all((y == 0) | (y == 1)):
        raise LabelDomain("labels must be 0 or 1")


def weighted_bce_sum(logits: GraphNode, y: np.ndarray, positive_weight: float) -> GraphNode:
    """Summed binary cross-entropy with an optional positive-class weight.

    Uses -log sigmoid(z) = softplus(-z) for stability; weight 1 reduces
    to plain unweighted cross-entropy.
    """
    y = np.asarray(y, dtype=np.float64)
    pos_coeff = constant(positive_weight * y)
    neg_coeff = constant(1.0 - y)
    loss_vec = pos_coeff * ad.softplus(ad.neg(logits)) + neg_coeff * ad.softplus(logits)
    return ad.reduce_sum(loss_vec)


def kl_scale(cfg: TrainConfig, num_batches: int, batch_len: int, n_train: int | None) -> float:
    if cfg.kl_scale_mode == "per_batch_count":
        return 1.0 / num_batches
    if cfg.kl_scale_mode == "per_dataset":
        total = n_train if n_train is not None else batch_len * num_batches
        return batch_len / total
    return cfg.fixed_beta


def elbo_loss(
    model: BnnModel,
    x: np.ndarray,
    y: np.ndarray,
    cfg: TrainConfig,
    rng: np.random.Generator,
    num_batches: int = 1,
    n_train: int | None = None,
    class_weight: float = 1.0,
) -> ElboParts:
    """One optimization step's objective: scaled KL plus a single-draw
    weighted negative log-likelihood over the batch."""
    y = np.asarray(y, dtype=np.float64)
    _check_labels(y)
    gumbel = GumbelConfig(cfg.tau)
    rng_forward, rng_kl = rng.spawn(2)
    logits = model.forward(constant(x), ForwardMode.TRAIN_RELAXED, gumbel, rng_forward)
    nll = weighted_bce_sum(logits, y, class_weight)
    kl_weight = kl_scale(cfg, num_batches, len(y), n_train)
    if kl_weight != 0.0 and model.posterior_kind != "deterministic":
        kl = model.kl(cfg.mc_samples, rng_kl)
        loss = kl_weight * kl + nll
        kl_value = kl.item()
    else:
        loss = nll
        kl_value = 0.0
    return ElboParts(loss=loss, kl_value=kl_value, nll_value=nll.item())


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    step: int
    m: list[np.ndarray]
    v: list[np.ndarray]

    @classmethod
    def zeros_like(cls, params: list[GraphNode]) -> "AdamState":
        return cls(
            step=0,
            m=[np.zeros(p.value.shape) for p in params],
            v=[np.zeros(p.value.shape) for p in params],
        )


def adam_step(
    params: list[GraphNode],
    grads: dict[GraphNode, Tensor],
    state: AdamState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> AdamState:
    """Standard bias-corrected Adam update applied in place to leaves.

    Parameters with no gradient entry are treated as zero-gradient and
    stay bitwise unchanged.
    """
    b1, b2 = betas
    t = state.step + 1
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for i, p in enumerate(params):
        g_t = grads.get(p)
        g = np.zeros(p.value.shape) if g_t is None else g_t.array
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * (g * g)
        m_hat = state.m[i] / c1
        v_hat = state.v[i] / c2
        p.assign(p.value.array - lr * m_hat / (np.sqrt(v_hat) + eps))
    state.step = t
    return state


class Adam:
    """Thin stateful wrapper over :func:`adam_step`."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state = AdamState.zeros_like(self.params)

    def step(self, grads: dict[GraphNode, Tensor]) -> None:
        adam_step(self.params, grads, self.state, self.lr, self.betas, self.eps)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def validation_rng(seed: int, epoch: int) -> np.random.Generator:
    """Deterministic per-epoch validation stream; its spawn key is
    recorded in the epoch record so the loss can be reproduced later."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(_VAL_STREAM, epoch)))


def validation_loss(
    model: BnnModel,
    x: np.ndarray,
    y: np.ndarray,
    cfg: TrainConfig,
    rng: np.random.Generator,
    class_weight: float = 1.0,
) -> float:
    """Full-dataset objective used for model selection: one KL estimate
    plus the hard-inclusion NLL averaged over s_val posterior draws.

    The KL enters at full-dataset weight (1.0), except under fixed_beta
    scaling where the training beta applies so that selection optimizes
    the same objective being trained.
    """
    y = np.asarray(y, dtype=np.float64)
    _check_labels(y)
    rng_kl, *draw_rngs = rng.spawn(1 + cfg.s_val)
    kl_weight = cfg.fixed_beta if cfg.kl_scale_mode == "fixed_beta" else 1.0
    if model.posterior_kind == "deterministic" or kl_weight == 0.0:
        kl_value = 0.0
    else:
        kl_value = kl_weight * model.kl(cfg.mc_samples, rng_kl).item()
    nlls = []
    for stream in draw_rngs:
        logits = model.forward(constant(x), ForwardMode.EVAL_HARD, rng=stream)
        nlls.append(weighted_bce_sum(logits, y, class_weight).item())
    return kl_value + float(np.mean(nlls))


def default_class_weight(y: np.ndarray) -> float:
    """Negative/positive ratio of the labels (at least 1)."""
    y = np.asarray(y)
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        return 1.0
    return max(1.0, n_neg / n_pos)


def train(
    model: BnnModel,
    train_set: tuple[np.ndarray, np.ndarray],
    val_set: tuple[np.ndarray, np.ndarray],
    cfg: TrainConfig,
) -> TrainReport:
    """Run shuffled-minibatch optimization and keep the best-validation
    parameters.

    Deterministic given (seed, config, data): all randomness flows from
    seeded streams and the loop is single-threaded.  On return the model
    holds the best-validation parameters; if ``cfg.checkpoint_dir`` is
    set, the best checkpoint is written there as ``checkpoint_best.json``.
    Raises :class:`Divergence` if the loss leaves the finite range.
    """
    x_tr, y_tr = np.asarray(train_set[0], dtype=np.float64), np.asarray(train_set[1])
    x_va, y_va = np.asarray(val_set[0], dtype=np.float64), np.asarray(val_set[1])
    if x_tr.size == 0 or x_va.size == 0:
        raise InvalidConfig("datasets must be non-empty")
    if x_tr.shape[1] != model.in_dim or x_va.shape[1] != model.in_dim:
        raise InvalidConfig(
            f"feature dim {x_tr.shape[1]} does not match model input {model.in_dim}"
        )
    _check_labels(np.asarray(y_tr, dtype=np.float64))

    class_weight = (
        cfg.class_weight_positive
        if cfg.class_weight_positive is not None
        else default_class_weight(np.asarray(y_tr))
    )
    n = len(y_tr)
    num_batches = math.ceil(n / cfg.batch_size)
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(1,)))
    params = model.parameters()
    optimizer = Adam(params, cfg.learning_rate, (cfg.beta1, cfg.beta2), cfg.adam_eps)

    report = TrainReport()
    best_state = model.state_arrays()
    best_val = math.inf

    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        perm = rng.permutation(n)
        epoch_loss = epoch_kl = epoch_nll = 0.0
        try:
            for start in range(0, n, cfg.batch_size):
                idx = perm[start : start + cfg.batch_size]
                parts = elbo_loss(
                    model,
                    x_tr[idx],
                    y_tr[idx],
                    cfg,
                    rng,
                    num_batches=num_batches,
                    n_train=n,
                    class_weight=class_weight,
                )
                grads = backward(parts.loss, wrt=params)
                optimizer.step(grads)
                step_loss = parts.loss.item()
                epoch_loss += step_loss
                epoch_kl += parts.kl_value
                epoch_nll += parts.nll_value
        except NonFiniteValue as exc:
            raise Divergence(f"non-finite loss at epoch {epoch}: {exc}") from exc
        if not math.isfinite(epoch_loss):
            raise Divergence(f"loss diverged at epoch {epoch}: {epoch_loss}")

        val_rng = validation_rng(cfg.seed, epoch)
        val = validation_loss(model, x_va, y_va, cfg, val_rng, class_weight)
        if not math.isfinite(val):
            raise Divergence(f"validation loss diverged at epoch {epoch}: {val}")
        record = EpochRecord(
            epoch=epoch,
            train_loss=epoch_loss,
            kl_term=epoch_kl,
            nll_term=epoch_nll,
            val_loss=val,
            wall_time_s=time.perf_counter() - t0,
            val_rng_key=[cfg.seed, _VAL_STREAM, epoch],
        )
        report.records.append(record)
        if val < best_val:
            best_val = val
            best_state = model.state_arrays()
            report.best_epoch = epoch
            report.best_val_loss = val

    model.load_state_arrays(best_state)
    if cfg.checkpoint_dir is not None:
        out = Path(cfg.checkpoint_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(model, out / "checkpoint_best.json", rng_seed=cfg.seed)
    return report
