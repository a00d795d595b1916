"""Optimization loop: Adam with stepped exponential learning-rate decay,
batched view generation, joint-loss backprop, theta bookkeeping and
validation-based checkpoint selection.

Determinism contract: all randomness derives from the run seed through
fixed stream tags (0 init, 1 epoch shuffles, 2 masking, 3 dropout), with
per-batch generators seeded by (seed, tag, epoch, batch).  Two runs with
the same seed and config produce byte-identical checkpoints.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .data import EvalSplit, InteractionDataset, TrainingWindow, \
    training_windows
from .encoder import ModelParams, checkpoint_bytes, forward, predict_logits
from .errors import ConfigError, DataError, NumericError
from .evaluation import evaluate_split
from .objectives import (
    LossReport,
    MaskedViewBatch,
    ThetaState,
    cloze_loss,
    gen_masked_views,
    joint_loss,
    multi_pair_contrastive_loss,
    update_theta,
)
from .tensor import gather_rows

logger = logging.getLogger("cbit")

# rng stream tags; see module docstring
_STREAM_INIT = 0
_STREAM_SHUFFLE = 1
_STREAM_MASK = 2
_STREAM_DROPOUT = 3


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings (model shape lives in ModelConfig)."""

    batch_size: int = 256
    epochs: int = 250
    learning_rate: float = 0.001
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    decay_gamma: float = 0.1
    decay_every_epochs: int = 100
    num_views: int = 2
    mask_prob: float = 0.15
    tau: float = 0.3
    alpha: float = 0.1
    lam: float = 1.0
    stride: int = 1
    contrastive: bool = True
    grad_clip: float = 0.0
    loss_reduction: str = "mean"
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning rate must be positive")
        if not 0.0 < self.mask_prob < 1.0:
            raise ConfigError("mask_prob must be in (0, 1)")
        if self.num_views < 2:
            raise ConfigError("num_views must be >= 2")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("alpha must be in [0, 1]")
        if self.lam <= 0:
            raise ConfigError("lambda must be positive")
        if self.stride < 1:
            raise ConfigError("stride must be >= 1")
        if self.decay_every_epochs < 1:
            raise ConfigError("decay_every_epochs must be >= 1")
        if self.grad_clip < 0:
            raise ConfigError("grad_clip must be >= 0")
        if self.loss_reduction not in ("mean", "sum"):
            raise ConfigError("loss_reduction must be 'mean' or 'sum'")
        if self.seed < 0:
            raise ConfigError("seed must be >= 0")


class AdamState:
    """First/second moments per parameter plus the shared step counter."""

    def __init__(self, params: ModelParams):
        self.m = {name: np.zeros(t.shape) for name, t in params.tensors.items()}
        self.v = {name: np.zeros(t.shape) for name, t in params.tensors.items()}
        self.step = 0


def adam_step(params: ModelParams, grads: dict[str, np.ndarray],
              state: AdamState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Standard bias-corrected Adam update, in place."""
    for name, grad in grads.items():
        if not np.isfinite(grad).all():
            raise NumericError(f"non-finite gradient for tensor {name!r}")
    state.step += 1
    correction1 = 1.0 - beta1 ** state.step
    correction2 = 1.0 - beta2 ** state.step
    for name, tensor in params.tensors.items():
        grad = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * grad
        v *= beta2
        v += (1.0 - beta2) * grad * grad
        tensor.data -= lr * (m / correction1) / (np.sqrt(v / correction2) + eps)


def lr_schedule(epoch: int, base_lr: float, gamma: float, every: int) -> float:
    """Stepped exponential decay: base_lr * gamma ** (epoch // every)."""
    if every < 1:
        raise ConfigError("decay interval must be >= 1")
    return base_lr * gamma ** (epoch // every)


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> None:
    """Scale all gradients so their global L2 norm is at most max_norm."""
    total = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total > max_norm > 0:
        factor = max_norm / total
        for g in grads.values():
            g *= factor


def train_epoch(params: ModelParams, windows: list[TrainingWindow],
                user_items: dict[str, set[int]], cfg: TrainConfig,
                theta: ThetaState, adam: AdamState,
                epoch: int) -> tuple[list[LossReport], ThetaState]:
    """One pass over the training windows.

    Per batch: generate m masked views per window, forward all views in
    training mode with per-view dropout, compute the cloze loss and the
    multi-pair contrastive loss, combine with the current theta, backprop,
    apply Adam, then advance theta from the detached loss values.
    """
    if not windows:
        raise DataError("no training windows")
    model_cfg = params.config
    lr = lr_schedule(epoch, cfg.learning_rate, cfg.decay_gamma,
                     cfg.decay_every_epochs)
    order = np.random.default_rng(
        (cfg.seed, _STREAM_SHUFFLE, epoch)).permutation(len(windows))
    reports: list[LossReport] = []
    for batch_index, start in enumerate(range(0, len(windows),
                                              cfg.batch_size)):
        batch = [windows[i] for i in order[start:start + cfg.batch_size]]
        rng_mask = np.random.default_rng(
            (cfg.seed, _STREAM_MASK, epoch, batch_index))
        rng_drop = np.random.default_rng(
            (cfg.seed, _STREAM_DROPOUT, epoch, batch_index))
        views = MaskedViewBatch(
            [gen_masked_views(w, cfg.mask_prob, cfg.num_views,
                              model_cfg.vocab_size, rng_mask,
                              forbidden=user_items.get(w.source_user))
             for w in batch],
            cfg.mask_prob, cfg.num_views)

        tokens = views.token_matrix()
        rep = forward(params, tokens, training=True, rng=rng_drop)
        rows, window_len = tokens.shape
        flat_positions, targets, negatives = views.masked_flat()
        hidden = gather_rows(
            rep.hidden.reshape(rows * window_len, model_cfg.dim),
            flat_positions)
        logits = predict_logits(params, hidden)
        main = cloze_loss(logits, targets, negatives, cfg.loss_reduction)

        cl = None
        cl_value = 0.0
        if cfg.contrastive:
            cl = multi_pair_contrastive_loss(
                rep.hidden.reshape(rows, window_len * model_cfg.dim),
                len(batch), cfg.num_views, cfg.tau, cfg.loss_reduction)
            cl_value = cl.item()

        theta_used = theta.theta
        joint = joint_loss(main, cl, theta_used)
        params.zero_grads()
        joint.backward()
        grads = {name: (t.grad if t.grad is not None
                        else np.zeros(t.shape))
                 for name, t in params.tensors.items()}
        if cfg.grad_clip > 0:
            clip_gradients(grads, cfg.grad_clip)
        adam_step(params, grads, adam, lr,
                  cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
        params.zero_grads()

        main_value = main.item()
        joint_value = joint.item()
        if cfg.contrastive:
            theta = update_theta(theta, main_value, cl_value)
        reports.append(LossReport(main_value, cl_value, theta_used,
                                  joint_value))
    return reports, theta


@dataclass
class FitResult:
    """Best-validation checkpoint plus the per-epoch training log."""

    best_checkpoint: bytes
    best_epoch: int
    best_hr10: float
    best_ndcg10: float
    log_lines: list[str] = field(default_factory=list)
    theta: ThetaState | None = None
    aborted: bool = False


def fit(params: ModelParams, dataset: InteractionDataset, split: EvalSplit,
        cfg: TrainConfig, validation_fn=None) -> FitResult:
    """Train for cfg.epochs, keeping the checkpoint with the best
    validation NDCG@10.

    ``validation_fn(params) -> (hr10, ndcg10)`` may be injected for tests;
    the default evaluates the validation split over the whole item set.
    A numeric failure aborts training but the last good checkpoint and log
    are returned.
    """
    windows = training_windows(split, params.config.max_len, cfg.stride)
    if not windows:
        raise DataError("training split produced no windows")
    user_items = {u: dataset.item_set(u) for u in dataset.sequences}

    if validation_fn is None:
        def validation_fn(p):
            report = evaluate_split(p, split, which="validation", ks=(10,))
            return report.hr(10), report.ndcg(10)

    adam = AdamState(params)
    theta = ThetaState(alpha=cfg.alpha, lam=cfg.lam)
    best_ndcg = -1.0
    best = FitResult(checkpoint_bytes(params), -1, 0.0, 0.0)
    log_lines: list[str] = []
    aborted = False
    for epoch in range(cfg.epochs):
        try:
            reports, theta = train_epoch(params, windows, user_items, cfg,
                                         theta, adam, epoch)
        except NumericError as err:
            logger.error("aborting at epoch %d: %s", epoch, err)
            log_lines.append(f"# aborted at epoch {epoch}: {err}")
            aborted = True
            break
        main = float(np.mean([r.main_loss for r in reports]))
        cl = float(np.mean([r.cl_loss for r in reports]))
        lr = lr_schedule(epoch, cfg.learning_rate, cfg.decay_gamma,
                         cfg.decay_every_epochs)
        hr10, ndcg10 = validation_fn(params)
        log_lines.append(
            f"{epoch}\t{main:.6f}\t{cl:.6f}\t{theta.theta:.6f}\t{lr:.8g}"
            f"\t{hr10:.6f}\t{ndcg10:.6f}")
        if ndcg10 > best_ndcg:
            best_ndcg = ndcg10
            best = FitResult(checkpoint_bytes(params), epoch, hr10, ndcg10)
    best.log_lines = log_lines
    best.theta = theta
    best.aborted = aborted
    return best
