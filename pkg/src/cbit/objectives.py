"""Training objectives: cloze reconstruction, multi-pair contrastive
learning over masked views, and the dynamic loss reweighting recurrence.

Each training window yields m independently masked copies.  Masked
positions drive the cloze loss (one sampled negative per position); the
m view representations of the same window form positive pairs for a
temperature-scaled InfoNCE loss in which every other window's x/y views
in the batch act as negatives.  The two losses combine as
``main + theta * cl`` where theta follows an exponential-moving-average
of the detached loss ratio.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .data import FIRST_ITEM_TOKEN, MASK_TOKEN, PAD_TOKEN, TrainingWindow
from .errors import ConfigError, DataError, NumericError
from .tensor import Tensor, stack

logger = logging.getLogger("cbit")


@dataclass(frozen=True)
class MaskedView:
    """One cloze-masked copy of a window plus its supervision targets."""

    tokens: tuple[int, ...]
    positions: tuple[int, ...]
    targets: tuple[int, ...]
    negatives: tuple[int, ...]


@dataclass
class MaskedViewBatch:
    """All masked views for a batch of windows, window-major."""

    views: list[list[MaskedView]]
    mask_prob: float
    num_views: int

    @property
    def num_windows(self) -> int:
        return len(self.views)

    def token_matrix(self) -> np.ndarray:
        """(num_windows * num_views, T) token ids, window-major."""
        rows = [view.tokens for per_window in self.views
                for view in per_window]
        return np.asarray(rows, dtype=np.intp)

    def masked_flat(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Flattened (row*T + position) indices with aligned targets/negatives."""
        window_len = len(self.views[0][0].tokens)
        flat, targets, negatives = [], [], []
        row = 0
        for per_window in self.views:
            for view in per_window:
                for pos, target, neg in zip(view.positions, view.targets,
                                            view.negatives):
                    flat.append(row * window_len + pos)
                    targets.append(target)
                    negatives.append(neg)
                row += 1
        return (np.asarray(flat, dtype=np.intp),
                np.asarray(targets, dtype=np.intp),
                np.asarray(negatives, dtype=np.intp))


def gen_masked_views(window: TrainingWindow, mask_prob: float,
                     num_views: int, vocab_size: int,
                     rng: np.random.Generator,
                     forbidden: set[int] | None = None) -> list[MaskedView]:
    """Generate ``num_views`` independently masked copies of a window.

    Each non-padding position is masked with probability ``mask_prob``; a
    draw that selects nothing masks one uniformly chosen position instead.
    Every masked position gets one negative item sampled uniformly outside
    ``forbidden`` (defaults to the window's own items; pass the user's full
    item set to exclude the whole source sequence).
    """
    if not 0.0 < mask_prob < 1.0:
        raise ConfigError("mask probability must be in (0, 1)")
    if num_views < 2:
        raise ConfigError("need at least 2 masked views per window")
    tokens = tuple(window.tokens)
    non_pad = [i for i, t in enumerate(tokens) if t != PAD_TOKEN]
    if not non_pad:
        raise DataError("cannot mask an all-padding window")
    if forbidden is None:
        forbidden = {t for t in tokens if t >= FIRST_ITEM_TOKEN}
    else:
        forbidden = set(forbidden)
    candidates = (vocab_size - FIRST_ITEM_TOKEN) - len(
        {t for t in forbidden if FIRST_ITEM_TOKEN <= t < vocab_size})
    if candidates <= 0:
        raise DataError("no negative items outside the source sequence")

    views = []
    for _ in range(num_views):
        draws = rng.random(len(non_pad))
        selected = [p for p, r in zip(non_pad, draws) if r < mask_prob]
        if not selected:
            selected = [non_pad[int(rng.integers(len(non_pad)))]]
        masked = list(tokens)
        targets, negatives = [], []
        for pos in selected:
            targets.append(masked[pos])
            masked[pos] = MASK_TOKEN
            while True:
                candidate = int(rng.integers(FIRST_ITEM_TOKEN, vocab_size))
                if candidate not in forbidden:
                    negatives.append(candidate)
                    break
        views.append(MaskedView(tuple(masked), tuple(selected),
                                tuple(targets), tuple(negatives)))
    return views


def cloze_loss(logits: Tensor, targets: Sequence[int],
               negatives: Sequence[int], reduction: str = "mean") -> Tensor:
    """Reconstruction loss over masked positions.

    ``logits`` holds one row per masked position (every real item scored);
    per position the loss is ``-[log s(pos) + log(1 - s(neg))]`` with the
    target's logit against one sampled negative's.  ``mean`` (default)
    averages over masked positions so the scale is independent of the mask
    proportion and view count; ``sum`` keeps the raw summed form.
    """
    target_ids = np.asarray(targets, dtype=np.intp)
    negative_ids = np.asarray(negatives, dtype=np.intp)
    if target_ids.size == 0:
        raise DataError("cloze loss needs at least one masked position")
    if target_ids.shape != negative_ids.shape:
        raise ValueError("targets and negatives must align")
    num_items = logits.shape[-1]
    t_idx = target_ids - FIRST_ITEM_TOKEN
    n_idx = negative_ids - FIRST_ITEM_TOKEN
    if t_idx.min() < 0 or t_idx.max() >= num_items:
        raise IndexError("target item outside prediction vocabulary")
    if n_idx.min() < 0 or n_idx.max() >= num_items:
        raise IndexError("negative item outside prediction vocabulary")
    rows = np.arange(target_ids.size)
    pos_logits = logits.take(rows * num_items + t_idx)
    neg_logits = logits.take(rows * num_items + n_idx)
    per_position = -(pos_logits.log_sigmoid() + (-neg_logits).log_sigmoid())
    if reduction == "mean":
        return per_position.mean()
    if reduction == "sum":
        return per_position.sum()
    raise ConfigError(f"unknown reduction {reduction!r}")


# ----------------------------------------------------------------------
# contrastive learning
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class PairTerm:
    """One ordered positive pair and the view rows serving as negatives."""

    window: int
    x: int
    y: int
    anchor: int
    positive: int
    negatives: tuple[int, ...]


def pair_terms(num_windows: int, num_views: int) -> list[PairTerm]:
    """Enumerate the m(m-1) ordered pairs per window.

    Row layout is window-major (all views of window u are contiguous).
    Each pair's negatives are the x- and y-views of every other window:
    2(N-1) rows per pair, m(N-1) distinct rows across a window's pairs.
    """
    terms = []
    for u in range(num_windows):
        for x in range(num_views):
            for y in range(num_views):
                if x == y:
                    continue
                negatives = tuple(k * num_views + c
                                  for k in range(num_windows) if k != u
                                  for c in (x, y))
                terms.append(PairTerm(u, x, y, u * num_views + x,
                                      u * num_views + y, negatives))
    return terms


def _representation_matrix(reps, rows: int) -> Tensor:
    if isinstance(reps, Tensor):
        if reps.shape[0] != rows:
            raise ValueError(
                f"expected {rows} view representations, got {reps.shape[0]}")
        return reps if reps.ndim == 2 else reps.reshape(rows, -1)
    flat = [r if isinstance(r, Tensor) else Tensor(r) for r in reps]
    if len(flat) != rows:
        raise ValueError(f"expected {rows} view representations, got {len(flat)}")
    return stack([r.reshape(-1) for r in flat])


def similarity_matrix(reps, num_windows: int, num_views: int,
                      tau: float) -> Tensor:
    """Pairwise cosine similarities of all view representations, over tau."""
    if tau <= 0:
        raise ConfigError("temperature must be positive")
    rows = num_windows * num_views
    matrix = _representation_matrix(reps, rows)
    squared = (matrix * matrix).sum(axis=-1, keepdims=True)
    if np.any(squared.data <= 0.0):
        raise NumericError("zero-norm view representation")
    normalized = matrix / squared.sqrt()
    return (normalized @ normalized.mT) * (1.0 / tau)


def _pair_losses(similarities: Tensor, terms: list[PairTerm],
                 rows: int) -> Tensor:
    candidates = np.array(
        [(t.anchor * rows + t.positive,)
         + tuple(t.anchor * rows + n for n in t.negatives) for t in terms],
        dtype=np.intp)
    selected = similarities.take(candidates)
    lse = selected.logsumexp()
    positives = similarities.take(candidates[:, 0])
    return lse - positives


def multi_pair_contrastive_loss(reps, num_windows: int, num_views: int,
                                tau: float,
                                reduction: str = "mean") -> Tensor:
    """Contrastive loss summed over all ordered view pairs of each window.

    With a single window in the batch there are no negatives and the loss
    is exactly zero.  ``mean`` divides by the number of pair terms (and the
    batch); ``sum`` keeps the raw double sum.
    """
    if num_views < 2:
        raise ConfigError("multi-pair contrastive loss needs >= 2 views")
    if num_windows < 1:
        raise ValueError("need at least one window")
    similarities = similarity_matrix(reps, num_windows, num_views, tau)
    terms = pair_terms(num_windows, num_views)
    losses = _pair_losses(similarities, terms, num_windows * num_views)
    if reduction == "mean":
        return losses.mean()
    if reduction == "sum":
        return losses.sum()
    raise ConfigError(f"unknown reduction {reduction!r}")


def pair_contrastive_loss(reps, num_windows: int, num_views: int,
                          window: int, x: int, y: int, tau: float) -> Tensor:
    """One ordered pair's loss, on the same arithmetic path as the
    multi-pair reduction (so the m=2 case matches it bit for bit)."""
    if x == y:
        raise ValueError("a positive pair needs two distinct views")
    rows = num_windows * num_views
    similarities = similarity_matrix(reps, num_windows, num_views, tau)
    anchor = window * num_views + x
    positive = window * num_views + y
    negatives = tuple(k * num_views + c
                      for k in range(num_windows) if k != window
                      for c in (x, y))
    candidates = np.array(
        (anchor * rows + positive,)
        + tuple(anchor * rows + n for n in negatives), dtype=np.intp)
    selected = similarities.take(candidates)
    return selected.logsumexp() - similarities.take(
        np.intp(anchor * rows + positive))


# ----------------------------------------------------------------------
# joint loss and dynamic reweighting
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class ThetaState:
    """EMA state for the contrastive-loss weight; starts at zero."""

    alpha: float
    lam: float
    theta: float = 0.0
    step: int = 0


def update_theta(state: ThetaState, main_loss: float,
                 cl_loss: float) -> ThetaState:
    """One reweighting step from detached loss values.

    theta_hat = main / (main + lam * cl); the stored weight moves toward it
    at rate alpha.  Applied after the optimizer step it belongs to.
    """
    if not (math.isfinite(main_loss) and math.isfinite(cl_loss)):
        raise NumericError("loss values must be finite to update theta")
    if main_loss < 0 or cl_loss < 0:
        raise NumericError("loss values must be non-negative to update theta")
    denominator = main_loss + state.lam * cl_loss
    if denominator == 0.0:
        logger.warning("theta update with zero denominator; using theta_hat=0")
        theta_hat = 0.0
    else:
        theta_hat = main_loss / denominator
    new_theta = state.alpha * theta_hat + (1.0 - state.alpha) * state.theta
    return replace(state, theta=new_theta, step=state.step + 1)


def joint_loss(main: Tensor, cl: Tensor | None, theta: float) -> Tensor:
    """main + theta * cl with theta treated as a constant (no gradient).

    theta == 0 (or no contrastive term) returns the cloze loss node itself,
    so the backward pass is exactly the cloze-only one.
    """
    if cl is None or theta == 0.0:
        return main
    return main + float(theta) * cl


@dataclass(frozen=True)
class LossReport:
    """Per-step scalars for logging and the reweighting recurrence."""

    main_loss: float
    cl_loss: float
    theta: float
    joint: float
