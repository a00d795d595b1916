"""Whole-catalog ranking evaluation and attention-map export.

Next-item scores come from appending the mask token to a (truncated,
pre-padded) history and reading the prediction logits at that position.
The held-out item is ranked against every real item; ties break by
ascending item index so results are deterministic and oracle-checkable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .data import FIRST_ITEM_TOKEN, MASK_TOKEN, PAD_TOKEN, EvalSplit, \
    truncate_for_inference
from .encoder import ModelParams, attention_maps, forward, predict_logits
from .errors import ConfigError, DataError
from .tensor import Tensor, no_grad

DEFAULT_KS = (5, 10, 20)


@dataclass(frozen=True)
class RankingResult:
    """1-based rank of one user's held-out item over the whole item set."""

    user: str
    target: int
    rank: int


@dataclass
class MetricsReport:
    per_k: dict[int, tuple[float, float]]  # K -> (HR, NDCG)
    num_users: int

    def hr(self, k: int) -> float:
        return self.per_k[k][0]

    def ndcg(self, k: int) -> float:
        return self.per_k[k][1]


def build_inference_tokens(history: Sequence[int], max_len: int) -> list[int]:
    """Truncate to the last max_len-1 items, append the mask, pre-pad."""
    kept = truncate_for_inference(list(history), max_len)
    pad = max_len - len(kept) - 1
    return [PAD_TOKEN] * pad + kept + [MASK_TOKEN]


def _scores_batch(params: ModelParams,
                  histories: Sequence[Sequence[int]]) -> np.ndarray:
    tokens = np.asarray([build_inference_tokens(h, params.config.max_len)
                         for h in histories], dtype=np.intp)
    with no_grad():
        rep = forward(params, tokens, training=False)
        at_mask = Tensor(rep.hidden.data[:, -1, :])
        logits = predict_logits(params, at_mask)
    return logits.data


def next_item_scores(params: ModelParams,
                     history: Sequence[int]) -> np.ndarray:
    """One logit per real item for the next-item query (eval mode).

    ``scores[i]`` belongs to dense item id ``i + 2``.
    """
    if not len(history):
        raise DataError("cannot score an empty history")
    return _scores_batch(params, [history])[0]


def rank_of_target(scores: np.ndarray, target_index: int) -> int:
    """1-based rank of ``scores[target_index]``, ties broken by index."""
    scores = np.asarray(scores)
    target_score = scores[target_index]
    greater = int((scores > target_score).sum())
    ties_before = int((scores[:target_index] == target_score).sum())
    return 1 + greater + ties_before


def hr_ndcg(results: Iterable[RankingResult | int],
            k: int) -> tuple[float, float]:
    """HR@K and NDCG@K over ranking results (or plain ranks).

    One relevant item per user, so the ideal DCG is 1 and NDCG@K is the
    mean of 1/log2(rank + 1) for hits.
    """
    ranks = np.array([r.rank if isinstance(r, RankingResult) else int(r)
                      for r in results], dtype=np.float64)
    if ranks.size == 0:
        raise DataError("no ranking results to aggregate")
    hits = ranks <= k
    hr = float(hits.mean())
    ndcg = float(np.where(hits, 1.0 / np.log2(ranks + 1.0), 0.0).mean())
    return hr, ndcg


def rank_users(params: ModelParams, targets: dict[str, tuple[tuple[int, ...], int]],
               filter_seen: bool = False,
               batch_size: int = 512) -> list[RankingResult]:
    """Rank each user's held-out item given their context sequence."""
    users = list(targets)
    results: list[RankingResult] = []
    for start in range(0, len(users), batch_size):
        chunk = users[start:start + batch_size]
        contexts = [list(targets[u][0]) for u in chunk]
        scores = _scores_batch(params, contexts)
        for user, context, row in zip(chunk, contexts, scores):
            target = targets[user][1]
            if filter_seen:
                row = row.copy()
                seen = np.unique(np.asarray(context, dtype=np.intp))
                row[seen - FIRST_ITEM_TOKEN] = -np.inf
            results.append(RankingResult(user, target,
                                         rank_of_target(row, target
                                                        - FIRST_ITEM_TOKEN)))
    return results


def evaluate_split(params: ModelParams, split: EvalSplit,
                   which: str = "test", ks: Sequence[int] = DEFAULT_KS,
                   filter_seen: bool = False,
                   batch_size: int = 512) -> MetricsReport:
    """HR@K/NDCG@K over every user of the validation or test split."""
    if which == "test":
        targets = split.test
    elif which == "validation":
        targets = split.validation
    else:
        raise ConfigError(f"unknown split {which!r}")
    results = rank_users(params, targets, filter_seen=filter_seen,
                         batch_size=batch_size)
    return MetricsReport({k: hr_ndcg(results, k) for k in ks}, len(results))


def format_metrics(report: MetricsReport, split_name: str) -> str:
    """Tab-separated rows plus a machine-readable summary line."""
    lines = [f"{split_name}\t{k}\t{hr:.6f}\t{ndcg:.6f}"
             for k, (hr, ndcg) in sorted(report.per_k.items())]
    summary = {
        "split": split_name,
        "users": report.num_users,
        "metrics": {str(k): {"hr": hr, "ndcg": ndcg}
                    for k, (hr, ndcg) in sorted(report.per_k.items())},
    }
    lines.append("# summary " + json.dumps(summary, sort_keys=True))
    return "\n".join(lines)


def export_attention(params: ModelParams,
                     contexts: Sequence[Sequence[int]],
                     path: str | Path,
                     include_average: bool = True) -> None:
    """Write average next-item attention maps as plain-text matrices.

    Each context gets the mask appended (as at inference); maps average
    over contexts and are written one matrix per ``# layer L head H``
    block, with an extra head-averaged block per layer.
    """
    contexts = list(contexts)
    if not contexts:
        raise DataError("need at least one context to export attention")
    cfg = params.config
    totals: list[list[np.ndarray]] | None = None
    for history in contexts:
        tokens = build_inference_tokens(history, cfg.max_len)
        maps = attention_maps(params, tokens)
        if totals is None:
            totals = [[head.copy() for head in layer] for layer in maps]
        else:
            for acc_layer, layer in zip(totals, maps):
                for i, head in enumerate(layer):
                    acc_layer[i] += head

    lines: list[str] = []

    def emit(tag: str, matrix: np.ndarray) -> None:
        lines.append(tag)
        for row in matrix:
            lines.append(" ".join(f"{v:.10f}" for v in row))

    for layer_idx, layer in enumerate(totals):
        averaged = [head / len(contexts) for head in layer]
        for head_idx, head in enumerate(averaged):
            emit(f"# layer {layer_idx} head {head_idx}", head)
        if include_average:
            emit(f"# layer {layer_idx} head avg",
                 np.mean(averaged, axis=0))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_attention_export(path: str | Path) -> dict[str, np.ndarray]:
    """Parse an attention export back into {header: matrix}."""
    blocks: dict[str, np.ndarray] = {}
    header = None
    rows: list[list[float]] = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.startswith("#"):
            if header is not None:
                blocks[header] = np.array(rows)
            header = line[1:].strip()
            rows = []
        elif line.strip():
            rows.append([float(v) for v in line.split()])
    if header is not None:
        blocks[header] = np.array(rows)
    return blocks
