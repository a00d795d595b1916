"""Shared fixtures-by-hand and independent oracles used across test modules."""

import math

import numpy as np

from cbit.data import InteractionDataset, build_dataset


def write_triplets(path, rows):
    """rows: iterable of (user, item, timestamp) tuples."""
    path.write_text(
        "\n".join(f"{u} {i} {t}" for u, i, t in rows) + "\n", encoding="utf-8")


def dense_corpus(num_users=12, items_per_user=8, num_items=10, seed=0):
    """A random corpus dense enough to survive 5-core filtering intact."""
    rng = np.random.default_rng(seed)
    per_user = {}
    for u in range(num_users):
        per_user[f"u{u}"] = [f"i{rng.integers(num_items)}"
                             for _ in range(items_per_user)]
    return per_user


def cyclic_dataset(num_users=50, num_items=20, seq_len=12) -> InteractionDataset:
    """Deterministic next-item structure: item k is always followed by k+1.

    User u starts the cycle at offset u mod num_items, so every item shows
    up for many users and the successor of any context is fully determined.
    """
    per_user = {}
    for u in range(num_users):
        start = u % num_items
        per_user[f"u{u}"] = [f"i{(start + j) % num_items}"
                             for j in range(seq_len)]
    return build_dataset(per_user)


def oracle_rank(scores, target_index):
    """Rank via a full descending sort, stable by ascending item index."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    return order.index(target_index) + 1


def oracle_hr_ndcg(ranks, k):
    hits = [1.0 if r <= k else 0.0 for r in ranks]
    gains = [1.0 / math.log2(r + 1) if r <= k else 0.0 for r in ranks]
    return sum(hits) / len(ranks), sum(gains) / len(ranks)


def oracle_multi_pair_loss(reps, num_windows, num_views, tau, reduction="mean"):
    """Brute-force enumeration of every ordered view pair.

    ``reps`` is a list of num_windows*num_views flat numpy vectors in
    window-major order (all views of window 0 first).
    """
    def cos(a, b):
        return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))

    values = []
    for u in range(num_windows):
        for x in range(num_views):
            for y in range(num_views):
                if x == y:
                    continue
                anchor = reps[u * num_views + x]
                positive = math.exp(cos(anchor, reps[u * num_views + y]) / tau)
                denominator = positive
                for k in range(num_windows):
                    if k == u:
                        continue
                    for c in (x, y):
                        denominator += math.exp(
                            cos(anchor, reps[k * num_views + c]) / tau)
                values.append(-math.log(positive / denominator))
    if reduction == "sum":
        return float(np.sum(np.array(values)))
    return float(np.sum(np.array(values)) / len(values))


def numpy_encoder_forward(params, config, tokens):
    """Straight-line numpy re-implementation of the encoder forward pass.

    Independent of the autodiff engine; used to pin the block arithmetic.
    """
    from scipy.special import erf

    def layer_norm(x, gain, bias, eps=1e-12):
        mu = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        return (x - mu) / np.sqrt(var + eps) * gain + bias

    def gelu(x):
        return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))

    def softmax(x):
        z = x - x.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True)

    t = {name: tensor.data for name, tensor in params.tensors.items()}
    tokens = np.asarray(tokens)
    h = t["item_emb"][tokens] + t["pos_emb"][: len(tokens)]
    head_dim = config.dim // config.num_heads
    for layer in range(config.num_layers):
        p = f"layers.{layer}."
        heads = []
        for i in range(config.num_heads):
            q = h @ t[p + f"attn.q.{i}"]
            k = h @ t[p + f"attn.k.{i}"]
            v = h @ t[p + f"attn.v.{i}"]
            attn = softmax(q @ k.T / math.sqrt(head_dim))
            heads.append(attn @ v)
        mixed = np.concatenate(heads, axis=-1) @ t[p + "attn.out"]
        f = layer_norm(h + mixed, t[p + "ln1.gain"], t[p + "ln1.bias"])
        ff = gelu(f @ t[p + "ffn.w1"] + t[p + "ffn.b1"]) @ t[p + "ffn.w2"] \
            + t[p + "ffn.b2"]
        h = layer_norm(f + ff, t[p + "ln2.gain"], t[p + "ln2.bias"])
    return h
