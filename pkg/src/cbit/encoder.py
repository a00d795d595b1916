"""Bidirectional transformer encoder for item sequences.

The model is an item+position embedding, a stack of post-norm transformer
blocks (multi-head self-attention without any causal mask, then a
position-wise feed-forward net, each wrapped in dropout + residual +
layer norm), and an untied linear prediction layer producing one logit
per real item.  Checkpoints use a versioned binary container with
byte-exact round-trips.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import FIRST_ITEM_TOKEN, PAD_TOKEN
from .errors import ConfigError
from .tensor import Tensor, concat, flop_count, gather_rows, no_grad

LAYER_NORM_EPS = 1e-12
INIT_STD = 0.02
_CKPT_HEADER = b"#cbit-ckpt v1"
_CONFIG_KEYS = ("vocab_size", "max_len", "dim", "num_layers", "num_heads",
                "dropout", "seed", "mask_padding")


@dataclass(frozen=True)
class ModelConfig:
    """Shape and regularisation settings for the encoder."""

    vocab_size: int
    max_len: int = 15
    dim: int = 256
    num_layers: int = 2
    num_heads: int = 2
    dropout: float = 0.3
    seed: int = 0
    mask_padding: bool = False

    def __post_init__(self):
        if self.vocab_size < FIRST_ITEM_TOKEN + 1:
            raise ConfigError("vocab_size must cover pad, mask and >= 1 item")
        if self.max_len < 2:
            raise ConfigError("max_len must be >= 2 (one item plus the mask)")
        if self.dim < 1 or self.num_heads < 1 or self.num_layers < 0:
            raise ConfigError("dim/heads must be positive, layers >= 0")
        if self.dim % self.num_heads != 0:
            raise ConfigError(
                f"dim {self.dim} not divisible by {self.num_heads} heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")

    @property
    def head_dim(self) -> int:
        return self.dim // self.num_heads

    @property
    def num_items(self) -> int:
        return self.vocab_size - FIRST_ITEM_TOKEN


@dataclass
class SequenceRepresentation:
    """Last-layer hidden states plus optional attention capture."""

    hidden: Tensor
    attention: list[list[np.ndarray]] | None = None
    attn_flops: int = 0


def expected_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Canonical parameter names and shapes, in serialization order."""
    d, dh = config.dim, config.head_dim
    shapes: dict[str, tuple[int, ...]] = {
        "item_emb": (config.vocab_size, d),
        "pos_emb": (config.max_len, d),
    }
    for layer in range(config.num_layers):
        p = f"layers.{layer}."
        for i in range(config.num_heads):
            shapes[p + f"attn.q.{i}"] = (d, dh)
            shapes[p + f"attn.k.{i}"] = (d, dh)
            shapes[p + f"attn.v.{i}"] = (d, dh)
        shapes[p + "attn.out"] = (d, d)
        shapes[p + "ln1.gain"] = (d,)
        shapes[p + "ln1.bias"] = (d,)
        shapes[p + "ffn.w1"] = (d, 4 * d)
        shapes[p + "ffn.b1"] = (4 * d,)
        shapes[p + "ffn.w2"] = (4 * d, d)
        shapes[p + "ffn.b2"] = (d,)
        shapes[p + "ln2.gain"] = (d,)
        shapes[p + "ln2.bias"] = (d,)
    shapes["pred.weight"] = (config.num_items, d)
    shapes["pred.bias"] = (config.num_items,)
    return shapes


def _truncated_normal(rng: np.random.Generator, shape, std=INIT_STD,
                      limit=2.0) -> np.ndarray:
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > limit * std
    while np.any(bad):
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > limit * std
    return out


class ModelParams:
    """All learnable tensors, keyed by canonical name."""

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor]):
        expected = expected_shapes(config)
        if set(tensors) != set(expected):
            missing = sorted(set(expected) - set(tensors))
            extra = sorted(set(tensors) - set(expected))
            raise ConfigError(
                f"parameter set does not match config "
                f"(missing={missing}, unexpected={extra})")
        for name, shape in expected.items():
            if tensors[name].shape != shape:
                raise ConfigError(
                    f"tensor {name!r} has shape {tensors[name].shape}, "
                    f"expected {shape}")
        self.config = config
        # canonical order so that serialization is deterministic
        self.tensors = {name: tensors[name] for name in expected}

    @classmethod
    def initialize(cls, config: ModelConfig,
                   rng: np.random.Generator | None = None) -> "ModelParams":
        """Truncated-normal weights (std 0.02), zero biases, unit LN gains."""
        if rng is None:
            rng = np.random.default_rng((config.seed, 0))
        tensors = {}
        for name, shape in expected_shapes(config).items():
            if name.endswith(("gain",)):
                value = np.ones(shape)
            elif name.endswith(("bias", ".b1", ".b2")):
                value = np.zeros(shape)
            else:
                value = _truncated_normal(rng, shape)
            tensors[name] = Tensor(value, requires_grad=True)
        return cls(config, tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def zero_grads(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {
            name: Tensor(t.data.copy(), requires_grad=True)
            for name, t in self.tensors.items()})


# ----------------------------------------------------------------------
# forward pass
# ----------------------------------------------------------------------
def embed(params: ModelParams, tokens, *, training: bool = False,
          rng: np.random.Generator | None = None) -> Tensor:
    """Token + position embeddings: H0[t] = item_emb[token_t] + pos_emb[t].

    ``tokens`` is one window (T,) or a batch (B, T); output has a trailing
    (T, dim).  Embedding-level dropout applies in training mode only.
    """
    cfg = params.config
    toks = np.asarray(tokens, dtype=np.intp)
    seq_len = toks.shape[-1]
    if seq_len > cfg.max_len:
        raise ConfigError(
            f"sequence length {seq_len} exceeds max_len {cfg.max_len}")
    item = gather_rows(params["item_emb"], toks)
    pos = gather_rows(params["pos_emb"], np.arange(seq_len))
    h0 = item + pos
    if training and cfg.dropout > 0:
        h0 = h0.dropout(cfg.dropout, rng)
    return h0


def encode(params: ModelParams, h0: Tensor, *, training: bool = False,
           rng: np.random.Generator | None = None,
           capture_attention: bool = False,
           pad_mask: np.ndarray | None = None) -> SequenceRepresentation:
    """Run the transformer stack over embedded inputs.

    Attention is fully bidirectional; padding keys are only masked out when
    ``pad_mask`` is supplied (the ``mask_padding`` config ablation).
    """
    cfg = params.config
    scale = float(np.sqrt(cfg.head_dim))
    penalty = None
    if pad_mask is not None:
        penalty = np.where(np.asarray(pad_mask, dtype=bool),
                           -1e9, 0.0)[..., None, :]
    x = h0
    maps: list[list[np.ndarray]] | None = [] if capture_attention else None
    attn_flops = 0
    for layer in range(cfg.num_layers):
        p = f"layers.{layer}."
        heads = []
        layer_maps = []
        for i in range(cfg.num_heads):
            q = x @ params[p + f"attn.q.{i}"]
            k = x @ params[p + f"attn.k.{i}"]
            v = x @ params[p + f"attn.v.{i}"]
            before = flop_count()
            scores = q @ k.mT
            if penalty is not None:
                scores = scores + penalty
            weights = scores.softmax_rows(scale)
            heads.append(weights @ v)
            attn_flops += flop_count() - before
            if capture_attention:
                layer_maps.append(weights.data.copy())
        mixed = concat(heads, axis=-1) @ params[p + "attn.out"]
        if training and cfg.dropout > 0:
            mixed = mixed.dropout(cfg.dropout, rng)
        f = (x + mixed).layer_norm(params[p + "ln1.gain"],
                                   params[p + "ln1.bias"], LAYER_NORM_EPS)
        ff = (f @ params[p + "ffn.w1"] + params[p + "ffn.b1"]).gelu() \
            @ params[p + "ffn.w2"] + params[p + "ffn.b2"]
        if training and cfg.dropout > 0:
            ff = ff.dropout(cfg.dropout, rng)
        x = (f + ff).layer_norm(params[p + "ln2.gain"],
                                params[p + "ln2.bias"], LAYER_NORM_EPS)
        if maps is not None:
            maps.append(layer_maps)
    return SequenceRepresentation(x, maps, attn_flops)


def forward(params: ModelParams, tokens, *, training: bool = False,
            rng: np.random.Generator | None = None,
            capture_attention: bool = False) -> SequenceRepresentation:
    """Embed then encode a window (T,) or a batch of windows (B, T)."""
    h0 = embed(params, tokens, training=training, rng=rng)
    pad_mask = None
    if params.config.mask_padding:
        pad_mask = np.asarray(tokens) == PAD_TOKEN
    return encode(params, h0, training=training, rng=rng,
                  capture_attention=capture_attention, pad_mask=pad_mask)


def predict_logits(params: ModelParams, hidden: Tensor) -> Tensor:
    """Linear prediction layer: one logit per real item.

    Accepts a single hidden state (dim,) or a stack (M, dim); pad and mask
    have no logit, so scores index items as dense_id - 2.
    """
    single = hidden.ndim == 1
    h = hidden.reshape(1, -1) if single else hidden
    logits = h @ params["pred.weight"].mT + params["pred.bias"]
    return logits.reshape(-1) if single else logits


def attention_maps(params: ModelParams, tokens) -> list[list[np.ndarray]]:
    """Per-layer, per-head softmax weights from a dropout-free forward."""
    with no_grad():
        rep = forward(params, tokens, training=False, capture_attention=True)
    return rep.attention


def average_attention_maps(params: ModelParams,
                           windows) -> list[list[np.ndarray]]:
    """Mean attention maps over a set of equal-length windows."""
    windows = list(windows)
    if not windows:
        raise ValueError("need at least one window to average")
    total: list[list[np.ndarray]] | None = None
    for tokens in windows:
        maps = attention_maps(params, tokens)
        if total is None:
            total = [[h.copy() for h in layer] for layer in maps]
        else:
            for layer_sum, layer in zip(total, maps):
                for i, head in enumerate(layer):
                    layer_sum[i] += head
    return [[head / len(windows) for head in layer] for layer in total]


# ----------------------------------------------------------------------
# checkpoint container
# ----------------------------------------------------------------------
def checkpoint_bytes(params: ModelParams) -> bytes:
    """Serialize config and tensors; round-trips byte-exactly."""
    buf = io.BytesIO()
    buf.write(_CKPT_HEADER + b"\n")
    cfg = params.config
    for key in _CONFIG_KEYS:
        value = getattr(cfg, key)
        if isinstance(value, bool):
            value = int(value)
        buf.write(f"config {key} {value!r}\n".encode("utf-8"))
    for name, t in params.tensors.items():
        dims = "".join(f" {d}" for d in t.shape)
        buf.write(f"tensor {name} {t.ndim}{dims}\n".encode("utf-8"))
        buf.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
        buf.write(b"\n")
    buf.write(b"end\n")
    return buf.getvalue()


def params_from_bytes(raw: bytes) -> ModelParams:
    stream = io.BytesIO(raw)

    def next_line() -> str:
        line = stream.readline()
        if not line:
            raise ConfigError("truncated checkpoint")
        return line.decode("utf-8").rstrip("\n")

    if next_line() != _CKPT_HEADER.decode():
        raise ConfigError("not a cbit checkpoint (bad header)")
    cfg_values: dict[str, str] = {}
    tensors: dict[str, Tensor] = {}
    while True:
        line = next_line()
        if line == "end":
            break
        parts = line.split()
        if parts[0] == "config" and len(parts) == 3:
            cfg_values[parts[1]] = parts[2]
        elif parts[0] == "tensor" and len(parts) >= 3:
            name, rank = parts[1], int(parts[2])
            dims = tuple(int(x) for x in parts[3:])
            if len(dims) != rank:
                raise ConfigError(f"bad tensor record for {name!r}")
            count = int(np.prod(dims)) if dims else 1
            payload = stream.read(count * 8)
            if len(payload) != count * 8 or stream.read(1) != b"\n":
                raise ConfigError(f"truncated payload for tensor {name!r}")
            arr = np.frombuffer(payload, dtype="<f8").reshape(dims).copy()
            tensors[name] = Tensor(arr, requires_grad=True)
        else:
            raise ConfigError(f"unexpected checkpoint line: {line!r}")
    missing = [k for k in _CONFIG_KEYS if k not in cfg_values]
    if missing:
        raise ConfigError(f"checkpoint lacks config keys: {missing}")
    config = ModelConfig(
        vocab_size=int(cfg_values["vocab_size"]),
        max_len=int(cfg_values["max_len"]),
        dim=int(cfg_values["dim"]),
        num_layers=int(cfg_values["num_layers"]),
        num_heads=int(cfg_values["num_heads"]),
        dropout=float(cfg_values["dropout"]),
        seed=int(cfg_values["seed"]),
        mask_padding=bool(int(cfg_values["mask_padding"])),
    )
    return ModelParams(config, tensors)


def save_checkpoint(params: ModelParams, path: str | Path) -> None:
    Path(path).write_bytes(checkpoint_bytes(params))


def load_checkpoint(path: str | Path) -> ModelParams:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"checkpoint not found: {path}")
    return params_from_bytes(path.read_bytes())
