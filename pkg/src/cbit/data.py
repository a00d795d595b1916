"""Interaction ingestion and training-instance construction.

Raw (user, item, timestamp) triplets or pre-ordered sequence files are
parsed, deduplicated and 5-core filtered to a fixpoint.  Item ids are
mapped to a dense vocabulary where 0 is the padding token and 1 the mask
token; real items start at 2.  Long sequences become overlapping
fixed-length windows (short ones are pre-padded), and evaluation uses a
leave-one-out split: last item for test, second-to-last for validation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError, DataError

PAD_TOKEN = 0
MASK_TOKEN = 1
FIRST_ITEM_TOKEN = 2

MIN_INTERACTIONS_PER_USER = 5
MIN_USERS_PER_ITEM = 5

_DATA_HEADER = "#cbit-data v1"


@dataclass(frozen=True)
class TrainingWindow:
    """A fixed-length token window; padding occupies a contiguous prefix."""

    tokens: tuple[int, ...]
    source_user: str | None = None
    valid_from: int = 0


@dataclass
class InteractionDataset:
    """Filtered interactions with dense vocabulary and per-user sequences."""

    sequences: dict[str, list[int]]
    item_to_dense: dict[str, int]
    dense_to_item: dict[int, str]

    @property
    def users(self) -> list[str]:
        return list(self.sequences)

    @property
    def num_users(self) -> int:
        return len(self.sequences)

    @property
    def num_items(self) -> int:
        return len(self.item_to_dense)

    @property
    def vocab_size(self) -> int:
        # dense ids 0 (pad) and 1 (mask) are reserved
        return self.num_items + 2

    @property
    def num_actions(self) -> int:
        return sum(len(s) for s in self.sequences.values())

    def item_set(self, user: str) -> set[int]:
        return set(self.sequences[user])

    def stats(self) -> dict[str, float]:
        users = self.num_users
        items = self.num_items
        actions = self.num_actions
        return {
            "users": users,
            "items": items,
            "actions": actions,
            "avg_length": actions / users if users else 0.0,
            "sparsity": 1.0 - actions / (users * items) if users and items else 0.0,
        }

    def stats_line(self) -> str:
        s = self.stats()
        return (f"users={s['users']} items={s['items']} actions={s['actions']} "
                f"avg_length={s['avg_length']:.1f} "
                f"sparsity={100.0 * s['sparsity']:.2f}%")


@dataclass
class EvalSplit:
    """Per-user leave-one-out split over dense item sequences."""

    train_sequences: dict[str, list[int]]
    validation: dict[str, tuple[tuple[int, ...], int]] = field(default_factory=dict)
    test: dict[str, tuple[tuple[int, ...], int]] = field(default_factory=dict)


def _parse_triplets(path: Path) -> dict[str, list[str]]:
    events: list[tuple[str, str, float, int]] = []
    seen: set[tuple[str, str, float]] = set()
    with path.open(encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            fields = line.split()
            if len(fields) != 3:
                raise DataError(
                    f"{path}:{lineno}: expected 'user item timestamp', "
                    f"got {len(fields)} fields")
            user, item, raw_ts = fields
            try:
                ts = float(raw_ts)
            except ValueError:
                raise DataError(
                    f"{path}:{lineno}: bad timestamp {raw_ts!r}") from None
            key = (user, item, ts)
            if key in seen:
                continue
            seen.add(key)
            events.append((user, item, ts, lineno))

    per_user: dict[str, list[tuple[float, int, str]]] = {}
    for user, item, ts, lineno in events:
        per_user.setdefault(user, []).append((ts, lineno, item))
    # sorted() is stable, so timestamp ties keep input-file order
    return {u: [item for _, _, item in sorted(evts, key=lambda e: e[0])]
            for u, evts in per_user.items()}


def _parse_sequences(path: Path) -> dict[str, list[str]]:
    per_user: dict[str, list[str]] = {}
    with path.open(encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            fields = line.split()
            if len(fields) < 2:
                raise DataError(
                    f"{path}:{lineno}: expected 'user item ...', "
                    f"got {len(fields)} fields")
            per_user.setdefault(fields[0], []).extend(fields[1:])
    return per_user


def _five_core(per_user: dict[str, list[str]]) -> dict[str, list[str]]:
    """Drop sparse users/items until nothing changes.

    Users need >= 5 interactions; items need >= 5 distinct users.  Removing
    an item can push a user back under the threshold, hence the fixpoint.
    """
    seqs = {u: list(items) for u, items in per_user.items()}
    while True:
        changed = False
        short = [u for u, s in seqs.items()
                 if len(s) < MIN_INTERACTIONS_PER_USER]
        for u in short:
            del seqs[u]
            changed = True
        users_per_item: dict[str, set[str]] = {}
        for u, s in seqs.items():
            for item in set(s):
                users_per_item.setdefault(item, set()).add(u)
        rare = {item for item, us in users_per_item.items()
                if len(us) < MIN_USERS_PER_ITEM}
        if rare:
            changed = True
            seqs = {u: [i for i in s if i not in rare]
                    for u, s in seqs.items()}
        if not changed:
            return seqs


def build_dataset(per_user: dict[str, list[str]]) -> InteractionDataset:
    """5-core filter raw per-user item lists and build the dense vocab."""
    filtered = _five_core(per_user)
    if not filtered:
        raise DataError("dataset is empty after 5-core filtering")
    item_to_dense: dict[str, int] = {}
    for items in filtered.values():
        for item in items:
            if item not in item_to_dense:
                item_to_dense[item] = FIRST_ITEM_TOKEN + len(item_to_dense)
    sequences = {u: [item_to_dense[i] for i in items]
                 for u, items in filtered.items()}
    dense_to_item = {d: raw for raw, d in item_to_dense.items()}
    return InteractionDataset(sequences, item_to_dense, dense_to_item)


def load_interactions(path: str | Path, fmt: str = "triplet") -> InteractionDataset:
    """Parse a raw interaction file and return the filtered dataset.

    ``triplet`` files carry one whitespace-separated ``user item timestamp``
    per line (exact duplicates are dropped, per-user order is by timestamp
    with ties kept in file order).  ``sequence`` files carry one
    ``user item item ...`` line already in chronological order.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"input file not found: {path}")
    if fmt == "triplet":
        per_user = _parse_triplets(path)
    elif fmt == "sequence":
        per_user = _parse_sequences(path)
    else:
        raise ConfigError(f"unknown input format {fmt!r}")
    return build_dataset(per_user)


def slide_windows(sequence: list[int], window_size: int, stride: int = 1,
                  user: str | None = None) -> list[TrainingWindow]:
    """Cut a sequence into fixed-length windows.

    Sequences no longer than the window are pre-padded into a single
    window.  Longer sequences yield windows at offsets 0, stride, 2*stride,
    ... plus an end-aligned final window, so the most recent items are
    never dropped.
    """
    if window_size < 1:
        raise ConfigError("window size must be >= 1")
    if stride < 1:
        raise ConfigError("stride must be >= 1")
    if not sequence:
        raise DataError("cannot window an empty sequence")
    n = len(sequence)
    if n <= window_size:
        pad = window_size - n
        return [TrainingWindow((PAD_TOKEN,) * pad + tuple(sequence),
                               user, pad)]
    offsets = list(range(0, n - window_size + 1, stride))
    if offsets[-1] != n - window_size:
        offsets.append(n - window_size)
    return [TrainingWindow(tuple(sequence[o:o + window_size]), user, 0)
            for o in offsets]


def leave_one_out(ds: InteractionDataset) -> EvalSplit:
    """Hold out each user's last item for test, second-to-last for validation."""
    split = EvalSplit(train_sequences={})
    for user, seq in ds.sequences.items():
        if len(seq) < 3:
            raise DataError(f"user {user!r} has fewer than 3 interactions")
        split.train_sequences[user] = list(seq[:-2])
        split.validation[user] = (tuple(seq[:-2]), seq[-2])
        split.test[user] = (tuple(seq[:-1]), seq[-1])
    return split


def truncate_for_inference(sequence: list[int], window_size: int) -> list[int]:
    """Keep the most recent items, leaving one slot for the appended mask."""
    if window_size < 2:
        raise ConfigError("window size must be >= 2 at inference")
    keep = window_size - 1
    return list(sequence[-keep:]) if len(sequence) > keep else list(sequence)


def training_windows(split: EvalSplit, window_size: int,
                     stride: int = 1) -> list[TrainingWindow]:
    """All slide windows over every user's training context."""
    windows: list[TrainingWindow] = []
    for user, seq in split.train_sequences.items():
        windows.extend(slide_windows(seq, window_size, stride, user=user))
    return windows


# ----------------------------------------------------------------------
# on-disk format
# ----------------------------------------------------------------------
def save_dataset(ds: InteractionDataset, out_dir: str | Path) -> None:
    """Write ``dataset.txt`` (header + one dense sequence per line) and
    ``vocab.txt`` (``raw_id dense_id`` per line)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = [f"{_DATA_HEADER} {ds.num_users} {ds.num_items}"]
    for user, seq in ds.sequences.items():
        lines.append(user + " " + " ".join(str(t) for t in seq))
    (out / "dataset.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    vocab_lines = [f"{ds.dense_to_item[d]} {d}"
                   for d in sorted(ds.dense_to_item)]
    (out / "vocab.txt").write_text("\n".join(vocab_lines) + "\n",
                                   encoding="utf-8")


def load_dataset(data_dir: str | Path) -> InteractionDataset:
    """Read back a dataset written by :func:`save_dataset`."""
    data_dir = Path(data_dir)
    ds_path = data_dir / "dataset.txt"
    vocab_path = data_dir / "vocab.txt"
    if not ds_path.exists() or not vocab_path.exists():
        raise DataError(f"no preprocessed dataset under {data_dir}")

    item_to_dense: dict[str, int] = {}
    for lineno, line in enumerate(vocab_path.read_text(encoding="utf-8")
                                  .splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split()
        if len(fields) != 2:
            raise DataError(f"{vocab_path}:{lineno}: bad vocab line")
        item_to_dense[fields[0]] = int(fields[1])

    lines = ds_path.read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith(_DATA_HEADER):
        raise DataError(f"{ds_path}: missing {_DATA_HEADER!r} header")
    header = lines[0].split()
    expected_users, expected_items = int(header[2]), int(header[3])

    sequences: dict[str, list[int]] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        fields = line.split()
        try:
            sequences[fields[0]] = [int(t) for t in fields[1:]]
        except ValueError:
            raise DataError(f"{ds_path}:{lineno}: bad sequence line") from None

    ds = InteractionDataset(sequences, item_to_dense,
                            {d: raw for raw, d in item_to_dense.items()})
    if ds.num_users != expected_users or ds.num_items != expected_items:
        raise DataError(
            f"{ds_path}: header says {expected_users} users / "
            f"{expected_items} items, file has {ds.num_users} / {ds.num_items}")
    return ds
