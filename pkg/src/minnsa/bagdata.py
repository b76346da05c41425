"""Bags of instance vectors: containers, CSV I/O, padding, splitting and a
synthetic generator under the primary-instance assumption.

The bag file is a CSV with header ``bag_id,label,f0,...,f{p-1}`` and one row
per instance. Rows of a bag are contiguous and share its label. Lines that
start with ``#`` before the header are treated as comments.
"""

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np


class BagFileError(ValueError):
    """Raised for malformed bag files; carries the offending line number."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class Bag:
    bag_id: str
    label: int
    instances: np.ndarray

    def __post_init__(self):
        inst = np.array(self.instances, dtype=np.float64)
        if inst.ndim != 2 or inst.shape[0] < 1:
            raise ValueError(f"bag {self.bag_id!r} needs a non-empty (m, p) instance array")
        if self.label not in (0, 1):
            raise ValueError(f"bag {self.bag_id!r} has non-binary label {self.label!r}")
        inst.setflags(write=False)
        object.__setattr__(self, "instances", inst)
        object.__setattr__(self, "label", int(self.label))

    @property
    def size(self):
        return self.instances.shape[0]


@dataclass(frozen=True)
class Dataset:
    bags: tuple
    p: int

    def __post_init__(self):
        bags = tuple(self.bags)
        object.__setattr__(self, "bags", bags)
        ids = set()
        for bag in bags:
            if bag.instances.shape[1] != self.p:
                raise ValueError(
                    f"bag {bag.bag_id!r} has dimension {bag.instances.shape[1]}, expected {self.p}"
                )
            if bag.bag_id in ids:
                raise ValueError(f"duplicate bag id {bag.bag_id!r}")
            ids.add(bag.bag_id)

    def __len__(self):
        return len(self.bags)

    @property
    def labels(self):
        return np.array([b.label for b in self.bags], dtype=np.int64)

    @property
    def sizes(self):
        return np.array([b.size for b in self.bags], dtype=np.int64)

    @property
    def bag_ids(self):
        return [b.bag_id for b in self.bags]

    def subset(self, indices):
        return Dataset(tuple(self.bags[int(i)] for i in indices), self.p)


@dataclass(frozen=True)
class BagBatch:
    data: np.ndarray  # (batch, m_star, p)
    mask: np.ndarray  # (batch, m_star) bool
    labels: np.ndarray  # (batch,)
    bag_ids: tuple = field(default=())

    @property
    def m_star(self):
        return self.data.shape[1]

    def __len__(self):
        return self.data.shape[0]

    def trimmed(self):
        """Drop trailing columns that are padding for every bag."""
        L = int(self.mask.any(axis=0).nonzero()[0].max()) + 1
        return BagBatch(self.data[:, :L], self.mask[:, :L], self.labels, self.bag_ids)

    def take(self, indices):
        indices = np.asarray(indices)
        ids = tuple(self.bag_ids[i] for i in indices) if self.bag_ids else ()
        return BagBatch(self.data[indices], self.mask[indices], self.labels[indices], ids)


@dataclass(frozen=True)
class SynthConfig:
    n_bags: int = 400
    positive_fraction: float = 0.5
    p: int = 30
    bag_size_mean: float = 4.0
    bag_size_max: int = 100
    witness_rate: float = 1.0
    signal_shift: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if self.n_bags < 1:
            raise ValueError("n_bags must be positive")
        if not 0.0 < self.positive_fraction < 1.0:
            raise ValueError("positive_fraction must lie in (0, 1)")
        if self.p < 1:
            raise ValueError("p must be positive")
        if self.bag_size_mean < 1.0:
            raise ValueError("bag_size_mean must be at least 1")
        if self.bag_size_max < 1:
            raise ValueError("bag_size_max must be at least 1")
        if not 0.0 < self.witness_rate <= 1.0:
            raise ValueError("witness_rate must lie in (0, 1]")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")


def _round_half_up(x):
    return int(math.floor(x + 0.5))


# ---------------------------------------------------------------------------
# file I/O


def parse_bag_file(source):
    """Read a bag CSV from a path, a text/binary stream or raw bytes."""
    if isinstance(source, (bytes, bytearray)):
        text = bytes(source).decode("utf-8")
    elif isinstance(source, str):
        with open(source, "rb") as fh:
            text = fh.read().decode("utf-8")
    elif hasattr(source, "read"):
        raw = source.read()
        text = raw.decode("utf-8") if isinstance(raw, (bytes, bytearray)) else raw
    else:
        with open(source, "rb") as fh:
            text = fh.read().decode("utf-8")

    lines = text.splitlines()
    start = 0
    while start < len(lines) and (lines[start].startswith("#") or not lines[start].strip()):
        start += 1
    if start >= len(lines):
        raise BagFileError("empty file")

    reader = csv.reader(lines[start:])
    header = next(reader)
    if len(header) < 3 or header[0] != "bag_id" or header[1] != "label":
        raise BagFileError("header must be bag_id,label,f0,...", line=start + 1)
    p = len(header) - 2
    if header[2:] != [f"f{i}" for i in range(p)]:
        raise BagFileError("feature columns must be named f0..f{p-1}", line=start + 1)

    bags = []
    seen = set()
    cur_id, cur_label, cur_rows = None, None, []

    def flush():
        if cur_id is not None:
            bags.append(Bag(cur_id, cur_label, np.array(cur_rows, dtype=np.float64)))

    for offset, row in enumerate(reader):
        lineno = start + 2 + offset
        if not row or (len(row) == 1 and not row[0].strip()):
            continue
        if len(row) != p + 2:
            raise BagFileError(f"expected {p + 2} fields, got {len(row)}", line=lineno)
        bag_id, label_txt = row[0], row[1]
        if not bag_id:
            raise BagFileError("empty bag_id", line=lineno)
        try:
            label = int(label_txt)
        except ValueError:
            raise BagFileError(f"label {label_txt!r} is not an integer", line=lineno) from None
        if label not in (0, 1):
            raise BagFileError(f"label {label} is not 0 or 1", line=lineno)
        try:
            values = [float(v) for v in row[2:]]
        except ValueError as exc:
            raise BagFileError(f"bad feature value ({exc})", line=lineno) from None
        if not all(math.isfinite(v) for v in values):
            raise BagFileError("non-finite feature value", line=lineno)

        if bag_id != cur_id:
            if bag_id in seen:
                raise BagFileError(f"rows of bag {bag_id!r} are not contiguous", line=lineno)
            flush()
            seen.add(bag_id)
            cur_id, cur_label, cur_rows = bag_id, label, []
        elif label != cur_label:
            raise BagFileError(
                f"bag {bag_id!r} changes label from {cur_label} to {label}", line=lineno
            )
        cur_rows.append(values)
    flush()
    if not bags:
        raise BagFileError("file contains a header but no instances")
    return Dataset(tuple(bags), p)


def format_float(x):
    return format(float(x), ".9g")


def write_bag_file(ds, sink, comments=()):
    """Write ``ds`` in bag CSV format; ``sink`` is a path or text stream."""
    buf = io.StringIO()
    for line in comments:
        buf.write(f"# {line}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["bag_id", "label"] + [f"f{i}" for i in range(ds.p)])
    for bag in ds.bags:
        for inst in bag.instances:
            writer.writerow([bag.bag_id, bag.label] + [format_float(v) for v in inst])
    text = buf.getvalue()
    if hasattr(sink, "write"):
        sink.write(text)
    else:
        with open(sink, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    return text


# ---------------------------------------------------------------------------
# batching


def pad_and_mask(ds, m_star):
    """Pad every bag to ``m_star`` rows with zeros, truncating longer bags to
    their first ``m_star`` instances."""
    if m_star < 1:
        raise ValueError("m_star must be at least 1")
    n = len(ds)
    data = np.zeros((n, m_star, ds.p), dtype=np.float64)
    mask = np.zeros((n, m_star), dtype=bool)
    for b, bag in enumerate(ds.bags):
        m = min(bag.size, m_star)
        data[b, :m] = bag.instances[:m]
        mask[b, :m] = True
    data.setflags(write=False)
    mask.setflags(write=False)
    return BagBatch(data, mask, ds.labels, tuple(ds.bag_ids))


# ---------------------------------------------------------------------------
# scenario subsampling and cross-validation splits


def subsample_scenario(ds, scenario, target_n, seed):
    """Draw ``target_n`` bags without replacement with a balanced (half
    positive) or imbalanced (10% positive, half-up rounding) class mix."""
    if target_n < 1:
        raise ValueError("target_n must be positive")
    if scenario == "balanced":
        n_pos = target_n // 2
    elif scenario == "imbalanced":
        n_pos = _round_half_up(0.1 * target_n)
    else:
        raise ValueError(f"unknown scenario {scenario!r}")
    n_neg = target_n - n_pos
    labels = ds.labels
    pos = np.flatnonzero(labels == 1)
    neg = np.flatnonzero(labels == 0)
    short = []
    if len(pos) < n_pos:
        short.append(f"need {n_pos} positive bags, have {len(pos)}")
    if len(neg) < n_neg:
        short.append(f"need {n_neg} negative bags, have {len(neg)}")
    if short:
        raise ValueError("insufficient bags: " + "; ".join(short))
    rng = np.random.default_rng(seed)
    chosen = np.concatenate([
        rng.choice(pos, size=n_pos, replace=False),
        rng.choice(neg, size=n_neg, replace=False),
    ])
    return ds.subset(np.sort(chosen))


def stratified_kfold(labels, k, seed):
    """Split indices into ``k`` stratified folds.

    ``labels`` may be a Dataset or a label array. Returns a list of
    ``(train_idx, test_idx)`` pairs of sorted index arrays.
    """
    if isinstance(labels, Dataset):
        labels = labels.labels
    labels = np.asarray(labels)
    if k < 2:
        raise ValueError("k must be at least 2")
    rng = np.random.default_rng(seed)
    fold_of = np.empty(len(labels), dtype=np.int64)
    offset = 0
    for cls in np.unique(labels):
        members = np.flatnonzero(labels == cls)
        if len(members) < k:
            raise ValueError(f"class {cls} has {len(members)} members, fewer than k={k}")
        members = rng.permutation(members)
        # continue the round-robin across classes so fold sizes stay even
        fold_of[members] = (offset + np.arange(len(members))) % k
        offset = (offset + len(members)) % k
    all_idx = np.arange(len(labels))
    return [(all_idx[fold_of != f], all_idx[fold_of == f]) for f in range(k)]


def stratified_holdout(labels, fraction, seed):
    """Split off a stratified holdout of ``fraction`` (at least one per class)."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    hold = []
    for cls in np.unique(labels):
        members = rng.permutation(np.flatnonzero(labels == cls))
        n_hold = max(1, _round_half_up(fraction * len(members)))
        if n_hold >= len(members):
            raise ValueError(f"class {cls} too small for a holdout split")
        hold.append(members[:n_hold])
    hold = np.sort(np.concatenate(hold))
    keep = np.setdiff1d(np.arange(len(labels)), hold)
    return keep, hold


# ---------------------------------------------------------------------------
# synthetic bags


def _bag_sizes(rng, n, mean, cap):
    # geometric on {1, 2, ...} with the requested mean, truncated by rejection
    q = 1.0 / mean
    sizes = rng.geometric(q, size=n)
    bad = sizes > cap
    while bad.any():
        sizes[bad] = rng.geometric(q, size=int(bad.sum()))
        bad = sizes > cap
    return sizes


def signal_direction(cfg):
    """The unit vector along which primary instances are shifted."""
    rng = np.random.default_rng([cfg.seed, 1])
    u = rng.standard_normal(cfg.p)
    return u / np.linalg.norm(u)


def synth_generate(cfg):
    """Generate bags where positive labels are explained by primary instances."""
    rng = np.random.default_rng([cfg.seed, 0])
    u = signal_direction(cfg)
    n_pos = _round_half_up(cfg.positive_fraction * cfg.n_bags)
    labels = np.zeros(cfg.n_bags, dtype=np.int64)
    labels[:n_pos] = 1
    labels = rng.permutation(labels)
    sizes = _bag_sizes(rng, cfg.n_bags, cfg.bag_size_mean, cfg.bag_size_max)
    width = len(str(cfg.n_bags - 1))
    bags = []
    for i in range(cfg.n_bags):
        m = int(sizes[i])
        inst = rng.standard_normal((m, cfg.p))
        if labels[i] == 1:
            primary = rng.random(m) < cfg.witness_rate
            if not primary.any():
                primary[rng.integers(m)] = True
            inst[primary] += cfg.signal_shift * u
        bags.append(Bag(f"bag{i:0{width}d}", int(labels[i]), inst))
    return Dataset(tuple(bags), cfg.p)
