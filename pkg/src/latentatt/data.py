"""Synthetic monotone transduction task and the plain-text dataset format.

Each utterance is a label sequence where every label occupies a run of
frames; a frame is that label's mean vector plus Gaussian noise.

Dataset file format (version 1), whitespace-separated ASCII::

    latentatt-dataset 1
    vocab <V> dim <F> records <R>
    record <id>
    <T> <N>
    <F reals>            # T lines, one frame each
    labels <N ids>
    bounds <N ints>      # optional, last frame (1-based) of each label's run
    ...

Reals are written with Python's shortest round-trip ``repr``, so a file this
module wrote is reproduced byte for byte by ``write(read(f))``.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, FormatError, UnsupportedVersionError

MAGIC = "latentatt-dataset"
VERSION = 1


@dataclass
class TaskConfig:
    vocab_size: int = 10
    feature_dim: int = 8
    frames_min: int = 3
    frames_max: int = 8
    noise: float = 0.3
    labels_min: int = 3
    labels_max: int = 12
    train_size: int = 2000
    dev_size: int = 200
    test_size: int = 200
    pool: int = 2
    seed: int = 1234

    def check(self, strict=True):
        if self.frames_min < 1 or self.frames_max < self.frames_min:
            raise ConfigError("need 1 <= frames_min <= frames_max")
        if self.noise < 0:
            raise ConfigError("noise must be >= 0")
        if self.labels_min < 1 or self.labels_max < self.labels_min:
            raise ConfigError("need 1 <= labels_min <= labels_max")
        if strict:
            for n in range(self.labels_min, self.labels_max + 1):
                if math.ceil(n * self.frames_min / self.pool) < n + 1:
                    raise ConfigError(
                        f"infeasible: {n} labels of >= {self.frames_min} frames pooled by "
                        f"{self.pool} leave fewer than {n + 1} encoder frames"
                    )


@dataclass
class DatasetRecord:
    id: str
    features: np.ndarray
    labels: list
    bounds: list | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)


@dataclass
class Dataset:
    vocab_size: int
    feature_dim: int
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, i):
        return self.records[i]


def label_means(config: TaskConfig):
    rng = np.random.default_rng([config.seed, 0])
    return rng.normal(0.0, 1.0, (config.vocab_size, config.feature_dim))


def generate(config: TaskConfig, strict=True):
    """Draw the train/dev/test splits; returns a dict of :class:`Dataset`."""
    config.check(strict)
    means = label_means(config)
    out = {}
    sizes = (("train", config.train_size), ("dev", config.dev_size), ("test", config.test_size))
    for k, (name, size) in enumerate(sizes, start=1):
        rng = np.random.default_rng([config.seed, k])
        ds = Dataset(config.vocab_size, config.feature_dim)
        for n in range(size):
            ds.records.append(_draw(rng, config, means, f"{name}-{n:05d}"))
        out[name] = ds
    return out


def _draw(rng, config, means, rid):
    N = int(rng.integers(config.labels_min, config.labels_max + 1))
    labels = rng.integers(0, config.vocab_size, N)
    runs = rng.integers(config.frames_min, config.frames_max + 1, N)
    frame_labels = np.repeat(labels, runs)
    x = means[frame_labels] + config.noise * rng.normal(size=(len(frame_labels), config.feature_dim))
    return DatasetRecord(rid, x, [int(v) for v in labels], [int(b) for b in np.cumsum(runs)])


def validate(dataset: Dataset, output_length, strict=True):
    """Records whose labels (+EOS) cannot be strictly aligned to the encoder output.

    ``output_length`` maps ``T`` to ``T'``. Returns the offending ids.
    """
    bad = []
    for rec in dataset:
        if any(not 0 <= y < dataset.vocab_size for y in rec.labels):
            raise FormatError(f"record {rec.id}: label out of range")
        if strict and len(rec.labels) + 1 > output_length(len(rec.features)):
            bad.append(rec.id)
    return bad


# -- file IO ------------------------------------------------------------------


def dumps(dataset: Dataset):
    buf = io.StringIO()
    w = buf.write
    w(f"{MAGIC} {VERSION}\n")
    w(f"vocab {dataset.vocab_size} dim {dataset.feature_dim} records {len(dataset)}\n")
    for rec in dataset:
        w(f"record {rec.id}\n")
        w(f"{len(rec.features)} {len(rec.labels)}\n")
        for row in rec.features.tolist():
            w(" ".join(map(repr, row)))
            w("\n")
        w("labels " + " ".join(map(str, rec.labels)) + "\n")
        if rec.bounds is not None:
            w("bounds " + " ".join(map(str, rec.bounds)) + "\n")
    return buf.getvalue()


def write(dataset: Dataset, path):
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(dumps(dataset))


def read(path):
    with open(path, encoding="ascii", newline="\n") as fh:
        return loads(fh.read(), path=str(path))


def loads(text, path=None):
    """Parse the dataset format; raises :class:`FormatError` with a line number."""
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    pos = 0

    def fail(msg, line=None):
        raise FormatError(msg, path=path, line=(pos if line is None else line))

    def next_line():
        nonlocal pos
        if pos >= len(lines):
            fail("unexpected end of file", line=len(lines) + 1)
        pos += 1
        return lines[pos - 1]

    head = next_line().split()
    if len(head) != 2 or head[0] != MAGIC:
        fail("not a latentatt dataset file")
    if head[1] != str(VERSION):
        raise UnsupportedVersionError(f"unsupported dataset version {head[1]!r}", path=path, line=1)
    meta = next_line().split()
    if len(meta) != 6 or meta[0::2] != ["vocab", "dim", "records"]:
        fail("bad header line; expected 'vocab V dim F records R'")
    try:
        V, F, R = (int(v) for v in meta[1::2])
    except ValueError:
        fail("non-integer header value")
    ds = Dataset(V, F)
    for _ in range(R):
        tag = next_line().split(maxsplit=1)
        if len(tag) != 2 or tag[0] != "record":
            fail("expected 'record <id>'")
        try:
            T, N = (int(v) for v in next_line().split())
        except ValueError:
            fail("expected '<T> <N>'")
        if T < 1 or N < 1:
            fail("records need T >= 1 and N >= 1")
        rows = []
        for _ in range(T):
            parts = next_line().split()
            if len(parts) != F:
                fail(f"expected {F} values per frame, got {len(parts)}")
            try:
                rows.append([float(p) for p in parts])
            except ValueError:
                fail("non-numeric frame value")
        labels = _int_line(next_line(), "labels", N, fail)
        bounds = None
        if pos < len(lines) and lines[pos].startswith("bounds"):
            bounds = _int_line(next_line(), "bounds", N, fail)
        ds.records.append(DatasetRecord(tag[1], np.array(rows), labels, bounds))
    if pos != len(lines):
        fail("trailing data after the declared number of records", line=pos + 1)
    return ds


def _int_line(line, key, n, fail):
    parts = line.split()
    if not parts or parts[0] != key:
        fail(f"expected '{key} ...'")
    if len(parts) - 1 != n:
        fail(f"expected {n} values after '{key}', got {len(parts) - 1}")
    try:
        return [int(v) for v in parts[1:]]
    except ValueError:
        fail(f"non-integer value in '{key}' line")
