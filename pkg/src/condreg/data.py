"""Synthetic entangled-attribute data and CSV ingestion/export.

CSV layout: header ``f0,...,f{d-1},y,s`` followed by one row per example,
decimal floats for features and 0/1 for the main (``y``) and sensitive
(``s``) labels.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from condreg.errors import ParseError, ShapeError
from condreg.numerics import make_rng
from condreg.stats import LabeledBatch

SPLIT_FRACTIONS = (0.6, 0.2, 0.2)


def _default_y_shift():
    return [1.6, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]


def _default_s_shift():
    return [0.0, 3.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]


@dataclass
class SynthSpec:
    """Gaussian noise plus label-dependent shifts: ``x = noise + y*y_shift + s*s_shift``.

    ``correlation`` is P(S == Y).
    """

    n: int = 5000
    d_in: int = 8
    y_shift: list = field(default_factory=_default_y_shift)
    s_shift: list = field(default_factory=_default_s_shift)
    correlation: float = 0.8
    noise_std: float = 2.0
    seed: int = 7

    def __post_init__(self):
        if self.n < 5:
            raise ValueError("n must be at least 5")
        if len(self.y_shift) != self.d_in or len(self.s_shift) != self.d_in:
            raise ShapeError("y_shift and s_shift must have length d_in")
        if not 0.0 <= self.correlation <= 1.0:
            raise ValueError("correlation must lie in [0, 1]")
        if self.noise_std < 0:
            raise ValueError("noise_std must be nonnegative")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class DatasetSplit:
    train: LabeledBatch
    test: LabeledBatch
    aux: LabeledBatch  # second sample for the nested-loop baseline


def generate(spec: SynthSpec) -> DatasetSplit:
    """Draw ``spec.n`` examples and split them 60/20/20 into train/test/aux."""
    rng = make_rng(spec.seed)
    y = rng.integers(0, 2, size=spec.n)
    agree = rng.random(spec.n) < spec.correlation
    s = np.where(agree, y, 1 - y)
    x = spec.noise_std * rng.standard_normal((spec.n, spec.d_in))
    x += y[:, None] * np.asarray(spec.y_shift, dtype=np.float64)
    x += s[:, None] * np.asarray(spec.s_shift, dtype=np.float64)
    order = rng.permutation(spec.n)
    n_train = int(round(SPLIT_FRACTIONS[0] * spec.n))
    n_test = int(round(SPLIT_FRACTIONS[1] * spec.n))
    parts = np.split(order, [n_train, n_train + n_test])
    full = LabeledBatch(x, s, y)
    return DatasetSplit(*(full.take(np.sort(p)) for p in parts))


def write_csv(batch: LabeledBatch, path) -> Path:
    path = Path(path)
    d = batch.dim
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([f"f{j}" for j in range(d)] + ["y", "s"])
        for row, yv, sv in zip(batch.samples, batch.main, batch.sensitive):
            writer.writerow([format(v, ".17g") for v in row] + [int(yv), int(sv)])
    return path


def _label(token, name, line):
    if token.strip() in ("0", "1"):
        return int(token)
    raise ParseError(f"{name} label must be 0 or 1, got {token!r}", line)


def read_csv(path) -> LabeledBatch:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("file is empty", 1) from None
        header = [h.strip() for h in header]
        if len(header) < 3 or header[-2:] != ["y", "s"]:
            raise ParseError("header must end with columns y,s", 1)
        d = len(header) - 2
        if header[:d] != [f"f{j}" for j in range(d)]:
            raise ParseError("feature columns must be named f0..f{d-1}", 1)
        rows, ys, ss = [], [], []
        for line, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != d + 2:
                raise ParseError(f"expected {d + 2} fields, got {len(rec)}", line)
            try:
                feats = [float(v) for v in rec[:d]]
            except ValueError as exc:
                raise ParseError(f"bad feature value ({exc})", line) from None
            if not np.all(np.isfinite(feats)):
                raise ParseError("non-finite feature value", line)
            rows.append(feats)
            ys.append(_label(rec[d], "y", line))
            ss.append(_label(rec[d + 1], "s", line))
    if not rows:
        raise ParseError("file contains no data rows")
    return LabeledBatch(np.array(rows), np.array(ss), np.array(ys))
