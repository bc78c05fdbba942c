"""Tabular data ingestion and the label-proportion bag protocol."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from kdm.errors import (BadFractions, InsufficientClassInstances, ParseError,
                        SchemaError)
from kdm.rng import RngState, as_rng
from kdm.training import BagDataset, LabeledDataset

log = logging.getLogger(__name__)

ROLES = ("numeric", "categorical", "label")
STD_FLOOR = 1e-12


@dataclass
class TabularSchema:
    columns: list  # [(name, role)]
    positive_class: str | None = None
    header: bool = False
    delimiter: str = ","
    missing_values: tuple = ("?", "")

    def __post_init__(self):
        self.columns = [(str(n), str(r)) for n, r in self.columns]
        roles = [r for _, r in self.columns]
        bad = [r for r in roles if r not in ROLES]
        if bad:
            raise SchemaError(f"unknown column role {bad[0]!r}")
        if roles.count("label") != 1:
            raise SchemaError("schema needs exactly one label column")
        if len(roles) < 2:
            raise SchemaError("schema needs at least one feature column")
        self.missing_values = tuple(self.missing_values)

    @property
    def label_index(self):
        return [r for _, r in self.columns].index("label")

    @classmethod
    def from_json(cls, obj):
        try:
            # objects {"name", "role"} or bare [name, role] pairs
            cols = [(c["name"], c["role"]) if isinstance(c, dict) else tuple(c) for c in obj["columns"]]
        except (KeyError, TypeError) as exc:
            raise SchemaError(f"bad schema JSON: {exc}") from exc
        return cls(cols, obj.get("positive_class"), bool(obj.get("header", False)),
                   obj.get("delimiter", ","), tuple(obj.get("missing_values", ("?", ""))))

    def to_json(self):
        return {
            "columns": [{"name": n, "role": r} for n, r in self.columns],
            "positive_class": self.positive_class,
            "header": self.header,
            "delimiter": self.delimiter,
            "missing_values": list(self.missing_values),
        }

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def bundled_schema(name):
    """Schema shipped with the package (``"adult"`` or ``"magic"``)."""
    text = resources.files("kdm").joinpath("schemas", f"{name}.json").read_text()
    return TabularSchema.from_json(json.loads(text))


BUNDLED_SCHEMAS = ("adult", "magic")


def resolve_schema(ref):
    """A schema JSON path, or a bundled name when no such file exists."""
    if ref in BUNDLED_SCHEMAS and not Path(ref).exists():
        return bundled_schema(ref)
    return TabularSchema.load(ref)


@dataclass
class Encoder:
    """Category orderings (first appearance) for one-hot expansion."""

    categories: dict = field(default_factory=dict)
    classes: list = field(default_factory=list)

    def to_json(self):
        return {"categories": self.categories, "classes": self.classes}

    @classmethod
    def from_json(cls, obj):
        return cls(dict(obj["categories"]), list(obj["classes"]))


def _read_rows(path, schema, ncol):
    rows, line_numbers = [], []
    dropped = 0
    missing = set(schema.missing_values)
    with open(path, newline="") as fh:
        reader = csv.reader(fh, delimiter=schema.delimiter)
        for lineno, raw in enumerate(reader, start=1):
            if schema.header and lineno == 1:
                continue
            if not raw or all(not f.strip() for f in raw):
                continue
            fields_ = [f.strip() for f in raw]
            if len(fields_) != ncol:
                raise ParseError(lineno, min(len(fields_), ncol) + 1,
                                 f"expected {ncol} fields, found {len(fields_)}")
            if any(f in missing for f in fields_):
                dropped += 1
                continue
            rows.append(fields_)
            line_numbers.append(lineno)
    if dropped:
        log.warning("%s: dropped %d rows with missing values", path, dropped)
    return rows, line_numbers


def _label_value(v, schema):
    # adult.test style labels carry a trailing period
    return v[:-1] if v.endswith(".") else v


def build_encoder(rows, schema):
    enc = Encoder()
    lab = schema.label_index
    for j, (name, role) in enumerate(schema.columns):
        if role == "categorical":
            seen = {}
            for r in rows:
                seen.setdefault(r[j], None)
            enc.categories[name] = list(seen)
    if schema.positive_class is not None:
        values = {_label_value(r[lab], schema) for r in rows}
        others = sorted(values - {schema.positive_class})
        if len(others) > 1:
            raise SchemaError(f"binary schema but labels {sorted(values)}")
        negative = others[0] if others else f"not {schema.positive_class}"
        enc.classes = [negative, schema.positive_class]
    else:
        seen = {}
        for r in rows:
            seen.setdefault(_label_value(r[lab], schema), None)
        enc.classes = list(seen)
    return enc


def load_csv(path, schema, encoder=None, labeled=True, numeric_label=False):
    """Parse ``path`` into a :class:`LabeledDataset`.

    Numeric columns become floats, categorical columns are one-hot expanded
    (first-appearance order unless an ``encoder`` is given; unseen categories
    map to an all-zero block) and the label becomes a one-hot row (binary
    schemas put the positive class at index 1). The encoder used is attached
    as ``dataset.encoder``.

    ``labeled=False`` reads files without the label column (``Y`` then has
    zero columns); ``numeric_label=True`` keeps the label as a real target.
    """
    lab = schema.label_index
    if labeled:
        rows, line_numbers = _read_rows(path, schema, len(schema.columns))
    else:
        rows, line_numbers = _read_rows(path, schema, len(schema.columns) - 1)
        rows = [r[:lab] + [""] + r[lab:] for r in rows]
    if encoder is None:
        if not labeled:
            raise SchemaError("an encoder is required to read unlabeled rows")
        encoder = build_encoder(rows, schema) if not numeric_label else _feature_encoder(rows, schema)

    blocks, names, numeric_cols = [], [], []
    width = 0
    unknown = 0
    for j, (name, role) in enumerate(schema.columns):
        if role == "numeric":
            col = np.empty(len(rows))
            for i, r in enumerate(rows):
                try:
                    col[i] = float(r[j])
                except ValueError:
                    raise ParseError(line_numbers[i], j + 1, f"not a number: {r[j]!r}") from None
                if not math.isfinite(col[i]):
                    raise ParseError(line_numbers[i], j + 1, f"non-finite value {r[j]!r}")
            blocks.append(col[:, None])
            names.append(name)
            numeric_cols.append(width)
            width += 1
        elif role == "categorical":
            cats = encoder.categories.get(name, [])
            pos = {c: k for k, c in enumerate(cats)}
            block = np.zeros((len(rows), len(cats)))
            for i, r in enumerate(rows):
                k = pos.get(r[j])
                if k is None:
                    unknown += 1
                else:
                    block[i, k] = 1.0
            blocks.append(block)
            names.extend(f"{name}={c}" for c in cats)
            width += len(cats)
    if unknown:
        log.warning("%s: %d unknown category values encoded as zeros", path, unknown)

    if not labeled:
        Y = np.zeros((len(rows), 0))
    elif numeric_label:
        Y = np.empty((len(rows), 1))
        for i, r in enumerate(rows):
            try:
                Y[i, 0] = float(r[lab])
            except ValueError:
                raise ParseError(line_numbers[i], lab + 1, f"not a number: {r[lab]!r}") from None
    else:
        Y = _label_matrix(rows, line_numbers, schema, encoder)
    X = np.hstack(blocks) if blocks else np.zeros((len(rows), 0))
    ds = LabeledDataset(X, Y, feature_names=names, numeric_columns=numeric_cols)
    ds.encoder = encoder
    return ds


def _feature_encoder(rows, schema):
    enc = build_encoder(rows, TabularSchema(schema.columns, None, schema.header,
                                            schema.delimiter, schema.missing_values))
    enc.classes = []
    return enc


def _label_matrix(rows, line_numbers, schema, encoder):
    lab = schema.label_index
    class_pos = {c: i for i, c in enumerate(encoder.classes)}
    Y = np.zeros((len(rows), len(encoder.classes)))
    for i, r in enumerate(rows):
        v = _label_value(r[lab], schema)
        k = class_pos.get(v)
        if k is None:
            if schema.positive_class is not None:
                k = 0
            else:
                raise ParseError(line_numbers[i], lab + 1, f"unknown class {v!r}")
        Y[i, k] = 1.0
    return Y


@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray
    columns: np.ndarray

    @property
    def scale(self):
        return np.where(self.std < STD_FLOOR, 1.0, self.std)

    def apply(self, X):
        X = np.array(X, dtype=np.float64)
        X[:, self.columns] = (X[:, self.columns] - self.mean) / self.scale
        return X

    def to_json(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist(),
                "columns": self.columns.tolist()}

    @classmethod
    def from_json(cls, obj):
        return cls(np.array(obj["mean"], dtype=np.float64), np.array(obj["std"], dtype=np.float64),
                   np.array(obj["columns"], dtype=np.int64))


def standardize(train, apply_to=(), columns=None):
    """Zero-mean / unit-variance scaling fitted on ``train`` only.

    Returns ``([train', *apply_to'], standardizer)``. Columns whose std is
    below 1e-12 are centred but not scaled.
    """
    train = np.asarray(train, dtype=np.float64)
    if train.shape[0] < 2:
        raise ValueError("standardize needs at least two training rows")
    cols = np.arange(train.shape[1]) if columns is None else np.asarray(columns, dtype=np.int64)
    sub = train[:, cols]
    st = Standardizer(sub.mean(axis=0), sub.std(axis=0), cols)
    return [st.apply(train)] + [st.apply(M) for M in apply_to], st


@dataclass
class Split:
    train: np.ndarray
    validation: np.ndarray
    test: np.ndarray
    seed: int


def split(D, fractions, seed):
    """Seeded shuffle into disjoint train / validation / test index sets."""
    n = D if isinstance(D, (int, np.integer)) else len(D)
    fr = tuple(float(f) for f in fractions)
    if len(fr) == 2:
        fr = fr + (0.0,)
    if len(fr) != 3 or any(f < 0 or not math.isfinite(f) for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
        raise BadFractions(f"fractions must be 3 nonnegative numbers summing to 1, got {fractions}")
    perm = RngState(seed).permutation(n)
    n_train = int(round(fr[0] * n))
    n_val = min(int(round(fr[1] * n)), n - n_train)
    return Split(perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:], int(seed))


class _Pool:
    """Class pool drawn without replacement, reshuffled when exhausted."""

    def __init__(self, idx, rng):
        self.idx = np.asarray(idx)
        self.rng = rng
        self.order = self.idx[rng.permutation(len(self.idx))]
        self.pos = 0

    def take(self, k):
        out = self.order[self.pos:self.pos + k]
        self.pos += len(out)
        if len(out) == k:
            return out
        fresh = self.idx[self.rng.permutation(len(self.idx))]
        # instances already in this bag go last so the bag stays duplicate-free
        seen = np.isin(fresh, out)
        fresh = np.concatenate([fresh[~seen], fresh[seen]])
        need = k - len(out)
        self.order, self.pos = fresh, need
        return np.concatenate([out, fresh[:need]])


def positives_for(lp, bag_size):
    # nearest integer, ties toward more positives
    return int(math.floor(lp * bag_size + 0.5))


def make_bags(D, bag_size, lp_range, n_bags, rng):
    """Bags whose positive fraction is drawn uniformly from ``lp_range``.

    ``D`` must be binary (one-hot ``Y`` with the positive class at index 1).
    Recorded proportions are the realised ones, ``(1 - k/n, k/n)``.
    """
    rng = as_rng(rng)
    bag_size = int(bag_size)
    lo, hi = float(lp_range[0]), float(lp_range[1])
    if bag_size < 1 or not (0.0 <= lo <= hi <= 1.0):
        raise ValueError("bad bag_size or lp_range")
    if D.Y.shape[1] != 2:
        raise InsufficientClassInstances("make_bags needs binary one-hot labels")
    pos_idx = np.flatnonzero(D.Y[:, 1] == 1.0)
    neg_idx = np.flatnonzero(D.Y[:, 1] != 1.0)
    need_pos = positives_for(hi, bag_size)
    need_neg = bag_size - positives_for(lo, bag_size)
    if need_pos > len(pos_idx) or need_neg > len(neg_idx):
        raise InsufficientClassInstances(
            f"bags need up to {need_pos} positives / {need_neg} negatives, "
            f"have {len(pos_idx)} / {len(neg_idx)}")
    pools = _Pool(pos_idx, rng), _Pool(neg_idx, rng)
    bags, props, members = [], [], []
    for _ in range(int(n_bags)):
        lp = lo + (hi - lo) * rng.uniform()
        k = positives_for(lp, bag_size)
        idx = np.concatenate([pools[0].take(k), pools[1].take(bag_size - k)]).astype(np.int64)
        bags.append(D.X[idx])
        props.append((1.0 - k / bag_size, k / bag_size))
        members.append(idx)
    B = BagDataset(bags, np.array(props))
    B.indices = members
    return B


def write_bags(path, B):
    with open(path, "w") as fh:
        for bag, prop in zip(B.bags, B.proportions):
            fh.write(json.dumps({"bag": bag.tolist(), "proportions": prop.tolist()}) + "\n")


def read_bags(path):
    bags, props = [], []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                obj = json.loads(line)
                bags.append(np.array(obj["bag"], dtype=np.float64))
                props.append(obj["proportions"])
    return BagDataset(bags, np.array(props, dtype=np.float64))


def load_path(path):
    return Path(path).expanduser()
