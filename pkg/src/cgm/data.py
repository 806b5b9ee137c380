"""Tables, CSV ingestion, train/test splitting and permuted batching."""
from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .codecs import CATEGORICAL, DEFAULT_BINS, KINDS, NUMERICAL, fit_schema

MISSING_MARKERS = ("", "NA")


class DataError(ValueError):
    pass


@dataclass
class TableDataset:
    """Column-typed table. Numerical columns are float64 with NaN for missing
    cells; categorical columns are object arrays of str with None for missing."""

    names: list
    kinds: list
    columns: list
    schemas: list | None = None
    bins: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (len(self.names) == len(self.kinds) == len(self.columns)):
            raise DataError("names, kinds and columns differ in length")
        if len(set(self.names)) != len(self.names):
            raise DataError("duplicate column names")
        cols = []
        for name, kind, col in zip(self.names, self.kinds, self.columns):
            if kind not in KINDS:
                raise DataError(f"unknown kind {kind!r} for column {name!r}")
            cols.append(_normalize_column(col, kind))
        lengths = {len(c) for c in cols}
        if len(lengths) > 1:
            raise DataError(f"columns differ in length: {sorted(lengths)}")
        self.columns = cols
        self._codes = None

    @property
    def n_rows(self):
        return len(self.columns[0]) if self.columns else 0

    @property
    def n_features(self):
        return len(self.names)

    def __len__(self):
        return self.n_rows

    @property
    def present(self):
        """(n_rows, n_features) boolean presence mask."""
        out = np.ones((self.n_rows, self.n_features), dtype=bool)
        for j, (kind, col) in enumerate(zip(self.kinds, self.columns)):
            out[:, j] = ~np.isnan(col) if kind == NUMERICAL else np.array(
                [v is not None for v in col], dtype=bool)
        return out

    def column(self, name):
        return self.columns[self.names.index(name)]

    def take(self, rows):
        rows = np.asarray(rows, dtype=np.int64)
        return TableDataset(list(self.names), list(self.kinds), [c[rows] for c in self.columns],
                            self.schemas, dict(self.bins))

    def with_schemas(self, schemas):
        if [s.name for s in schemas] != list(self.names):
            raise DataError("schema names do not match table columns")
        return TableDataset(list(self.names), list(self.kinds), list(self.columns),
                            list(schemas), dict(self.bins))

    def codes(self):
        """(n_rows, n_features) class indices under the fitted schemas, -1 if missing."""
        if self.schemas is None:
            raise DataError("table has no fitted schemas")
        if self._codes is None:
            self._codes = np.stack([s.to_codes(c) for s, c in zip(self.schemas, self.columns)],
                                   axis=1) if self.n_rows else np.zeros((0, self.n_features),
                                                                         dtype=np.int64)
        return self._codes

    def rows(self):
        for i in range(self.n_rows):
            yield {n: c[i] for n, c in zip(self.names, self.columns)}

    @classmethod
    def from_codes(cls, schemas, codes, u=None, bins=None):
        """Decode a code matrix; ``u`` (same shape) places numericals in their bins."""
        cols = [s.from_codes(codes[:, j], None if u is None else u[:, j])
                for j, s in enumerate(schemas)]
        return cls([s.name for s in schemas], [s.kind for s in schemas], cols, list(schemas),
                   dict(bins or {}))


def _normalize_column(col, kind):
    if kind == NUMERICAL:
        arr = np.array([np.nan if v is None else v for v in col], dtype=np.float64) \
            if isinstance(col, (list, tuple)) else np.asarray(col, dtype=np.float64)
        return arr
    arr = np.empty(len(col), dtype=object)
    for i, v in enumerate(col):
        if v is None or (isinstance(v, float) and np.isnan(v)):
            arr[i] = None
        else:
            arr[i] = str(v)
    return arr


def empty_like(ds):
    cols = [np.zeros(0) if k == NUMERICAL else np.empty(0, dtype=object) for k in ds.kinds]
    return TableDataset(list(ds.names), list(ds.kinds), cols, ds.schemas, dict(ds.bins))


# ---------------------------------------------------------------- CSV

def _parse_float(s):
    try:
        return float(s)
    except ValueError:
        return None


def load_csv(path, schema_hints=None, missing_markers=MISSING_MARKERS):
    """Read an RFC-4180 CSV with a header row.

    ``schema_hints`` maps column name to ``{"kind": ..., "bins": ...}``; it may
    be a dict or a path to a JSON file. Columns without a hint are numerical
    when every non-missing cell parses as a float, categorical otherwise.
    """
    if isinstance(schema_hints, str) or hasattr(schema_hints, "__fspath__"):
        with open(schema_hints) as fh:
            schema_hints = json.load(fh)
    hints = schema_hints or {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file, expected a header row") from None
        seen = set()
        for name in header:
            if name in seen:
                raise DataError(f"{path}: line 1: duplicate header {name!r}")
            seen.add(name)
        raw = []
        for row in reader:
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}: line {reader.line_num}: expected {len(header)} "
                                f"fields, got {len(row)}")
            raw.append(row)
    unknown = set(hints) - set(header)
    if unknown:
        raise DataError(f"schema hints name unknown columns: {sorted(unknown)}")
    missing = set(missing_markers)
    names, kinds, cols, bins = [], [], [], {}
    for j, name in enumerate(header):
        cells = [None if r[j] in missing else r[j] for r in raw]
        hint = hints.get(name, {})
        kind = hint.get("kind")
        if kind is None:
            kind = NUMERICAL if all(c is None or _parse_float(c) is not None for c in cells) \
                and any(c is not None for c in cells) else CATEGORICAL
        if kind not in KINDS:
            raise DataError(f"hint for {name!r}: unknown kind {kind!r}")
        if kind == NUMERICAL:
            vals = []
            for i, c in enumerate(cells):
                if c is None:
                    vals.append(np.nan)
                    continue
                v = _parse_float(c)
                if v is None:
                    raise DataError(f"{path}: line {i + 2}: column {name!r} is numerical but "
                                    f"cell {c!r} is not a number")
                vals.append(v)
            col = np.array(vals, dtype=np.float64)
        else:
            col = cells
        if "bins" in hint:
            bins[name] = int(hint["bins"])
        names.append(name)
        kinds.append(kind)
        cols.append(col)
    return TableDataset(names, kinds, cols, bins=bins)


def _format_cell(v, kind):
    if kind == NUMERICAL:
        return "" if np.isnan(v) else repr(float(v))
    return "" if v is None else str(v)


def write_csv(ds, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ds.names)
        for i in range(ds.n_rows):
            w.writerow([_format_cell(c[i], k) for k, c in zip(ds.kinds, ds.columns)])


# ---------------------------------------------------------------- schemas and splits

def fit_schemas(ds, bins=DEFAULT_BINS):
    schemas = [fit_schema(col, kind, ds.bins.get(name, bins), name=name)
               for name, kind, col in zip(ds.names, ds.kinds, ds.columns)]
    return ds.with_schemas(schemas)


@dataclass
class SplitSpec:
    test_fraction: float = 0.3
    seed: int = 0
    stratify_column: str | None = None

    def __post_init__(self):
        if not 0.0 < self.test_fraction < 1.0:
            raise DataError(f"test_fraction must lie in (0, 1), got {self.test_fraction}")


def split(ds, spec, bins=DEFAULT_BINS):
    """Disjoint seeded train/test split; schemas are fitted on train only."""
    if not isinstance(spec, SplitSpec):
        spec = SplitSpec(*spec) if isinstance(spec, tuple) else SplitSpec(**spec)
    rng = np.random.default_rng(spec.seed)
    n = ds.n_rows
    if spec.stratify_column is None:
        perm = rng.permutation(n)
        n_test = int(round(n * spec.test_fraction))
        test_idx, train_idx = perm[:n_test], perm[n_test:]
    else:
        labels = ds.column(spec.stratify_column)
        keys = np.array([str(v) for v in labels], dtype=object)
        test_parts, train_parts = [], []
        for key in sorted(set(keys)):
            idx = np.flatnonzero(keys == key)
            idx = idx[rng.permutation(len(idx))]
            k = int(round(len(idx) * spec.test_fraction))
            test_parts.append(idx[:k])
            train_parts.append(idx[k:])
        test_idx = np.concatenate(test_parts)
        train_idx = np.concatenate(train_parts)
    train_idx = np.sort(train_idx)
    test_idx = np.sort(test_idx)
    train = fit_schemas(ds.take(train_idx), bins)
    test = ds.take(test_idx).with_schemas(train.schemas)
    return train, test


# ---------------------------------------------------------------- batching

@dataclass
class PermutedBatch:
    """Examples laid out in their drawn feature order.

    ``feats``/``codes`` are (B, L) with padding where ``target`` is False;
    ``keys`` marks positions visible as attention keys (present and not
    dropped by prefix subsampling).
    """

    rows: np.ndarray
    feats: np.ndarray
    codes: np.ndarray
    target: np.ndarray
    keys: np.ndarray

    def __len__(self):
        return len(self.rows)


def epoch_streams(seed, epoch):
    ss = np.random.SeedSequence(seed, spawn_key=(epoch,))
    order_ss, perm_ss = ss.spawn(2)
    return np.random.default_rng(order_ss), np.random.default_rng(perm_ss)


def permute_examples(codes, rows, uniforms, drops):
    """Lay out ``rows`` of ``codes`` in the order given by ascending ``uniforms``.

    ``uniforms`` and ``drops`` are (N, n) arrays indexed by original row id, so
    each example's order depends only on (seed, epoch, row).
    """
    sub = codes[rows]
    present = sub >= 0
    keys_u = np.where(present, uniforms[rows], np.inf)
    order = np.argsort(keys_u, axis=1, kind="stable")
    length = int(present.sum(axis=1).max()) if len(rows) else 0
    order = order[:, :length]
    target = np.take_along_axis(present, order, axis=1)
    feats = np.where(target, order, 0)
    pos_codes = np.where(target, np.take_along_axis(sub, order, axis=1), 0)
    dropped = np.take_along_axis(drops[rows], order, axis=1)
    keys = target & ~dropped
    return PermutedBatch(np.asarray(rows), feats, pos_codes, target, keys)


def batches(ds, batch_size, seed, epoch, drop_prob=0.0):
    """Seeded epoch of permuted batches grouped by present-feature count."""
    codes = ds.codes()
    n, nf = codes.shape
    order_rng, perm_rng = epoch_streams(seed, epoch)
    uniforms = perm_rng.random((n, nf))
    drops = perm_rng.random((n, nf)) < drop_prob
    counts = (codes >= 0).sum(axis=1)
    if np.any(counts == 0):
        warnings.warn(f"skipping {int((counts == 0).sum())} rows with no present feature")
    order = order_rng.permutation(n)
    order = order[counts[order] > 0]
    order = order[np.argsort(counts[order], kind="stable")]
    chunks = []
    for c in np.unique(counts[order]):
        group = order[counts[order] == c]
        chunks.extend(group[i:i + batch_size] for i in range(0, len(group), batch_size))
    for k in order_rng.permutation(len(chunks)):
        yield permute_examples(codes, chunks[k], uniforms, drops)
