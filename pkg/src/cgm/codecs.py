"""Feature codecs: encoder, decoder and loss for each column type.

A categorical column owns an embedding matrix ``E`` of shape (h, d). The same
matrix encodes a category (column lookup) and produces the conditional logits
``E.T @ y``. Numerical columns are quantized at training-split quantiles and
then handled exactly like categoricals over the bins.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from . import tensor as T

CATEGORICAL = "categorical"
NUMERICAL = "numerical"
KINDS = (CATEGORICAL, NUMERICAL)
DEFAULT_BINS = 100


class SchemaError(ValueError):
    pass


class UnknownCategoryError(SchemaError):
    pass


def is_missing(value):
    if value is None:
        return True
    if isinstance(value, float) and math.isnan(value):
        return True
    return False


@dataclass
class FeatureSchema:
    name: str
    kind: str
    categories: list = field(default_factory=list)
    edges: np.ndarray | None = None
    missing_allowed: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SchemaError(f"unknown column kind {self.kind!r} for {self.name!r}")
        if self.kind == CATEGORICAL:
            self._index = {c: i for i, c in enumerate(self.categories)}
        elif self.edges is not None:
            self.edges = np.asarray(self.edges, dtype=np.float64)

    @property
    def cardinality(self):
        if self.kind == CATEGORICAL:
            return len(self.categories)
        return self.bin_count

    @property
    def bin_count(self):
        if self.kind != NUMERICAL:
            return 0
        return max(len(self.edges) - 1, 1)

    def to_json(self):
        out = {"name": self.name, "kind": self.kind}
        if self.kind == CATEGORICAL:
            out["categories"] = list(self.categories)
        else:
            out["edges"] = [float(e) for e in self.edges]
            out["bin_count"] = self.bin_count
        return out

    @classmethod
    def from_json(cls, obj):
        if obj["kind"] == CATEGORICAL:
            return cls(obj["name"], CATEGORICAL, categories=list(obj["categories"]))
        return cls(obj["name"], NUMERICAL, edges=np.asarray(obj["edges"], dtype=np.float64))

    # -- value <-> class index

    def to_codes(self, values):
        """Class index per value; -1 marks a missing cell."""
        values = np.asarray(values, dtype=object if self.kind == CATEGORICAL else np.float64)
        codes = np.full(len(values), -1, dtype=np.int64)
        if self.kind == NUMERICAL:
            live = ~np.isnan(values)
            codes[live] = quantize(self.edges, values[live])
            return codes
        for i, v in enumerate(values):
            if is_missing(v):
                continue
            try:
                codes[i] = self._index[str(v)]
            except KeyError:
                raise UnknownCategoryError(
                    f"unknown category {v!r} for column {self.name!r}") from None
        return codes

    def from_codes(self, codes, u=None):
        """Inverse of ``to_codes``; ``u`` in [0, 1) places numericals inside their bin.

        Without ``u`` numericals decode to the bin midpoint.
        """
        codes = np.asarray(codes, dtype=np.int64)
        if self.kind == CATEGORICAL:
            out = np.empty(len(codes), dtype=object)
            for i, c in enumerate(codes):
                out[i] = None if c < 0 else self.categories[c]
            return out
        out = dequantize(self.edges, np.maximum(codes, 0), u)
        out[codes < 0] = np.nan
        return out


def fit_schema(values, kind, bins=DEFAULT_BINS, name="column"):
    """Fit a column description from training values (missing cells ignored)."""
    if kind == CATEGORICAL:
        cats = []
        seen = set()
        for v in values:
            if is_missing(v):
                continue
            s = str(v)
            if s not in seen:
                seen.add(s)
                cats.append(s)
        if not cats:
            raise SchemaError(f"column {name!r} has no non-missing values")
        return FeatureSchema(name, CATEGORICAL, categories=cats)
    if kind != NUMERICAL:
        raise SchemaError(f"unknown column kind {kind!r} for {name!r}")
    arr = np.asarray(values, dtype=np.float64)
    arr = arr[~np.isnan(arr)]
    if arr.size == 0:
        raise SchemaError(f"column {name!r} has no non-missing values")
    return FeatureSchema(name, NUMERICAL, edges=quantile_edges(arr, bins))


def quantile_edges(values, bins):
    """Bin edges at ``bins``-quantiles (linear interpolation), duplicates merged.

    A constant column yields the degenerate single bin ``[v, v]``. A column with
    two or more distinct values always gets at least two bins.
    """
    if bins < 1:
        raise SchemaError("bin count must be positive")
    values = np.asarray(values, dtype=np.float64)
    edges = np.unique(np.quantile(values, np.linspace(0.0, 1.0, bins + 1)))
    if len(edges) == 1:
        return np.array([edges[0], edges[0]])
    if len(edges) == 2 and bins >= 2:
        distinct = np.unique(values)
        if len(distinct) >= 2:
            lo, hi = distinct[0], distinct[-1]
            mid = distinct[1] if len(distinct) > 2 else 0.5 * (lo + hi)
            edges = np.array([lo, mid, hi])
    return edges


def quantize(edges, values):
    """Left-closed bins ``[e_b, e_{b+1})``; last bin right-closed; clamps outside."""
    nb = max(len(edges) - 1, 1)
    idx = np.searchsorted(edges, values, side="right") - 1
    return np.clip(idx, 0, nb - 1).astype(np.int64)


def dequantize(edges, codes, u=None):
    lo = edges[codes]
    hi = edges[np.minimum(codes + 1, len(edges) - 1)]
    if u is None:
        return 0.5 * (lo + hi)
    return lo + np.asarray(u, dtype=np.float64) * (hi - lo)


# ---------------------------------------------------------------- codecs

class FeatureCodec:
    """Interface a column type implements to plug into the model."""

    schema: FeatureSchema

    def encode(self, value):
        raise NotImplementedError

    def conditional_logits(self, y):
        raise NotImplementedError

    def feature_loss(self, y, value):
        raise NotImplementedError

    def decode_sample(self, y, rng):
        raise NotImplementedError

    def parameters(self):
        return []


class CategoricalCodec(FeatureCodec):
    def __init__(self, schema, embedding):
        if embedding.shape[1] != schema.cardinality:
            raise SchemaError(f"embedding for {schema.name!r} has {embedding.shape[1]} columns, "
                              f"schema has {schema.cardinality} classes")
        self.schema = schema
        self.embedding = embedding

    @classmethod
    def init(cls, schema, h, rng, std=0.02):
        e = T.Tensor(rng.normal(0.0, std, (h, schema.cardinality)), requires_grad=True,
                     name=f"codec.{schema.name}.E")
        return cls(schema, e)

    @property
    def hidden(self):
        return self.embedding.shape[0]

    def parameters(self):
        return [self.embedding]

    def index_of(self, value):
        if is_missing(value):
            raise T.ContractError(f"missing values are not encoded (column {self.schema.name!r})")
        return int(self.schema.to_codes([value])[0])

    def encode(self, value):
        return self.embedding.data[:, self.index_of(value)].copy()

    def conditional_logits(self, y):
        return self.embedding.data.T @ np.asarray(y, dtype=np.float64)

    def probabilities(self, y, temperature=1.0):
        return K.softmax_masked((self.conditional_logits(y) / temperature)[None])[0]

    def feature_loss(self, y, value):
        if is_missing(value):
            return 0.0
        z = self.conditional_logits(y)
        m = z.max()
        return float(m + math.log(np.exp(z - m).sum()) - z[self.index_of(value)])

    def sample_index(self, y, rng, temperature=1.0):
        p = self.probabilities(y, temperature)
        return int(K.sample_rows(p[None], np.array([rng.random()]))[0])

    def sample_indices(self, y, rng, size, temperature=1.0):
        p = self.probabilities(y, temperature)
        return K.sample_rows(np.broadcast_to(p, (size, len(p))), rng.random(size))

    def decode_index(self, index, rng=None):
        return self.schema.categories[index]

    def decode_sample(self, y, rng, temperature=1.0):
        return self.decode_index(self.sample_index(y, rng, temperature), rng)


class QuantileNumericalCodec(CategoricalCodec):
    """Categorical codec over quantile bins with a quantize/dequantize step."""

    def __init__(self, schema, embedding, deterministic=False):
        super().__init__(schema, embedding)
        self.deterministic = deterministic

    @classmethod
    def init(cls, schema, h, rng, std=0.02, deterministic=False):
        e = T.Tensor(rng.normal(0.0, std, (h, schema.cardinality)), requires_grad=True,
                     name=f"codec.{schema.name}.E")
        return cls(schema, e, deterministic)

    def index_of(self, value):
        if is_missing(value):
            raise T.ContractError(f"missing values are not encoded (column {self.schema.name!r})")
        return int(quantize(self.schema.edges, np.array([float(value)]))[0])

    def bin_interval(self, index):
        e = self.schema.edges
        return float(e[index]), float(e[min(index + 1, len(e) - 1)])

    def decode_index(self, index, rng=None):
        u = None if (self.deterministic or rng is None) else np.array([rng.random()])
        return float(dequantize(self.schema.edges, np.array([index]), u)[0])


def make_codec(schema, h, rng, deterministic=False):
    if schema.kind == CATEGORICAL:
        return CategoricalCodec.init(schema, h, rng)
    return QuantileNumericalCodec.init(schema, h, rng, deterministic=deterministic)
