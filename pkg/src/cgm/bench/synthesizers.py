"""Synthesizers share a two-call protocol: ``fit(table)`` then ``sample(n, seed)``."""
from __future__ import annotations

import numpy as np

from ..codecs import NUMERICAL, fit_schema
from ..data import TableDataset, fit_schemas
from ..model import TrainConfig, generate, train

COLLAPSE_BINS = 20


class Synthesizer:
    name = "base"

    def fit(self, table, seed=0):
        self.table = table
        return self

    def sample(self, n, seed) -> TableDataset:
        raise NotImplementedError


def _observed(col, kind):
    if kind == NUMERICAL:
        return col[~np.isnan(col)]
    return np.array([v for v in col if v is not None], dtype=object)


class UniformSynthesizer(Synthesizer):
    """Each column uniform over its observed support (range or category set)."""

    name = "uniform"

    def fit(self, table, seed=0):
        self.table = table
        self.support = []
        for kind, col in zip(table.kinds, table.columns):
            obs = _observed(col, kind)
            if kind == NUMERICAL:
                self.support.append((float(obs.min()), float(obs.max())))
            else:
                self.support.append(sorted(set(obs)))
        return self

    def sample(self, n, seed):
        rng = np.random.default_rng(seed)
        cols = []
        for kind, sup in zip(self.table.kinds, self.support):
            if kind == NUMERICAL:
                cols.append(rng.uniform(sup[0], sup[1], n))
            else:
                cols.append(np.array(sup, dtype=object)[rng.integers(len(sup), size=n)])
        return TableDataset(list(self.table.names), list(self.table.kinds), cols)


class IndependentSynthesizer(Synthesizer):
    """Columns drawn independently from their empirical marginals.

    Numerical marginals are histograms over the same quantile bins the model
    uses, sampled uniformly within the chosen bin.
    """

    name = "independent"

    def __init__(self, bins=100):
        self.bins = bins

    def fit(self, table, seed=0):
        self.table = table
        self.marginals = []
        for name, kind, col in zip(table.names, table.kinds, table.columns):
            obs = _observed(col, kind)
            schema = fit_schema(obs, kind, self.bins, name)
            codes = schema.to_codes(obs)
            freq = np.bincount(codes, minlength=schema.cardinality) / len(codes)
            self.marginals.append((schema, freq))
        return self

    def sample(self, n, seed):
        rng = np.random.default_rng(seed)
        cols = []
        for schema, freq in self.marginals:
            codes = rng.choice(len(freq), size=n, p=freq)
            cols.append(schema.from_codes(codes, rng.random(n)))
        return TableDataset(list(self.table.names), list(self.table.kinds), cols)


class IdentitySynthesizer(Synthesizer):
    """Returns the training rows verbatim (cycled if more are requested)."""

    name = "identity"

    def sample(self, n, seed):
        idx = np.arange(n) % max(self.table.n_rows, 1)
        return self.table.take(idx)


class CollapseSynthesizer(Synthesizer):
    """Constant output: one representative of the densest coarse cell."""

    name = "collapse"

    def fit(self, table, seed=0):
        self.table = table
        codes = []
        for name, kind, col in zip(table.names, table.kinds, table.columns):
            schema = fit_schema(_observed(col, kind), kind, COLLAPSE_BINS, name)
            codes.append(schema.to_codes(col))
        codes = np.stack(codes, axis=1)
        complete = np.all(codes >= 0, axis=1)
        cells, inverse, counts = np.unique(codes[complete], axis=0, return_inverse=True,
                                           return_counts=True)
        members = np.flatnonzero(complete)[inverse.ravel() == np.argmax(counts)]
        row = []
        for kind, col in zip(table.kinds, table.columns):
            vals = col[members]
            row.append(float(np.median(vals)) if kind == NUMERICAL else vals[0])
        self.row = row
        return self

    def sample(self, n, seed):
        cols = []
        for kind, v in zip(self.table.kinds, self.row):
            cols.append(np.full(n, v) if kind == NUMERICAL else np.array([v] * n, dtype=object))
        return TableDataset(list(self.table.names), list(self.table.kinds), cols)


class CGMSynthesizer(Synthesizer):
    """The transformer model behind the synthesizer protocol."""

    name = "cgm"

    def __init__(self, **overrides):
        self.overrides = overrides

    def fit(self, table, seed=0):
        cfg = TrainConfig(**{**self.overrides, "seed": seed})
        self.table = fit_schemas(table, cfg.bins) if table.schemas is None else table
        self.result = train(self.table, cfg)
        return self

    def sample(self, n, seed):
        return generate(self.result.params, n, seed)


SYNTHESIZERS = {
    "uniform": UniformSynthesizer,
    "independent": IndependentSynthesizer,
    "identity": IdentitySynthesizer,
    "collapse": CollapseSynthesizer,
    "cgm": CGMSynthesizer,
}


def make_synthesizer(name, **options):
    try:
        cls = SYNTHESIZERS[name]
    except KeyError:
        raise ValueError(f"unknown synthesizer {name!r}; choose from {sorted(SYNTHESIZERS)}") \
            from None
    return cls(**options)
