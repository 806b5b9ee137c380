"""Parametric data simulators with exact log-densities and in-family refitting."""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from importlib import resources

import numpy as np
from scipy.special import logsumexp

from .. import _kernels as K
from ..codecs import CATEGORICAL, NUMERICAL
from ..data import TableDataset

EM_ITERS = 50
EM_RESTARTS = 3
EM_TOL = 1e-6
VAR_FLOOR = 1e-6


@dataclass
class RefitInfo:
    converged: bool = True
    iterations: int = 0
    note: str = ""


class ParametricModel:
    """A distribution over tables that can score rows and be refitted."""

    names: list

    def sample(self, n, rng) -> TableDataset:
        raise NotImplementedError

    def log_prob_table(self, table) -> np.ndarray:
        raise NotImplementedError

    def log_prob(self, row):
        table = TableDataset(self.names, self.kinds, [[row[n]] for n in self.names])
        return float(self.log_prob_table(table)[0])

    def mean_log_prob(self, table):
        return float(np.mean(self.log_prob_table(table)))

    def refit(self, table, rng=0):
        """Maximum-likelihood refit within the family; returns (model, RefitInfo)."""
        raise NotImplementedError


# ---------------------------------------------------------------- gaussian mixtures

@dataclass
class GaussianGridModel(ParametricModel):
    """Mixture of isotropic 2-D Gaussians over columns ``x`` and ``y``."""

    means: np.ndarray
    variances: np.ndarray
    weights: np.ndarray
    names: list = field(default_factory=lambda: ["x", "y"])

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float64)
        k = len(self.means)
        self.variances = np.broadcast_to(np.asarray(self.variances, dtype=np.float64), (k,)).copy()
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if np.any(self.variances <= 0):
            raise ValueError("component variances must be positive")
        if abs(self.weights.sum() - 1.0) > 1e-9 or np.any(self.weights < 0):
            raise ValueError("mixture weights must be non-negative and sum to 1")

    kinds = property(lambda self: [NUMERICAL, NUMERICAL])

    @property
    def n_components(self):
        return len(self.means)

    @classmethod
    def grid(cls, size=5, lo=-4.0, hi=4.0, sigma=0.12):
        ticks = np.linspace(lo, hi, size)
        means = np.array(list(itertools.product(ticks, ticks)))
        return cls(means, sigma**2, np.full(len(means), 1.0 / len(means)))

    @classmethod
    def gridr(cls, size=5, lo=-4.0, hi=4.0, sigma=0.12, jitter=0.3, seed=0):
        base = cls.grid(size, lo, hi, sigma)
        rng = np.random.default_rng(seed)
        return cls(base.means + rng.uniform(-jitter, jitter, base.means.shape), sigma**2,
                   base.weights)

    @classmethod
    def ring(cls, components=8, radius=2.0, sigma=0.1):
        angles = 2.0 * np.pi * np.arange(components) / components
        means = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
        return cls(means, sigma**2, np.full(components, 1.0 / components))

    def sample_points(self, n, rng):
        rng = np.random.default_rng(rng)
        comp = rng.choice(self.n_components, size=n, p=self.weights)
        noise = rng.standard_normal((n, 2)) * np.sqrt(self.variances[comp])[:, None]
        return self.means[comp] + noise

    def sample(self, n, rng):
        pts = self.sample_points(n, rng)
        return TableDataset(list(self.names), self.kinds, [pts[:, 0], pts[:, 1]])

    def log_density(self, points):
        points = np.ascontiguousarray(points, dtype=np.float64)
        joint = K.iso_gauss_logjoint(points, self.means, self.variances,
                                     np.log(np.maximum(self.weights, 1e-300)))
        return logsumexp(joint, axis=1)

    def log_prob_table(self, table):
        pts = np.stack([np.asarray(table.column(n), dtype=np.float64) for n in self.names], 1)
        return self.log_density(pts)

    def refit(self, table, rng=0):
        pts = np.stack([np.asarray(table.column(n), dtype=np.float64) for n in self.names], 1)
        pts = pts[~np.isnan(pts).any(axis=1)]
        rng = np.random.default_rng(rng)
        best, best_ll, best_info = None, -np.inf, None
        for _ in range(EM_RESTARTS):
            model, ll, info = _em(pts, self.n_components, rng, list(self.names))
            if ll > best_ll:
                best, best_ll, best_info = model, ll, info
        return best, best_info


def kmeans_pp(points, k, rng, trials=None):
    """Greedy k-means++ seeding: each step keeps the best of ``trials`` D^2 draws.

    Duplicate-only data falls back to uniform picks.
    """
    n = len(points)
    trials = trials or 2 + int(math.log(k))
    centers = [points[rng.integers(n)]]
    d2 = ((points - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(n, size=trials)
        else:
            idx = np.searchsorted(np.cumsum(d2), rng.random(trials) * total)
            idx = np.minimum(idx, n - 1)
        cand = np.minimum(d2[None], ((points[None] - points[idx][:, None]) ** 2).sum(axis=2))
        best = int(np.argmin(cand.sum(axis=1)))
        centers.append(points[idx[best]])
        d2 = cand[best]
    return np.array(centers)


def _em(points, k, rng, names):
    n, d = points.shape
    means = kmeans_pp(points, k, rng)
    spread = max(points.var(axis=0).mean(), VAR_FLOOR)
    variances = np.full(k, spread / k)
    log_w = np.full(k, -math.log(k))
    prev = -np.inf
    info = RefitInfo(converged=False)
    for it in range(EM_ITERS):
        joint = K.iso_gauss_logjoint(points, means, variances, log_w)
        norm = logsumexp(joint, axis=1)
        ll = float(norm.mean())
        resp = np.exp(joint - norm[:, None])
        nk = resp.sum(axis=0) + 1e-12
        means = (resp.T @ points) / nk[:, None]
        sq = ((points[:, None, :] - means[None]) ** 2).sum(axis=2)
        variances = np.maximum((resp * sq).sum(axis=0) / (d * nk), VAR_FLOOR)
        log_w = np.log(nk / n)
        info.iterations = it + 1
        if abs(ll - prev) <= EM_TOL * max(1.0, abs(ll)):
            info.converged = True
            break
        prev = ll
    if not info.converged:
        info.note = f"EM stopped after {EM_ITERS} iterations without meeting tolerance"
    w = np.exp(log_w)
    model = GaussianGridModel(means, variances, w / w.sum(), names)
    return model, model.log_density(points).mean(), info


# ---------------------------------------------------------------- bayes nets

class DiscreteBayesNet(ParametricModel):
    """Discrete DAG with explicit conditional probability tables.

    ``cpts[node]`` has shape (prod parent cardinalities, cardinality); parent
    configurations are enumerated in C order over ``parents[node]``.
    """

    def __init__(self, nodes, states, parents, cpts):
        self.names = list(nodes)
        self.states = {n: [str(s) for s in states[n]] for n in self.names}
        self.parents = {n: list(parents.get(n, [])) for n in self.names}
        self.cpts = {n: np.asarray(cpts[n], dtype=np.float64) for n in self.names}
        if len(self.names) > 8:
            raise ValueError("at most 8 nodes are supported")
        self.order = self._topological_order()
        for n in self.names:
            rows = int(np.prod([len(self.states[p]) for p in self.parents[n]], dtype=np.int64))
            cpt = self.cpts[n]
            if cpt.shape != (rows, len(self.states[n])):
                raise ValueError(f"CPT for {n!r} has shape {cpt.shape}, expected "
                                 f"{(rows, len(self.states[n]))}")
            if np.any(cpt < 0) or np.any(np.abs(cpt.sum(axis=1) - 1.0) > 1e-12):
                raise ValueError(f"CPT rows for {n!r} must be distributions")

    kinds = property(lambda self: [CATEGORICAL] * len(self.names))

    def _topological_order(self):
        order, done, active = [], set(), set()

        def visit(n):
            if n in done:
                return
            if n in active:
                raise ValueError(f"graph has a cycle through {n!r}")
            active.add(n)
            for p in self.parents[n]:
                if p not in self.states:
                    raise ValueError(f"unknown parent {p!r} of {n!r}")
                visit(p)
            active.discard(n)
            done.add(n)
            order.append(n)

        for n in self.names:
            visit(n)
        return order

    @classmethod
    def from_json(cls, obj):
        return cls(obj["nodes"], obj["states"], obj["parents"], obj["cpts"])

    def to_json(self):
        return {"nodes": self.names, "states": self.states, "parents": self.parents,
                "cpts": {n: self.cpts[n].tolist() for n in self.names}}

    def _parent_index(self, node, codes):
        idx = np.zeros(len(codes), dtype=np.int64)
        for p in self.parents[node]:
            idx = idx * len(self.states[p]) + codes[:, self.names.index(p)]
        return idx

    def sample_codes(self, n, rng):
        rng = np.random.default_rng(rng)
        codes = np.zeros((n, len(self.names)), dtype=np.int64)
        for node in self.order:
            probs = self.cpts[node][self._parent_index(node, codes)]
            codes[:, self.names.index(node)] = K.sample_rows(np.ascontiguousarray(probs),
                                                             rng.random(n))
        return codes

    def sample(self, n, rng):
        codes = self.sample_codes(n, rng)
        cols = [np.array(self.states[name], dtype=object)[codes[:, j]]
                for j, name in enumerate(self.names)]
        return TableDataset(list(self.names), self.kinds, cols)

    def table_codes(self, table):
        cols = []
        for name in self.names:
            lookup = {s: i for i, s in enumerate(self.states[name])}
            cols.append([lookup.get(None if v is None else str(v), -1)
                         for v in table.column(name)])
        return np.array(cols, dtype=np.int64).T.reshape(table.n_rows, len(self.names))

    def log_prob_codes(self, codes):
        out = np.zeros(len(codes))
        for j, node in enumerate(self.names):
            p = self.cpts[node][self._parent_index(node, codes), codes[:, j]]
            with np.errstate(divide="ignore"):
                out += np.log(p)
        return out

    def log_prob_table(self, table):
        codes = self.table_codes(table)
        out = np.full(len(codes), -np.inf)
        ok = np.all(codes >= 0, axis=1)
        out[ok] = self.log_prob_codes(codes[ok])
        return out

    def all_states(self):
        return np.array(list(itertools.product(*[range(len(self.states[n]))
                                                 for n in self.names])), dtype=np.int64)

    def entropy(self):
        lp = self.log_prob_codes(self.all_states())
        return float(-(np.exp(lp) * lp).sum())

    def refit(self, table, rng=0, alpha=1.0):
        """CPT counting with add-``alpha`` smoothing; structure is kept."""
        codes = self.table_codes(table)
        codes = codes[np.all(codes >= 0, axis=1)]
        cpts = {}
        for j, node in enumerate(self.names):
            counts = np.full(self.cpts[node].shape, alpha)
            np.add.at(counts, (self._parent_index(node, codes), codes[:, j]), 1.0)
            cpts[node] = counts / counts.sum(axis=1, keepdims=True)
        return DiscreteBayesNet(self.names, self.states, self.parents, cpts), RefitInfo()


def default_bayesnet():
    text = resources.files("cgm.bench").joinpath("data/bayesnet8.json").read_text()
    return DiscreteBayesNet.from_json(json.loads(text))


SIMULATORS = {
    "grid": GaussianGridModel.grid,
    "gridr": GaussianGridModel.gridr,
    "ring": GaussianGridModel.ring,
    "bayesnet": default_bayesnet,
}


def make_simulator(name):
    try:
        return SIMULATORS[name]()
    except KeyError:
        raise ValueError(f"unknown simulator {name!r}; choose from {sorted(SIMULATORS)}") \
            from None
