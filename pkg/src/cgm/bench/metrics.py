"""Likelihood and ML-efficacy metrics."""
from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass

import numpy as np
from scipy.optimize import minimize
from scipy.special import logsumexp

from ..codecs import CATEGORICAL, NUMERICAL, fit_schema
from ..data import TableDataset
from .simulators import GaussianGridModel

CLASSIFIER_BINS = 10


def _seeds(seed, k):
    # children are keyed by index, so a prefix of a longer spawn is stable
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(k)]


# ---------------------------------------------------------------- likelihood protocol

@dataclass
class SimulatedResult:
    L_syn: float
    L_test: float
    L_true: float
    refit_converged: bool
    note: str = ""
    quantization_loss: float | None = None

    def to_json(self):
        return asdict(self)


def quantization_loss(model, train, test, bins=100, seed=0):
    """Drop in true-model log-likelihood after a quantize/dequantize round trip."""
    rng = np.random.default_rng(seed)
    cols = []
    for name in model.names:
        schema = fit_schema(train.column(name), NUMERICAL, bins, name)
        codes = schema.to_codes(test.column(name))
        cols.append(schema.from_codes(codes, rng.random(len(codes))))
    rt = TableDataset(list(model.names), [NUMERICAL] * len(cols), cols)
    return model.mean_log_prob(test) - model.mean_log_prob(rt)


def likelihood_metrics(model, train, test, syn, seed):
    """Score a synthetic table against the true model and its refit."""
    l_syn = model.mean_log_prob(syn)
    refit, info = model.refit(syn, seed)
    l_test = refit.mean_log_prob(test)
    ql = quantization_loss(model, train, test, seed=seed) \
        if isinstance(model, GaussianGridModel) else None
    return SimulatedResult(l_syn, l_test, model.mean_log_prob(test), info.converged, info.note,
                           ql)


def simulated_tables(model, n_train, n_test, seed):
    s_train, s_test = _seeds(seed, 2)
    return model.sample(n_train, s_train), model.sample(n_test, s_test)


def eval_simulated(model, synthesizer, n_train, n_test, seed):
    """L_syn = mean log P(T_syn | M); L_test = mean log P(T_test | refit of M on T_syn)."""
    train, test = simulated_tables(model, n_train, n_test, seed)
    s_fit, s_gen, s_refit = _seeds(seed, 5)[2:]
    synthesizer.fit(train, s_fit)
    syn = synthesizer.sample(n_train, s_gen)
    return likelihood_metrics(model, train, test, syn, s_refit)


# ---------------------------------------------------------------- classifier

class FeatureEncoder:
    """One-hot design matrix: categories as-is, numericals by quantile bin.

    With ``pairwise`` the one-hot blocks of every column pair are crossed too.
    """

    def __init__(self, bins=CLASSIFIER_BINS, pairwise=False):
        self.bins = bins
        self.pairwise = pairwise

    def fit(self, table, columns):
        self.columns = list(columns)
        self.schemas = []
        for name in self.columns:
            kind = table.kinds[table.names.index(name)]
            col = table.column(name)
            obs = col[~np.isnan(col)] if kind == NUMERICAL else [v for v in col if v is not None]
            self.schemas.append(fit_schema(obs, kind, self.bins, name))
        return self

    def _block(self, schema, col):
        d = schema.cardinality
        out = np.zeros((len(col), d))
        if schema.kind == CATEGORICAL:
            lookup = {c: i for i, c in enumerate(schema.categories)}
            idx = np.array([lookup.get(None if v is None else str(v), -1) for v in col])
        else:
            idx = schema.to_codes(col)
        ok = idx >= 0
        out[np.flatnonzero(ok), idx[ok]] = 1.0
        return out

    def transform(self, table):
        blocks = [self._block(s, table.column(n)) for s, n in zip(self.schemas, self.columns)]
        parts = list(blocks)
        if self.pairwise:
            for a, b in itertools.combinations(blocks, 2):
                parts.append((a[:, :, None] * b[:, None, :]).reshape(len(a), -1))
        return np.concatenate(parts, axis=1) if parts else np.zeros((table.n_rows, 0))


class LogisticRegression:
    """Multinomial logistic regression, L2-penalised, fitted with L-BFGS."""

    def __init__(self, l2=1e-3, max_iter=200):
        self.l2 = l2
        self.max_iter = max_iter

    def _unpack(self, theta, p, c):
        return theta[:p * c].reshape(p, c), theta[p * c:]

    def loss_and_grad(self, theta, x, y):
        n, p = x.shape
        c = len(self.classes)
        w, b = self._unpack(theta, p, c)
        z = x @ w + b
        logp = z - logsumexp(z, axis=1, keepdims=True)
        loss = -logp[np.arange(n), y].mean() + 0.5 * self.l2 * (w * w).sum()
        g = np.exp(logp)
        g[np.arange(n), y] -= 1.0
        g /= n
        gw = x.T @ g + self.l2 * w
        return loss, np.concatenate([gw.ravel(), g.sum(axis=0)])

    def fit(self, x, labels):
        self.classes = sorted(set(labels))
        lookup = {c: i for i, c in enumerate(self.classes)}
        y = np.array([lookup[v] for v in labels], dtype=np.int64)
        p, c = x.shape[1], len(self.classes)
        theta0 = np.zeros(p * c + c)
        res = minimize(self.loss_and_grad, theta0, args=(x, y), jac=True, method="L-BFGS-B",
                       options={"maxiter": self.max_iter})
        self.weights, self.bias = self._unpack(res.x, p, c)
        self.converged = bool(res.success)
        return self

    def predict(self, x):
        z = x @ self.weights + self.bias
        return np.array(self.classes, dtype=object)[np.argmax(z, axis=1)]


def macro_f1(truth, pred, classes):
    scores = []
    for c in classes:
        tp = np.sum((pred == c) & (truth == c))
        fp = np.sum((pred == c) & (truth != c))
        fn = np.sum((pred != c) & (truth == c))
        denom = 2 * tp + fp + fn
        scores.append(0.0 if denom == 0 else 2 * tp / denom)
    return float(np.mean(scores)) if scores else 0.0


@dataclass
class EfficacyResult:
    accuracy: float
    f1: float
    missing_classes: list
    identity_accuracy: float | None = None
    identity_f1: float | None = None

    def to_json(self):
        return asdict(self)


def classifier_scores(fit_table, test, target, classes, pairwise=False, l2=1e-3, max_iter=200):
    """Train on ``fit_table`` and score on ``test``; returns (accuracy, f1, missing)."""
    labels = np.array([None if v is None else str(v) for v in fit_table.column(target)],
                      dtype=object)
    keep = np.array([v is not None for v in labels], dtype=bool)
    fit_table = fit_table.take(np.flatnonzero(keep))
    labels = labels[keep]
    truth = np.array([str(v) for v in test.column(target)], dtype=object)
    missing = [c for c in classes if c not in set(labels)]
    features = [n for n in fit_table.names if n != target]
    if len(set(labels)) < 2:
        pred = np.array([labels[0] if len(labels) else None] * len(truth), dtype=object)
    else:
        enc = FeatureEncoder(pairwise=pairwise).fit(fit_table, features)
        clf = LogisticRegression(l2, max_iter).fit(enc.transform(fit_table), list(labels))
        pred = clf.predict(enc.transform(test))
    return float(np.mean(pred == truth)), macro_f1(truth, pred, classes), missing


def eval_ml_efficacy(real_train, real_test, synthesizer, target_column, seed, pairwise=False):
    """Accuracy and macro-F1 of a classifier fitted on synthetic rows, scored on real test rows."""
    if real_train.kinds[real_train.names.index(target_column)] != CATEGORICAL:
        raise ValueError(f"target column {target_column!r} must be categorical")
    s_fit, s_gen = _seeds(seed, 2)
    classes = sorted({str(v) for v in real_train.column(target_column) if v is not None}
                     | {str(v) for v in real_test.column(target_column)})
    synthesizer.fit(real_train, s_fit)
    syn = synthesizer.sample(real_train.n_rows, s_gen)
    acc, f1, missing = classifier_scores(syn, real_test, target_column, classes, pairwise)
    ref_acc, ref_f1, _ = classifier_scores(real_train, real_test, target_column, classes,
                                           pairwise)
    return EfficacyResult(acc, f1, missing, ref_acc, ref_f1)


# ---------------------------------------------------------------- constructed datasets

def xor_dataset(n, seed, noise_columns=3, label_noise=0.0):
    """Binary table where ``y = x1 XOR x2``; extra columns are independent noise."""
    rng = np.random.default_rng(seed)
    x1 = rng.integers(0, 2, n)
    x2 = rng.integers(0, 2, n)
    y = x1 ^ x2
    if label_noise:
        y = np.where(rng.random(n) < label_noise, 1 - y, y)
    names = ["x1", "x2"] + [f"noise{i}" for i in range(noise_columns)] + ["y"]
    cols = [x1, x2] + [rng.integers(0, 2, n) for _ in range(noise_columns)] + [y]
    return TableDataset(names, [CATEGORICAL] * len(names),
                        [np.asarray(c).astype(str).astype(object) for c in cols])


def mutual_information(a, b):
    """Plug-in mutual information (nats) of two discrete columns."""
    _, ia = np.unique(np.asarray(a, dtype=str), return_inverse=True)
    _, ib = np.unique(np.asarray(b, dtype=str), return_inverse=True)
    joint = np.zeros((ia.max() + 1, ib.max() + 1))
    np.add.at(joint, (ia, ib), 1.0)
    joint /= joint.sum()
    pa, pb = joint.sum(axis=1), joint.sum(axis=0)
    nz = joint > 0
    return float((joint[nz] * np.log(joint[nz] / np.outer(pa, pb)[nz])).sum())
