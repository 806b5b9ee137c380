"""The composable generative model: shuffled-order training and generation.

Each example is laid out in a random feature order. Inputs are the encoded
values plus their column embeddings; a causal transformer turns them into
representations R, and the output head lets the column embedding of the
feature at position k attend to a learned start row and R at positions < k.
The resulting vector y_k gives the categorical logits ``E_k.T @ y_k``.
"""
from __future__ import annotations

import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import _kernels as K
from . import tensor as T
from . import transformer as tf
from .codecs import DEFAULT_BINS, NUMERICAL, make_codec
from .data import PermutedBatch, TableDataset, batches, empty_like, fit_schemas

log = logging.getLogger(__name__)

INIT_KEY = 2**31 - 1
GEN_CHUNK = 1024


@dataclass
class TrainConfig:
    hidden: int = 64
    n_blocks: int = 2
    n_heads: int = 8
    epochs: int = 15
    batch_size: int = 128
    lr: float = 1e-3
    beta1: float = 0.5
    beta2: float = 0.99
    seed: int = 0
    prefix_subsampling: bool = True
    drop_prob: float = 0.2
    bins: int = DEFAULT_BINS

    def __post_init__(self):
        if self.hidden % self.n_heads:
            raise T.ContractError(f"hidden size {self.hidden} not divisible by "
                                  f"{self.n_heads} heads")
        if not 0.0 <= self.drop_prob < 1.0:
            raise T.ContractError("drop_prob must lie in [0, 1)")

    @property
    def effective_drop(self):
        return self.drop_prob if self.prefix_subsampling else 0.0

    def to_json(self):
        return asdict(self)


class ModelParams:
    """All learned weights plus the fitted schemas they were built for."""

    def __init__(self, schemas, config, codecs, col_emb, start, blocks, final_ln,
                 head_attn, head_ln):
        self.schemas = list(schemas)
        self.config = config
        self.codecs = codecs
        self.col_emb = col_emb
        self.start = start
        self.blocks = blocks
        self.final_ln = final_ln
        self.head_attn = head_attn
        self.head_ln = head_ln
        sizes = [s.cardinality for s in self.schemas]
        self.offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64)
        total = int(sum(sizes))
        self.segments = np.zeros((len(sizes), total), dtype=bool)
        for k, (o, d) in enumerate(zip(self.offsets, sizes)):
            self.segments[k, o:o + d] = True

    @classmethod
    def init(cls, schemas, config):
        rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(INIT_KEY,)))
        h = config.hidden
        codecs = [make_codec(s, h, rng) for s in schemas]
        col_emb = T.Tensor(rng.normal(0.0, tf.INIT_STD, (len(schemas), h)), requires_grad=True,
                           name="columns")
        start = T.Tensor(rng.normal(0.0, tf.INIT_STD, h), requires_grad=True, name="start")
        blocks = [tf.TransformerBlockWeights.init(rng, h, config.n_heads, f"block{i}.")
                  for i in range(config.n_blocks)]
        final_ln = tf.LayerNormWeights.init(h, "final_ln.")
        head_attn = tf.AttentionWeights.init(rng, h, config.n_heads, "head.attn.")
        head_ln = tf.LayerNormWeights.init(h, "head.ln.")
        return cls(schemas, config, codecs, col_emb, start, blocks, final_ln, head_attn, head_ln)

    @property
    def names(self):
        return [s.name for s in self.schemas]

    @property
    def n_features(self):
        return len(self.schemas)

    def parameters(self):
        out = []
        for c in self.codecs:
            out.extend(c.parameters())
        out += [self.col_emb, self.start]
        for b in self.blocks:
            out.extend(b.tensors())
        out += self.final_ln.tensors() + self.head_attn.tensors() + self.head_ln.tensors()
        return out

    def named_parameters(self):
        return [(p.name, p) for p in self.parameters()]

    def embedding_matrix(self):
        """All E_k side by side, (h, sum d_k); a view-free concat per call."""
        return T.concat([c.embedding for c in self.codecs], axis=1)


# ---------------------------------------------------------------- forward

def _representations(params, batch):
    e_all = params.embedding_matrix()
    flat = params.offsets[batch.feats] + batch.codes
    x_seq = T.take_rows(params.col_emb, batch.feats)
    h = T.take_cols(e_all, flat) + x_seq
    r = tf.causal_transformer(h, params.blocks, params.final_ln, key_mask=batch.keys)
    b = len(batch)
    start = T.reshape(params.start, (1, 1, params.start.shape[0])) + np.zeros((b, 1, 1))
    r_aug = T.concat([start, r], axis=1)
    y = tf.cross_attention_head(x_seq, r_aug, params.head_attn, params.head_ln,
                                key_mask=batch.keys)
    return y, e_all, flat


def forward(params, batch):
    """Output representations Y (B, L, h) and the batch-mean summed cross-entropy."""
    if len(batch) == 0:
        raise T.ContractError("empty batch")
    if not batch.target.any(axis=1).all():
        warnings.warn("examples without present features contribute nothing")
    y, e_all, flat = _representations(params, batch)
    logits = T.matmul(y, e_all)
    allowed = params.segments[batch.feats]
    weight = batch.target / float(len(batch))
    loss = T.masked_cross_entropy(logits, allowed, flat, weight)
    return y, loss


def position_log_probs(params, batch, temperature=1.0):
    """log P(f at position | prefix) for each position; 0 where ``target`` is False."""
    with T.no_grad():
        y, e_all, flat = _representations(params, batch)
        z = (y.data @ e_all.data) / temperature
    allowed = params.segments[batch.feats]
    z = np.where(allowed, z, -np.inf)
    m = z.max(axis=-1, keepdims=True)
    lse = m[..., 0] + np.log(np.exp(z - m).sum(axis=-1))
    picked = np.take_along_axis(z, flat[..., None], axis=-1)[..., 0]
    return np.where(batch.target, picked - lse, 0.0)


# ---------------------------------------------------------------- training

@dataclass
class TrainResult:
    params: ModelParams
    history: list = field(default_factory=list)


def train(dataset, config=None, params=None, callback=None):
    """Shuffled-order maximum-likelihood training; returns params and per-epoch mean loss."""
    config = config or TrainConfig()
    if dataset.schemas is None:
        dataset = fit_schemas(dataset, config.bins)
    if params is None:
        params = ModelParams.init(dataset.schemas, config)
    elif params.names != list(dataset.names):
        raise T.ContractError("dataset columns do not match the model")
    plist = params.parameters()
    opt = T.Adam(plist, lr=config.lr, betas=(config.beta1, config.beta2))
    history = []
    for epoch in range(config.epochs):
        total, count = 0.0, 0
        for step, batch in enumerate(batches(dataset, config.batch_size, config.seed, epoch,
                                             config.effective_drop)):
            try:
                _, loss = forward(params, batch)
                T.backward(loss)
            except T.NumericalError as exc:
                T.clear_tape()
                raise T.NumericalError(
                    f"non-finite value at epoch {epoch} step {step} (lr={config.lr}); "
                    f"lower the learning rate or check inputs for overflow: {exc}") from exc
            opt.step()
            opt.zero_grad()
            total += loss.item() * len(batch)
            count += len(batch)
        mean = total / max(count, 1)
        history.append(mean)
        log.info("epoch %d mean loss %.6f", epoch, mean)
        if callback is not None:
            callback(epoch, mean)
    return TrainResult(params, history)


# ---------------------------------------------------------------- likelihood

def _order_batch(codes, orders):
    orders = np.asarray(orders, dtype=np.int64)
    target = orders >= 0
    feats = np.where(target, orders, 0)
    pos_codes = np.where(target, np.take_along_axis(codes, feats, axis=1), 0)
    if np.any(target & (pos_codes < 0)):
        raise T.ContractError("order names a feature that is missing in the row")
    return PermutedBatch(np.arange(len(codes)), feats, np.where(target, pos_codes, 0),
                         target, target.copy())


def log_likelihood_codes(params, codes, orders, chunk=4096):
    """Chain-rule log-likelihood per row. ``orders`` (N, L) lists feature indices,
    -1 padding marks features left out of both conditioning and scoring."""
    codes = np.asarray(codes, dtype=np.int64)
    orders = np.asarray(orders, dtype=np.int64)
    out = np.empty(len(codes))
    for s in range(0, len(codes), chunk):
        b = _order_batch(codes[s:s + chunk], orders[s:s + chunk])
        out[s:s + chunk] = position_log_probs(params, b).sum(axis=1)
    return out


def log_likelihood(params, row, order):
    """log P(row) under the chain rule for one feature order.

    ``row`` is a mapping column -> value or a sequence in schema order.
    """
    if isinstance(row, dict):
        values = [row.get(n) for n in params.names]
    else:
        values = list(row)
    codes = np.array([s.to_codes([v])[0] for s, v in zip(params.schemas, values)])
    order = np.asarray(order, dtype=np.int64)
    if np.any(codes[order] < 0):
        raise T.ContractError("row is missing a feature named in the order")
    return float(log_likelihood_codes(params, codes[None], order[None])[0])


def random_orders(present, rng):
    """Uniform random order over each row's present features, -1 padded."""
    u = np.where(present, rng.random(present.shape), np.inf)
    order = np.argsort(u, axis=1, kind="stable")
    return np.where(np.take_along_axis(present, order, axis=1), order, -1)


# ---------------------------------------------------------------- generation

def _row_uniforms(seed, start, stop, n):
    """Per-row substreams: (order keys, class draws, in-bin offsets), each (rows, n)."""
    out = np.empty((3, stop - start, n))
    for i, r in enumerate(range(start, stop)):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(r,)))
        out[:, i, :] = rng.random((3, n))
    return out


def _generate_chunk(params, seed, start, stop, fixed_codes, temperature, fixed_order):
    n = params.n_features
    order_u, class_u, bin_u = _row_uniforms(seed, start, stop, n)
    c = stop - start
    fixed_mask = fixed_codes >= 0
    if fixed_order:
        keys = np.broadcast_to(np.arange(n, dtype=np.float64), (c, n)).copy()
    else:
        keys = order_u.copy()
    keys = keys + np.where(fixed_mask, 0.0, 2.0 * n)
    orders = np.argsort(keys, axis=1, kind="stable")
    codes = np.broadcast_to(fixed_codes, (c, n)).copy()
    n_fixed = int(fixed_mask.sum())
    rows = np.arange(c)
    with T.no_grad():
        e_all = params.embedding_matrix()
        ed = e_all.data
        start_row = params.start.data
        for k in range(n_fixed, n):
            feats = orders[:, :k]
            if k:
                flat = params.offsets[feats] + codes[rows[:, None], feats]
                hseq = T.take_cols(e_all, flat) + T.take_rows(params.col_emb, feats)
                r = tf.causal_transformer(hseq, params.blocks, params.final_ln).data
                r_aug = np.concatenate([np.broadcast_to(start_row, (c, 1, len(start_row))), r],
                                       axis=1)
            else:
                r_aug = np.broadcast_to(start_row, (c, 1, len(start_row))).copy()
            feat_k = orders[:, k]
            q = T.take_rows(params.col_emb, feat_k[:, None])
            y = tf.cross_attention_head(q, T.Tensor(r_aug), params.head_attn, params.head_ln,
                                        mask=np.ones((c, 1, k + 1), dtype=bool)).data[:, 0]
            logits = (y @ ed) / temperature
            probs = K.softmax_masked(logits, params.segments[feat_k])
            flat_choice = K.sample_rows(probs, class_u[rows, feat_k])
            codes[rows, feat_k] = flat_choice - params.offsets[feat_k]
    return codes, bin_u


def _resolve_seed(rng):
    if isinstance(rng, np.random.Generator):
        return int(rng.integers(0, 2**63 - 1))
    return int(rng)


def generate(params, count, rng=0, temperature=1.0, fixed=None, fixed_order=False,
             midpoint=False, workers=1):
    """Sample ``count`` complete rows.

    Each row draws its own feature order; ``fixed`` (column -> value) pins
    columns, which are placed first in the order and echoed verbatim. Rows are
    seeded by index, so output does not depend on ``workers``.
    """
    seed = _resolve_seed(rng)
    n = params.n_features
    fixed = dict(fixed or {})
    unknown = set(fixed) - set(params.names)
    if unknown:
        raise T.ContractError(f"unknown columns in fixed values: {sorted(unknown)}")
    fixed_codes = np.full(n, -1, dtype=np.int64)
    for j, s in enumerate(params.schemas):
        if s.name in fixed:
            fixed_codes[j] = s.to_codes([fixed[s.name]])[0]
            if fixed_codes[j] < 0:
                raise T.ContractError(f"fixed value for {s.name!r} is missing")
    template = TableDataset(params.names, [s.kind for s in params.schemas],
                            [np.zeros(0) if s.kind == NUMERICAL else [] for s in params.schemas],
                            params.schemas)
    if count == 0:
        return empty_like(template)
    spans = [(s, min(s + GEN_CHUNK, count)) for s in range(0, count, GEN_CHUNK)]

    def job(span):
        return _generate_chunk(params, seed, span[0], span[1], fixed_codes, temperature,
                               fixed_order)

    if workers > 1 and len(spans) > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(job, spans))
    else:
        parts = [job(s) for s in spans]
    codes = np.concatenate([p[0] for p in parts])
    bin_u = None if midpoint else np.concatenate([p[1] for p in parts])
    out = TableDataset.from_codes(params.schemas, codes, bin_u)
    for j, s in enumerate(params.schemas):
        if s.name in fixed:
            v = fixed[s.name]
            col = out.columns[j]
            col[:] = float(v) if s.kind == NUMERICAL else str(v)
    return out


def conditional_generate(params, fixed, count, rng=0, **kwargs):
    """Generate rows with the columns in ``fixed`` pinned to the given values."""
    return generate(params, count, rng, fixed=fixed, **kwargs)
