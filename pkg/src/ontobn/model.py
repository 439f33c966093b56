"""Bag-of-features encoder with a flat or factorized sigmoid output layer.

Encoder: each bag (and the metadata bag) is mean pooled over feature
embeddings, the means are concatenated, passed through optional dense
layers and a final projection to ``d`` dimensions. A label's conditional
probability is ``sigmoid(encoder(x) . e_label)``.

In ``bayesian`` mode the marginal of a label is the product of the
conditionals over ``{label} | ancestors(label)``; in ``flat`` mode the
sigmoid is the marginal itself.
"""
import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from .errors import (DivergenceError, ParseError, UnknownFeatureError, UnknownLabelError,
                     ValidationError)
from .seeding import stream

__all__ = [
    "EPS",
    "Model",
    "EncodedInstance",
    "LossHead",
    "Pooled",
    "encode",
    "conditional_prob",
    "predict_marginal",
    "predict_all",
    "predict_proba",
    "backward",
    "closure_matrix",
    "save_checkpoint",
    "load_checkpoint",
]

EPS = 1e-7
ACTIVATIONS = ("identity", "relu")
MODES = ("flat", "bayesian")
CHECKPOINT_MAGIC = "ontobn-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class EncodedInstance:
    vector: np.ndarray


@dataclass
class LossHead:
    """Per-label binary targets and loss weights for one instance."""

    labels: Sequence
    targets: Sequence
    weights: Sequence = None

    def __post_init__(self):
        if self.weights is None:
            self.weights = [1.0] * len(self.labels)
        if not len(self.labels) == len(self.targets) == len(self.weights):
            raise ValidationError("labels, targets and weights must have equal length")


@dataclass
class Pooled:
    """Sparse mean-pooling operators for a list of instances.

    ``ops[b]`` has shape ``(n_instances, n_table_rows)``; row ``i`` averages
    the embedding-table rows of instance ``i``'s bag ``b``. The last
    operator pools the metadata bag.
    """

    ops: list

    def __len__(self):
        return self.ops[0].shape[0]

    def take(self, rows):
        return Pooled([op[rows] for op in self.ops])


class Model:
    """Encoder parameters and label embeddings.

    Parameters
    ----------
    vocab : sequence of str
        Input feature ids.
    labels : sequence of str
        Labels with an output embedding row (the conditionals in bayesian
        mode, the targets in flat mode).
    d : int
        Embedding size.
    n_bags : int
        Number of time-bin bags per instance, excluding metadata.
    hidden_sizes : sequence of int
        Widths of the additional dense layers (0 to 2 of them).
    shared_weights : bool
        If true, a feature id that is also a label uses that label's
        embedding row.
    targets : sequence of str, optional
        Labels to predict; defaults to ``labels``.
    """

    def __init__(self, vocab, labels, d, *, n_bags=1, hidden_sizes=(), activation="identity",
                 mode="bayesian", shared_weights=True, targets=None, dtype=np.float32, seed=0):
        if mode not in MODES:
            raise ValidationError(f"mode must be one of {MODES}, got {mode!r}")
        if activation not in ACTIVATIONS:
            raise ValidationError(f"activation must be one of {ACTIVATIONS}, got {activation!r}")
        if len(hidden_sizes) > 2:
            raise ValidationError("at most 2 additional layers")
        self.vocab = list(vocab)
        self.labels = list(labels)
        self.targets = list(self.labels if targets is None else targets)
        self.d = int(d)
        self.n_bags = int(n_bags)
        self.hidden_sizes = [int(h) for h in hidden_sizes]
        self.activation = activation
        self.mode = mode
        self.shared_weights = bool(shared_weights)
        self.dtype = np.dtype(dtype)
        self._label_index = {l: i for i, l in enumerate(self.labels)}
        if len(self._label_index) != len(self.labels):
            raise ValidationError("duplicate label ids")
        if self.mode == "flat":
            for t in self.targets:
                if t not in self._label_index:
                    raise ValidationError(f"flat target {t!r} has no embedding row")

        # Row of each vocab id in the stacked table [label_embeddings; feature_embeddings].
        own = [f for f in self.vocab if not (self.shared_weights and f in self._label_index)]
        own_index = {f: i for i, f in enumerate(own)}
        self.untied_features = own
        self._table_row = {}
        for f in self.vocab:
            if f in own_index:
                self._table_row[f] = len(self.labels) + own_index[f]
            else:
                self._table_row[f] = self._label_index[f]

        rng = stream(seed, "model.init")
        bound = 1.0 / math.sqrt(self.d)
        params = {
            "label_embeddings": rng.uniform(-bound, bound, (len(self.labels), self.d)),
            "feature_embeddings": rng.uniform(-bound, bound, (len(own), self.d)),
        }
        width = (self.n_bags + 1) * self.d
        for i, h in enumerate(self.hidden_sizes):
            b = 1.0 / math.sqrt(width)
            params[f"hidden{i}.weight"] = rng.uniform(-b, b, (width, h))
            params[f"hidden{i}.bias"] = np.zeros(h)
            width = h
        b = 1.0 / math.sqrt(width)
        params["projection.weight"] = rng.uniform(-b, b, (width, self.d))
        params["projection.bias"] = np.zeros(self.d)
        self.params = {k: v.astype(self.dtype) for k, v in params.items()}

    # -- structure -------------------------------------------------------

    def layer_names(self):
        return [f"hidden{i}" for i in range(len(self.hidden_sizes))] + ["projection"]

    def label_row(self, label):
        try:
            return self._label_index[label]
        except KeyError:
            raise UnknownLabelError(label) from None

    @property
    def vocab_embeddings(self):
        """``(len(vocab), d)`` view of every feature's embedding."""
        table = self._table()
        return table[[self._table_row[f] for f in self.vocab]]

    def _table(self):
        return np.vstack([self.params["label_embeddings"], self.params["feature_embeddings"]])

    def copy(self):
        other = object.__new__(Model)
        other.__dict__.update(self.__dict__)
        other.params = {k: v.copy() for k, v in self.params.items()}
        return other

    def astype(self, dtype):
        other = self.copy()
        other.dtype = np.dtype(dtype)
        other.params = {k: v.astype(dtype) for k, v in self.params.items()}
        return other

    # -- forward / backward ---------------------------------------------

    def pool(self, instances, ignore_unknown=False) -> Pooled:
        n_rows = len(self.labels) + len(self.untied_features)
        slots = [[] for _ in range(self.n_bags + 1)]
        for inst in instances:
            if len(inst.bags) != self.n_bags:
                raise ValidationError(
                    f"instance {inst.id!r} has {len(inst.bags)} bags, model expects {self.n_bags}")
            for slot, bag in zip(slots, list(inst.bags) + [inst.metadata_bag]):
                rows = []
                for f in bag:
                    r = self._table_row.get(f)
                    if r is None:
                        if ignore_unknown:
                            continue
                        raise UnknownFeatureError(f)
                    rows.append(r)
                slot.append(rows)
        ops = []
        for slot in slots:
            indptr = np.zeros(len(slot) + 1, dtype=np.int64)
            indptr[1:] = np.cumsum([len(r) for r in slot])
            indices = np.fromiter((r for rows in slot for r in rows), dtype=np.int64, count=indptr[-1])
            data = np.concatenate([np.full(len(r), 1.0 / len(r)) for r in slot if r] or [np.zeros(0)])
            op = sp.csr_matrix((data.astype(self.dtype), indices, indptr), shape=(len(slot), n_rows))
            op.sum_duplicates()
            ops.append(op)
        return Pooled(ops)

    def forward(self, pooled: Pooled):
        """Encode a pooled batch; returns ``(vectors, cache)``."""
        table = self._table()
        h = np.hstack([op @ table for op in pooled.ops])
        cache = {"inputs": [], "pre": []}
        for name in self.layer_names():
            cache["inputs"].append(h)
            z = h @ self.params[f"{name}.weight"] + self.params[f"{name}.bias"]
            cache["pre"].append(z)
            if name != "projection" and self.activation == "relu":
                z = np.maximum(z, 0)
            h = z
        cache["pooled"] = pooled
        return h, cache

    def backward_encoder(self, cache, grad_out):
        """Gradients of all parameters given d(loss)/d(encoder output)."""
        grads = {}
        g = grad_out
        names = self.layer_names()
        for k in reversed(range(len(names))):
            name = names[k]
            if name != "projection" and self.activation == "relu":
                g = g * (cache["pre"][k] > 0)
            grads[f"{name}.weight"] = cache["inputs"][k].T @ g
            grads[f"{name}.bias"] = g.sum(axis=0)
            g = g @ self.params[f"{name}.weight"].T
        d = self.d
        table_grad = np.zeros((len(self.labels) + len(self.untied_features), d), dtype=g.dtype)
        for b, op in enumerate(cache["pooled"].ops):
            table_grad += np.asarray(op.T @ g[:, b * d:(b + 1) * d])
        grads["label_embeddings"] = table_grad[:len(self.labels)]
        grads["feature_embeddings"] = table_grad[len(self.labels):]
        return grads

    def head_loss_and_grad(self, pooled: Pooled, targets, weights):
        """Weighted binary cross-entropy summed over every (instance, label).

        ``targets`` and ``weights`` are ``(n_instances, len(labels))``.
        Probabilities are clamped to ``[EPS, 1 - EPS]``; clamped entries have
        zero gradient, which is the exact derivative of the clamped loss.
        """
        x, cache = self.forward(pooled)
        emb = self.params["label_embeddings"]
        z = x @ emb.T
        p = expit(z)
        pc = np.clip(p, EPS, 1 - EPS)
        t = np.asarray(targets, dtype=self.dtype)
        w = np.asarray(weights, dtype=self.dtype)
        loss = -float(np.sum(w * (t * np.log(pc) + (1 - t) * np.log1p(-pc)), dtype=np.float64))
        gz = w * (pc - t) * ((p > EPS) & (p < 1 - EPS))
        grads = self.backward_encoder(cache, gz @ emb)
        grads["label_embeddings"] = grads["label_embeddings"] + gz.T @ x
        grads = {k: grads[k].astype(self.dtype, copy=False) for k in self.params}
        return loss, grads

    def conditional_matrix(self, pooled: Pooled) -> np.ndarray:
        """Clamped conditionals, ``(n_instances, len(labels))``."""
        x, _ = self.forward(pooled)
        return np.clip(expit(x @ self.params["label_embeddings"].T), EPS, 1 - EPS)


def encode(m: Model, inst, ignore_unknown=False) -> EncodedInstance:
    x, _ = m.forward(m.pool([inst], ignore_unknown=ignore_unknown))
    return EncodedInstance(x[0])


def conditional_prob(m: Model, x: EncodedInstance, label) -> float:
    """``sigmoid(x . e_label)`` clamped to ``[EPS, 1 - EPS]``."""
    e = m.params["label_embeddings"][m.label_row(label)]
    p = float(expit(np.dot(x.vector, e)))
    return min(max(p, EPS), 1 - EPS)


def _closure_members(m: Model, label, ont):
    members = ont.closure(label).ordered_members
    for mem in members:
        if mem not in m._label_index:
            raise ValidationError(f"closure member {mem!r} of {label!r} has no embedding")
    return members


def predict_marginal(m: Model, x: EncodedInstance, label, ont) -> float:
    """Product of conditionals over the label's closure, summed in log space."""
    if m.mode != "bayesian":
        raise ValidationError("predict_marginal requires a bayesian-mode model")
    members = _closure_members(m, label, ont)
    if len(members) == 1:
        return conditional_prob(m, x, label)
    return math.exp(math.fsum(math.log(conditional_prob(m, x, mem)) for mem in members))


def predict_all(m: Model, x: EncodedInstance, labeldict, ont) -> dict:
    """Probabilities of every target; each conditional is evaluated once."""
    if m.mode == "flat":
        return {t: conditional_prob(m, x, t) for t in labeldict.targets}
    probs = {}

    def cond(label):
        if label not in probs:
            probs[label] = conditional_prob(m, x, label)
        return probs[label]

    out = {}
    for t in labeldict.targets:
        members = _closure_members(m, t, ont)
        if len(members) == 1:
            out[t] = cond(t)
        else:
            out[t] = math.exp(math.fsum(math.log(cond(mem)) for mem in members))
    return out


def closure_matrix(m: Model, targets, ont) -> sp.csr_matrix:
    """``(len(labels), len(targets))`` 0/1 matrix of closure membership."""
    rows, cols = [], []
    for j, t in enumerate(targets):
        for mem in _closure_members(m, t, ont):
            rows.append(m._label_index[mem])
            cols.append(j)
    return sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(len(m.labels), len(targets)))


def predict_proba(m: Model, instances_or_pooled, ont=None, targets=None, closure=None,
                  ignore_unknown=False) -> np.ndarray:
    """Batch marginals, ``(n_instances, len(targets))`` in float64."""
    targets = m.targets if targets is None else list(targets)
    pooled = instances_or_pooled
    if not isinstance(pooled, Pooled):
        pooled = m.pool(instances_or_pooled, ignore_unknown=ignore_unknown)
    cond = m.conditional_matrix(pooled).astype(np.float64)
    cols = [m.label_row(t) for t in targets]
    if m.mode == "flat":
        return cond[:, cols]
    if closure is None:
        closure = closure_matrix(m, targets, ont)
    out = np.exp(np.asarray(closure.T @ np.log(cond).T).T)
    single = np.asarray(closure.sum(axis=0)).ravel() == 1
    out[:, single] = cond[:, np.asarray(cols)[single]]
    return out


def backward(m: Model, inst, head: LossHead, ignore_unknown=False):
    """Exact gradients of ``sum_k w_k * BCE(p_k, t_k)`` for one instance.

    Returns ``(loss, grads)`` with ``grads`` keyed like ``m.params``.
    """
    t = np.zeros((1, len(m.labels)))
    w = np.zeros((1, len(m.labels)))
    for label, target, weight in zip(head.labels, head.targets, head.weights):
        j = m.label_row(label)
        t[0, j] = target
        w[0, j] += weight
    loss, grads = m.head_loss_and_grad(m.pool([inst], ignore_unknown=ignore_unknown), t, w)
    check_finite(grads)
    return loss, grads


def check_finite(grads):
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient in {name}")


# -- checkpoints -------------------------------------------------------------

def save_checkpoint(m: Model, path):
    """Write a JSON header line followed by little-endian float32 arrays."""
    names = list(m.params)
    header = {
        "format": CHECKPOINT_MAGIC,
        "version": CHECKPOINT_VERSION,
        "d": m.d,
        "mode": m.mode,
        "n_bags": m.n_bags,
        "hidden_sizes": m.hidden_sizes,
        "activation": m.activation,
        "shared_weights": m.shared_weights,
        "labels": m.labels,
        "targets": m.targets,
        "vocab": m.vocab,
        "arrays": [{"name": k, "shape": list(m.params[k].shape)} for k in names],
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8"))
        fh.write(b"\n")
        for k in names:
            fh.write(np.ascontiguousarray(m.params[k], dtype="<f4").tobytes())


def load_checkpoint(path) -> Model:
    with open(path, "rb") as fh:
        head = fh.readline()
        body = fh.read()
    try:
        header = json.loads(head.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise ParseError("checkpoint header is not JSON", 1) from None
    if header.get("format") != CHECKPOINT_MAGIC:
        raise ParseError("not an ontobn checkpoint", 1)
    if header.get("version") != CHECKPOINT_VERSION:
        raise ParseError(f"unsupported checkpoint version {header.get('version')!r}", 1)
    m = Model(header["vocab"], header["labels"], header["d"], n_bags=header["n_bags"],
              hidden_sizes=header["hidden_sizes"], activation=header["activation"],
              mode=header["mode"], shared_weights=header["shared_weights"],
              targets=header["targets"], dtype=np.float32)
    offset = 0
    for spec in header["arrays"]:
        name, shape = spec["name"], tuple(spec["shape"])
        if name not in m.params:
            raise ValidationError(f"checkpoint has unexpected array {name!r}")
        if shape != m.params[name].shape:
            raise ValidationError(f"array {name!r} has shape {shape}, expected {m.params[name].shape}")
        n = int(np.prod(shape)) * 4
        if offset + n > len(body):
            raise ValidationError("checkpoint is truncated")
        m.params[name] = np.frombuffer(body[offset:offset + n], dtype="<f4").reshape(shape).astype(np.float32)
        offset += n
    if offset != len(body):
        raise ValidationError("checkpoint has trailing bytes")
    if set(s["name"] for s in header["arrays"]) != set(m.params):
        raise ValidationError("checkpoint is missing arrays")
    return m
