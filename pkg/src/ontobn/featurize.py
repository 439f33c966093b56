"""Instances, label dictionaries, rollup expansion and synthetic data.

Datasets are stored as JSON lines, one instance per line::

    {"id": "s000001", "bags": [["f3", "f7"]], "metadata": [], "labels": ["A", "B"]}

``bags`` holds one feature multiset per time bin (a single bag for
unbinned data). ``metadata`` is pooled as one extra bag by the encoder.
"""
import json
import math
from collections import Counter
from dataclasses import dataclass, field, fields
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.special import expit

from .errors import ParseError, UnknownLabelError, ValidationError
from .ontology import Ontology
from .seeding import stream

__all__ = [
    "Instance",
    "LabelDict",
    "SynthSpec",
    "TrueModel",
    "rollup_expand",
    "build_label_dictionary",
    "synth_generate",
    "random_tree_ontology",
    "read_dataset",
    "write_dataset",
    "load_config",
]


@dataclass(frozen=True)
class Instance:
    id: str
    bags: tuple
    metadata_bag: tuple = ()
    labels: frozenset = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "bags", tuple(tuple(b) for b in self.bags))
        object.__setattr__(self, "metadata_bag", tuple(self.metadata_bag))
        object.__setattr__(self, "labels", frozenset(self.labels))
        if not self.bags:
            raise ValidationError(f"instance {self.id!r} has no bags")

    def features(self) -> set:
        """Union of all bag and metadata feature ids."""
        out = set(self.metadata_bag)
        for b in self.bags:
            out.update(b)
        return out

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "bags": [list(b) for b in self.bags],
            "metadata": list(self.metadata_bag),
            "labels": sorted(self.labels),
        }


@dataclass
class LabelDict:
    """Predicted labels and the conditional classifiers they need.

    ``conditionals`` is ``targets`` plus every ancestor of a target when
    the dictionary was built with ``closure=True``.
    """

    targets: list
    conditionals: list
    positive_counts: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {
                "targets": self.targets,
                "conditionals": self.conditionals,
                "positive_counts": self.positive_counts,
            },
            indent=1,
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text):
        obj = json.loads(text)
        if isinstance(obj, dict) and "targets" not in obj:
            # bare {label: count} mapping
            counts = {str(k): int(v) for k, v in obj.items()}
            labels = list(counts)
            return cls(labels, labels, counts)
        return cls(list(obj["targets"]), list(obj["conditionals"]),
                   {k: int(v) for k, v in obj["positive_counts"].items()})

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())


def rollup_expand(inst: Instance, ont: Ontology, code_to_label: Mapping) -> Instance:
    """Add an ancestor-label feature for every mapped code in each bag.

    The added feature id is the ancestor's label id, so it can share an
    embedding row with that label's output classifier. Features already
    present are not added again, which makes the expansion idempotent.
    """
    for label in set(code_to_label.values()):
        if label not in ont:
            raise UnknownLabelError(label)

    def expand(bag):
        present = set(bag)
        extra = set()
        for f in present:
            label = code_to_label.get(f)
            if label is not None:
                extra |= ont.ancestors(label)
        extra -= present
        return tuple(bag) + tuple(sorted(extra))

    return Instance(inst.id, tuple(expand(b) for b in inst.bags), inst.metadata_bag, inst.labels)


def build_label_dictionary(
    train_labels: Iterable, ont: Ontology, min_count: int = 5, closure: bool = True
) -> LabelDict:
    """Targets are labels seen at least ``min_count`` times in training.

    With ``closure`` every ancestor of a target also gets a conditional
    classifier, whatever its own count.
    """
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    counts = Counter()
    for labels in train_labels:
        counts.update(set(labels))

    rank = {n: i for i, n in enumerate(ont.topological_order)}

    def order(labels):
        return sorted(labels, key=lambda x: (x not in rank, rank.get(x, 0), x))

    targets = order(l for l, c in counts.items() if c >= min_count)
    if closure:
        cond = set(targets)
        for t in targets:
            cond |= ont.ancestors(t)  # raises on labels outside the ontology
        conditionals = order(cond)
    else:
        conditionals = list(targets)
    positive_counts = {l: counts.get(l, 0) for l in conditionals}
    return LabelDict(targets, conditionals, positive_counts)


@dataclass
class SynthSpec:
    """Parameters of the synthetic generative process.

    ``bias_low``/``bias_high`` bound a per-label logit offset; the default
    (0, 0) gives no offset. Negative offsets make deep labels rare.
    """

    ontology: Ontology
    feature_dim: int = 50
    features_per_instance: int = 5
    true_embedding_scale: float = 4.0
    instance_count: int = 1000
    seed: int = 0
    bias_low: float = 0.0
    bias_high: float = 0.0

    def __post_init__(self):
        for name in ("feature_dim", "features_per_instance", "instance_count"):
            if int(getattr(self, name)) <= 0:
                raise ValidationError(f"{name} must be positive")
        if not self.true_embedding_scale > 0:
            raise ValidationError("true_embedding_scale must be positive")
        if self.bias_low > self.bias_high:
            raise ValidationError("bias_low must not exceed bias_high")

    @classmethod
    def from_mapping(cls, ontology, values: Mapping):
        known = {f.name for f in fields(cls)} - {"ontology"}
        kwargs = {}
        for key, raw in values.items():
            if key not in known:
                raise ValidationError(f"unknown synth spec key {key!r}")
            default = getattr(cls, key)
            kwargs[key] = type(default)(raw)
        return cls(ontology=ontology, **kwargs)

    def to_mapping(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name != "ontology"}


class TrueModel:
    """Ground-truth conditionals of the synthetic process.

    ``P(label | parents present, X) = sigmoid(weights[label] . xbar + bias[label])``
    where ``xbar`` is the mean one-hot vector of the instance's features.
    """

    def __init__(self, ontology: Ontology, features: Sequence, weights, bias):
        self.ontology = ontology
        self.labels = list(ontology.topological_order)
        self.features = list(features)
        self.weights = np.asarray(weights, dtype=np.float64)
        self.bias = np.asarray(bias, dtype=np.float64)
        if self.weights.shape != (len(self.labels), len(self.features)):
            raise ValidationError(f"weights shape {self.weights.shape} does not match "
                                  f"{len(self.labels)} labels x {len(self.features)} features")
        if self.bias.shape != (len(self.labels),):
            raise ValidationError("bias must have one entry per label")
        self._fidx = {f: i for i, f in enumerate(self.features)}
        self._lidx = {l: i for i, l in enumerate(self.labels)}

    def mean_onehot(self, instances) -> np.ndarray:
        xbar = np.zeros((len(instances), len(self.features)))
        for i, inst in enumerate(instances):
            feats = [f for b in inst.bags for f in b]
            for f in feats:
                xbar[i, self._fidx[f]] += 1.0
            if feats:
                xbar[i] /= len(feats)
        return xbar

    def conditional_probs(self, instances) -> np.ndarray:
        """(n_instances, n_labels) matrix of conditionals, columns in ``labels`` order."""
        with np.errstate(over="ignore"):
            return expit(self.mean_onehot(instances) @ self.weights.T + self.bias)

    def marginals(self, instances, labels=None) -> np.ndarray:
        """Exact ``P(label | X)``: product of conditionals over the closure."""
        cond = self.conditional_probs(instances)
        labels = self.labels if labels is None else list(labels)
        out = np.empty((len(instances), len(labels)))
        for j, label in enumerate(labels):
            cols = [self._lidx[m] for m in self.ontology.closure(label).ordered_members]
            out[:, j] = np.prod(cond[:, cols], axis=1)
        return out

    def sample_labels(self, instances, rng) -> list:
        """Draw label sets top-down; a label needs all parents present."""
        cond = self.conditional_probs(instances)
        u = rng.random(cond.shape)
        present = np.zeros(cond.shape, dtype=bool)
        for j, label in enumerate(self.labels):
            ok = u[:, j] < cond[:, j]
            for p in self.ontology.parents(label):
                ok &= present[:, self._lidx[p]]
            present[:, j] = ok
        return [frozenset(self.labels[j] for j in np.flatnonzero(row)) for row in present]

    def as_model(self):
        """Express the ground truth as a bayesian-mode ``Model`` (float64).

        Embedding size is ``n_features + 1``: the identity embeds features
        so the bag mean is ``xbar``, and the projection bias supplies a
        constant coordinate that carries each label's offset.
        """
        from .model import Model

        n_f = len(self.features)
        d = n_f + 1
        m = Model(self.features, self.labels, d, n_bags=1, mode="bayesian",
                  shared_weights=False, dtype=np.float64, seed=0)
        emb = np.zeros((n_f, d))
        emb[:, :n_f] = np.eye(n_f)
        proj = np.zeros((2 * d, d))
        proj[:d, :d] = np.eye(d)
        proj_bias = np.zeros(d)
        proj_bias[n_f] = 1.0
        label_emb = np.hstack([self.weights, self.bias[:, None]])
        m.params["feature_embeddings"][...] = emb
        m.params["projection.weight"][...] = proj
        m.params["projection.bias"][...] = proj_bias
        m.params["label_embeddings"][...] = label_emb
        return m

    def to_json(self) -> str:
        return json.dumps({
            "labels": self.labels,
            "edges": [list(e) for e in self.ontology.edges],
            "nodes": list(self.ontology.nodes),
            "features": self.features,
            "weights": self.weights.tolist(),
            "bias": self.bias.tolist(),
        }, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        obj = json.loads(text)
        ont = Ontology(obj["nodes"], [tuple(e) for e in obj["edges"]])
        return cls(ont, obj["features"], obj["weights"], obj["bias"])

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())


def synth_generate(spec: SynthSpec):
    """Sample a dataset whose labels follow the factorized model exactly.

    Returns ``(instances, true_model)``. Each instance has a single bag of
    ``features_per_instance`` feature ids drawn uniformly with replacement
    from ``f0 .. f{feature_dim-1}``; labels are sampled in topological
    order so every label set is closed under ancestry.
    """
    ont = spec.ontology
    features = [f"f{j}" for j in range(spec.feature_dim)]
    s = spec.true_embedding_scale
    rng_true = stream(spec.seed, "synth.true_model")
    weights = rng_true.uniform(-s, s, size=(len(ont), spec.feature_dim))
    bias = rng_true.uniform(spec.bias_low, spec.bias_high, size=len(ont))
    truth = TrueModel(ont, features, weights, bias)

    draws = stream(spec.seed, "synth.features").integers(
        0, spec.feature_dim, size=(spec.instance_count, spec.features_per_instance))
    width = len(str(spec.instance_count - 1))
    bare = [Instance(f"s{i:0{width}d}", ([features[j] for j in row],))
            for i, row in enumerate(draws)]
    label_sets = truth.sample_labels(bare, stream(spec.seed, "synth.labels"))
    instances = [Instance(b.id, b.bags, (), ls) for b, ls in zip(bare, label_sets)]
    return instances, truth


def random_tree_ontology(n_labels: int, max_children: int, rng, prefix: str = "L") -> Ontology:
    """Random rooted forest.

    Nodes are added one at a time. Each new node becomes a root with
    probability ``1/sqrt(n_labels)``; otherwise it attaches to a uniformly
    chosen earlier node with fewer than ``max_children`` children.
    """
    width = len(str(n_labels - 1))
    names = [f"{prefix}{i:0{width}d}" for i in range(n_labels)]
    edges = []
    open_slots = []
    n_children = {}
    p_root = 1.0 / math.sqrt(n_labels)
    for i, name in enumerate(names):
        if i > 0 and open_slots and rng.random() >= p_root:
            parent = open_slots[rng.integers(len(open_slots))]
            edges.append((parent, name))
            n_children[parent] += 1
            if n_children[parent] >= max_children:
                open_slots.remove(parent)
        n_children[name] = 0
        open_slots.append(name)
    return Ontology(names, edges)


def read_dataset(path, ontology: Ontology = None) -> list:
    """Read a JSON-lines dataset. With ``ontology``, unknown labels raise."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON: {exc.msg}", lineno) from None
            if not isinstance(rec, dict):
                raise ParseError("record is not an object", lineno)
            for key in ("id", "bags", "labels"):
                if key not in rec:
                    raise ParseError(f"record missing {key!r} field", lineno)
            bags = rec["bags"]
            if not isinstance(bags, list) or not bags or not all(isinstance(b, list) for b in bags):
                raise ParseError("'bags' must be a non-empty list of lists", lineno)
            labels = rec["labels"]
            if not isinstance(labels, list):
                raise ParseError("'labels' must be a list", lineno)
            if ontology is not None:
                for l in labels:
                    if l not in ontology:
                        raise ParseError(f"unknown label {l!r}", lineno)
            out.append(Instance(str(rec["id"]), bags, rec.get("metadata", []), labels))
    return out


def write_dataset(instances: Iterable, path):
    with open(path, "w", encoding="utf-8") as fh:
        for inst in instances:
            fh.write(json.dumps(inst.to_record(), separators=(",", ":")))
            fh.write("\n")


def load_config(path) -> dict:
    """Read a JSON object or ``key = value`` lines (``#`` comments allowed)."""
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    if text.lstrip().startswith("{"):
        return json.loads(text)
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ParseError(f"expected 'key = value', got {raw!r}", lineno)
        value = value.strip()
        try:
            out[key.strip()] = json.loads(value)
        except json.JSONDecodeError:
            out[key.strip()] = value
    return out
