"""Losses, Adam, the training loop, grid search and the logistic baseline."""
import itertools
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np
import scipy.sparse as sp
from scipy.optimize import minimize
from scipy.special import expit

from .errors import DivergenceError, ValidationError
from .model import Model, Pooled, check_finite, closure_matrix, predict_proba
from .seeding import stream

logger = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "AdamState",
    "TrainResult",
    "GridResult",
    "LogisticModel",
    "SMALL_DISEASE_SPACE",
    "LARGE_DISEASE_SPACE",
    "adam_step",
    "inclusion_mask",
    "masked_loss",
    "masked_loss_and_grad",
    "flat_loss",
    "flat_loss_and_grad",
    "label_weights",
    "build_model",
    "train",
    "grid_search",
    "enumerate_space",
    "train_logistic_baseline",
]

# Hyperparameter spaces searched for the disease prediction task, keyed by
# TrainConfig field names.
SMALL_DISEASE_SPACE = {
    "learning_rate": [1e-2, 1e-3, 1e-4, 1e-5, 1e-6],
    "embedding_size": [64, 128, 256, 512],
    "n_additional_layers": [0, 1, 2],
    "layer_size": [128, 256, 512],
    "activation": ["identity", "relu"],
    "shared_weights": [False, True],
}
LARGE_DISEASE_SPACE = {
    "learning_rate": [1e-3, 1e-4, 1e-5],
    "embedding_size": [256, 512],
    "n_additional_layers": [0, 1, 2],
    "layer_size": [128, 256, 512],
    "activation": ["identity", "relu"],
    "shared_weights": [False, True],
}


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    embedding_size: int = 64
    n_additional_layers: int = 0
    layer_size: int = 128
    activation: str = "identity"
    shared_weights: bool = True
    mode: str = "bayesian"
    label_weighting: str = "none"
    batch_size: int = 256
    epochs: int = 20
    seed: int = 0
    patience: int = 5

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValidationError("learning_rate must be positive")
        if self.n_additional_layers not in (0, 1, 2):
            raise ValidationError("n_additional_layers must be 0, 1 or 2")
        if self.activation not in ("identity", "relu"):
            raise ValidationError(f"unknown activation {self.activation!r}")
        if self.mode not in ("flat", "bayesian"):
            raise ValidationError(f"unknown mode {self.mode!r}")
        if self.label_weighting not in ("none", "inv_sqrt_freq"):
            raise ValidationError(f"unknown label_weighting {self.label_weighting!r}")
        if self.label_weighting != "none" and self.mode != "flat":
            raise ValidationError("label_weighting applies to flat mode only")
        if self.embedding_size < 1 or self.layer_size < 1 or self.batch_size < 1:
            raise ValidationError("sizes must be positive")
        if self.epochs < 0 or self.patience < 1:
            raise ValidationError("epochs must be >= 0 and patience >= 1")

    @classmethod
    def from_mapping(cls, values):
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in known:
                raise ValidationError(f"unknown train config key {key!r}")
            kwargs[key] = _coerce(raw, type(getattr(cls, key)))
        return cls(**kwargs)

    def to_mapping(self):
        return asdict(self)


def _coerce(raw, kind):
    if kind is bool:
        if isinstance(raw, str):
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValidationError(f"not a boolean: {raw!r}")
        return bool(raw)
    return kind(raw)


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params, grads, state: AdamState, lr):
    """One bias-corrected Adam update, in place. Returns ``(params, state)``."""
    check_finite(grads)
    for k in params:
        if grads[k].shape != params[k].shape:
            raise ValidationError(f"gradient for {k} has shape {grads[k].shape}, "
                                  f"parameter has {params[k].shape}")
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for k, p in params.items():
        g = grads[k]
        if k not in state.m:
            state.m[k] = np.zeros_like(p)
            state.v[k] = np.zeros_like(p)
        state.m[k] *= state.beta1
        state.m[k] += (1.0 - state.beta1) * g
        state.v[k] *= state.beta2
        state.v[k] += (1.0 - state.beta2) * (g * g)
        p -= (lr * (state.m[k] / bc1) / (np.sqrt(state.v[k] / bc2) + state.eps)).astype(p.dtype)
    return params, state


# -- losses ------------------------------------------------------------------

def label_matrix(labels, batch, dtype=np.float64):
    """``(len(batch), len(labels))`` 0/1 matrix of label presence."""
    index = {l: j for j, l in enumerate(labels)}
    y = np.zeros((len(batch), len(labels)), dtype=dtype)
    for i, inst in enumerate(batch):
        for l in inst.labels:
            j = index.get(l)
            if j is not None:
                y[i, j] = 1
    return y


def inclusion_mask(labels, batch, ont) -> np.ndarray:
    """True where every parent of head ``labels[j]`` is a label of ``batch[i]``."""
    y = label_matrix(labels, batch, dtype=np.int64)
    index = {l: j for j, l in enumerate(labels)}
    rows, cols = [], []
    n_parents = np.zeros(len(labels), dtype=np.int64)
    outside = {}
    for j, l in enumerate(labels):
        for p in ont.parents(l):
            n_parents[j] += 1
            if p in index:
                rows.append(index[p])
                cols.append(j)
            else:
                outside.setdefault(j, []).append(p)
    parent_of = sp.csr_matrix((np.ones(len(rows), dtype=np.int64), (rows, cols)),
                              shape=(len(labels), len(labels)))
    have = np.asarray(y @ parent_of)
    for j, ps in outside.items():
        for i, inst in enumerate(batch):
            have[i, j] += sum(p in inst.labels for p in ps)
    return have == n_parents


def _masked(m, batch, labeldict, ont, pooled=None, mask=None, targets=None):
    if m.mode != "bayesian":
        raise ValidationError("masked_loss requires a bayesian-mode model")
    if list(labeldict.conditionals) != m.labels:
        raise ValidationError("model labels must equal the label dictionary's conditionals")
    if mask is None:
        mask = inclusion_mask(m.labels, batch, ont)
    if targets is None:
        targets = label_matrix(m.labels, batch)
    if pooled is None:
        pooled = m.pool(batch)
    n = int(mask.sum())
    if n == 0:
        warnings.warn("batch has no included heads; taking a zero-gradient step", stacklevel=3)
        return 0.0, mask, {k: np.zeros_like(v) for k, v in m.params.items()}
    loss, grads = m.head_loss_and_grad(pooled, targets, mask / n)
    return loss, mask, grads


def masked_loss(m: Model, batch, labeldict, ont):
    """Mean cross-entropy over heads whose parents are all present.

    Returns ``(loss, mask)`` where ``mask[i, j]`` says whether conditional
    ``labeldict.conditionals[j]`` is trained on ``batch[i]``.
    """
    loss, mask, _ = _masked(m, batch, labeldict, ont)
    return loss, mask


def masked_loss_and_grad(m: Model, batch, labeldict, ont, **cached):
    """Like ``masked_loss`` but also returns parameter gradients."""
    return _masked(m, batch, labeldict, ont, **cached)


def label_weights(labeldict, targets, weighting="none") -> np.ndarray:
    """Per-target loss weights; ``inv_sqrt_freq`` is normalized to mean 1."""
    if weighting == "none":
        return np.ones(len(targets))
    if weighting != "inv_sqrt_freq":
        raise ValidationError(f"unknown weighting {weighting!r}")
    counts = np.array([max(labeldict.positive_counts.get(t, 0), 1) for t in targets], dtype=np.float64)
    w = counts ** -0.5
    return w / w.mean()


def _flat(m, batch, labeldict, weighting="none", pooled=None, targets=None):
    if m.mode != "flat":
        raise ValidationError("flat_loss requires a flat-mode model")
    if targets is None:
        targets = label_matrix(m.labels, batch)
    if pooled is None:
        pooled = m.pool(batch)
    w = label_weights(labeldict, m.labels, weighting)
    weights = np.broadcast_to(w / (len(batch) * len(m.labels)), targets.shape)
    return m.head_loss_and_grad(pooled, targets, weights)


def flat_loss(m: Model, batch, labeldict, weighting="none") -> float:
    """Mean (optionally weighted) cross-entropy over all instances and targets."""
    return _flat(m, batch, labeldict, weighting)[0]


def flat_loss_and_grad(m: Model, batch, labeldict, weighting="none", **cached):
    return _flat(m, batch, labeldict, weighting, **cached)


# -- training loop -----------------------------------------------------------

@dataclass
class TrainResult:
    model: Model
    log: list
    best_epoch: int
    best_valid_ap: float


def build_model(config: TrainConfig, datasets, labeldict, dtype=np.float32) -> Model:
    """Initialize a model sized for ``labeldict`` and the datasets' vocabulary."""
    vocab = sorted({f for ds in datasets for inst in ds for f in inst.features()})
    n_bags = len(datasets[0][0].bags)
    labels = labeldict.conditionals if config.mode == "bayesian" else labeldict.targets
    return Model(vocab, labels, config.embedding_size, n_bags=n_bags,
                 hidden_sizes=[config.layer_size] * config.n_additional_layers,
                 activation=config.activation, mode=config.mode,
                 shared_weights=config.shared_weights, targets=labeldict.targets,
                 dtype=dtype, seed=config.seed)


def _valid_metrics(m, pooled, truths, ont, closure):
    from .evaluation import micro_metrics_arrays

    scores = predict_proba(m, pooled, ont, closure=closure)
    return micro_metrics_arrays(scores, truths)


def train(config: TrainConfig, train_set, valid_set, labeldict, ont, dtype=np.float32) -> TrainResult:
    """Train with Adam; keep the epoch with the best validation micro-AP.

    The log is a list of ``{"epoch", "split", "metric", "value"}`` records.
    Epoch 0 is the initialized model. Stops early after ``config.patience``
    epochs without improvement.
    """
    if not train_set or not valid_set:
        raise ValidationError("train and validation sets must be non-empty")
    m = build_model(config, [train_set, valid_set], labeldict, dtype=dtype)
    closure = closure_matrix(m, m.targets, ont) if m.mode == "bayesian" else None
    pooled = m.pool(train_set)
    targets = label_matrix(m.labels, train_set)
    mask = inclusion_mask(m.labels, train_set, ont) if m.mode == "bayesian" else None
    v_pooled = m.pool(valid_set)
    v_truth = label_matrix(m.targets, valid_set)

    log = []

    def record(epoch, split, metric, value):
        log.append({"epoch": epoch, "split": split, "metric": metric, "value": float(value)})

    auroc, ap = _valid_metrics(m, v_pooled, v_truth, ont, closure)
    record(0, "valid", "micro_auroc", auroc)
    record(0, "valid", "micro_ap", ap)
    best = (_score(ap), 0, m.copy())
    state = AdamState()
    rng = stream(config.seed, "train.shuffle")
    n = len(train_set)
    stale = 0
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        losses = []
        for b, start in enumerate(range(0, n, config.batch_size)):
            rows = order[start:start + config.batch_size]
            batch = [train_set[i] for i in rows]
            cached = {"pooled": pooled.take(rows), "targets": targets[rows]}
            if m.mode == "bayesian":
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")
                    loss, _, grads = masked_loss_and_grad(m, batch, labeldict, ont,
                                                          mask=mask[rows], **cached)
            else:
                loss, grads = flat_loss_and_grad(m, batch, labeldict, config.label_weighting, **cached)
            if not math.isfinite(loss):
                raise DivergenceError(f"non-finite loss at epoch {epoch}, batch {b}")
            try:
                adam_step(m.params, grads, state, config.learning_rate)
            except DivergenceError as exc:
                raise DivergenceError(f"{exc} at epoch {epoch}, batch {b}") from None
            losses.append(loss)
        record(epoch, "train", "loss", np.mean(losses))
        auroc, ap = _valid_metrics(m, v_pooled, v_truth, ont, closure)
        record(epoch, "valid", "micro_auroc", auroc)
        record(epoch, "valid", "micro_ap", ap)
        logger.debug("epoch %d loss %.5f valid micro-AP %.4f", epoch, np.mean(losses), ap)
        if _score(ap) > best[0]:
            best = (_score(ap), epoch, m.copy())
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    return TrainResult(best[2], log, best[1], best[0])


def _score(ap):
    return ap if math.isfinite(ap) else -math.inf


# -- grid search -------------------------------------------------------------

@dataclass
class GridResult:
    best_config: TrainConfig
    leaderboard: list
    best_result: TrainResult = None


def enumerate_space(space, base: TrainConfig = None):
    """Cartesian product of ``space`` (axis -> values) applied to ``base``."""
    base = base or TrainConfig()
    valid = {f.name for f in fields(TrainConfig)}
    axes = list(space)
    for a in axes:
        if a not in valid:
            raise ValidationError(f"unknown grid axis {a!r}")
        if not space[a]:
            raise ValidationError(f"grid axis {a!r} is empty")
    for combo in itertools.product(*(space[a] for a in axes)):
        yield replace(base, **{a: _coerce(v, type(getattr(base, a))) for a, v in zip(axes, combo)})


def grid_search(space, train_set, valid_set, labeldict, ont, base: TrainConfig = None,
                dtype=np.float32) -> GridResult:
    """Train every configuration and rank by validation micro-AP.

    A failing run is recorded on the leaderboard with its error and does
    not stop the search.
    """
    rows = []
    best = None
    for i, config in enumerate(enumerate_space(space, base)):
        row = {"run": i, "config": config.to_mapping()}
        try:
            result = train(config, train_set, valid_set, labeldict, ont, dtype=dtype)
        except Exception as exc:  # noqa: BLE001 - recorded on the leaderboard
            logger.warning("grid run %d failed: %s", i, exc)
            row.update(valid_micro_ap=None, best_epoch=None, error=f"{type(exc).__name__}: {exc}")
            rows.append(row)
            continue
        row.update(valid_micro_ap=result.best_valid_ap if math.isfinite(result.best_valid_ap) else None,
                   best_epoch=result.best_epoch, error=None)
        rows.append(row)
        if best is None or result.best_valid_ap > best[1].best_valid_ap:
            best = (config, result)
    rows.sort(key=lambda r: (r["valid_micro_ap"] is None, -(r["valid_micro_ap"] or 0.0), r["run"]))
    if best is None:
        raise ValidationError("every grid run failed")
    return GridResult(best[0], rows, best[1])


# -- logistic regression baseline --------------------------------------------

@dataclass
class LogisticModel:
    label: str
    vocab: list
    weights: np.ndarray
    intercept: float
    l2_lambda: float
    cv_loss: dict
    n_pos: int
    n_neg: int

    def decision_function(self, instances):
        return _indicator_matrix(instances, self.vocab) @ self.weights + self.intercept

    def predict_proba(self, instances):
        return expit(self.decision_function(instances))


def _indicator_matrix(instances, vocab):
    index = {f: j for j, f in enumerate(vocab)}
    rows, cols = [], []
    for i, inst in enumerate(instances):
        for f in inst.features():
            j = index.get(f)
            if j is not None:
                rows.append(i)
                cols.append(j)
    return sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(len(instances), len(vocab)))


def subsample_negatives(truth, neg_ratio, rng):
    """Keep every positive and at most ``neg_ratio`` negatives per positive."""
    pos = np.flatnonzero(truth)
    neg = np.flatnonzero(~truth)
    keep = min(len(neg), neg_ratio * len(pos))
    chosen = np.sort(rng.choice(neg, size=keep, replace=False)) if keep < len(neg) else neg
    return np.sort(np.concatenate([pos, chosen]))


def _fit_l2_logistic(x, y, lam, tol=1e-6):
    """Minimize mean log-loss + lam/2 * |w|^2 (intercept unpenalized)."""
    n, p = x.shape

    def objective(theta):
        w, b = theta[:p], theta[p]
        z = x @ w + b
        # log(1 + e^z) - y z, computed stably
        loss = np.mean(np.logaddexp(0, z) - y * z) + 0.5 * lam * w @ w
        r = (expit(z) - y) / n
        grad = np.empty(p + 1)
        grad[:p] = x.T @ r + lam * w
        grad[p] = r.sum()
        return loss, grad

    base = np.clip(y.mean(), 1e-12, 1 - 1e-12)
    theta0 = np.zeros(p + 1)
    theta0[p] = math.log(base / (1 - base))
    res = minimize(objective, theta0, jac=True, method="L-BFGS-B",
                   options={"gtol": tol, "maxiter": 10000, "ftol": 1e-15})
    return res.x[:p], float(res.x[p])


def _log_loss(x, y, w, b):
    z = x @ w + b
    return float(np.mean(np.logaddexp(0, z) - y * z))


def _folds(y, k, rng):
    """Stratified fold ids: positives and negatives dealt round-robin."""
    fold = np.empty(len(y), dtype=np.int64)
    for cls in (True, False):
        idx = rng.permutation(np.flatnonzero(y == cls))
        fold[idx] = np.arange(len(idx)) % k
    return fold


def train_logistic_baseline(dataset, labeldict, target_label, neg_ratio=10,
                            l2_lambda_grid=(1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0), n_folds=5,
                            seed=0) -> LogisticModel:
    """L2 logistic regression on binary feature indicators for one label.

    Negatives are subsampled to ``neg_ratio`` per positive, then lambda is
    picked by ``n_folds``-fold cross-validated log-loss and the model is
    refit on the whole subsample.
    """
    if labeldict is not None and target_label not in labeldict.targets:
        raise ValidationError(f"{target_label!r} is not a target of the label dictionary")
    truth = np.array([target_label in inst.labels for inst in dataset])
    if not truth.any():
        raise ValidationError(f"{target_label!r} has no positive instances")
    rows = subsample_negatives(truth, neg_ratio, stream(seed, f"logistic.subsample.{target_label}"))
    sub = [dataset[i] for i in rows]
    y = truth[rows].astype(np.float64)
    vocab = sorted({f for inst in sub for f in inst.features()})
    x = _indicator_matrix(sub, vocab)

    fold = _folds(y > 0, n_folds, stream(seed, f"logistic.folds.{target_label}"))
    cv = {}
    for lam in l2_lambda_grid:
        total = 0.0
        for k in range(n_folds):
            tr, te = fold != k, fold == k
            if not te.any():
                continue
            w, b = _fit_l2_logistic(x[tr], y[tr], lam)
            total += _log_loss(x[te], y[te], w, b) * te.sum()
        cv[lam] = total / len(y)
    best = min(l2_lambda_grid, key=lambda lam: (cv[lam], -lam))
    w, b = _fit_l2_logistic(x, y, best)
    return LogisticModel(target_label, vocab, w, b, best, cv, int(y.sum()), int(len(y) - y.sum()))
