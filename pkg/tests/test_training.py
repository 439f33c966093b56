import math
import warnings

import numpy as np
import pytest

from ontobn import (AdamState, Instance, LabelDict, Model, Ontology, TrainConfig, adam_step,
                    build_label_dictionary, flat_loss, grid_search, masked_loss, save_checkpoint,
                    train, train_logistic_baseline)
from ontobn.errors import ValidationError
from ontobn.featurize import SynthSpec, random_tree_ontology, synth_generate
from ontobn.training import (SMALL_DISEASE_SPACE, build_model, enumerate_space, flat_loss_and_grad,
                             inclusion_mask, label_weights, masked_loss_and_grad, subsample_negatives,
                             _fit_l2_logistic)
from oracles import brute_mask


def model_for(ld, mode, d=4, seed=0, vocab=("f0", "f1", "f2")):
    labels = ld.conditionals if mode == "bayesian" else ld.targets
    return Model(list(vocab), labels, d, mode=mode, targets=ld.targets, dtype=np.float64, seed=seed)


# -- masking -----------------------------------------------------------------

def test_mask_chain_truth_table(chain):
    ld = LabelDict(["Cancer", "LungCancer"], ["Cancer", "LungCancer"])
    batch = [Instance("none", [["f0"]]), Instance("c", [["f0"]], (), {"Cancer"}),
             Instance("cl", [["f1"]], (), {"Cancer", "LungCancer"}),
             Instance("l_only", [["f2"]], (), {"LungCancer"})]
    m = model_for(ld, "bayesian")
    _, mask = masked_loss(m, batch, ld, chain)
    expected = np.array([[True, False], [True, True], [True, True], [True, False]])
    np.testing.assert_array_equal(mask, expected)


def test_mask_diamond_matches_brute_force(diamond):
    labels = list("ABCD")
    subsets = [set(s) for s in ([], "A", "B", "AB", "AC", "ABC", "BC", "ABCD", "D")]
    batch = [Instance(str(i), [["f0"]], (), s) for i, s in enumerate(subsets)]
    parents = {l: diamond.parents(l) for l in labels}
    np.testing.assert_array_equal(inclusion_mask(labels, batch, diamond),
                                  brute_mask(labels, batch, parents))


def test_masked_loss_is_mean_over_included(chain):
    ld = LabelDict(["Cancer", "LungCancer"], ["Cancer", "LungCancer"])
    m = model_for(ld, "bayesian")
    m.params["label_embeddings"][...] = 0  # every conditional is 1/2
    batch = [Instance("a", [["f0"]]), Instance("b", [["f0"]], (), {"Cancer"})]
    loss, mask = masked_loss(m, batch, ld, chain)
    assert mask.sum() == 3
    assert loss == pytest.approx(math.log(2), abs=1e-12)


def test_masked_gradient_zero_for_unsatisfied_head(chain):
    ld = LabelDict(["Cancer", "LungCancer"], ["Cancer", "LungCancer"])
    m = model_for(ld, "bayesian", seed=3)
    batch = [Instance("a", [["f0"]]), Instance("b", [["f1", "f2"]])]
    _, mask, grads = masked_loss_and_grad(m, batch, ld, chain)
    assert not mask[:, 1].any()
    assert np.all(grads["label_embeddings"][1] == 0)
    assert np.any(grads["label_embeddings"][0] != 0)


def test_zero_included_heads_warns():
    ont = Ontology(["A", "B"], [("A", "B")])
    ld = LabelDict(["B"], ["B"])
    m = Model(["f0"], ["B"], 3, dtype=np.float64)
    with pytest.warns(UserWarning):
        loss, mask, grads = masked_loss_and_grad(m, [Instance("a", [["f0"]])], ld, ont)
    assert loss == 0.0 and not mask.any()
    assert all(not np.any(g) for g in grads.values())


def test_edgeless_masked_equals_flat():
    ont = Ontology(["A", "B", "C"])
    ld = LabelDict(["A", "B", "C"], ["A", "B", "C"])
    batch = [Instance("a", [["f0", "f1"]], (), {"A"}), Instance("b", [["f2"]], (), {"B", "C"}),
             Instance("c", [[]])]
    for dtype in (np.float64, np.float32):
        fm = Model(["f0", "f1", "f2"], ld.targets, 5, mode="flat", dtype=dtype, seed=4, hidden_sizes=[3])
        bm = Model(["f0", "f1", "f2"], ld.targets, 5, mode="bayesian", dtype=dtype, seed=4,
                   hidden_sizes=[3])
        fl, fg = flat_loss_and_grad(fm, batch, ld)
        bl, _, bg = masked_loss_and_grad(bm, batch, ld, ont)
        assert fl == bl
        for k in fg:
            np.testing.assert_array_equal(fg[k], bg[k])


# -- flat loss ---------------------------------------------------------------

def test_flat_loss_ln2():
    ld = LabelDict(["A"], ["A"])
    m = model_for(ld, "flat")
    m.params["label_embeddings"][...] = 0
    assert flat_loss(m, [Instance("a", [["f0"]])], ld) == pytest.approx(math.log(2), abs=1e-12)


def test_inv_sqrt_freq_ratio():
    ld = LabelDict(["A", "B"], ["A", "B"], {"A": 4, "B": 16})
    w = label_weights(ld, ["A", "B"], "inv_sqrt_freq")
    assert w[0] / w[1] == pytest.approx(2.0, abs=1e-12)
    assert w.mean() == pytest.approx(1.0, abs=1e-12)


def test_flat_loss_base_rate_entropy():
    rates = np.array([0.1, 0.3, 0.7])
    ld = LabelDict(["A", "B", "C"], ["A", "B", "C"])
    m = model_for(ld, "flat", d=3)
    # zero encoder except a constant coordinate; label embeddings carry the logits
    for k in m.params:
        m.params[k][...] = 0
    m.params["projection.bias"][0] = 1.0
    m.params["label_embeddings"][:, 0] = np.log(rates / (1 - rates))
    batch = [Instance(str(i), [["f0"]]) for i in range(4)]
    # loss for all-negative targets at predicted rate r is -log(1 - r)
    expected = np.mean(-np.log(1 - rates))
    assert flat_loss(m, batch, ld) == pytest.approx(expected, abs=1e-12)
    # with targets drawn at the base rates, expected loss is the entropy
    entropy = np.mean(-(rates * np.log(rates) + (1 - rates) * np.log(1 - rates)))
    truths = [{"C"}, {"C"}, {"B", "C"}, {"B", "C"}, {"B", "C"}, {"C"}, {"C"}, set(), {"A"}, set()]
    batch = [Instance(str(i), [["f0"]], (), t) for i, t in enumerate(truths)]
    assert flat_loss(m, batch, ld) == pytest.approx(entropy, abs=1e-12)


def test_weighting_only_in_flat_mode():
    with pytest.raises(ValidationError):
        TrainConfig(mode="bayesian", label_weighting="inv_sqrt_freq")


# -- Adam ----------------------------------------------------------------------

def test_adam_zero_gradient():
    p = {"w": np.array([1.0, -2.0])}
    state = AdamState()
    adam_step(p, {"w": np.zeros(2)}, state, 0.1)
    np.testing.assert_array_equal(p["w"], [1.0, -2.0])
    assert state.t == 1


def test_adam_first_step_magnitude():
    p = {"w": np.array([0.0, 0.0])}
    adam_step(p, {"w": np.array([3.0, 1e-3])}, AdamState(), 0.1)
    # bias-corrected m/sqrt(v) = g/|g| up to eps
    np.testing.assert_allclose(p["w"], [-0.1, -0.1], rtol=1e-4)


def test_adam_quadratic_decreases():
    p = {"w": np.array([1.0])}
    state = AdamState()
    prev = 1.0
    for _ in range(2):
        adam_step(p, {"w": 2 * p["w"]}, state, 0.1)
        assert p["w"][0] < prev
        prev = p["w"][0]


def test_adam_rejects_bad_gradients():
    from ontobn.errors import DivergenceError

    with pytest.raises(DivergenceError):
        adam_step({"w": np.zeros(1)}, {"w": np.array([np.inf])}, AdamState(), 0.1)
    with pytest.raises(ValidationError):
        adam_step({"w": np.zeros(1)}, {"w": np.zeros(2)}, AdamState(), 0.1)


# -- training loop -----------------------------------------------------------

def separable():
    ont = Ontology(["A", "B"])
    data = [Instance(f"a{i}", [["fa"]], (), {"A"}) for i in range(20)] + \
           [Instance(f"b{i}", [["fb"]], (), {"B"}) for i in range(20)]
    ld = build_label_dictionary([i.labels for i in data], ont, 5)
    return ont, data, ld


def test_separable_toy_converges():
    ont, data, ld = separable()
    cfg = TrainConfig(learning_rate=0.05, embedding_size=8, epochs=60, batch_size=40, patience=100,
                      mode="flat")
    res = train(cfg, data, data, ld, ont, dtype=np.float64)
    losses = [r["value"] for r in res.log if r["metric"] == "loss"]
    assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))
    assert losses[-1] < 0.01


def test_epochs_zero_returns_initial_model():
    ont, data, ld = separable()
    cfg = TrainConfig(epochs=0, embedding_size=4)
    res = train(cfg, data, data, ld, ont)
    init = build_model(cfg, [data, data], ld)
    for k in init.params:
        np.testing.assert_array_equal(res.model.params[k], init.params[k])
    assert res.best_epoch == 0


def synth_split(seed=0, n=600):
    ont = random_tree_ontology(20, 3, np.random.default_rng(seed))
    data, _ = synth_generate(SynthSpec(ont, feature_dim=12, features_per_instance=3, instance_count=n,
                                       seed=seed, bias_low=0.0, bias_high=1.0))
    cut = int(0.7 * n)
    ld = build_label_dictionary([i.labels for i in data[:cut]], ont, 5)
    return ont, data[:cut], data[cut:], ld


def test_training_is_deterministic(tmp_path):
    ont, tr, va, ld = synth_split()
    cfg = TrainConfig(learning_rate=1e-2, embedding_size=8, epochs=3, batch_size=64, seed=5)
    a = train(cfg, tr, va, ld, ont)
    b = train(cfg, tr, va, ld, ont)
    save_checkpoint(a.model, tmp_path / "a.bin")
    save_checkpoint(b.model, tmp_path / "b.bin")
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
    assert a.log == b.log


@pytest.mark.parametrize("mode", ["flat", "bayesian"])
def test_loss_decreases_over_first_epoch(mode):
    ont, tr, va, ld = synth_split(seed=2)
    cfg = TrainConfig(learning_rate=1e-2, embedding_size=8, epochs=1, batch_size=32, mode=mode)
    m = build_model(cfg, [tr, va], ld, dtype=np.float64)
    before = (masked_loss(m, tr, ld, ont)[0] if mode == "bayesian" else flat_loss(m, tr, ld))
    res = train(cfg, tr, va, ld, ont, dtype=np.float64)
    assert res.best_epoch == 1  # otherwise the returned model is the initial one
    after = (masked_loss(res.model, tr, ld, ont)[0] if mode == "bayesian"
             else flat_loss(res.model, tr, ld))
    assert after < before


def test_log_records_shape():
    ont, tr, va, ld = synth_split()
    res = train(TrainConfig(embedding_size=4, epochs=2), tr, va, ld, ont)
    assert {"epoch", "split", "metric", "value"} == set(res.log[0])
    assert [r["epoch"] for r in res.log if r["metric"] == "loss"] == [1, 2]


def test_divergence_is_reported():
    from ontobn.errors import DivergenceError

    ont, tr, va, ld = synth_split()
    with pytest.raises(DivergenceError) as exc:
        train(TrainConfig(learning_rate=1e300, embedding_size=4, epochs=3), tr, va, ld, ont)
    assert "epoch" in str(exc.value) and "batch" in str(exc.value)


# -- grid search -------------------------------------------------------------

def test_grid_cardinality():
    assert len(list(enumerate_space(SMALL_DISEASE_SPACE))) == 5 * 4 * 3 * 3 * 2 * 2 == 720
    with pytest.raises(ValidationError):
        list(enumerate_space({"nope": [1]}))


def test_grid_one_point():
    ont, tr, va, ld = synth_split()
    res = grid_search({"learning_rate": [1e-2]}, tr, va, ld, ont,
                      base=TrainConfig(embedding_size=4, epochs=1))
    assert res.best_config.learning_rate == 1e-2
    assert len(res.leaderboard) == 1


def test_grid_planted_better_config_wins():
    ont, tr, va, ld = synth_split(seed=1, n=1500)
    base = TrainConfig(embedding_size=8, epochs=8, batch_size=64)
    # lr=1e-6 barely moves from initialization
    res = grid_search({"learning_rate": [1e-6, 1e-2]}, tr, va, ld, ont, base=base)
    assert res.best_config.learning_rate == 1e-2
    assert res.leaderboard[0]["config"]["learning_rate"] == 1e-2


def test_grid_records_failures():
    ont, tr, va, ld = synth_split()
    base = TrainConfig(embedding_size=4, epochs=2)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        res = grid_search({"learning_rate": [1e300, 1e-2]}, tr, va, ld, ont, base=base)
    assert res.best_config.learning_rate == 1e-2
    failed = [r for r in res.leaderboard if r["error"]]
    assert len(failed) == 1 and "Divergence" in failed[0]["error"]


# -- logistic baseline -------------------------------------------------------

def test_subsample_three_positives():
    truth = np.zeros(1003, dtype=bool)
    truth[[5, 500, 1000]] = True
    rows = subsample_negatives(truth, 10, np.random.default_rng(0))
    assert truth[rows].sum() == 3 and (~truth[rows]).sum() == 30
    again = subsample_negatives(truth, 10, np.random.default_rng(0))
    np.testing.assert_array_equal(rows, again)


def test_subsample_capped():
    truth = np.array([True] * 3 + [False] * 12)
    rows = subsample_negatives(truth, 10, np.random.default_rng(0))
    assert len(rows) == 15


def test_logistic_counts_on_fixture():
    data = [Instance(f"p{i}", [["x", f"n{i}"]], (), {"A"}) for i in range(3)] + \
           [Instance(f"n{i}", [[f"n{i % 7}"]]) for i in range(1000)]
    ld = LabelDict(["A"], ["A"], {"A": 3})
    lm = train_logistic_baseline(data, ld, "A", l2_lambda_grid=(1.0,))
    assert (lm.n_pos, lm.n_neg) == (3, 30)


def test_ridge_limit():
    rng = np.random.default_rng(0)
    x = (rng.random((80, 5)) < 0.4).astype(float)
    y = (rng.random(80) < 0.25).astype(float)
    w, b = _fit_l2_logistic(x, y, 1e8)
    assert np.abs(w).max() < 1e-6
    assert b == pytest.approx(math.log(y.mean() / (1 - y.mean())), abs=1e-5)


def test_cv_picks_planted_lambda():
    # Labels depend on one feature through a fixed, modest effect; many
    # irrelevant features make small lambdas overfit, huge lambdas underfit.
    rng = np.random.default_rng(7)
    n, p = 1100, 40
    feats = rng.random((n, p)) < 0.3
    logits = -2.0 + 2.5 * feats[:, 0]
    y = rng.random(n) < 1 / (1 + np.exp(-logits))
    data = [Instance(str(i), [[f"f{j}" for j in np.flatnonzero(feats[i])]], (), {"A"} if y[i] else set())
            for i in range(n)]
    grid = (1e-4, 1e-2, 1e2)
    lm = train_logistic_baseline(data, None, "A", neg_ratio=10, l2_lambda_grid=grid, seed=0)
    assert lm.l2_lambda == 1e-2
    assert lm.cv_loss[1e-2] < lm.cv_loss[1e2]
    assert lm.cv_loss[1e-2] < lm.cv_loss[1e-4]


def test_logistic_zero_positives():
    with pytest.raises(ValidationError):
        train_logistic_baseline([Instance("a", [["x"]])], None, "A")
